#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>

#include "recon/net.hpp"

namespace recon::sock {

using Millis = std::chrono::milliseconds;

// Owning file descriptor.
class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) : fd_(fd) {}
  Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Fd& operator=(Fd&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;
  ~Fd() { reset(); }

  int get() const { return fd_; }
  int release() { return std::exchange(fd_, -1); }
  explicit operator bool() const { return fd_ >= 0; }
  void reset();

 private:
  int fd_ = -1;
};

Endpoint local_endpoint(int fd);
Endpoint peer_endpoint(int fd);
void set_nonblocking(int fd, bool on);

// Blocking-with-deadline helpers. Throw TransportError on socket errors other
// than the ones reported through the return value.
enum class ConnectResult { connected, refused, timeout };
ConnectResult connect_with_timeout(int fd, Endpoint target, Millis timeout);
Fd tcp_socket(std::optional<Ipv4> bind_address = std::nullopt);
Fd udp_socket(Endpoint bind_to);
Fd tcp_listen(Endpoint bind_to, int backlog = 128);

// Reads up to `max` bytes; returns empty on EOF. nullopt on timeout.
std::optional<std::string> read_some(int fd, std::size_t max, Millis timeout);
bool write_all(int fd, std::string_view data, Millis timeout);
void abortive_close(Fd& fd);  // SO_LINGER 0: RST, no TIME_WAIT

}  // namespace recon::sock

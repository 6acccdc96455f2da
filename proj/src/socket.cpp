#include "recon/socket.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include "recon/error.hpp"

namespace recon::sock {

namespace {

sockaddr_in to_sockaddr(Endpoint ep) {
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_port = htons(ep.port);
  sa.sin_addr.s_addr = htonl(ep.ip.value);
  return sa;
}

Endpoint from_sockaddr(const sockaddr_in& sa) {
  return {Ipv4{ntohl(sa.sin_addr.s_addr)}, ntohs(sa.sin_port)};
}

[[noreturn]] void fail(const std::string& what) {
  throw TransportError(what + ": " + std::strerror(errno));
}

int poll_one(int fd, short events, Millis timeout) {
  pollfd p{fd, events, 0};
  while (true) {
    const int rc = ::poll(&p, 1, static_cast<int>(timeout.count()));
    if (rc < 0 && errno == EINTR) continue;
    if (rc < 0) fail("poll");
    return rc == 0 ? 0 : p.revents;
  }
}

}  // namespace

void Fd::reset() {
  if (fd_ >= 0) ::close(fd_);
  fd_ = -1;
}

Endpoint local_endpoint(int fd) {
  sockaddr_in sa{};
  socklen_t len = sizeof sa;
  if (::getsockname(fd, reinterpret_cast<sockaddr*>(&sa), &len) != 0) fail("getsockname");
  return from_sockaddr(sa);
}

Endpoint peer_endpoint(int fd) {
  sockaddr_in sa{};
  socklen_t len = sizeof sa;
  if (::getpeername(fd, reinterpret_cast<sockaddr*>(&sa), &len) != 0) fail("getpeername");
  return from_sockaddr(sa);
}

void set_nonblocking(int fd, bool on) {
  const int flags = ::fcntl(fd, F_GETFL, 0);
  ::fcntl(fd, F_SETFL, on ? flags | O_NONBLOCK : flags & ~O_NONBLOCK);
}

Fd tcp_socket(std::optional<Ipv4> bind_address) {
  Fd fd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!fd) fail("socket");
  if (bind_address) {
    const int one = 1;
    ::setsockopt(fd.get(), IPPROTO_IP, IP_BIND_ADDRESS_NO_PORT, &one, sizeof one);
    auto sa = to_sockaddr({*bind_address, 0});
    if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0) {
      fail("bind " + bind_address->to_string());
    }
  }
  return fd;
}

Fd udp_socket(Endpoint bind_to) {
  Fd fd(::socket(AF_INET, SOCK_DGRAM | SOCK_CLOEXEC, 0));
  if (!fd) fail("socket");
  auto sa = to_sockaddr(bind_to);
  if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0) {
    fail("bind udp " + bind_to.to_string());
  }
  return fd;
}

Fd tcp_listen(Endpoint bind_to, int backlog) {
  Fd fd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!fd) fail("socket");
  const int one = 1;
  ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  auto sa = to_sockaddr(bind_to);
  if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0) {
    fail("bind " + bind_to.to_string());
  }
  if (::listen(fd.get(), backlog) != 0) fail("listen");
  return fd;
}

ConnectResult connect_with_timeout(int fd, Endpoint target, Millis timeout) {
  set_nonblocking(fd, true);
  auto sa = to_sockaddr(target);
  int rc = ::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof sa);
  if (rc != 0 && errno != EINPROGRESS) {
    if (errno == ECONNREFUSED) return ConnectResult::refused;
    if (errno == ENETUNREACH || errno == EHOSTUNREACH) return ConnectResult::refused;
    fail("connect " + target.to_string());
  }
  if (rc != 0) {
    const int ev = poll_one(fd, POLLOUT, timeout);
    if (ev == 0) return ConnectResult::timeout;
    int err = 0;
    socklen_t len = sizeof err;
    ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
    if (err == ECONNREFUSED || err == ENETUNREACH || err == EHOSTUNREACH) {
      return ConnectResult::refused;
    }
    if (err == ETIMEDOUT) return ConnectResult::timeout;
    if (err != 0) {
      errno = err;
      fail("connect " + target.to_string());
    }
  }
  set_nonblocking(fd, false);
  return ConnectResult::connected;
}

std::optional<std::string> read_some(int fd, std::size_t max, Millis timeout) {
  const int ev = poll_one(fd, POLLIN, timeout);
  if (ev == 0) return std::nullopt;
  std::string buf(max, '\0');
  while (true) {
    const auto n = ::recv(fd, buf.data(), max, MSG_DONTWAIT);
    if (n < 0 && errno == EINTR) continue;
    if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) return std::nullopt;
    if (n < 0 && (errno == ECONNRESET || errno == EPIPE)) return std::string{};
    if (n < 0) fail("recv");
    buf.resize(static_cast<std::size_t>(n));
    return buf;
  }
}

bool write_all(int fd, std::string_view data, Millis timeout) {
  while (!data.empty()) {
    if (poll_one(fd, POLLOUT, timeout) == 0) return false;
    const auto n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL | MSG_DONTWAIT);
    if (n < 0 && (errno == EINTR || errno == EAGAIN)) continue;
    if (n < 0) return false;
    data.remove_prefix(static_cast<std::size_t>(n));
  }
  return true;
}

void abortive_close(Fd& fd) {
  if (!fd) return;
  linger lg{1, 0};
  ::setsockopt(fd.get(), SOL_SOCKET, SO_LINGER, &lg, sizeof lg);
  fd.reset();
}

}  // namespace recon::sock

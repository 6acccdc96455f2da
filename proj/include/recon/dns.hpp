#pragma once

// Minimal DNS wire codec (A and PTR only) plus resolver front-ends.

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "recon/net.hpp"

namespace recon::dns {

inline constexpr std::uint16_t kTypeA = 1;
inline constexpr std::uint16_t kTypePtr = 12;
inline constexpr std::uint8_t kRcodeOk = 0;
inline constexpr std::uint8_t kRcodeNxDomain = 3;

struct Query {
  std::uint16_t id = 0;
  std::string name;  // lowercase, no trailing dot
  std::uint16_t qtype = 0;
};

struct Response {
  std::uint16_t id = 0;
  std::uint8_t rcode = 0;
  std::vector<Ipv4> addresses;
  std::vector<std::string> names;  // PTR targets
};

std::string encode_query(const Query& q);
std::optional<Query> decode_query(std::string_view packet);
std::string encode_response(const Query& q, std::uint8_t rcode, const std::vector<Ipv4>& addresses,
                            const std::vector<std::string>& ptr_names);
std::optional<Response> decode_response(std::string_view packet);

std::string reverse_name(Ipv4 ip);  // "4.3.2.1.in-addr.arpa"
std::optional<Ipv4> parse_reverse_name(std::string_view name);

class Resolver {
 public:
  virtual ~Resolver() = default;
  virtual std::vector<Ipv4> resolve(const std::string& host) = 0;  // empty: does not resolve
  virtual std::optional<std::string> reverse(Ipv4 ip) = 0;
};

// Talks to one DNS server over UDP.
class UdpResolver final : public Resolver {
 public:
  explicit UdpResolver(Endpoint server, std::chrono::milliseconds timeout = std::chrono::milliseconds(1000));
  std::vector<Ipv4> resolve(const std::string& host) override;
  std::optional<std::string> reverse(Ipv4 ip) override;

 private:
  std::optional<Response> exchange(const std::string& name, std::uint16_t qtype);
  Endpoint server_;
  std::chrono::milliseconds timeout_;
  std::uint16_t next_id_ = 1;
};

// libc resolver (getaddrinfo / getnameinfo).
class SystemResolver final : public Resolver {
 public:
  std::vector<Ipv4> resolve(const std::string& host) override;
  std::optional<std::string> reverse(Ipv4 ip) override;
};

}  // namespace recon::dns

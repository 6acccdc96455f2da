#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace recon {

// IPv4 address in host byte order.
struct Ipv4 {
  std::uint32_t value = 0;

  constexpr Ipv4() = default;
  constexpr explicit Ipv4(std::uint32_t v) : value(v) {}
  constexpr Ipv4(std::uint8_t a, std::uint8_t b, std::uint8_t c, std::uint8_t d)
      : value((std::uint32_t{a} << 24) | (std::uint32_t{b} << 16) |
              (std::uint32_t{c} << 8) | std::uint32_t{d}) {}

  static Ipv4 parse(std::string_view text);  // throws InvalidArgument
  static std::optional<Ipv4> try_parse(std::string_view text);
  std::string to_string() const;

  friend constexpr auto operator<=>(Ipv4, Ipv4) = default;
};

// Inclusive address range.
struct Ipv4Range {
  Ipv4 first;
  Ipv4 last;

  constexpr std::uint64_t size() const {
    return std::uint64_t{last.value} - first.value + 1;
  }
  constexpr bool contains(Ipv4 ip) const { return first <= ip && ip <= last; }

  // Accepts "a.b.c.d/len", "a.b.c.d-e.f.g.h" and a bare address.
  static Ipv4Range parse(std::string_view text);
  static Ipv4Range from_prefix(Ipv4 base, int length);
  std::string to_string() const;

  friend constexpr bool operator==(const Ipv4Range&, const Ipv4Range&) = default;
};

struct Endpoint {
  Ipv4 ip;
  std::uint16_t port = 0;

  std::string to_string() const;
  friend constexpr auto operator<=>(const Endpoint&, const Endpoint&) = default;
};

// Loopback (127/8) or RFC 1918 private space.
bool is_private_or_loopback(const Ipv4Range& range);

std::string to_lower(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);
std::string_view trim(std::string_view s);
bool ends_with_domain(std::string_view host, std::string_view domain);

}  // namespace recon

template <>
struct std::hash<recon::Ipv4> {
  std::size_t operator()(recon::Ipv4 ip) const noexcept {
    return std::hash<std::uint32_t>{}(ip.value);
  }
};

#include "recon/net.hpp"

#include <arpa/inet.h>

#include <algorithm>
#include <cctype>
#include <charconv>

#include "recon/error.hpp"

namespace recon {

std::optional<Ipv4> Ipv4::try_parse(std::string_view text) {
  std::uint32_t value = 0;
  int parts = 0;
  const char* p = text.data();
  const char* end = text.data() + text.size();
  while (parts < 4) {
    if (p == end || !std::isdigit(static_cast<unsigned char>(*p))) return std::nullopt;
    unsigned octet = 0;
    auto [next, ec] = std::from_chars(p, end, octet);
    if (ec != std::errc{} || octet > 255 || next - p > 3) return std::nullopt;
    value = (value << 8) | octet;
    p = next;
    ++parts;
    if (parts < 4) {
      if (p == end || *p != '.') return std::nullopt;
      ++p;
    }
  }
  if (p != end) return std::nullopt;
  return Ipv4{value};
}

Ipv4 Ipv4::parse(std::string_view text) {
  auto ip = try_parse(trim(text));
  if (!ip) throw InvalidArgument("invalid IPv4 address: '" + std::string(text) + "'");
  return *ip;
}

std::string Ipv4::to_string() const {
  return std::to_string(value >> 24) + '.' + std::to_string((value >> 16) & 0xff) + '.' +
         std::to_string((value >> 8) & 0xff) + '.' + std::to_string(value & 0xff);
}

Ipv4Range Ipv4Range::from_prefix(Ipv4 base, int length) {
  if (length < 0 || length > 32) {
    throw InvalidArgument("prefix length out of range: " + std::to_string(length));
  }
  const std::uint32_t mask = length == 0 ? 0u : ~std::uint32_t{0} << (32 - length);
  if ((base.value & ~mask) != 0) {
    throw InvalidArgument("host bits set in prefix " + base.to_string() + "/" +
                          std::to_string(length));
  }
  return {base, Ipv4{base.value | ~mask}};
}

Ipv4Range Ipv4Range::parse(std::string_view raw) {
  const auto text = trim(raw);
  if (auto slash = text.find('/'); slash != std::string_view::npos) {
    const auto len_text = text.substr(slash + 1);
    int length = -1;
    auto [ptr, ec] = std::from_chars(len_text.data(), len_text.data() + len_text.size(), length);
    if (ec != std::errc{} || ptr != len_text.data() + len_text.size() || len_text.empty()) {
      throw InvalidArgument("invalid prefix length in '" + std::string(text) + "'");
    }
    return from_prefix(Ipv4::parse(text.substr(0, slash)), length);
  }
  if (auto dash = text.find('-'); dash != std::string_view::npos) {
    const Ipv4 first = Ipv4::parse(text.substr(0, dash));
    const Ipv4 last = Ipv4::parse(text.substr(dash + 1));
    if (last < first) throw InvalidArgument("range end before start: '" + std::string(text) + "'");
    return {first, last};
  }
  const Ipv4 ip = Ipv4::parse(text);
  return {ip, ip};
}

std::string Ipv4Range::to_string() const {
  if (first == last) return first.to_string();
  return first.to_string() + "-" + last.to_string();
}

std::string Endpoint::to_string() const { return ip.to_string() + ":" + std::to_string(port); }

bool is_private_or_loopback(const Ipv4Range& range) {
  static const Ipv4Range allowed[] = {
      Ipv4Range::from_prefix(Ipv4(127, 0, 0, 0), 8),
      Ipv4Range::from_prefix(Ipv4(10, 0, 0, 0), 8),
      Ipv4Range::from_prefix(Ipv4(172, 16, 0, 0), 12),
      Ipv4Range::from_prefix(Ipv4(192, 168, 0, 0), 16),
  };
  return std::any_of(std::begin(allowed), std::end(allowed), [&](const Ipv4Range& a) {
    return a.contains(range.first) && a.contains(range.last);
  });
}

std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.emplace_back(s.substr(start));
      return out;
    }
    out.emplace_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

bool ends_with_domain(std::string_view host, std::string_view domain) {
  if (domain.empty() || host.size() <= domain.size()) return false;
  return host.ends_with(domain) && host[host.size() - domain.size() - 1] == '.';
}

}  // namespace recon

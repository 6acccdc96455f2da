#include "recon/dns.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <sys/socket.h>

#include <algorithm>
#include <cstring>

#include "recon/socket.hpp"

namespace recon::dns {

namespace {

void put16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v >> 8));
  out.push_back(static_cast<char>(v & 0xff));
}

std::uint16_t get16(std::string_view p, std::size_t at) {
  return static_cast<std::uint16_t>((static_cast<unsigned char>(p[at]) << 8) | static_cast<unsigned char>(p[at + 1]));
}

void put_name(std::string& out, std::string_view name) {
  for (const auto& label : split(name, '.')) {
    if (label.empty()) continue;
    out.push_back(static_cast<char>(std::min<std::size_t>(label.size(), 63)));
    out.append(label.substr(0, 63));
  }
  out.push_back('\0');
}

// Reads a possibly compressed name; advances `pos` past it in the original
// stream.
std::optional<std::string> read_name(std::string_view p, std::size_t& pos) {
  std::string name;
  std::size_t at = pos;
  bool jumped = false;
  for (int hops = 0; hops < 64; ++hops) {
    if (at >= p.size()) return std::nullopt;
    const auto len = static_cast<unsigned char>(p[at]);
    if ((len & 0xC0) == 0xC0) {
      if (at + 1 >= p.size()) return std::nullopt;
      if (!jumped) pos = at + 2;
      jumped = true;
      at = get16(p, at) & 0x3FFF;
      continue;
    }
    if (len == 0) {
      if (!jumped) pos = at + 1;
      return to_lower(name);
    }
    if (at + 1 + len > p.size()) return std::nullopt;
    if (!name.empty()) name.push_back('.');
    name.append(p.substr(at + 1, len));
    at += 1 + len;
  }
  return std::nullopt;
}

}  // namespace

std::string encode_query(const Query& q) {
  std::string out;
  put16(out, q.id);
  put16(out, 0x0100);  // RD
  put16(out, 1);
  put16(out, 0);
  put16(out, 0);
  put16(out, 0);
  put_name(out, q.name);
  put16(out, q.qtype);
  put16(out, 1);
  return out;
}

std::optional<Query> decode_query(std::string_view p) {
  if (p.size() < 12 || get16(p, 4) != 1) return std::nullopt;
  Query q;
  q.id = get16(p, 0);
  std::size_t pos = 12;
  auto name = read_name(p, pos);
  if (!name || pos + 4 > p.size()) return std::nullopt;
  q.name = *name;
  q.qtype = get16(p, pos);
  return q;
}

std::string encode_response(const Query& q, std::uint8_t rcode, const std::vector<Ipv4>& addresses,
                            const std::vector<std::string>& ptr_names) {
  std::string out;
  put16(out, q.id);
  put16(out, static_cast<std::uint16_t>(0x8180 | (rcode & 0x0F)));
  put16(out, 1);
  put16(out, static_cast<std::uint16_t>(addresses.size() + ptr_names.size()));
  put16(out, 0);
  put16(out, 0);
  put_name(out, q.name);
  put16(out, q.qtype);
  put16(out, 1);
  for (Ipv4 a : addresses) {
    put16(out, 0xC00C);
    put16(out, kTypeA);
    put16(out, 1);
    put16(out, 0);
    put16(out, 60);
    put16(out, 4);
    put16(out, static_cast<std::uint16_t>(a.value >> 16));
    put16(out, static_cast<std::uint16_t>(a.value & 0xffff));
  }
  for (const auto& n : ptr_names) {
    std::string rdata;
    put_name(rdata, n);
    put16(out, 0xC00C);
    put16(out, kTypePtr);
    put16(out, 1);
    put16(out, 0);
    put16(out, 60);
    put16(out, static_cast<std::uint16_t>(rdata.size()));
    out += rdata;
  }
  return out;
}

std::optional<Response> decode_response(std::string_view p) {
  if (p.size() < 12) return std::nullopt;
  Response r;
  r.id = get16(p, 0);
  r.rcode = static_cast<std::uint8_t>(get16(p, 2) & 0x0F);
  const std::uint16_t qd = get16(p, 4), an = get16(p, 6);
  std::size_t pos = 12;
  for (int i = 0; i < qd; ++i) {
    if (!read_name(p, pos) || pos + 4 > p.size()) return std::nullopt;
    pos += 4;
  }
  for (int i = 0; i < an; ++i) {
    if (!read_name(p, pos) || pos + 10 > p.size()) return std::nullopt;
    const std::uint16_t type = get16(p, pos);
    const std::uint16_t rdlen = get16(p, pos + 8);
    pos += 10;
    if (pos + rdlen > p.size()) return std::nullopt;
    if (type == kTypeA && rdlen == 4) {
      r.addresses.push_back(Ipv4(static_cast<std::uint32_t>(get16(p, pos)) << 16 | get16(p, pos + 2)));
    } else if (type == kTypePtr) {
      std::size_t at = pos;
      if (auto n = read_name(p, at)) r.names.push_back(*n);
    }
    pos += rdlen;
  }
  return r;
}

std::string reverse_name(Ipv4 ip) {
  const auto v = ip.value;
  return std::to_string(v & 0xff) + "." + std::to_string((v >> 8) & 0xff) + "." +
         std::to_string((v >> 16) & 0xff) + "." + std::to_string(v >> 24) + ".in-addr.arpa";
}

std::optional<Ipv4> parse_reverse_name(std::string_view name) {
  const std::string lower = to_lower(name);
  constexpr std::string_view suffix = ".in-addr.arpa";
  if (lower.size() <= suffix.size() || lower.compare(lower.size() - suffix.size(), suffix.size(), suffix) != 0) {
    return std::nullopt;
  }
  const auto parts = split(std::string_view(lower).substr(0, lower.size() - suffix.size()), '.');
  if (parts.size() != 4) return std::nullopt;
  return Ipv4::try_parse(parts[3] + "." + parts[2] + "." + parts[1] + "." + parts[0]);
}

UdpResolver::UdpResolver(Endpoint server, std::chrono::milliseconds timeout) : server_(server), timeout_(timeout) {}

std::optional<Response> UdpResolver::exchange(const std::string& name, std::uint16_t qtype) {
  auto fd = sock::udp_socket({Ipv4{}, 0});
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_port = htons(server_.port);
  sa.sin_addr.s_addr = htonl(server_.ip.value);
  if (::connect(fd.get(), reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0) return std::nullopt;
  const std::uint16_t id = next_id_++;
  const auto packet = encode_query({id, to_lower(name), qtype});
  if (::send(fd.get(), packet.data(), packet.size(), 0) < 0) return std::nullopt;
  const auto deadline = std::chrono::steady_clock::now() + timeout_;
  while (std::chrono::steady_clock::now() < deadline) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    auto reply = sock::read_some(fd.get(), 1500, left);
    if (!reply || reply->empty()) return std::nullopt;
    auto r = decode_response(*reply);
    if (r && r->id == id) return r;
  }
  return std::nullopt;
}

std::vector<Ipv4> UdpResolver::resolve(const std::string& host) {
  auto r = exchange(host, kTypeA);
  if (!r || r->rcode != kRcodeOk) return {};
  return r->addresses;
}

std::optional<std::string> UdpResolver::reverse(Ipv4 ip) {
  auto r = exchange(reverse_name(ip), kTypePtr);
  if (!r || r->rcode != kRcodeOk || r->names.empty()) return std::nullopt;
  return r->names.front();
}

std::vector<Ipv4> SystemResolver::resolve(const std::string& host) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0) return {};
  std::vector<Ipv4> out;
  for (auto* p = res; p; p = p->ai_next) {
    const auto* sa = reinterpret_cast<const sockaddr_in*>(p->ai_addr);
    const Ipv4 ip(ntohl(sa->sin_addr.s_addr));
    if (std::find(out.begin(), out.end(), ip) == out.end()) out.push_back(ip);
  }
  ::freeaddrinfo(res);
  return out;
}

std::optional<std::string> SystemResolver::reverse(Ipv4 ip) {
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_addr.s_addr = htonl(ip.value);
  char host[NI_MAXHOST];
  if (::getnameinfo(reinterpret_cast<sockaddr*>(&sa), sizeof sa, host, sizeof host, nullptr, 0, NI_NAMEREQD) != 0) {
    return std::nullopt;
  }
  return to_lower(host);
}

}  // namespace recon::dns

#include "recon/appscan.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>

#include <algorithm>
#include <atomic>
#include <fstream>
#include <functional>
#include <mutex>
#include <set>
#include <thread>

#include "recon/error.hpp"
#include "recon/socket.hpp"

namespace recon::appscan {

using nlohmann::json;
using Clock = std::chrono::steady_clock;
using std::chrono::milliseconds;

std::string to_string(Transport t) { return t == Transport::tcp ? "tcp" : "udp"; }

Transport transport_from_string(const std::string& s) {
  if (s == "tcp") return Transport::tcp;
  if (s == "udp") return Transport::udp;
  throw InvalidArgument("unknown transport: " + s);
}

std::int64_t now_micros() {
  return std::chrono::duration_cast<std::chrono::microseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

std::string hex_encode(std::string_view bytes) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (unsigned char c : bytes) {
    out.push_back(digits[c >> 4]);
    out.push_back(digits[c & 15]);
  }
  return out;
}

std::string hex_decode(std::string_view hex) {
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
  };
  std::string clean;
  for (char c : hex)
    if (c != ' ' && c != ':') clean.push_back(c);
  if (clean.size() % 2) throw InvalidArgument("odd-length hex string");
  std::string out;
  for (std::size_t i = 0; i < clean.size(); i += 2) {
    const int hi = nibble(clean[i]), lo = nibble(clean[i + 1]);
    if (hi < 0 || lo < 0) throw InvalidArgument("bad hex digit");
    out.push_back(static_cast<char>(hi << 4 | lo));
  }
  return out;
}

// Invalid sequences are replaced by U+FFFD so banners always serialize.
std::string sanitize_utf8(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = 0;
    if (c < 0x80) len = 1;
    else if ((c & 0xE0) == 0xC0 && c >= 0xC2) len = 2;
    else if ((c & 0xF0) == 0xE0) len = 3;
    else if ((c & 0xF8) == 0xF0 && c <= 0xF4) len = 4;
    bool ok = len > 0 && i + len <= s.size();
    for (std::size_t k = 1; ok && k < len; ++k) ok = (static_cast<unsigned char>(s[i + k]) & 0xC0) == 0x80;
    if (ok && len == 3) {
      const auto c1 = static_cast<unsigned char>(s[i + 1]);
      ok = !(c == 0xE0 && c1 < 0xA0) && !(c == 0xED && c1 >= 0xA0);
    }
    if (ok && len == 4) {
      const auto c1 = static_cast<unsigned char>(s[i + 1]);
      ok = !(c == 0xF0 && c1 < 0x90) && !(c == 0xF4 && c1 >= 0x90);
    }
    if (ok) {
      out.append(s.substr(i, len));
      i += len;
    } else {
      out += "\xEF\xBF\xBD";
      ++i;
    }
  }
  return out;
}

json to_json(const ServiceRecord& r) {
  json j = {{"ip", r.ip.to_string()},
            {"port", r.port},
            {"protocol_id", r.protocol_id},
            {"transport", to_string(r.transport)},
            {"banner", r.banner},
            {"raw_excerpt", hex_encode(r.raw_excerpt)},
            {"tls", nullptr},
            {"collected_at", r.collected_at},
            {"node_id", r.node_id},
            {"site_group", r.site_group},
            {"silent", r.silent},
            {"malformed", r.malformed}};
  if (r.tls) j["tls"] = *r.tls;
  return j;
}

ServiceRecord record_from_json(const json& j) {
  ServiceRecord r;
  r.ip = Ipv4::parse(j.at("ip").get<std::string>());
  r.port = j.at("port").get<std::uint16_t>();
  r.protocol_id = j.at("protocol_id").get<std::string>();
  r.transport = transport_from_string(j.value("transport", "tcp"));
  r.banner = j.value("banner", "");
  r.raw_excerpt = hex_decode(j.value("raw_excerpt", ""));
  if (j.contains("tls") && !j["tls"].is_null()) r.tls = j["tls"].get<std::vector<CertInfo>>();
  r.collected_at = j.value("collected_at", std::int64_t{0});
  r.node_id = j.value("node_id", "");
  r.site_group = j.value("site_group", "");
  r.silent = j.value("silent", false);
  r.malformed = j.value("malformed", false);
  return r;
}

// ---- registry ----

bool is_known_handler(const std::string& name) {
  static const std::set<std::string> names = {"http", "https", "ssh", "ftp", "telnet", "pop3", "imap", "openport"};
  return names.count(name) != 0;
}

HandlerRegistry HandlerRegistry::from_json(const json& doc) {
  HandlerRegistry reg;
  const json& list = doc.is_object() ? doc.at("handlers") : doc;
  for (const auto& e : list) {
    HandlerSpec s;
    s.protocol_id = e.at("protocol_id").get<std::string>();
    s.transport = transport_from_string(e.value("transport", "tcp"));
    s.default_port = e.value("default_port", std::uint16_t{0});
    s.handler = e.value("handler", "openport");
    s.udp_payload = hex_decode(e.value("udp_payload_hex", ""));
    reg.add(std::move(s));
  }
  return reg;
}

HandlerRegistry HandlerRegistry::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NotFound("handler registry not found: " + path);
  return from_json(json::parse(in));
}

void HandlerRegistry::add(HandlerSpec spec) {
  if (spec.protocol_id.empty()) throw InvalidArgument("handler without protocol_id");
  if (!is_known_handler(spec.handler)) throw InvalidArgument("unknown handler '" + spec.handler + "' for " + spec.protocol_id);
  if (spec.transport == Transport::udp && spec.handler != "openport") {
    throw InvalidArgument("udp protocols only support the openport handler: " + spec.protocol_id);
  }
  specs_[spec.protocol_id] = std::move(spec);
}

const HandlerSpec& HandlerRegistry::at(const std::string& protocol_id) const {
  auto it = specs_.find(protocol_id);
  if (it == specs_.end()) throw NotFound("protocol not registered: " + protocol_id);
  return it->second;
}

HandlerSpec HandlerRegistry::resolve(const std::string& protocol_id) const {
  auto it = specs_.find(protocol_id);
  if (it != specs_.end()) return it->second;
  return HandlerSpec{protocol_id, Transport::tcp, 0, "openport", {}};
}

std::vector<std::string> HandlerRegistry::protocol_ids() const {
  std::vector<std::string> out;
  for (const auto& [k, _] : specs_) out.push_back(k);
  return out;
}

std::string http_request(Ipv4 host) {
  return "GET / HTTP/1.0\r\nHost: " + host.to_string() + "\r\nUser-Agent: " + kUserAgent +
         "\r\nAccept: */*\r\nConnection: close\r\n\r\n";
}

std::size_t request_budget(const HandlerSpec& spec) {
  if (spec.transport == Transport::udp) return spec.udp_payload.size();
  if (spec.handler == "http" || spec.handler == "https") return http_request(Ipv4(255, 255, 255, 255)).size();
  if (spec.handler == "ssh") return 21;  // "SSH-2.0-recon_1.0\r\n" padded
  if (spec.handler == "ftp" || spec.handler == "pop3") return 6;
  if (spec.handler == "imap") return 11;
  return 0;
}

// ---- parsing helpers ----

std::string http_server_header(std::string_view response, bool* malformed) {
  if (malformed) *malformed = false;
  if (response.substr(0, 5) != "HTTP/") {
    if (malformed) *malformed = true;
    return {};
  }
  auto end = response.find("\r\n\r\n");
  std::string_view head = response.substr(0, end);
  std::size_t pos = head.find("\r\n");
  while (pos != std::string_view::npos) {
    const std::size_t next = head.find("\r\n", pos + 2);
    std::string_view line = head.substr(pos + 2, next == std::string_view::npos ? std::string_view::npos : next - pos - 2);
    const auto colon = line.find(':');
    if (colon != std::string_view::npos && to_lower(trim(line.substr(0, colon))) == "server") {
      return std::string(trim(line.substr(colon + 1)));
    }
    pos = next;
  }
  return {};
}

std::string strip_telnet_iac(std::string_view b) {
  constexpr unsigned char IAC = 255, SB = 250, SE = 240;
  std::string out;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const auto c = static_cast<unsigned char>(b[i]);
    if (c != IAC) {
      out.push_back(b[i]);
      continue;
    }
    if (i + 1 >= b.size()) break;
    const auto cmd = static_cast<unsigned char>(b[i + 1]);
    if (cmd == IAC) {
      out.push_back(b[i]);
      ++i;
    } else if (cmd == SB) {
      i += 2;
      while (i + 1 < b.size() && !(static_cast<unsigned char>(b[i]) == IAC && static_cast<unsigned char>(b[i + 1]) == SE)) ++i;
      ++i;
    } else if (cmd >= 251 && cmd <= 254) {
      i += 2;  // WILL/WONT/DO/DONT + option
    } else {
      ++i;
    }
  }
  return out;
}

namespace {

std::string first_line(std::string_view s) {
  const auto e = s.find_first_of("\r\n");
  return std::string(s.substr(0, e));
}

struct Deadline {
  Clock::time_point end;
  milliseconds read_timeout;
  milliseconds remaining() const {
    const auto left = std::chrono::duration_cast<milliseconds>(end - Clock::now());
    return std::max(milliseconds(0), std::min(left, read_timeout));
  }
  bool expired() const { return Clock::now() >= end; }
};

// Connection abstraction so http and https share the reader.
struct Conn {
  int fd = -1;
  tls::Session* tls_session = nullptr;

  std::optional<std::string> read(std::size_t max, const Deadline& d) {
    if (tls_session) {
      tls::set_socket_timeouts(fd, std::max(d.remaining(), milliseconds(1)));
      return tls_session->read_some(max);
    }
    return sock::read_some(fd, max, d.remaining());
  }
  bool write(std::string_view data, const Deadline& d) {
    if (tls_session) return tls_session->write_all(data);
    return sock::write_all(fd, data, d.remaining());
  }
};

// Reads until EOF, cap, deadline, or `done(buffer)` holds. Returns false when
// nothing at all arrived before timing out.
bool read_reply(Conn& c, std::string& buf, std::size_t cap, const Deadline& d,
                const std::function<bool(const std::string&)>& done) {
  bool any = false;
  while (buf.size() < cap && !d.expired()) {
    auto chunk = c.read(std::min<std::size_t>(4096, cap - buf.size()), d);
    if (!chunk) break;           // timeout
    if (chunk->empty()) return true;  // EOF counts as answered
    any = true;
    buf += *chunk;
    if (done && done(buf)) break;
  }
  return any;
}

bool has_line(const std::string& b) { return b.find('\n') != std::string::npos; }

void finish(ServiceRecord& r, const std::string& raw, std::size_t cap) {
  r.raw_excerpt = raw.substr(0, kExcerptCap);
  if (r.banner.size() > cap) r.banner.resize(cap);
  r.banner = sanitize_utf8(r.banner);
  if (r.banner.size() > kBannerCap) r.banner.resize(kBannerCap);
}

void run_tcp_script(Conn& c, ServiceRecord& r, const HandlerSpec& spec, const GrabConfig& cfg, const Deadline& d) {
  std::string raw;
  const auto& h = spec.handler;
  if (h == "openport") return;
  if (h == "http" || h == "https") {
    if (!c.write(http_request(r.ip), d)) {
      r.silent = true;
      return;
    }
    if (!read_reply(c, raw, cfg.read_cap, d, nullptr) && raw.empty()) r.silent = true;
    if (!raw.empty()) r.banner = http_server_header(raw, &r.malformed);
  } else if (h == "ssh") {
    if (!read_reply(c, raw, cfg.read_cap, d, has_line) && raw.empty()) r.silent = true;
    if (!raw.empty()) {
      r.banner = first_line(raw);
      r.malformed = r.banner.rfind("SSH-", 0) != 0;
      if (!r.malformed) c.write("SSH-2.0-recon_1.0\r\n", d);
    }
  } else if (h == "ftp" || h == "pop3" || h == "imap") {
    if (!read_reply(c, raw, cfg.read_cap, d, has_line) && raw.empty()) r.silent = true;
    if (!raw.empty()) {
      std::string line = first_line(raw);
      std::string prefix;
      if (h == "ftp") {
        r.malformed = line.size() < 3 || line.substr(0, 3) != "220";
        prefix = line.size() > 3 ? line.substr(0, 4) : line;
      } else if (h == "pop3") {
        r.malformed = line.rfind("+OK", 0) != 0;
        prefix = "+OK ";
      } else {
        r.malformed = line.rfind("* OK", 0) != 0;
        prefix = "* OK ";
      }
      r.banner = r.malformed ? line : (line.size() >= prefix.size() ? line.substr(prefix.size()) : std::string{});
      if (!r.malformed) c.write(h == "imap" ? "a1 LOGOUT\r\n" : "QUIT\r\n", d);
    }
  } else if (h == "telnet") {
    // Greeting capture: take whatever arrives within a short settle window.
    Deadline settle{std::min(d.end, Clock::now() + std::min(cfg.read_timeout, milliseconds(1500))), d.read_timeout};
    auto prompt_seen = [](const std::string& b) {
      const auto t = strip_telnet_iac(b);
      return !t.empty() && (t.back() == ':' || t.back() == '>' || t.back() == '#' || t.back() == ' ' || t.back() == '\n');
    };
    if (!read_reply(c, raw, cfg.read_cap, settle, prompt_seen) && raw.empty()) r.silent = true;
    r.banner = std::string(trim(strip_telnet_iac(raw)));
  }
  finish(r, raw, cfg.read_cap);
}

ServiceRecord grab_udp(Endpoint target, const HandlerSpec& spec, const GrabConfig& cfg, ServiceRecord r) {
  auto fd = sock::udp_socket({cfg.source.value_or(Ipv4{}), 0});
  Deadline d{Clock::now() + cfg.total_timeout, cfg.read_timeout};
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_port = htons(target.port);
  sa.sin_addr.s_addr = htonl(target.ip.value);
  if (::connect(fd.get(), reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0) {
    throw TransportError("udp connect failed");
  }
  ::send(fd.get(), spec.udp_payload.data(), spec.udp_payload.size(), MSG_NOSIGNAL);
  auto reply = sock::read_some(fd.get(), cfg.read_cap, d.remaining());
  if (!reply || reply->empty()) {
    r.silent = true;
  } else {
    r.raw_excerpt = reply->substr(0, kExcerptCap);
  }
  return r;
}

}  // namespace

ServiceRecord grab(Endpoint target, const HandlerSpec& spec, const GrabConfig& cfg) {
  ServiceRecord r;
  r.ip = target.ip;
  r.port = target.port;
  r.protocol_id = spec.protocol_id;
  r.transport = spec.transport;
  r.node_id = cfg.node_id;
  r.site_group = cfg.site_group;
  if (spec.transport == Transport::udp) {
    r = grab_udp(target, spec, cfg, std::move(r));
    r.collected_at = now_micros();
    return r;
  }

  const Deadline d{Clock::now() + cfg.total_timeout, cfg.read_timeout};
  auto fd = sock::tcp_socket(cfg.source);
  const auto status = sock::connect_with_timeout(fd.get(), target, std::min(cfg.connect_timeout, cfg.total_timeout));
  if (status != sock::ConnectResult::connected) {
    r.silent = true;  // responder went away between probe and grab
    r.collected_at = now_micros();
    return r;
  }
  Conn conn{fd.get(), nullptr};
  std::optional<tls::Session> session;
  if (spec.handler == "https") {
    tls::set_socket_timeouts(fd.get(), d.remaining());
    session = tls::Session::connect(fd.get());
    if (!session) {
      r.malformed = true;
      std::string raw;
      read_reply(conn, raw, kExcerptCap, Deadline{Clock::now() + milliseconds(200), milliseconds(200)}, nullptr);
      r.raw_excerpt = raw;
      r.collected_at = now_micros();
      return r;
    }
    r.tls = session->peer_chain();
    conn.tls_session = &*session;
  }
  run_tcp_script(conn, r, spec, cfg, d);
  if (session) session->shutdown();
  r.collected_at = now_micros();
  return r;
}

std::vector<ServiceRecord> grab_all(const std::vector<Endpoint>& targets, const HandlerSpec& spec,
                                    const GrabConfig& config, std::size_t parallelism) {
  std::vector<ServiceRecord> out(targets.size());
  std::atomic<std::size_t> next{0};
  const std::size_t workers = std::max<std::size_t>(1, std::min(parallelism, targets.size()));
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mu;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < targets.size(); i = next++) {
        try {
          out[i] = grab(targets[i], spec, config);
        } catch (...) {
          std::lock_guard lk(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
  return out;
}

std::string classify_banner_group(std::string_view banner) {
  const std::string b = to_lower(trim(banner));
  if (b.empty()) return "empty";
  if (b.rfind("ssh-", 0) == 0 || b.find("openssh") != std::string::npos || b.find("dropbear") != std::string::npos) {
    return "ssh-family";
  }
  if (b.find("microsoft-iis") != std::string::npos) return "iis";
  if (b.find("nginx") != std::string::npos) return "nginx";
  if (b.rfind("apache", 0) == 0 && b.rfind("apache-coyote", 0) != 0) return "apache";
  if (b.find("ftp") != std::string::npos || b.find("filezilla") != std::string::npos) return "ftp-family";
  return "other";
}

}  // namespace recon::appscan

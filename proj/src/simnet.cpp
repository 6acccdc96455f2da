#include "recon/simnet.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>

#include <httplib.h>

#include "recon/dns.hpp"
#include "recon/error.hpp"
#include "recon/socket.hpp"
#include "recon/tls.hpp"

namespace recon::simnet {

using nlohmann::json;
using std::chrono::milliseconds;

namespace {

constexpr milliseconds kIoTimeout{2000};

sockaddr_in to_sa(Endpoint ep) {
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_port = htons(ep.port);
  sa.sin_addr.s_addr = htonl(ep.ip.value);
  return sa;
}

}  // namespace

SimServiceSpec service_from_json(const json& j) {
  SimServiceSpec s;
  if (j.contains("address")) s.address = Ipv4::parse(j["address"].get<std::string>());
  s.port = j.at("port").get<std::uint16_t>();
  if (s.port == 0) throw InvalidArgument("service port must be 1-65535");
  s.protocol_id = j.at("protocol_id").get<std::string>();
  s.banner = j.value("banner", "");
  if (j.contains("tls") && !j["tls"].is_null()) {
    TlsSpec t;
    t.cn = j["tls"].value("cn", "");
    t.sans = j["tls"].value("sans", std::vector<std::string>{});
    s.tls = std::move(t);
  }
  if (j.contains("latency_ms")) s.latency = milliseconds(j["latency_ms"].get<int>());
  s.silent = j.value("silent", false);
  return s;
}

json to_json(const SimServiceSpec& s) {
  json j = {{"address", s.address.to_string()}, {"port", s.port}, {"protocol_id", s.protocol_id},
            {"banner", s.banner}, {"silent", s.silent}};
  if (s.tls) j["tls"] = {{"cn", s.tls->cn}, {"sans", s.tls->sans}};
  if (s.latency) j["latency_ms"] = s.latency->count();
  return j;
}

ManifestEntry expected_entry(const SimServiceSpec& s, const appscan::HandlerSpec& h) {
  ManifestEntry e;
  e.endpoint = {s.address, s.port};
  e.protocol_id = s.protocol_id;
  e.transport = h.transport;
  e.silent = s.silent;
  if (h.handler == "https") e.tls = s.tls;
  if (!s.silent && h.transport == appscan::Transport::tcp && h.handler != "openport") {
    e.banner = h.handler == "telnet" ? std::string(trim(s.banner)) : s.banner;
  }
  if (!s.tls && h.handler == "https") e.tls = TlsSpec{};
  return e;
}

json manifest_to_json(const std::vector<ManifestEntry>& m) {
  json out = json::array();
  for (const auto& e : m) {
    json j = {{"ip", e.endpoint.ip.to_string()}, {"port", e.endpoint.port}, {"protocol_id", e.protocol_id},
              {"transport", appscan::to_string(e.transport)}, {"banner", e.banner}, {"silent", e.silent}};
    if (e.tls) j["tls"] = {{"cn", e.tls->cn}, {"sans", e.tls->sans}};
    out.push_back(std::move(j));
  }
  return out;
}

// ---- services ----

struct SimNet::Service {
  SimServiceSpec spec;
  appscan::HandlerSpec handler;
  sock::Fd fd;
  std::unique_ptr<tls::ServerContext> tls_ctx;
  std::atomic<bool> stop{false};
  std::thread acceptor;
  mutable std::mutex mu;
  std::vector<std::thread> conns;
  ServiceStats stats;
  std::set<Ipv4> peers;

  void note(Ipv4 peer, std::uint64_t request_bytes) {
    std::lock_guard lk(mu);
    ++stats.connections;
    stats.max_request_bytes = std::max(stats.max_request_bytes, request_bytes);
    peers.insert(peer);
  }

  void start() {
    const Endpoint ep{spec.address, spec.port};
    if (handler.transport == appscan::Transport::udp) {
      fd = sock::udp_socket(ep);
      acceptor = std::thread([this] { udp_loop(); });
      return;
    }
    if (handler.handler == "https") {
      const TlsSpec t = spec.tls.value_or(TlsSpec{});
      tls_ctx = std::make_unique<tls::ServerContext>(tls::Identity::self_signed(t.cn, t.sans));
    }
    fd = sock::tcp_listen(ep, 512);
    acceptor = std::thread([this] { accept_loop(); });
  }

  void shutdown() {
    stop = true;
    if (acceptor.joinable()) acceptor.join();
    std::vector<std::thread> pending;
    {
      std::lock_guard lk(mu);
      pending.swap(conns);
    }
    for (auto& t : pending) t.join();
    fd.reset();
  }

  void udp_loop() {
    char buf[4096];
    while (!stop) {
      pollfd p{fd.get(), POLLIN, 0};
      if (::poll(&p, 1, 50) <= 0) continue;
      sockaddr_in from{};
      socklen_t len = sizeof from;
      const auto n = ::recvfrom(fd.get(), buf, sizeof buf, MSG_DONTWAIT, reinterpret_cast<sockaddr*>(&from), &len);
      if (n < 0) continue;
      note(Ipv4(ntohl(from.sin_addr.s_addr)), static_cast<std::uint64_t>(n));
      if (spec.silent) continue;
      if (spec.latency) std::this_thread::sleep_for(*spec.latency);
      const std::string reply = spec.banner.empty() ? std::string("simnet-udp") : spec.banner;
      ::sendto(fd.get(), reply.data(), reply.size(), MSG_NOSIGNAL, reinterpret_cast<sockaddr*>(&from), len);
    }
  }

  void accept_loop() {
    while (!stop) {
      pollfd p{fd.get(), POLLIN, 0};
      if (::poll(&p, 1, 50) <= 0) continue;
      const int c = ::accept4(fd.get(), nullptr, nullptr, SOCK_CLOEXEC);
      if (c < 0) continue;
      std::lock_guard lk(mu);
      conns.emplace_back([this, c] { serve(sock::Fd(c)); });
    }
  }

  // Read from the client until `done` holds, EOF, or the I/O timeout.
  template <class ReadFn>
  std::string read_until(ReadFn&& read, const std::string& marker, std::size_t cap) {
    std::string got;
    const auto deadline = std::chrono::steady_clock::now() + kIoTimeout;
    while (!stop && got.size() < cap && std::chrono::steady_clock::now() < deadline) {
      auto chunk = read();
      if (!chunk) continue;
      if (chunk->empty()) break;
      got += *chunk;
      if (!marker.empty() && got.find(marker) != std::string::npos) break;
    }
    return got;
  }

  void serve(sock::Fd c) {
    Ipv4 peer{};
    try {
      peer = sock::peer_endpoint(c.get()).ip;
    } catch (const TransportError&) {
      note(peer, 0);
      return;  // already reset by a half-open prober
    }
    if (spec.latency) std::this_thread::sleep_for(*spec.latency);
    auto plain_read = [&]() { return sock::read_some(c.get(), 4096, milliseconds(100)); };
    auto plain_write = [&](std::string_view d) { return sock::write_all(c.get(), d, kIoTimeout); };

    if (spec.silent) {
      const auto got = read_until(plain_read, "", 64 * 1024);
      note(peer, got.size());
      return;
    }

    const std::string& h = handler.handler;
    if (h == "https") {
      tls::set_socket_timeouts(c.get(), kIoTimeout);
      auto session = tls::Session::accept(tls_ctx->get(), c.get());
      if (!session) {
        note(peer, 0);
        return;
      }
      tls::set_socket_timeouts(c.get(), milliseconds(100));
      auto tls_read = [&]() { return session->read_some(4096); };
      const auto req = read_until(tls_read, "\r\n\r\n", 16 * 1024);
      session->write_all(http_response());
      session->shutdown();
      note(peer, req.size());
      return;
    }
    std::string req;
    if (h == "http") {
      req = read_until(plain_read, "\r\n\r\n", 16 * 1024);
      if (!req.empty()) plain_write(http_response());
    } else if (h == "ssh") {
      plain_write(spec.banner + "\r\n");
      req = read_until(plain_read, "\n", 256);
    } else if (h == "ftp" || h == "pop3" || h == "imap") {
      const std::string greet = h == "ftp" ? "220 " : h == "pop3" ? "+OK " : "* OK ";
      plain_write(greet + spec.banner + "\r\n");
      req = read_until(plain_read, "\n", 256);
      if (!req.empty()) {
        plain_write(h == "ftp" ? "221 Goodbye.\r\n" : h == "pop3" ? "+OK Bye\r\n" : "* BYE\r\na1 OK LOGOUT completed\r\n");
      }
    } else if (h == "telnet") {
      plain_write(std::string("\xff\xfb\x01\xff\xfb\x03", 6) + spec.banner + "\r\n");
    } else {
      if (!spec.banner.empty()) plain_write(spec.banner);
      req = read_until(plain_read, "", 4096);
    }
    note(peer, req.size());
    ::shutdown(c.get(), SHUT_WR);
  }

  std::string http_response() const {
    const std::string body = "<html><body>simnet</body></html>\n";
    std::string r = "HTTP/1.0 200 OK\r\n";
    if (!spec.banner.empty()) r += "Server: " + spec.banner + "\r\n";
    r += "Content-Type: text/html\r\nContent-Length: " + std::to_string(body.size()) + "\r\nConnection: close\r\n\r\n" + body;
    return r;
  }
};

SimNet::SimNet(std::vector<SimServiceSpec> services, const appscan::HandlerRegistry& registry)
    : specs_(std::move(services)) {
  std::set<std::pair<Endpoint, appscan::Transport>> used;
  for (const auto& s : specs_) {
    const auto h = registry.resolve(s.protocol_id);
    if (!used.emplace(Endpoint{s.address, s.port}, h.transport).second) {
      throw InvalidArgument("duplicate simnet endpoint " + Endpoint{s.address, s.port}.to_string());
    }
    if (!s.address.to_string().starts_with("127.")) {
      throw InvalidArgument("simnet services bind loopback only: " + s.address.to_string());
    }
  }
  try {
    for (const auto& s : specs_) {
      auto svc = std::make_unique<Service>();
      svc->spec = s;
      svc->handler = registry.resolve(s.protocol_id);
      svc->start();
      manifest_.push_back(expected_entry(s, svc->handler));
      services_.push_back(std::move(svc));
    }
  } catch (...) {
    teardown();
    throw;
  }
}

SimNet::~SimNet() { teardown(); }

void SimNet::teardown() {
  if (down_) return;
  down_ = true;
  for (auto& s : services_) s->stop = true;
  for (auto& s : services_) s->shutdown();
}

ServiceStats SimNet::stats(Endpoint ep) const {
  for (const auto& s : services_) {
    if (s->spec.address == ep.ip && s->spec.port == ep.port) {
      std::lock_guard lk(s->mu);
      ServiceStats out = s->stats;
      out.peers.assign(s->peers.begin(), s->peers.end());
      return out;
    }
  }
  throw NotFound("no simnet service at " + ep.to_string());
}

// ---- canary and spoofing ----

Canary::Canary(std::vector<Endpoint> endpoints) : endpoints_(std::move(endpoints)) {
  for (const auto& ep : endpoints_) {
    tcp_fds_.push_back(sock::tcp_listen(ep, 64).release());
    auto u = sock::udp_socket(ep);
    sock::set_nonblocking(u.get(), true);
    udp_fds_.push_back(u.release());
  }
  thread_ = std::thread([this] {
    std::vector<pollfd> pfds;
    for (int fd : tcp_fds_) pfds.push_back({fd, POLLIN, 0});
    for (int fd : udp_fds_) pfds.push_back({fd, POLLIN, 0});
    char buf[2048];
    while (!stop_) {
      if (::poll(pfds.data(), pfds.size(), 50) <= 0) continue;
      for (std::size_t i = 0; i < pfds.size(); ++i) {
        if (!(pfds[i].revents & POLLIN)) continue;
        if (i < tcp_fds_.size()) {
          const int c = ::accept4(pfds[i].fd, nullptr, nullptr, SOCK_CLOEXEC);
          if (c >= 0) {
            ++hits_;
            ::close(c);
          }
        } else {
          while (::recv(pfds[i].fd, buf, sizeof buf, MSG_DONTWAIT) >= 0) ++hits_;
        }
      }
    }
  });
}

Canary::~Canary() { stop(); }

void Canary::stop() {
  if (stop_.exchange(true)) return;
  if (thread_.joinable()) thread_.join();
  for (int fd : tcp_fds_) ::close(fd);
  for (int fd : udp_fds_) ::close(fd);
}

bool Canary::send_from(std::size_t i, Endpoint victim, std::string_view payload) {
  if (udp_fds_.empty()) return false;
  auto sa = to_sa(victim);
  return ::sendto(udp_fds_[i % udp_fds_.size()], payload.data(), payload.size(), MSG_NOSIGNAL,
                  reinterpret_cast<sockaddr*>(&sa), sizeof sa) >= 0;
}

std::uint64_t spoof_udp(const std::vector<Endpoint>& victims, Canary& spoofers, std::uint64_t count,
                        std::string_view payload) {
  if (victims.empty()) return 0;
  std::uint64_t sent = 0;
  for (std::uint64_t i = 0; i < count; ++i) {
    if (spoofers.send_from(i, victims[i % victims.size()], payload)) ++sent;
  }
  return sent;
}

std::uint64_t inject_spoofs(probe::ProbeEngine& engine, const std::vector<Endpoint>& spoofers,
                            const probe::SourcePool& pool, std::uint64_t count) {
  if (spoofers.empty()) return 0;
  for (std::uint64_t i = 0; i < count; ++i) {
    const Endpoint from = spoofers[i % spoofers.size()];
    engine.inject({from, pool.source_for(from), probe::Clock::now()});
  }
  return count;
}

std::vector<Endpoint> spoof_sources(std::size_t count, std::uint16_t port) {
  std::vector<Endpoint> out;
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back({Ipv4(127, 66, static_cast<std::uint8_t>(i / 250), static_cast<std::uint8_t>(i % 250 + 1)), port});
  }
  return out;
}

// ---- DNS fixture ----

DnsFixture::DnsFixture(std::map<std::string, Ipv4> a_records, std::map<Ipv4, std::string> ptr_records, Endpoint bind) {
  for (auto& [k, v] : a_records) a_[to_lower(k)] = v;
  for (auto& [k, v] : ptr_records) ptr_[k] = to_lower(v);
  auto s = sock::udp_socket(bind);
  endpoint_ = sock::local_endpoint(s.get());
  fd_ = s.release();
  thread_ = std::thread([this] {
    char buf[1500];
    while (!stop_) {
      pollfd p{fd_, POLLIN, 0};
      if (::poll(&p, 1, 50) <= 0) continue;
      sockaddr_in from{};
      socklen_t len = sizeof from;
      const auto n = ::recvfrom(fd_, buf, sizeof buf, MSG_DONTWAIT, reinterpret_cast<sockaddr*>(&from), &len);
      if (n <= 0) continue;
      auto q = dns::decode_query(std::string_view(buf, static_cast<std::size_t>(n)));
      if (!q) continue;
      ++queries_;
      std::vector<Ipv4> addrs;
      std::vector<std::string> names;
      if (q->qtype == dns::kTypeA) {
        if (auto it = a_.find(q->name); it != a_.end()) addrs.push_back(it->second);
      } else if (q->qtype == dns::kTypePtr) {
        if (auto ip = dns::parse_reverse_name(q->name)) {
          if (auto it = ptr_.find(*ip); it != ptr_.end()) names.push_back(it->second);
        }
      }
      const bool found = !addrs.empty() || !names.empty();
      const auto reply = dns::encode_response(*q, found ? dns::kRcodeOk : dns::kRcodeNxDomain, addrs, names);
      ::sendto(fd_, reply.data(), reply.size(), MSG_NOSIGNAL, reinterpret_cast<sockaddr*>(&from), len);
    }
  });
}

DnsFixture::~DnsFixture() {
  stop_ = true;
  if (thread_.joinable()) thread_.join();
  ::close(fd_);
}

// ---- CT fixture ----

struct CtFixture::Impl {
  httplib::Server server;
  std::thread thread;
  int port = 0;
  std::map<std::string, std::vector<std::string>> names;
};

CtFixture::CtFixture(std::map<std::string, std::vector<std::string>> names_by_domain) : impl_(std::make_unique<Impl>()) {
  for (auto& [d, list] : names_by_domain) impl_->names[to_lower(d)] = list;
  impl_->server.Get("/", [this](const httplib::Request& req, httplib::Response& res) {
    if (!available_) {
      res.status = 503;
      return;
    }
    std::string q = to_lower(req.get_param_value("q"));
    if (q.rfind("%.", 0) == 0) q = q.substr(2);
    json out = json::array();
    if (auto it = impl_->names.find(q); it != impl_->names.end()) {
      for (const auto& n : it->second) out.push_back({{"name_value", n}});
    }
    res.set_content(out.dump(), "application/json");
  });
  impl_->port = impl_->server.bind_to_any_port("127.0.0.1");
  if (impl_->port <= 0) throw TransportError("ct fixture could not bind");
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

CtFixture::~CtFixture() {
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

std::string CtFixture::base_url() const { return "http://127.0.0.1:" + std::to_string(impl_->port); }

// ---- scenarios ----

std::string scenario_dir() {
  if (const char* env = std::getenv("RECON_SCENARIO_DIR")) return env;
  return std::string(RECON_SOURCE_DIR) + "/fixtures/scenarios";
}

Scenario parse_scenario(const json& doc) {
  Scenario s;
  const json& services = doc.is_array() ? doc : doc.value("services", json::array());
  for (const auto& j : services) s.services.push_back(service_from_json(j));
  if (doc.is_object()) {
    s.name = doc.value("name", "");
    for (const auto& r : doc.value("ranges", json::array())) s.ranges.push_back(Ipv4Range::parse(r.get<std::string>()));
    s.nodes = doc.value("nodes", std::size_t{1});
    s.site_groups = doc.value("site_groups", std::vector<std::string>{});
    s.unit_size = doc.value("unit_size", std::uint64_t{64});
    s.seed = doc.value("seed", std::uint64_t{1});
    s.kill_nodes = doc.value("kill_nodes", std::size_t{0});
    s.spoofs = doc.value("spoofs", std::uint64_t{0});
    s.max_pps = doc.value("max_pps", 0.0);
    s.fixture = doc.value("fixture", json::object());
    for (const auto& o : doc.value("operations", json::array())) {
      s.operations.push_back({o.at("port").get<std::uint16_t>(), o.at("protocol_id").get<std::string>()});
    }
  }
  if (s.operations.empty()) {
    for (const auto& svc : s.services) s.operations.push_back({svc.port, svc.protocol_id});
    std::sort(s.operations.begin(), s.operations.end());
    s.operations.erase(std::unique(s.operations.begin(), s.operations.end()), s.operations.end());
  }
  if (s.kill_nodes >= s.nodes && s.nodes > 0 && s.kill_nodes > 0) {
    throw InvalidArgument("scenario kills every node; at least one must survive");
  }
  if (s.ranges.empty()) {
    // Default: tight range around the service addresses.
    for (const auto& svc : s.services) s.ranges.push_back({svc.address, svc.address});
    std::sort(s.ranges.begin(), s.ranges.end(), [](auto& a, auto& b) { return a.first < b.first; });
    s.ranges.erase(std::unique(s.ranges.begin(), s.ranges.end()), s.ranges.end());
  }
  return s;
}

Scenario load_scenario(const std::string& name_or_path) {
  std::string path = name_or_path;
  if (path.find('/') == std::string::npos && path.find(".json") == std::string::npos) {
    path = scenario_dir() + "/" + path + ".json";
  }
  std::ifstream in(path);
  if (!in) throw NotFound("scenario not found: " + path);
  auto s = parse_scenario(json::parse(in));
  if (s.name.empty()) s.name = name_or_path;
  return s;
}

}  // namespace recon::simnet

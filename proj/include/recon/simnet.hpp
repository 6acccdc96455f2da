#pragma once

// Loopback test network: synthetic banner/TLS services with a ground-truth
// manifest, DNS and certificate-transparency fixtures, canaries and spoofed
// reply injection.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "recon/appscan.hpp"
#include "recon/net.hpp"
#include "recon/probe.hpp"

namespace recon::simnet {

struct TlsSpec {
  std::string cn;
  std::vector<std::string> sans;
  friend bool operator==(const TlsSpec&, const TlsSpec&) = default;
};

struct SimServiceSpec {
  Ipv4 address{127, 0, 0, 1};
  std::uint16_t port = 0;
  std::string protocol_id;
  std::string banner;
  std::optional<TlsSpec> tls;
  std::optional<std::chrono::milliseconds> latency;
  bool silent = false;
};

SimServiceSpec service_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SimServiceSpec& s);

// What a correct scan must report for one service.
struct ManifestEntry {
  Endpoint endpoint;
  std::string protocol_id;
  appscan::Transport transport = appscan::Transport::tcp;
  std::string banner;  // as the handler will extract it
  std::optional<TlsSpec> tls;
  bool silent = false;
};

nlohmann::json manifest_to_json(const std::vector<ManifestEntry>& m);
ManifestEntry expected_entry(const SimServiceSpec& s, const appscan::HandlerSpec& handler);

struct ServiceStats {
  std::uint64_t connections = 0;   // TCP accepts or UDP datagrams
  std::uint64_t max_request_bytes = 0;  // largest plaintext request seen on one connection
  std::vector<Ipv4> peers;         // distinct client addresses
};

// Owns running services. Constructor returns once every service accepts.
class SimNet {
 public:
  SimNet(std::vector<SimServiceSpec> services, const appscan::HandlerRegistry& registry);
  ~SimNet();
  SimNet(const SimNet&) = delete;
  SimNet& operator=(const SimNet&) = delete;

  const std::vector<ManifestEntry>& manifest() const { return manifest_; }
  const std::vector<SimServiceSpec>& services() const { return specs_; }
  ServiceStats stats(Endpoint ep) const;
  void teardown();  // idempotent

  struct Service;  // defined in the implementation

 private:
  std::vector<SimServiceSpec> specs_;
  std::vector<ManifestEntry> manifest_;
  std::vector<std::unique_ptr<Service>> services_;
  bool down_ = false;
};

// Listens (TCP and UDP) on the given endpoints and counts anything that
// arrives. Placed at spoofed addresses: a nonzero count means the scanner
// followed up on a reply it never asked for. Also the sender of spoofed UDP,
// so the spoofed source endpoint and the listener are the same socket.
class Canary {
 public:
  explicit Canary(std::vector<Endpoint> endpoints);
  ~Canary();
  Canary(const Canary&) = delete;
  Canary& operator=(const Canary&) = delete;

  std::uint64_t hits() const { return hits_.load(); }
  const std::vector<Endpoint>& endpoints() const { return endpoints_; }
  // One datagram per call from endpoints()[i % n] to `victim`.
  bool send_from(std::size_t i, Endpoint victim, std::string_view payload);
  void stop();

 private:
  std::vector<Endpoint> endpoints_;
  std::vector<int> tcp_fds_;
  std::vector<int> udp_fds_;
  std::atomic<std::uint64_t> hits_{0};
  std::atomic<bool> stop_{false};
  std::thread thread_;
};

// Round-robin over victims and canary endpoints until `count` datagrams left.
std::uint64_t spoof_udp(const std::vector<Endpoint>& victims, Canary& spoofers, std::uint64_t count,
                        std::string_view payload = "spoofed");
// Replies from never-probed addresses straight into an engine's input path,
// tagged with the source the pool would have used (the strongest forgery).
std::uint64_t inject_spoofs(probe::ProbeEngine& engine, const std::vector<Endpoint>& spoofers,
                            const probe::SourcePool& pool, std::uint64_t count);
// Addresses in 127.66.0.0/16, outside every shipped scenario range.
std::vector<Endpoint> spoof_sources(std::size_t count, std::uint16_t port);

// UDP DNS server answering A and PTR from fixed maps; other names NXDOMAIN.
class DnsFixture {
 public:
  DnsFixture(std::map<std::string, Ipv4> a_records, std::map<Ipv4, std::string> ptr_records,
             Endpoint bind = {Ipv4(127, 0, 0, 1), 0});
  ~DnsFixture();
  Endpoint endpoint() const { return endpoint_; }
  std::uint64_t queries() const { return queries_.load(); }

 private:
  std::map<std::string, Ipv4> a_;
  std::map<Ipv4, std::string> ptr_;
  Endpoint endpoint_;
  int fd_ = -1;
  std::atomic<bool> stop_{false};
  std::atomic<std::uint64_t> queries_{0};
  std::thread thread_;
};

// HTTP fixture shaped like a public CT search: GET /?q=<domain>&output=json
// returns [{"name_value": "..."}]. Matches on the bare domain or "%.domain".
class CtFixture {
 public:
  explicit CtFixture(std::map<std::string, std::vector<std::string>> names_by_domain);
  ~CtFixture();
  std::string base_url() const;
  void set_available(bool up) { available_ = up; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::atomic<bool> available_{true};
};

struct ScanTarget {
  std::uint16_t port = 0;
  std::string protocol_id;
  friend auto operator<=>(const ScanTarget&, const ScanTarget&) = default;
};

struct Scenario {
  std::string name;
  std::vector<Ipv4Range> ranges;
  std::vector<ScanTarget> operations;  // default: one per distinct service (port, protocol)
  std::vector<SimServiceSpec> services;
  std::size_t nodes = 1;
  std::vector<std::string> site_groups;
  std::uint64_t unit_size = 64;
  std::uint64_t seed = 1;
  std::size_t kill_nodes = 0;   // killed after their first assignment
  std::uint64_t spoofs = 0;
  double max_pps = 0;
  nlohmann::json fixture;       // data-only extras (hospital_fixture)
};

Scenario parse_scenario(const nlohmann::json& doc);
// Accepts a path or a shipped scenario name.
Scenario load_scenario(const std::string& name_or_path);
std::string scenario_dir();

}  // namespace recon::simnet

#pragma once

// Scan-node layer 1: emit one probe per target from a rotating source pool and
// accept only responses that match a recently sent probe.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "recon/ipgen.hpp"
#include "recon/net.hpp"

template <>
struct std::hash<recon::Endpoint> {
  std::size_t operator()(const recon::Endpoint& e) const noexcept {
    return static_cast<std::size_t>(recon::ipgen::mix64((std::uint64_t{e.ip.value} << 16) | e.port));
  }
};

namespace recon::probe {

using Clock = std::chrono::steady_clock;
using TimePoint = Clock::time_point;
using SourceId = std::uint32_t;

inline constexpr std::size_t kDefaultBufferCapacity = 1u << 20;

struct ProbeEntry {
  Endpoint dest;
  SourceId source = 0;
  TimePoint sent_at{};
  std::uint64_t seq = 0;
};

enum class Verdict { accept, never_probed, evicted, wrong_source };
std::string to_string(Verdict v);

// FIFO ring of the last `capacity` probes. One writer (sender) and any number
// of concurrent readers (receiver). Evicted destinations are remembered for
// another `capacity` sends so late replies are classified, not just dropped.
class RecentProbeBuffer {
 public:
  explicit RecentProbeBuffer(std::size_t capacity = kDefaultBufferCapacity);

  // Must be called before the probe leaves the host.
  std::uint64_t record(Endpoint dest, SourceId source, TimePoint now = Clock::now());
  Verdict validate(Endpoint from, SourceId arrived_on) const;
  std::optional<ProbeEntry> lookup(Endpoint dest) const;

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const;
  std::uint64_t total_recorded() const;

 private:
  std::size_t capacity_;
  mutable std::shared_mutex mutex_;
  std::vector<ProbeEntry> ring_;
  std::vector<Endpoint> graveyard_;  // evicted destinations, also a ring
  std::uint64_t next_seq_ = 0;
  std::uint64_t evicted_count_ = 0;
  std::unordered_map<Endpoint, std::uint64_t> live_;     // dest -> seq of newest live entry
  std::unordered_map<Endpoint, std::uint64_t> evicted_;  // dest -> eviction ordinal
};

struct Source {
  SourceId id = 0;
  Ipv4 address;
  std::uint16_t port = 0;  // 0: ephemeral
};

class SourcePool {
 public:
  SourcePool(std::vector<Source> sources, std::uint64_t selection_seed);
  // `count` consecutive loopback addresses starting at `base`.
  static SourcePool loopback(std::size_t count, std::uint64_t seed, Ipv4 base = Ipv4(127, 64, 0, 1));
  // "127.64.0.1/22", "127.64.0.1-127.64.0.9" or "127.0.0.1:40000-40063".
  static SourcePool parse(const std::string& spec, std::uint64_t seed);

  SourceId source_for(Endpoint target) const;
  const Source& at(SourceId id) const { return sources_.at(id); }
  std::size_t size() const { return sources_.size(); }
  const std::vector<Source>& sources() const { return sources_; }
  // Reverse map for engines that learn the local address of a reply.
  std::optional<SourceId> find(Ipv4 address, std::uint16_t port = 0) const;

 private:
  std::vector<Source> sources_;
  std::uint64_t seed_;
  std::unordered_map<Endpoint, SourceId> by_endpoint_;
};

// A reply as seen by an engine, before validation.
struct RawResponse {
  Endpoint from;
  SourceId arrived_on = 0;
  TimePoint at{};
};

class ProbeEngine {
 public:
  virtual ~ProbeEngine() = default;
  virtual void send(Endpoint target, const Source& source) = 0;
  // Waits up to `timeout` and drains replies; also returns any injected ones.
  virtual std::vector<RawResponse> poll(std::chrono::milliseconds timeout) = 0;
  virtual std::size_t outstanding() const = 0;
  virtual std::string name() const = 0;

  // Adversarial input path for harnesses: a reply that never touched the wire.
  void inject(RawResponse r);

 protected:
  std::vector<RawResponse> take_injected();

 private:
  std::mutex inject_mu_;
  std::vector<RawResponse> injected_;
};

enum class ProbeTransport { tcp, udp };

struct ConnectEngineConfig {
  ProbeTransport transport = ProbeTransport::tcp;
  std::string udp_payload;
  std::chrono::milliseconds timeout{1000};
};

// Unprivileged engine: nonblocking connect() from a bound source address, torn
// down with RST on success; UDP datagrams from per-source sockets.
std::unique_ptr<ProbeEngine> make_connect_engine(const SourcePool& pool, ConnectEngineConfig cfg);

// Half-open SYN engine on raw sockets. Throws TransportError without
// CAP_NET_RAW.
std::unique_ptr<ProbeEngine> make_raw_syn_engine(const SourcePool& pool, std::uint16_t source_port,
                                                 std::uint64_t cookie_key,
                                                 std::chrono::milliseconds timeout = std::chrono::milliseconds(1000));
bool raw_sockets_available();
// Local endpoints of a UDP connect engine's per-source sockets (spoof targets
// in harnesses). Empty for other engines.
std::vector<Endpoint> udp_local_endpoints(const ProbeEngine& engine);

// Sends at most `pps` per second: the k-th send is released no earlier than
// start + k/pps, and finish() returns no earlier than start + n/pps.
class Pacer {
 public:
  using NowFn = std::function<TimePoint()>;
  using SleepFn = std::function<void(Clock::duration)>;

  explicit Pacer(double pps, NowFn now = nullptr, SleepFn sleep = nullptr);
  void wait();
  void finish();
  std::uint64_t released() const { return count_; }

 private:
  void sleep_until(TimePoint t);
  double pps_;
  NowFn now_;
  SleepFn sleep_;
  std::optional<TimePoint> start_;
  std::uint64_t count_ = 0;
};

struct ProbeResult {
  Endpoint dest;
  bool responded = false;
  double rtt_ms = 0;
  SourceId source_id = 0;
  TimePoint observed_at{};
};

struct RejectCounts {
  std::uint64_t never_probed = 0;
  std::uint64_t evicted = 0;
  std::uint64_t wrong_source = 0;
  std::uint64_t total() const { return never_probed + evicted + wrong_source; }
};

struct RunConfig {
  double max_pps = 0;  // 0: unpaced
  std::chrono::milliseconds drain_timeout{1500};
  Pacer::NowFn now;      // injectable clock for the pacer
  Pacer::SleepFn sleep;
  const std::atomic<bool>* cancel = nullptr;
  // Called on the receiver thread for every rejected reply.
  std::function<void(const RawResponse&, Verdict)> on_reject;
};

struct UnitRun {
  std::vector<Endpoint> probed;      // in send order
  std::vector<ProbeResult> results;  // validated responders, sorted by dest
  RejectCounts rejected;
  std::chrono::steady_clock::duration elapsed{};
  bool cancelled = false;
};

// Throws TransportError when the engine fails; the caller reports the unit as
// aborted.
UnitRun run_unit(const ipgen::WorkUnit& unit, const ipgen::TargetSpace& space,
                 const ipgen::IndexPermutation& perm, const SourcePool& pool,
                 RecentProbeBuffer& buffer, ProbeEngine& engine, const RunConfig& config);

}  // namespace recon::probe

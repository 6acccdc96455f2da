#include <doctest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>

#include <map>
#include <set>
#include <thread>

#include "recon/error.hpp"
#include "recon/probe.hpp"
#include "recon/simnet.hpp"
#include "recon/socket.hpp"

using namespace recon;
using namespace recon::probe;
using namespace std::chrono_literals;

namespace {

// Records what was sent; answers from a fixed responder set.
class FakeEngine final : public ProbeEngine {
 public:
  explicit FakeEngine(std::set<Endpoint> live) : live_(std::move(live)) {}
  void send(Endpoint target, const Source& source) override {
    std::lock_guard lk(mu_);
    sent_.push_back({target, source.id});
    if (live_.count(target)) pending_.push_back({target, source.id, Clock::now()});
  }
  std::vector<RawResponse> poll(std::chrono::milliseconds) override {
    std::vector<RawResponse> out = take_injected();
    std::lock_guard lk(mu_);
    out.insert(out.end(), pending_.begin(), pending_.end());
    pending_.clear();
    return out;
  }
  std::size_t outstanding() const override { return 0; }
  std::string name() const override { return "fake"; }
  std::vector<std::pair<Endpoint, SourceId>> sent() {
    std::lock_guard lk(mu_);
    return sent_;
  }

 private:
  std::mutex mu_;
  std::set<Endpoint> live_;
  std::vector<std::pair<Endpoint, SourceId>> sent_;
  std::vector<RawResponse> pending_;
};

struct FakeClock {
  TimePoint t{};
  std::vector<TimePoint> releases;
  Pacer::NowFn now() {
    return [this] { return t; };
  }
  Pacer::SleepFn sleep() {
    return [this](Clock::duration d) { t += d; };
  }
};

ipgen::WorkUnit whole(const ipgen::TargetSpace& space) {
  ipgen::WorkUnit u;
  u.unit_id = 1;
  u.start_index = 0;
  u.end_index = space.size();
  return u;
}

}  // namespace

TEST_CASE("buffer accepts only recorded destinations on the recorded source") {
  RecentProbeBuffer buf(8);
  const Endpoint a{Ipv4(10, 0, 0, 1), 80};
  buf.record(a, 2);
  CHECK(buf.validate(a, 2) == Verdict::accept);
  CHECK(buf.validate(a, 3) == Verdict::wrong_source);
  CHECK(buf.validate({Ipv4(10, 0, 0, 2), 80}, 2) == Verdict::never_probed);
  CHECK(buf.validate({Ipv4(10, 0, 0, 1), 81}, 2) == Verdict::never_probed);
  REQUIRE(buf.lookup(a));
  CHECK(buf.lookup(a)->source == 2);
}

TEST_CASE("buffer evicts FIFO and classifies late replies") {
  RecentProbeBuffer buf(4);
  for (std::uint32_t i = 1; i <= 6; ++i) buf.record({Ipv4(10, 0, 0, i), 80}, 0);
  CHECK(buf.size() == 4);
  CHECK(buf.total_recorded() == 6);
  CHECK(buf.validate({Ipv4(10, 0, 0, 1), 80}, 0) == Verdict::evicted);
  CHECK(buf.validate({Ipv4(10, 0, 0, 2), 80}, 0) == Verdict::evicted);
  for (std::uint32_t i = 3; i <= 6; ++i) CHECK(buf.validate({Ipv4(10, 0, 0, i), 80}, 0) == Verdict::accept);
  // Graveyard is bounded too: after many more sends the oldest is simply unknown.
  for (std::uint32_t i = 100; i < 120; ++i) buf.record({Ipv4(10, 0, 1, i), 80}, 0);
  CHECK(buf.validate({Ipv4(10, 0, 0, 1), 80}, 0) == Verdict::never_probed);
}

TEST_CASE("buffer re-record keeps destination live") {
  RecentProbeBuffer buf(2);
  const Endpoint a{Ipv4(10, 0, 0, 1), 80};
  buf.record(a, 0);
  buf.record({Ipv4(10, 0, 0, 2), 80}, 0);
  buf.record(a, 1);  // evicts the first copy of a, the second is live
  CHECK(buf.validate(a, 1) == Verdict::accept);
  CHECK(buf.size() == 2);
}

TEST_CASE("buffer rejects zero capacity") { CHECK_THROWS_AS(RecentProbeBuffer(0), InvalidArgument); }

TEST_CASE("four-source pool spreads a /16 evenly") {
  const auto pool = SourcePool::loopback(4, 77);
  std::map<SourceId, int> hist;
  for (std::uint32_t i = 0; i < 65536; ++i) ++hist[pool.source_for({Ipv4(0x0A000000u + i), 443})];
  REQUIRE(hist.size() == 4);
  for (auto [id, n] : hist) {
    INFO("source " << id << " got " << n);
    CHECK(n >= 16384 * 0.95);
    CHECK(n <= 16384 * 1.05);
  }
}

TEST_CASE("source selection is a deterministic function of target") {
  const auto p1 = SourcePool::loopback(16, 5);
  const auto p2 = SourcePool::loopback(16, 5);
  const auto p3 = SourcePool::loopback(16, 6);
  int differs = 0;
  for (std::uint32_t i = 0; i < 1000; ++i) {
    const Endpoint t{Ipv4(0x0B000000u + i * 7), 22};
    CHECK(p1.source_for(t) == p2.source_for(t));
    differs += p1.source_for(t) != p3.source_for(t);
  }
  CHECK(differs > 800);
}

TEST_CASE("source pool spec forms") {
  CHECK(SourcePool::parse("127.64.0.1/30", 1).size() == 4);
  CHECK(SourcePool::parse("127.64.0.1-127.64.0.9", 1).size() == 9);
  const auto ports = SourcePool::parse("127.0.0.1:40000-40063", 1);
  CHECK(ports.size() == 64);
  CHECK(ports.at(3).port == 40003);
  CHECK(ports.find(Ipv4(127, 0, 0, 1), 40010) == SourceId{10});
  CHECK_THROWS_AS(SourcePool::parse("bogus", 1), InvalidArgument);
  CHECK_THROWS_AS(SourcePool({}, 1), InvalidArgument);
}

TEST_CASE("pacer releases the k-th send no earlier than k/pps") {
  FakeClock clock;
  Pacer pacer(100, clock.now(), clock.sleep());
  const auto start = clock.t;
  for (int k = 0; k < 1000; ++k) {
    pacer.wait();
    CHECK(clock.t - start >= std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(k / 100.0)));
  }
  pacer.finish();
  CHECK(clock.t - start >= 10s);
  CHECK(clock.t - start < 10s + 20ms);
}

TEST_CASE("run_unit at 100 pps over 1000 targets takes at least 10 s of clock") {
  const ipgen::TargetSpace space({Ipv4Range::parse("10.1.0.0/22")}, 80, "http");
  const auto perm = ipgen::build_permutation(3, space.size());
  ipgen::WorkUnit unit;
  unit.start_index = 0;
  unit.end_index = 1000;
  const auto pool = SourcePool::loopback(4, 1);
  RecentProbeBuffer buf(4096);
  FakeEngine engine({});
  FakeClock clock;
  RunConfig rc;
  rc.max_pps = 100;
  rc.now = clock.now();
  rc.sleep = clock.sleep();
  const auto run = run_unit(unit, space, perm, pool, buf, engine, rc);
  CHECK(run.probed.size() == 1000);
  CHECK(clock.t - TimePoint{} >= 10s);
}

TEST_CASE("run_unit probes each target once from its chosen source") {
  const ipgen::TargetSpace space({Ipv4Range::parse("10.2.0.0/24")}, 8080, "http");
  const auto perm = ipgen::build_permutation(9, space.size());
  const auto pool = SourcePool::loopback(4, 2);
  RecentProbeBuffer buf(1024);
  const std::set<Endpoint> live = {{Ipv4(10, 2, 0, 7), 8080}, {Ipv4(10, 2, 0, 99), 8080}};
  FakeEngine engine(live);
  const auto run = run_unit(whole(space), space, perm, pool, buf, engine, {});
  const auto sent = engine.sent();
  REQUIRE(sent.size() == 256);
  std::set<Endpoint> uniq;
  for (auto& [ep, sid] : sent) {
    uniq.insert(ep);
    CHECK(sid == pool.source_for(ep));
  }
  CHECK(uniq.size() == 256);
  REQUIRE(run.results.size() == 2);
  CHECK(run.results[0].dest == Endpoint{Ipv4(10, 2, 0, 7), 8080});
  CHECK(run.results[1].dest == Endpoint{Ipv4(10, 2, 0, 99), 8080});
}

TEST_CASE("injected replies from never-probed hosts are rejected") {
  const ipgen::TargetSpace space({Ipv4Range::parse("10.3.0.0/26")}, 80, "http");
  const auto perm = ipgen::build_permutation(1, space.size());
  const auto pool = SourcePool::loopback(4, 2);
  RecentProbeBuffer buf(1024);
  FakeEngine engine({});
  const auto spoofers = simnet::spoof_sources(50, 80);
  simnet::inject_spoofs(engine, spoofers, pool, 200);
  std::atomic<int> seen{0};
  RunConfig rc;
  rc.on_reject = [&](const RawResponse&, Verdict v) { seen += v == Verdict::never_probed; };
  const auto run = run_unit(whole(space), space, perm, pool, buf, engine, rc);
  CHECK(run.results.empty());
  CHECK(run.rejected.never_probed == 200);
  CHECK(seen == 200);
}

TEST_CASE("replies on the wrong source are rejected") {
  const ipgen::TargetSpace space({Ipv4Range::parse("10.4.0.0/28")}, 80, "http");
  const auto perm = ipgen::build_permutation(1, space.size());
  const auto pool = SourcePool::loopback(4, 2);
  RecentProbeBuffer buf(64);
  FakeEngine engine({});
  const Endpoint victim{Ipv4(10, 4, 0, 3), 80};
  engine.inject({victim, (pool.source_for(victim) + 1) % 4, Clock::now()});
  // Injected before the probe goes out, so the buffer has not seen it yet.
  auto run = run_unit(whole(space), space, perm, pool, buf, engine, {});
  CHECK(run.results.empty());
  CHECK(run.rejected.total() == 1);
  engine.inject({victim, (pool.source_for(victim) + 1) % 4, Clock::now()});
  ipgen::WorkUnit none;
  none.start_index = 0;
  none.end_index = 1;
  run = run_unit(none, space, perm, pool, buf, engine, {});
  CHECK(run.rejected.wrong_source == 1);
}

TEST_CASE("run_unit validates its inputs and honours cancel") {
  const ipgen::TargetSpace space({Ipv4Range::parse("10.5.0.0/28")}, 80, "http");
  const auto perm = ipgen::build_permutation(1, space.size());
  const auto pool = SourcePool::loopback(1, 2);
  RecentProbeBuffer buf(64);
  FakeEngine engine({});
  ipgen::WorkUnit bad;
  bad.start_index = 0;
  bad.end_index = 17;
  CHECK_THROWS_AS(run_unit(bad, space, perm, pool, buf, engine, {}), InvalidArgument);
  std::atomic<bool> cancel{true};
  RunConfig rc;
  rc.cancel = &cancel;
  const auto run = run_unit(whole(space), space, perm, pool, buf, engine, rc);
  CHECK(run.cancelled);
  CHECK(run.probed.empty());
}

TEST_CASE("connect engine finds exactly the open ports on loopback") {
  // 64 addresses, 3 listening.
  std::vector<sock::Fd> listeners;
  const std::set<Endpoint> open = {{Ipv4(127, 31, 0, 5), 18080}, {Ipv4(127, 31, 0, 17), 18080}, {Ipv4(127, 31, 0, 60), 18080}};
  for (const auto& ep : open) listeners.push_back(sock::tcp_listen(ep, 16));
  const ipgen::TargetSpace space({Ipv4Range::parse("127.31.0.0/26")}, 18080, "http");
  const auto perm = ipgen::build_permutation(4, space.size());
  const auto pool = SourcePool::loopback(4, 8);
  RecentProbeBuffer buf(256);
  auto engine = make_connect_engine(pool, {});
  const auto run = run_unit(whole(space), space, perm, pool, buf, *engine, {});
  CHECK(run.probed.size() == 64);
  std::set<Endpoint> found;
  for (const auto& r : run.results) found.insert(r.dest);
  CHECK(found == open);
  CHECK(run.rejected.total() == 0);
  CHECK(engine->outstanding() == 0);
}

TEST_CASE("connect engine times out silent targets") {
  // A listener whose accept queue is full stays silent to further SYNs on Linux.
  const Endpoint ep{Ipv4(127, 31, 1, 1), 18081};
  auto l = sock::tcp_listen(ep, 0);
  std::vector<sock::Fd> fill;
  for (int i = 0; i < 4; ++i) {
    auto fd = sock::tcp_socket();
    sock::set_nonblocking(fd.get(), true);
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(ep.port);
    sa.sin_addr.s_addr = htonl(ep.ip.value);
    ::connect(fd.get(), reinterpret_cast<sockaddr*>(&sa), sizeof sa);
    fill.push_back(std::move(fd));
  }
  std::this_thread::sleep_for(50ms);
  const auto pool = SourcePool::loopback(1, 8);
  ConnectEngineConfig cfg;
  cfg.timeout = 200ms;
  auto engine = make_connect_engine(pool, cfg);
  engine->send(ep, pool.at(0));
  const auto deadline = Clock::now() + 2s;
  while (engine->outstanding() > 0 && Clock::now() < deadline) engine->poll(20ms);
  CHECK(engine->outstanding() == 0);
}

TEST_CASE("udp connect engine: real replies accepted, spoofed datagrams rejected") {
  const auto registry = appscan::HandlerRegistry::load(std::string(RECON_SOURCE_DIR) + "/config/handlers.json");
  simnet::SimNet net({{Ipv4(127, 32, 0, 9), 11161, "snmpv1", "public-reply", {}, {}, false}}, registry);
  const ipgen::TargetSpace space({Ipv4Range::parse("127.32.0.0/28")}, 11161, "snmpv1");
  const auto perm = ipgen::build_permutation(4, space.size());
  const auto pool = SourcePool::loopback(2, 8);
  RecentProbeBuffer buf(256);
  ConnectEngineConfig cfg;
  cfg.transport = ProbeTransport::udp;
  cfg.udp_payload = registry.at("snmpv1").udp_payload;
  cfg.timeout = 300ms;
  auto engine = make_connect_engine(pool, cfg);
  // Spoofers double as canaries: a follow-up to a spoofed source would land here.
  simnet::Canary canary(simnet::spoof_sources(8, 11161));
  const auto locals = udp_local_endpoints(*engine);
  REQUIRE(locals.size() == 2);
  CHECK(simnet::spoof_udp(locals, canary, 40) == 40);
  const auto run = run_unit(whole(space), space, perm, pool, buf, *engine, {});
  REQUIRE(run.results.size() == 1);
  CHECK(run.results[0].dest == Endpoint{Ipv4(127, 32, 0, 9), 11161});
  CHECK(run.rejected.never_probed == 40);
  CHECK(canary.hits() == 0);
}

TEST_CASE("raw SYN engine matches the connect engine") {
  if (!raw_sockets_available()) {
    MESSAGE("raw sockets unavailable; skipped");
    return;
  }
  std::vector<sock::Fd> listeners;
  const std::set<Endpoint> open = {{Ipv4(127, 33, 0, 2), 18090}, {Ipv4(127, 33, 0, 40), 18090}, {Ipv4(127, 33, 0, 63), 18090}};
  for (const auto& ep : open) listeners.push_back(sock::tcp_listen(ep, 16));
  const ipgen::TargetSpace space({Ipv4Range::parse("127.33.0.0/26")}, 18090, "http");
  const auto perm = ipgen::build_permutation(4, space.size());
  const auto pool = SourcePool::loopback(4, 8);
  RecentProbeBuffer buf(256);
  auto engine = make_raw_syn_engine(pool, 41234, 0xabcdef, 300ms);
  RunConfig rc;
  rc.drain_timeout = 500ms;
  const auto run = run_unit(whole(space), space, perm, pool, buf, *engine, rc);
  std::set<Endpoint> found;
  for (const auto& r : run.results) found.insert(r.dest);
  CHECK(found == open);
}

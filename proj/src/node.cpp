#include "recon/node.hpp"

#include <iostream>

#include "recon/error.hpp"

namespace recon::node {

using orchestrator::SteadyClock;
using std::chrono::milliseconds;

orchestrator::NodeRecord LocalLink::register_node(const orchestrator::NodeDescriptor& d) {
  return o_.register_node(d, SteadyClock::now());
}
void LocalLink::heartbeat(const std::string& id) { o_.heartbeat(id, SteadyClock::now()); }
std::optional<orchestrator::Assignment> LocalLink::next_unit(const std::string& id) {
  return o_.next_unit(id, SteadyClock::now());
}
orchestrator::SubmitAck LocalLink::submit(const std::string& id, std::uint64_t unit,
                                          const orchestrator::ResultBatch& batch) {
  return o_.submit_result(id, unit, batch, SteadyClock::now());
}
void LocalLink::abort_unit(const std::string& id, std::uint64_t unit) { o_.abort_unit(id, unit, SteadyClock::now()); }

NodeConfig node_config_from_json(const nlohmann::json& j) {
  NodeConfig c;
  c.node_id = j.value("node_id", "");
  c.site_group = j.value("site_group", "");
  c.bandwidth_class = j.value("bandwidth_class", c.bandwidth_class);
  c.max_pps = j.value("max_pps", 0.0);
  c.buffer_capacity = j.value("buffer_capacity", c.buffer_capacity);
  c.source_pool = j.value("source_pool", c.source_pool);
  c.pool_seed = j.value("pool_seed", c.pool_seed);
  const auto engine = j.value("engine", std::string("connect"));
  if (engine != "connect" && engine != "raw") throw InvalidArgument("engine must be connect or raw");
  c.engine = engine == "raw" ? EngineKind::raw : EngineKind::connect;
  c.raw_source_port = j.value("raw_source_port", c.raw_source_port);
  c.probe_timeout = milliseconds(j.value("probe_timeout_ms", 1000));
  c.heartbeat_interval = milliseconds(j.value("heartbeat_interval_ms", 5000));
  c.grab.connect_timeout = milliseconds(j.value("connect_timeout_ms", 5000));
  c.grab.read_timeout = milliseconds(j.value("read_timeout_ms", 10000));
  c.grab.total_timeout = milliseconds(j.value("total_timeout_ms", 20000));
  c.grab_parallelism = j.value("grab_parallelism", c.grab_parallelism);
  if (c.buffer_capacity == 0) throw InvalidArgument("buffer_capacity must be >= 1");
  return c;
}

ScanNode::ScanNode(NodeConfig config, MasterLink& link, const appscan::HandlerRegistry& registry)
    : cfg_(std::move(config)), link_(link), registry_(registry),
      pool_(probe::SourcePool::parse(cfg_.source_pool, cfg_.pool_seed)) {}

ScanNode::~ScanNode() {
  running_ = false;
  if (worker_.joinable()) worker_.join();
  if (heart_.joinable()) heart_.join();
}

void ScanNode::set_unit_hooks(UnitHook on_start, UnitHook on_end) {
  on_start_ = std::move(on_start);
  on_end_ = std::move(on_end);
}

NodeStats ScanNode::stats() const {
  std::lock_guard lk(mu_);
  return stats_;
}

void ScanNode::ensure_registered() {
  if (!id_.empty()) return;
  auto rec = link_.register_node({cfg_.node_id, cfg_.site_group, cfg_.bandwidth_class});
  id_ = rec.node_id;
  cfg_.grab.node_id = id_;
  cfg_.grab.site_group = cfg_.site_group;
}

void ScanNode::start() {
  ensure_registered();
  running_ = true;
  heart_ = std::thread([this] { heartbeat_loop(); });
  worker_ = std::thread([this] { worker_loop(); });
}

void ScanNode::stop() {
  running_ = false;
  if (worker_.joinable()) worker_.join();
  if (heart_.joinable()) heart_.join();
}

void ScanNode::kill() {
  killed_ = true;
  running_ = false;
  // May be called from a unit hook on the worker thread itself.
  if (std::this_thread::get_id() == worker_.get_id()) return;
  if (worker_.joinable()) worker_.join();
  if (heart_.joinable()) heart_.join();
}

void ScanNode::heartbeat_loop() {
  auto next = SteadyClock::now();
  while (running_ && !killed_) {
    if (SteadyClock::now() >= next) {
      try {
        link_.heartbeat(id_);
      } catch (const std::exception& e) {
        std::cerr << "node " << id_ << ": heartbeat failed: " << e.what() << "\n";
      }
      next = SteadyClock::now() + cfg_.heartbeat_interval;
    }
    std::this_thread::sleep_for(milliseconds(10));
  }
}

void ScanNode::worker_loop() {
  while (running_ && !killed_) {
    bool worked = false;
    try {
      worked = run_one();
    } catch (const Conflict& e) {
      // Declared dead while alive (e.g. a long stall): come back as a new node.
      std::cerr << "node " << id_ << ": " << e.what() << "\n";
      id_.clear();
      ensure_registered();
    } catch (const std::exception& e) {
      std::cerr << "node " << id_ << ": " << e.what() << "\n";
    }
    if (!worked) std::this_thread::sleep_for(cfg_.idle_poll);
  }
}

bool ScanNode::run_one() {
  ensure_registered();
  if (killed_) return false;
  auto a = link_.next_unit(id_);
  if (!a) return false;
  execute(*a);
  return true;
}

void ScanNode::execute(const orchestrator::Assignment& a) {
  const auto& op = a.operation;
  const ipgen::TargetSpace space(op.ranges, op.port, op.protocol_id);
  const auto perm = ipgen::build_permutation(op.seed, space.size(), op.rounds);
  const auto handler = registry_.resolve(op.protocol_id);

  std::unique_ptr<probe::ProbeEngine> engine;
  try {
    if (cfg_.engine == EngineKind::raw) {
      if (handler.transport == appscan::Transport::udp) throw InvalidArgument("raw engine is TCP only");
      engine = probe::make_raw_syn_engine(pool_, cfg_.raw_source_port, op.seed ^ a.unit.unit_id, cfg_.probe_timeout);
    } else {
      probe::ConnectEngineConfig ec;
      ec.transport = handler.transport == appscan::Transport::udp ? probe::ProbeTransport::udp : probe::ProbeTransport::tcp;
      ec.udp_payload = handler.udp_payload;
      ec.timeout = cfg_.probe_timeout;
      engine = probe::make_connect_engine(pool_, ec);
    }
  } catch (const TransportError&) {
    link_.abort_unit(id_, a.unit.unit_id);
    std::lock_guard lk(mu_);
    ++stats_.units_aborted;
    return;
  }

  if (on_start_) on_start_(*engine, a);
  probe::RecentProbeBuffer buffer(cfg_.buffer_capacity);
  probe::RunConfig rc;
  rc.max_pps = cfg_.max_pps;
  rc.drain_timeout = cfg_.drain_timeout;
  rc.cancel = &killed_;
  probe::UnitRun run;
  try {
    run = probe::run_unit(a.unit, space, perm, pool_, buffer, *engine, rc);
  } catch (const TransportError& e) {
    std::cerr << "node " << id_ << ": unit " << a.unit.unit_id << " aborted: " << e.what() << "\n";
    if (on_end_) on_end_(*engine, a);
    link_.abort_unit(id_, a.unit.unit_id);
    std::lock_guard lk(mu_);
    ++stats_.units_aborted;
    return;
  }
  if (on_end_) on_end_(*engine, a);
  if (run.cancelled || killed_) return;  // crashed: the master will notice

  std::vector<Endpoint> responders;
  for (const auto& r : run.results) responders.push_back(r.dest);
  auto records = appscan::grab_all(responders, handler, cfg_.grab, cfg_.grab_parallelism);
  if (killed_) return;

  orchestrator::ResultBatch batch;
  batch.probed.reserve(run.probed.size());
  for (const auto& ep : run.probed) batch.probed.push_back(ep.ip);
  for (const auto& r : records) batch.records.push_back(appscan::to_json(r));
  {
    std::lock_guard lk(mu_);
    stats_.probes_sent += run.probed.size();
    stats_.responders += run.results.size();
    stats_.grabs += responders.size();
    stats_.rejected.never_probed += run.rejected.never_probed;
    stats_.rejected.evicted += run.rejected.evicted;
    stats_.rejected.wrong_source += run.rejected.wrong_source;
  }
  try {
    const auto ack = link_.submit(id_, a.unit.unit_id, batch);
    std::lock_guard lk(mu_);
    ++(ack.late ? stats_.units_lost : stats_.units_completed);
  } catch (const Conflict&) {
    std::lock_guard lk(mu_);
    ++stats_.units_lost;
  }
}

}  // namespace recon::node

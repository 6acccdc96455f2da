#pragma once

// Scan node: pulls units from the master, probes them, grabs validated
// responders and submits the records.

#include <atomic>
#include <chrono>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "recon/appscan.hpp"
#include "recon/orchestrator.hpp"
#include "recon/probe.hpp"

namespace recon::node {

// The node's view of the master; implemented in-process and over HTTP.
class MasterLink {
 public:
  virtual ~MasterLink() = default;
  virtual orchestrator::NodeRecord register_node(const orchestrator::NodeDescriptor& d) = 0;
  virtual void heartbeat(const std::string& node_id) = 0;
  virtual std::optional<orchestrator::Assignment> next_unit(const std::string& node_id) = 0;
  virtual orchestrator::SubmitAck submit(const std::string& node_id, std::uint64_t unit_id,
                                         const orchestrator::ResultBatch& batch) = 0;
  virtual void abort_unit(const std::string& node_id, std::uint64_t unit_id) = 0;
};

class LocalLink final : public MasterLink {
 public:
  explicit LocalLink(orchestrator::Orchestrator& o) : o_(o) {}
  orchestrator::NodeRecord register_node(const orchestrator::NodeDescriptor& d) override;
  void heartbeat(const std::string& node_id) override;
  std::optional<orchestrator::Assignment> next_unit(const std::string& node_id) override;
  orchestrator::SubmitAck submit(const std::string& node_id, std::uint64_t unit_id,
                                 const orchestrator::ResultBatch& batch) override;
  void abort_unit(const std::string& node_id, std::uint64_t unit_id) override;

 private:
  orchestrator::Orchestrator& o_;
};

enum class EngineKind { connect, raw };

struct NodeConfig {
  std::string node_id;  // empty: assigned by master
  std::string site_group;
  std::string bandwidth_class = "standard";
  double max_pps = 0;
  std::size_t buffer_capacity = probe::kDefaultBufferCapacity;
  std::string source_pool = "127.64.0.1/24";
  std::uint64_t pool_seed = 0x5eed;
  EngineKind engine = EngineKind::connect;
  std::uint16_t raw_source_port = 40000;
  std::chrono::milliseconds probe_timeout{1000};
  std::chrono::milliseconds drain_timeout{1500};
  std::chrono::milliseconds heartbeat_interval{5000};
  std::chrono::milliseconds idle_poll{50};
  appscan::GrabConfig grab;
  std::size_t grab_parallelism = 32;
};

// Node config file: JSON with the keys above plus orchestrator_url and
// node_token (consumed by the CLI).
NodeConfig node_config_from_json(const nlohmann::json& j);

struct NodeStats {
  std::uint64_t units_completed = 0;
  std::uint64_t units_aborted = 0;
  std::uint64_t units_lost = 0;  // submitted after reassignment, kept as late
  std::uint64_t probes_sent = 0;
  std::uint64_t responders = 0;
  std::uint64_t grabs = 0;       // follow-up connections, one per validated responder
  probe::RejectCounts rejected;
};

class ScanNode {
 public:
  using UnitHook = std::function<void(probe::ProbeEngine&, const orchestrator::Assignment&)>;

  ScanNode(NodeConfig config, MasterLink& link, const appscan::HandlerRegistry& registry);
  ~ScanNode();
  ScanNode(const ScanNode&) = delete;
  ScanNode& operator=(const ScanNode&) = delete;

  const std::string& id() const { return id_; }
  void start();  // background worker + heartbeat
  void stop();   // finish the current unit, then exit
  void kill();   // crash: stop heartbeats, abandon the current unit unsubmitted
  bool killed() const { return killed_.load(); }

  // Pull and execute one unit synchronously. False when none was available.
  bool run_one();

  NodeStats stats() const;
  // Called once the engine exists, before the first probe; and after the sweep.
  void set_unit_hooks(UnitHook on_start, UnitHook on_end);

 private:
  void ensure_registered();
  void execute(const orchestrator::Assignment& a);
  void heartbeat_loop();
  void worker_loop();

  NodeConfig cfg_;
  MasterLink& link_;
  const appscan::HandlerRegistry& registry_;
  probe::SourcePool pool_;
  std::string id_;
  std::atomic<bool> running_{false};
  std::atomic<bool> killed_{false};
  std::thread worker_, heart_;
  mutable std::mutex mu_;
  NodeStats stats_;
  UnitHook on_start_, on_end_;
};

}  // namespace recon::node

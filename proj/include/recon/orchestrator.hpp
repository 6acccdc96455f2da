#pragma once

// Scan master state machine: node registry, unit assignment, heartbeat-driven
// failure detection and reassignment. Every mutation holds one lock, so the
// observable history is a serial order of calls.

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "recon/ipgen.hpp"

namespace recon::orchestrator {

using SteadyClock = std::chrono::steady_clock;
using TimePoint = SteadyClock::time_point;
using Duration = SteadyClock::duration;

struct Config {
  Duration heartbeat_interval = std::chrono::seconds(5);
  Duration suspect_timeout = std::chrono::seconds(15);
  Duration dead_timeout = std::chrono::seconds(60);
  std::uint32_t attempt_cap = 5;
  bool allow_public_targets = false;  // set only with an explicit authorization flag
};

enum class NodeState { active, suspect, dead };
std::string to_string(NodeState s);

struct NodeDescriptor {
  std::string node_id;  // generated when empty
  std::string site_group;
  std::string bandwidth_class;
};

struct NodeRecord {
  std::string node_id;
  std::string site_group;
  std::string bandwidth_class;
  TimePoint last_heartbeat{};
  NodeState state = NodeState::active;
  std::set<std::uint64_t> assigned_units;
};

struct OperationSpec {
  std::vector<Ipv4Range> ranges;
  std::uint16_t port = 0;
  std::string protocol_id;
  std::uint64_t seed = 0;
  std::uint64_t unit_size = ipgen::kDefaultUnitSize;
  int rounds = ipgen::kDefaultRounds;
  std::vector<std::string> site_groups;  // empty: one ungrouped pass
};

struct GroupProgress {
  std::uint64_t completed = 0;
  std::uint64_t total = 0;
};

struct OperationStatus {
  std::string operation_id;
  std::uint64_t total = 0;
  std::uint64_t pending = 0;
  std::uint64_t assigned = 0;
  std::uint64_t completed = 0;
  std::uint64_t failed = 0;
  std::chrono::system_clock::time_point started_at{};
  std::optional<std::chrono::system_clock::time_point> finished_at;
  std::map<std::string, GroupProgress> per_group;
  std::vector<std::uint64_t> failed_units;

  bool finished() const { return finished_at.has_value(); }
};

// What a node reports for one unit. `records` are ServiceRecord documents.
struct ResultBatch {
  std::vector<Ipv4> probed;
  std::vector<nlohmann::json> records;
};

struct SubmitAck {
  bool accepted = false;
  bool duplicate = false;
  bool late = false;  // unit had been taken away; records kept, unit state untouched
};

// Unit plus the operation parameters a node needs to execute it.
struct Assignment {
  ipgen::WorkUnit unit;
  OperationSpec operation;
};

struct CatalogEntry {
  std::string protocol_id;
  std::uint16_t port = 0;
};

std::vector<CatalogEntry> parse_catalog(const nlohmann::json& doc);
std::vector<CatalogEntry> load_catalog(const std::string& path);

class Orchestrator {
 public:
  using ResultSink =
      std::function<void(const ipgen::WorkUnit&, const std::string& node_id, const ResultBatch&, bool late)>;

  explicit Orchestrator(Config config = {});

  std::string create_operation(const OperationSpec& spec);
  std::vector<std::string> create_catalog_operations(const std::vector<CatalogEntry>& catalog,
                                                     const OperationSpec& base);

  NodeRecord register_node(const NodeDescriptor& descriptor, TimePoint now);
  std::optional<Assignment> next_unit(const std::string& node_id, TimePoint now);
  SubmitAck submit_result(const std::string& node_id, std::uint64_t unit_id,
                          const ResultBatch& batch, TimePoint now);
  void heartbeat(const std::string& node_id, TimePoint now);
  // Node gives a unit back (transport failure). Counts as an attempt.
  void abort_unit(const std::string& node_id, std::uint64_t unit_id, TimePoint now);
  std::vector<std::uint64_t> detect_failures(TimePoint now);

  OperationStatus status(const std::string& operation_id) const;
  OperationSpec operation_spec(const std::string& operation_id) const;
  std::vector<std::string> operation_ids() const;
  NodeRecord node(const std::string& node_id) const;
  std::vector<NodeRecord> nodes() const;
  ipgen::WorkUnit unit(std::uint64_t unit_id) const;
  std::vector<ipgen::WorkUnit> units(const std::string& operation_id) const;
  bool has_unit(std::uint64_t unit_id) const;

  // Accepted batches in arrival order.
  struct LoggedResult {
    ipgen::WorkUnit unit;
    std::string node_id;
    ResultBatch batch;
  };
  std::vector<LoggedResult> result_log(const std::string& operation_id) const;
  // Batches from former assignees that arrived after reassignment.
  std::vector<LoggedResult> late_results(const std::string& operation_id) const;

  void set_result_sink(ResultSink sink);
  const Config& config() const { return config_; }

 private:
  struct Operation {
    std::string id;
    OperationSpec spec;
    std::uint64_t space_size = 0;
    std::vector<std::uint64_t> unit_ids;
    std::map<std::string, std::set<std::uint64_t>> pending;  // by site group
    std::chrono::system_clock::time_point started_at;
    std::optional<std::chrono::system_clock::time_point> finished_at;
  };

  NodeRecord& node_locked(const std::string& node_id);
  void touch_locked(NodeRecord& node, TimePoint now);
  void release_unit_locked(ipgen::WorkUnit& unit);
  void update_finished_locked(Operation& op);
  OperationStatus status_locked(const Operation& op) const;

  Config config_;
  mutable std::mutex mutex_;
  std::vector<Operation> operations_;  // creation order
  std::map<std::string, std::size_t> op_index_;
  std::map<std::uint64_t, ipgen::WorkUnit> units_;
  std::map<std::string, NodeRecord> nodes_;
  std::map<std::string, std::vector<LoggedResult>> results_;
  std::map<std::string, std::vector<LoggedResult>> late_;
  std::map<std::uint64_t, std::set<std::string>> past_assignees_;
  ResultSink sink_;
  std::uint64_t next_unit_id_ = 1;
  std::uint64_t next_op_ = 1;
  std::uint64_t next_node_ = 1;
};

void to_json(nlohmann::json& j, const OperationSpec& spec);
OperationSpec operation_spec_from_json(const nlohmann::json& j);
nlohmann::json status_to_json(const OperationStatus& status);
nlohmann::json unit_to_json(const ipgen::WorkUnit& unit);
ipgen::WorkUnit unit_from_json(const nlohmann::json& j);
nlohmann::json node_to_json(const NodeRecord& node, TimePoint now);

}  // namespace recon::orchestrator

#include "recon/orchestrator.hpp"

#include <algorithm>

#include <fstream>

#include "recon/error.hpp"

namespace recon::orchestrator {

using nlohmann::json;

std::string to_string(NodeState s) {
  switch (s) {
    case NodeState::active: return "active";
    case NodeState::suspect: return "suspect";
    case NodeState::dead: return "dead";
  }
  return "unknown";
}

std::vector<CatalogEntry> parse_catalog(const json& doc) {
  if (!doc.is_array()) throw InvalidArgument("catalog must be a JSON list");
  std::vector<CatalogEntry> out;
  for (const auto& item : doc) {
    CatalogEntry e;
    e.protocol_id = item.at("protocol_id").get<std::string>();
    const int port = item.at("port").get<int>();
    if (port < 1 || port > 65535) throw InvalidArgument("catalog port out of range");
    e.port = static_cast<std::uint16_t>(port);
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<CatalogEntry> load_catalog(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NotFound("cannot open catalog " + path);
  return parse_catalog(json::parse(in));
}

Orchestrator::Orchestrator(Config config) : config_(std::move(config)) {
  if (config_.suspect_timeout >= config_.dead_timeout) {
    throw InvalidArgument("suspect_timeout must be shorter than dead_timeout");
  }
  if (config_.attempt_cap == 0) throw InvalidArgument("attempt_cap must be >= 1");
}

std::string Orchestrator::create_operation(const OperationSpec& spec) {
  // Constructing the space validates ranges, port and overlap.
  const ipgen::TargetSpace space(spec.ranges, spec.port, spec.protocol_id);
  if (spec.protocol_id.empty()) throw InvalidArgument("operation needs a protocol_id");
  if (!config_.allow_public_targets) {
    for (const auto& r : space.ranges()) {
      if (!is_private_or_loopback(r)) {
        throw InvalidArgument("range " + r.to_string() +
                              " is outside loopback/RFC1918; scanning it requires explicit "
                              "authorization (--i-am-authorized)");
      }
    }
  }
  std::set<std::string> groups(spec.site_groups.begin(), spec.site_groups.end());
  if (groups.size() != spec.site_groups.size()) throw InvalidArgument("duplicate site group");
  if (groups.empty()) groups.insert("");
  const auto slices = ipgen::split_work_units(space, spec.unit_size);

  std::lock_guard lock(mutex_);
  Operation op;
  op.id = "op-" + std::to_string(next_op_++);
  op.spec = spec;
  op.space_size = space.size();
  op.started_at = std::chrono::system_clock::now();
  for (const auto& group : groups) {
    for (const auto& slice : slices) {
      ipgen::WorkUnit u = slice;
      u.unit_id = next_unit_id_++;
      u.operation_id = op.id;
      u.site_group = group;
      op.unit_ids.push_back(u.unit_id);
      op.pending[group].insert(u.unit_id);
      units_.emplace(u.unit_id, std::move(u));
    }
  }
  op_index_[op.id] = operations_.size();
  const auto id = op.id;
  operations_.push_back(std::move(op));
  return id;
}

std::vector<std::string> Orchestrator::create_catalog_operations(
    const std::vector<CatalogEntry>& catalog, const OperationSpec& base) {
  std::vector<std::string> ids;
  std::uint64_t i = 0;
  for (const auto& entry : catalog) {
    OperationSpec spec = base;
    spec.protocol_id = entry.protocol_id;
    spec.port = entry.port;
    spec.seed = ipgen::mix64(base.seed + ++i);
    ids.push_back(create_operation(spec));
  }
  return ids;
}

NodeRecord Orchestrator::register_node(const NodeDescriptor& d, TimePoint now) {
  std::lock_guard lock(mutex_);
  NodeRecord rec;
  rec.node_id = d.node_id.empty() ? "node-" + std::to_string(next_node_++) : d.node_id;
  if (auto it = nodes_.find(rec.node_id); it != nodes_.end()) {
    if (it->second.state != NodeState::dead) {
      throw Conflict("node id '" + rec.node_id + "' already registered");
    }
  }
  rec.site_group = d.site_group;
  rec.bandwidth_class = d.bandwidth_class;
  rec.last_heartbeat = now;
  nodes_[rec.node_id] = rec;
  return rec;
}

NodeRecord& Orchestrator::node_locked(const std::string& node_id) {
  auto it = nodes_.find(node_id);
  if (it == nodes_.end()) throw Unauthorized("unknown node '" + node_id + "'");
  return it->second;
}

void Orchestrator::touch_locked(NodeRecord& node, TimePoint now) {
  if (node.state == NodeState::dead) {
    throw Conflict("node '" + node.node_id + "' was declared dead; register again");
  }
  node.last_heartbeat = std::max(node.last_heartbeat, now);
  node.state = NodeState::active;
}

void Orchestrator::heartbeat(const std::string& node_id, TimePoint now) {
  std::lock_guard lock(mutex_);
  touch_locked(node_locked(node_id), now);
}

std::optional<Assignment> Orchestrator::next_unit(const std::string& node_id, TimePoint now) {
  std::lock_guard lock(mutex_);
  auto& node = node_locked(node_id);
  touch_locked(node, now);
  for (auto& op : operations_) {
    for (const auto& group : {std::string{}, node.site_group}) {
      auto it = op.pending.find(group);
      if (it == op.pending.end() || it->second.empty()) continue;
      const auto unit_id = *it->second.begin();
      it->second.erase(it->second.begin());
      auto& unit = units_.at(unit_id);
      unit.state = ipgen::UnitState::assigned;
      unit.assigned_node = node.node_id;
      node.assigned_units.insert(unit_id);
      return Assignment{unit, op.spec};
    }
  }
  return std::nullopt;
}

SubmitAck Orchestrator::submit_result(const std::string& node_id, std::uint64_t unit_id,
                                      const ResultBatch& batch, TimePoint now) {
  ResultSink sink;
  ipgen::WorkUnit snapshot;
  bool late = false;
  {
    std::lock_guard lock(mutex_);
    auto& node = node_locked(node_id);
    auto it = units_.find(unit_id);
    if (it == units_.end()) throw NotFound("unknown unit " + std::to_string(unit_id));
    auto& unit = it->second;
    auto& op = operations_.at(op_index_.at(unit.operation_id));
    const bool mine = unit.assigned_node == node_id;
    if (unit.state == ipgen::UnitState::completed && mine) return {true, true, false};
    const auto past = past_assignees_.find(unit_id);
    if (!(mine && unit.state == ipgen::UnitState::assigned) && past != past_assignees_.end() &&
        past->second.count(node_id)) {
      // Former assignee finishing after reassignment: retain for downstream dedup.
      auto& log = late_[op.id];
      const bool seen = std::any_of(log.begin(), log.end(), [&](const LoggedResult& r) {
        return r.unit.unit_id == unit_id && r.node_id == node_id;
      });
      if (seen) return {false, true, true};
      log.push_back({unit, node_id, batch});
      late = true;
    } else {
      if (unit.state == ipgen::UnitState::completed) return {true, true, false};
      touch_locked(node, now);
      if (unit.state != ipgen::UnitState::assigned || !mine) {
        throw Conflict("unit " + std::to_string(unit_id) + " is not assigned to " + node_id);
      }
      unit.state = ipgen::UnitState::completed;
      node.assigned_units.erase(unit_id);
      results_[op.id].push_back({unit, node_id, batch});
      update_finished_locked(op);
    }
    sink = sink_;
    snapshot = unit;
  }
  if (sink) sink(snapshot, node_id, batch, late);
  return {!late, false, late};
}

void Orchestrator::abort_unit(const std::string& node_id, std::uint64_t unit_id, TimePoint now) {
  std::lock_guard lock(mutex_);
  auto& node = node_locked(node_id);
  auto it = units_.find(unit_id);
  if (it == units_.end()) throw NotFound("unknown unit " + std::to_string(unit_id));
  auto& unit = it->second;
  if (unit.state != ipgen::UnitState::assigned || unit.assigned_node != node_id) {
    throw Conflict("unit " + std::to_string(unit_id) + " is not assigned to " + node_id);
  }
  touch_locked(node, now);
  node.assigned_units.erase(unit_id);
  release_unit_locked(unit);
}

void Orchestrator::release_unit_locked(ipgen::WorkUnit& unit) {
  if (unit.assigned_node) past_assignees_[unit.unit_id].insert(*unit.assigned_node);
  unit.assigned_node.reset();
  ++unit.attempt_count;
  auto& op = operations_.at(op_index_.at(unit.operation_id));
  if (unit.attempt_count >= config_.attempt_cap) {
    unit.state = ipgen::UnitState::failed;
    update_finished_locked(op);
  } else {
    unit.state = ipgen::UnitState::pending;
    op.pending[unit.site_group].insert(unit.unit_id);
  }
}

std::vector<std::uint64_t> Orchestrator::detect_failures(TimePoint now) {
  std::lock_guard lock(mutex_);
  std::vector<std::uint64_t> reassigned;
  for (auto& [id, node] : nodes_) {
    if (node.state == NodeState::dead) continue;
    const auto silent = now - node.last_heartbeat;
    if (silent >= config_.dead_timeout) {
      node.state = NodeState::dead;
      for (auto unit_id : node.assigned_units) {
        auto& unit = units_.at(unit_id);
        release_unit_locked(unit);
        if (unit.state == ipgen::UnitState::pending) reassigned.push_back(unit_id);
      }
      node.assigned_units.clear();
    } else if (silent >= config_.suspect_timeout) {
      node.state = NodeState::suspect;
    }
  }
  return reassigned;
}

void Orchestrator::update_finished_locked(Operation& op) {
  if (op.finished_at) return;
  for (auto id : op.unit_ids) {
    if (units_.at(id).state != ipgen::UnitState::completed) return;
  }
  op.finished_at = std::chrono::system_clock::now();
}

OperationStatus Orchestrator::status_locked(const Operation& op) const {
  OperationStatus s;
  s.operation_id = op.id;
  s.started_at = op.started_at;
  s.finished_at = op.finished_at;
  for (auto id : op.unit_ids) {
    const auto& u = units_.at(id);
    ++s.total;
    auto& g = s.per_group[u.site_group];
    ++g.total;
    switch (u.state) {
      case ipgen::UnitState::pending: ++s.pending; break;
      case ipgen::UnitState::assigned: ++s.assigned; break;
      case ipgen::UnitState::completed: ++s.completed; ++g.completed; break;
      case ipgen::UnitState::failed: ++s.failed; s.failed_units.push_back(id); break;
    }
  }
  return s;
}

OperationStatus Orchestrator::status(const std::string& operation_id) const {
  std::lock_guard lock(mutex_);
  auto it = op_index_.find(operation_id);
  if (it == op_index_.end()) throw NotFound("unknown operation '" + operation_id + "'");
  return status_locked(operations_[it->second]);
}

OperationSpec Orchestrator::operation_spec(const std::string& operation_id) const {
  std::lock_guard lock(mutex_);
  auto it = op_index_.find(operation_id);
  if (it == op_index_.end()) throw NotFound("unknown operation '" + operation_id + "'");
  return operations_[it->second].spec;
}

std::vector<std::string> Orchestrator::operation_ids() const {
  std::lock_guard lock(mutex_);
  std::vector<std::string> ids;
  for (const auto& op : operations_) ids.push_back(op.id);
  return ids;
}

NodeRecord Orchestrator::node(const std::string& node_id) const {
  std::lock_guard lock(mutex_);
  auto it = nodes_.find(node_id);
  if (it == nodes_.end()) throw NotFound("unknown node '" + node_id + "'");
  return it->second;
}

std::vector<NodeRecord> Orchestrator::nodes() const {
  std::lock_guard lock(mutex_);
  std::vector<NodeRecord> out;
  for (const auto& [id, n] : nodes_) out.push_back(n);
  return out;
}

ipgen::WorkUnit Orchestrator::unit(std::uint64_t unit_id) const {
  std::lock_guard lock(mutex_);
  auto it = units_.find(unit_id);
  if (it == units_.end()) throw NotFound("unknown unit " + std::to_string(unit_id));
  return it->second;
}

bool Orchestrator::has_unit(std::uint64_t unit_id) const {
  std::lock_guard lock(mutex_);
  return units_.contains(unit_id);
}

std::vector<ipgen::WorkUnit> Orchestrator::units(const std::string& operation_id) const {
  std::lock_guard lock(mutex_);
  auto it = op_index_.find(operation_id);
  if (it == op_index_.end()) throw NotFound("unknown operation '" + operation_id + "'");
  std::vector<ipgen::WorkUnit> out;
  for (auto id : operations_[it->second].unit_ids) out.push_back(units_.at(id));
  return out;
}

std::vector<Orchestrator::LoggedResult> Orchestrator::result_log(
    const std::string& operation_id) const {
  std::lock_guard lock(mutex_);
  auto it = results_.find(operation_id);
  if (it == results_.end()) return {};
  return it->second;
}

std::vector<Orchestrator::LoggedResult> Orchestrator::late_results(const std::string& operation_id) const {
  std::lock_guard lock(mutex_);
  auto it = late_.find(operation_id);
  if (it == late_.end()) return {};
  return it->second;
}

void Orchestrator::set_result_sink(ResultSink sink) {
  std::lock_guard lock(mutex_);
  sink_ = std::move(sink);
}

// JSON wire forms.

void to_json(json& j, const OperationSpec& spec) {
  json ranges = json::array();
  for (const auto& r : spec.ranges) ranges.push_back(r.to_string());
  j = json{{"ranges", ranges},
           {"port", spec.port},
           {"protocol_id", spec.protocol_id},
           {"seed", spec.seed},
           {"unit_size", spec.unit_size},
           {"rounds", spec.rounds},
           {"site_groups", spec.site_groups}};
}

OperationSpec operation_spec_from_json(const json& j) {
  OperationSpec spec;
  try {
    for (const auto& r : j.at("ranges")) spec.ranges.push_back(Ipv4Range::parse(r.get<std::string>()));
    const int port = j.at("port").get<int>();
    if (port < 1 || port > 65535) throw InvalidArgument("port must be in 1-65535");
    spec.port = static_cast<std::uint16_t>(port);
    spec.protocol_id = j.at("protocol_id").get<std::string>();
    spec.seed = j.value("seed", std::uint64_t{0});
    spec.unit_size = j.value("unit_size", ipgen::kDefaultUnitSize);
    spec.rounds = j.value("rounds", ipgen::kDefaultRounds);
    spec.site_groups = j.value("site_groups", std::vector<std::string>{});
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("malformed operation: ") + e.what());
  }
  return spec;
}

static std::string iso8601(std::chrono::system_clock::time_point tp) {
  const auto t = std::chrono::system_clock::to_time_t(tp);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json status_to_json(const OperationStatus& s) {
  json groups = json::object();
  for (const auto& [g, p] : s.per_group) groups[g] = {{"completed", p.completed}, {"total", p.total}};
  json j{{"operation_id", s.operation_id},
         {"total", s.total},
         {"pending", s.pending},
         {"assigned", s.assigned},
         {"completed", s.completed},
         {"failed", s.failed},
         {"failed_units", s.failed_units},
         {"finished", s.finished()},
         {"started_at", iso8601(s.started_at)},
         {"per_site_group", groups}};
  j["finished_at"] = s.finished_at ? json(iso8601(*s.finished_at)) : json(nullptr);
  return j;
}

json unit_to_json(const ipgen::WorkUnit& u) {
  json j{{"unit_id", u.unit_id},
         {"operation_id", u.operation_id},
         {"start_index", u.start_index},
         {"end_index", u.end_index},
         {"state", ipgen::to_string(u.state)},
         {"attempt_count", u.attempt_count},
         {"site_group", u.site_group}};
  j["assigned_node"] = u.assigned_node ? json(*u.assigned_node) : json(nullptr);
  return j;
}

ipgen::WorkUnit unit_from_json(const json& j) {
  ipgen::WorkUnit u;
  u.unit_id = j.at("unit_id").get<std::uint64_t>();
  u.operation_id = j.at("operation_id").get<std::string>();
  u.start_index = j.at("start_index").get<std::uint64_t>();
  u.end_index = j.at("end_index").get<std::uint64_t>();
  u.state = ipgen::unit_state_from_string(j.value("state", std::string("assigned")));
  u.attempt_count = j.value("attempt_count", 0u);
  u.site_group = j.value("site_group", std::string{});
  if (j.contains("assigned_node") && j["assigned_node"].is_string()) {
    u.assigned_node = j["assigned_node"].get<std::string>();
  }
  return u;
}

json node_to_json(const NodeRecord& n, TimePoint now) {
  const auto silent = std::chrono::duration_cast<std::chrono::milliseconds>(now - n.last_heartbeat);
  return json{{"node_id", n.node_id},
              {"site_group", n.site_group},
              {"bandwidth_class", n.bandwidth_class},
              {"state", to_string(n.state)},
              {"silent_ms", silent.count()},
              {"assigned_units", n.assigned_units}};
}

}  // namespace recon::orchestrator

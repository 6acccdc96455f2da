#include "recon/harness.hpp"

#include <atomic>
#include <map>
#include <memory>
#include <set>
#include <thread>

#include "recon/api.hpp"
#include "recon/error.hpp"

namespace recon::harness {

using nlohmann::json;
using namespace std::chrono_literals;

orchestrator::Config fast_timers() {
  orchestrator::Config c;
  c.heartbeat_interval = 100ms;
  c.suspect_timeout = 400ms;
  c.dead_timeout = 1200ms;
  c.attempt_cap = 5;
  return c;
}

bool Result::coverage_exact() const {
  if (coverage.empty()) return false;
  for (const auto& c : coverage)
    if (!c.exact()) return false;
  return true;
}

json Result::to_json() const {
  json cov = json::array();
  for (const auto& c : coverage)
    cov.push_back({{"operation_id", c.operation_id},
                   {"site_group", c.site_group},
                   {"expected", c.expected},
                   {"distinct", c.distinct},
                   {"duplicates", c.duplicates},
                   {"outside", c.outside},
                   {"exact", c.exact()}});
  return {{"scenario", scenario},
          {"finished", finished},
          {"elapsed_ms", std::chrono::duration_cast<std::chrono::milliseconds>(elapsed).count()},
          {"operation_ids", operation_ids},
          {"coverage", cov},
          {"coverage_exact", coverage_exact()},
          {"records", records.size()},
          {"manifest_entries", manifest.size()},
          {"manifest_ok", manifest_check.ok()},
          {"manifest_problems", manifest_check.problems},
          {"killed_nodes", killed_nodes},
          {"units_total", units_total},
          {"units_reassigned", units_reassigned},
          {"units_failed", units_failed},
          {"spoofs_sent", spoofs_sent},
          {"spoofs_accepted", spoofs_accepted},
          {"canary_hits", canary_hits},
          {"rejected",
           {{"never_probed", rejected.never_probed},
            {"evicted", rejected.evicted},
            {"wrong_source", rejected.wrong_source}}},
          {"probes_sent", probes_sent},
          {"responders", responders},
          {"grabs", grabs}};
}

ManifestCheck check_manifest(const std::vector<simnet::ManifestEntry>& manifest,
                             const std::vector<appscan::ServiceRecord>& records,
                             const std::vector<std::string>& groups_in) {
  const std::vector<std::string> groups = groups_in.empty() ? std::vector<std::string>{""} : groups_in;
  ManifestCheck out;
  using Key = std::tuple<std::string, Ipv4, std::uint16_t, std::string>;
  std::map<Key, std::vector<const appscan::ServiceRecord*>> by_key;
  for (const auto& r : records) by_key[{r.site_group, r.ip, r.port, r.protocol_id}].push_back(&r);

  std::set<Key> expected_keys;
  for (const auto& g : groups) {
    for (const auto& m : manifest) {
      ++out.expected;
      const Key k{g, m.endpoint.ip, m.endpoint.port, m.protocol_id};
      expected_keys.insert(k);
      const std::string where = m.endpoint.to_string() + "/" + m.protocol_id + (g.empty() ? "" : " [" + g + "]");
      auto it = by_key.find(k);
      if (it == by_key.end()) {
        out.problems.push_back(where + ": missing");
        continue;
      }
      if (it->second.size() != 1) {
        out.problems.push_back(where + ": reported " + std::to_string(it->second.size()) + " times");
        continue;
      }
      const auto& r = *it->second.front();
      if (r.banner != m.banner) {
        out.problems.push_back(where + ": banner differs");
        continue;
      }
      if (r.silent != m.silent) {
        out.problems.push_back(where + ": silent flag differs");
        continue;
      }
      if (m.tls) {
        if (!r.tls || r.tls->empty() || r.tls->front().subject_cn != m.tls->cn || r.tls->front().sans != m.tls->sans) {
          out.problems.push_back(where + ": certificate differs");
          continue;
        }
      } else if (r.tls) {
        out.problems.push_back(where + ": unexpected certificate");
        continue;
      }
      ++out.matched;
    }
  }
  for (const auto& [k, v] : by_key)
    if (!expected_keys.contains(k))
      out.problems.push_back(std::get<1>(k).to_string() + ":" + std::to_string(std::get<2>(k)) + ": not in manifest");
  return out;
}

namespace {

struct SpoofPlan {
  appscan::Transport transport = appscan::Transport::tcp;
  std::uint64_t count = 0;
  std::vector<Endpoint> sources;
  std::unique_ptr<simnet::Canary> canary;
  std::atomic<bool> claimed{false};
  std::atomic<std::uint64_t> sent{0};
};

struct NodeSlot {
  std::unique_ptr<node::MasterLink> link;
  std::unique_ptr<node::ScanNode> node;
  std::unique_ptr<probe::SourcePool> pool;  // same selection as the node's own
  std::thread spoofer;
  bool kill_on_first = false;
};

bool all_settled(orchestrator::Orchestrator& orch) {
  for (const auto& id : orch.operation_ids()) {
    const auto s = orch.status(id);
    if (s.pending > 0 || s.assigned > 0) return false;
  }
  return true;
}

}  // namespace

Result run_scenario(const simnet::Scenario& sc, const appscan::HandlerRegistry& registry, const Options& opt) {
  if (sc.nodes == 0) throw InvalidArgument("scenario needs at least one node");
  if (sc.kill_nodes >= sc.nodes) throw InvalidArgument("kill_nodes must leave a survivor");
  const auto t0 = std::chrono::steady_clock::now();
  Result res;
  res.scenario = sc.name;

  simnet::SimNet net(sc.services, registry);
  res.manifest = net.manifest();

  orchestrator::Orchestrator orch(opt.orchestrator);
  std::map<std::string, std::unique_ptr<SpoofPlan>> spoofs;
  for (std::size_t i = 0; i < sc.operations.size(); ++i) {
    const auto& t = sc.operations[i];
    orchestrator::OperationSpec spec;
    spec.ranges = sc.ranges;
    spec.port = t.port;
    spec.protocol_id = t.protocol_id;
    spec.seed = sc.seed;
    spec.unit_size = sc.unit_size;
    spec.site_groups = sc.site_groups;
    const auto id = orch.create_operation(spec);
    res.operation_ids.push_back(id);
    if (sc.spoofs > 0) {
      auto plan = std::make_unique<SpoofPlan>();
      plan->transport = registry.resolve(t.protocol_id).transport;
      plan->count = sc.spoofs / sc.operations.size() + (i < sc.spoofs % sc.operations.size() ? 1 : 0);
      plan->sources = simnet::spoof_sources(50, t.port);
      plan->canary = std::make_unique<simnet::Canary>(plan->sources);
      spoofs.emplace(id, std::move(plan));
    }
  }

  std::unique_ptr<api::ApiServer> server;
  if (opt.over_http) {
    api::ServerOptions so;
    so.node_token = opt.node_token;
    server = std::make_unique<api::ApiServer>(orch, so);
  }

  std::vector<std::unique_ptr<NodeSlot>> slots;
  for (std::size_t i = 0; i < sc.nodes; ++i) {
    auto slot = std::make_unique<NodeSlot>();
    node::NodeConfig cfg;
    cfg.site_group = sc.site_groups.empty() ? "" : sc.site_groups[i % sc.site_groups.size()];
    cfg.max_pps = sc.max_pps;
    cfg.source_pool = "127.64." + std::to_string(i) + ".1/28";
    cfg.pool_seed = sc.seed * 131 + i;
    cfg.engine = opt.engine;
    cfg.probe_timeout = opt.probe_timeout;
    cfg.drain_timeout = opt.drain_timeout;
    cfg.heartbeat_interval = opt.node_heartbeat;
    cfg.grab.connect_timeout = opt.grab_connect;
    cfg.grab.read_timeout = opt.grab_read;
    cfg.grab.total_timeout = opt.grab_total;
    cfg.grab.site_group = cfg.site_group;
    slot->pool = std::make_unique<probe::SourcePool>(probe::SourcePool::parse(cfg.source_pool, cfg.pool_seed));
    if (server) {
      slot->link = std::make_unique<api::HttpLink>(server->base_url(), opt.node_token);
    } else {
      slot->link = std::make_unique<node::LocalLink>(orch);
    }
    slot->kill_on_first = i < sc.kill_nodes;
    slot->node = std::make_unique<node::ScanNode>(cfg, *slot->link, registry);
    slots.push_back(std::move(slot));
  }

  for (auto& sp : slots) {
    NodeSlot* s = sp.get();
    s->node->set_unit_hooks(
        [s, &spoofs](probe::ProbeEngine& engine, const orchestrator::Assignment& a) {
          if (s->kill_on_first) {
            s->kill_on_first = false;
            s->node->kill();
            return;
          }
          auto it = spoofs.find(a.unit.operation_id);
          if (it == spoofs.end() || it->second->claimed.exchange(true)) return;
          SpoofPlan* plan = it->second.get();
          s->spoofer = std::thread([plan, s, &engine] {
            std::this_thread::sleep_for(50ms);
            if (plan->transport == appscan::Transport::udp) {
              plan->sent += simnet::spoof_udp(probe::udp_local_endpoints(engine), *plan->canary, plan->count);
            } else {
              plan->sent += simnet::inject_spoofs(engine, plan->sources, *s->pool, plan->count);
            }
          });
        },
        [s](probe::ProbeEngine&, const orchestrator::Assignment&) {
          if (s->spoofer.joinable()) s->spoofer.join();
        });
  }

  for (auto& s : slots) s->node->start();
  for (std::size_t i = 0; i < sc.kill_nodes; ++i) res.killed_nodes.push_back(slots[i]->node->id());

  const auto deadline = t0 + opt.deadline;
  while (std::chrono::steady_clock::now() < deadline) {
    orch.detect_failures(orchestrator::SteadyClock::now());
    if (all_settled(orch)) break;
    std::this_thread::sleep_for(50ms);
  }
  for (auto& s : slots) s->node->stop();
  // Give canaries a moment to see any straggling follow-up.
  if (!spoofs.empty()) std::this_thread::sleep_for(100ms);

  const std::vector<std::string> groups = sc.site_groups.empty() ? std::vector<std::string>{""} : sc.site_groups;
  res.finished = true;
  for (const auto& id : res.operation_ids) {
    const auto st = orch.status(id);
    res.finished = res.finished && st.finished();
    res.units_failed += st.failed;
    const auto spec = orch.operation_spec(id);
    const ipgen::TargetSpace space(spec.ranges, spec.port, spec.protocol_id);
    for (const auto& u : orch.units(id)) {
      ++res.units_total;
      if (u.state == ipgen::UnitState::completed && u.attempt_count > 0) ++res.units_reassigned;
    }
    std::map<std::string, std::map<Ipv4, std::uint64_t>> seen;
    std::map<std::string, std::uint64_t> outside;
    for (const auto& g : groups) seen[g];
    for (const auto& lr : orch.result_log(id)) {
      for (const auto& ip : lr.batch.probed) {
        if (space.contains(ip)) {
          ++seen[lr.unit.site_group][ip];
        } else {
          ++outside[lr.unit.site_group];
        }
      }
      for (const auto& j : lr.batch.records) {
        auto r = appscan::record_from_json(j);
        if (r.site_group.empty()) r.site_group = lr.unit.site_group;
        if (r.node_id.empty()) r.node_id = lr.node_id;
        res.records.push_back(std::move(r));
      }
    }
    for (const auto& [g, m] : seen) {
      Coverage c;
      c.operation_id = id;
      c.site_group = g;
      c.expected = space.size();
      c.distinct = m.size();
      for (const auto& [_, n] : m) c.duplicates += n > 1;
      c.outside = outside[g];
      res.coverage.push_back(c);
    }
  }

  const Ipv4Range spoof_space = Ipv4Range::parse("127.66.0.0/16");
  for (const auto& r : res.records) res.spoofs_accepted += spoof_space.contains(r.ip);
  for (auto& [_, p] : spoofs) {
    res.spoofs_sent += p->sent;
    res.canary_hits += p->canary->hits();
    p->canary->stop();
  }
  for (const auto& s : slots) {
    const auto st = s->node->stats();
    res.probes_sent += st.probes_sent;
    res.responders += st.responders;
    res.grabs += st.grabs;
    res.rejected.never_probed += st.rejected.never_probed;
    res.rejected.evicted += st.rejected.evicted;
    res.rejected.wrong_source += st.rejected.wrong_source;
  }
  res.manifest_check = check_manifest(res.manifest, res.records, sc.site_groups);
  if (server) server->stop();
  net.teardown();
  res.elapsed = std::chrono::steady_clock::now() - t0;
  return res;
}

}  // namespace recon::harness

#include <atomic>
#include <csignal>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <httplib.h>

#include "recon/api.hpp"
#include "recon/attrib.hpp"
#include "recon/enrich.hpp"
#include "recon/error.hpp"
#include "recon/fixtures.hpp"
#include "recon/harness.hpp"
#include "recon/report.hpp"
#include "recon/store.hpp"
#include "recon/vuln.hpp"

using namespace recon;
using nlohmann::json;

namespace {

std::atomic<bool> g_stop{false};
void on_signal(int) { g_stop = true; }

std::string config_path(const std::string& name) { return std::string(RECON_SOURCE_DIR) + "/config/" + name; }

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NotFound("cannot open " + path);
  return json::parse(in);
}

std::string record_doc_id(const attrib::RecordRef& r) {
  return r.ip.to_string() + ":" + std::to_string(r.port) + "/" + r.protocol_id + (r.site_group.empty() ? "" : "@" + r.site_group);
}

std::vector<json> all_docs(const store::Backend& s, store::Collection c, const std::string& op) {
  const auto total = s.query(c, op, {}, {0, 0}).total;
  return s.query(c, op, {}, {0, total}).documents;
}

struct Loaded {
  std::vector<attrib::Entity> entities;
  std::vector<attrib::AssetAssignment> assignments;
  std::vector<enrich::EnrichedRecord> records;
  std::vector<vuln::VulnMatch> matches;
};

Loaded load_operation(const store::Backend& s, const std::string& op) {
  Loaded l;
  for (const auto& d : all_docs(s, store::Collection::entities, op)) l.entities.push_back(attrib::entity_from_json(d));
  for (const auto& d : all_docs(s, store::Collection::assignments, op))
    l.assignments.push_back(attrib::assignment_from_json(d));
  for (const auto& d : all_docs(s, store::Collection::enriched, op)) l.records.push_back(enrich::enriched_from_json(d));
  for (const auto& d : all_docs(s, store::Collection::matches, op)) l.matches.push_back(vuln::match_from_json(d));
  if (l.records.empty()) throw NotFound("operation " + op + " has no enriched records; run `recon analyze` first");
  return l;
}

void save_dataset(store::Backend& s, const std::string& op, const fixtures::Dataset& d) {
  for (const auto& e : d.entities) s.put({store::Collection::entities, op, e.entity_id}, attrib::to_json(e));
  for (auto a : d.assignments) {
    a.record.operation_id = op;
    s.put({store::Collection::assignments, op, a.assignment_id}, attrib::to_json(a));
  }
  for (auto r : d.records) {
    r.operation_id = op;
    s.put({store::Collection::enriched, op, record_doc_id(vuln::ref_of(r))}, enrich::to_json(r));
  }
  std::size_t i = 0;
  for (auto m : d.matches) {
    m.record.operation_id = op;
    s.put({store::Collection::matches, op, record_doc_id(m.record) + "#" + m.cve_id + "#" + std::to_string(i++)},
          vuln::to_json(m));
  }
}

void write_out(const std::string& path, const std::string& body) {
  if (path.empty() || path == "-") {
    std::cout << body;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot write " + path);
  out << body;
}

// ---- master ----

struct MasterArgs {
  std::string bind = "127.0.0.1";
  int port = 8480;
  std::string node_token, operator_token, data = "data";
  bool authorized = false;
};

int run_master(const MasterArgs& a) {
  orchestrator::Config cfg;
  cfg.allow_public_targets = a.authorized;
  orchestrator::Orchestrator orch(cfg);
  store::FileStore st(a.data, true);
  orch.set_result_sink([&](const ipgen::WorkUnit& unit, const std::string& node, const orchestrator::ResultBatch& b, bool late) {
    for (const auto& doc : b.records) {
      auto rec = appscan::record_from_json(doc);
      if (rec.site_group.empty()) rec.site_group = unit.site_group;
      if (rec.node_id.empty()) rec.node_id = node;
      auto j = appscan::to_json(rec);
      j["late"] = late;
      j["unit_id"] = unit.unit_id;
      const attrib::RecordRef ref{unit.operation_id, rec.ip, rec.port, rec.protocol_id, rec.site_group};
      st.put({store::Collection::records, unit.operation_id, record_doc_id(ref)}, j);
    }
  });
  api::ApiServer server(orch, {a.bind, a.port, a.node_token, a.operator_token});
  attrib::AssignmentBook book((std::filesystem::path(a.data) / "assignments.json").string());
  server.attach_curation(book);
  std::cerr << "master listening on " << server.base_url() << (a.authorized ? " (public targets allowed)" : "") << "\n";
  while (!g_stop) {
    std::this_thread::sleep_for(cfg.heartbeat_interval);
    for (auto id : orch.detect_failures(orchestrator::SteadyClock::now()))
      std::cerr << "unit " << id << " released for reassignment\n";
  }
  server.stop();
  return 0;
}

// ---- operation ----

struct OperationArgs {
  std::string master = "http://127.0.0.1:8480", operator_token;
  std::vector<std::string> ranges, site_groups;
  std::uint16_t port = 0;
  std::string protocol, catalog;
  std::uint64_t seed = 1, unit_size = ipgen::kDefaultUnitSize;
  bool authorized = false;
};

int run_operation(const OperationArgs& a) {
  orchestrator::OperationSpec base;
  for (const auto& r : a.ranges) {
    const auto range = Ipv4Range::parse(r);
    if (!a.authorized && !is_private_or_loopback(range))
      throw InvalidArgument("range " + r + " is outside loopback/RFC1918; pass --i-am-authorized if you are");
    base.ranges.push_back(range);
  }
  base.seed = a.seed;
  base.unit_size = a.unit_size;
  base.site_groups = a.site_groups;
  std::vector<orchestrator::CatalogEntry> ops;
  if (!a.catalog.empty()) {
    ops = orchestrator::load_catalog(a.catalog);
  } else {
    if (a.protocol.empty() || a.port == 0) throw InvalidArgument("need --port and --protocol, or --catalog");
    ops.push_back({a.protocol, a.port});
  }
  httplib::Client c(a.master);
  httplib::Headers h;
  if (!a.operator_token.empty()) h.emplace("Authorization", "Bearer " + a.operator_token);
  for (const auto& e : ops) {
    auto spec = base;
    spec.port = e.port;
    spec.protocol_id = e.protocol_id;
    json body;
    orchestrator::to_json(body, spec);
    auto res = c.Post("/operations", h, body.dump(), "application/json");
    if (!res) throw TransportError("master unreachable at " + a.master);
    if (res->status != 201) throw InvalidArgument("master refused operation: " + res->body);
    std::cout << json::parse(res->body).at("operation_id").get<std::string>() << "\n";
  }
  return 0;
}

// ---- node ----

struct NodeArgs {
  std::string config, master, token, handlers = config_path("handlers.json"), site_group;
};

int run_node(const NodeArgs& a) {
  json j = a.config.empty() ? json::object() : read_json(a.config);
  auto cfg = node::node_config_from_json(j);
  if (!a.site_group.empty()) cfg.site_group = a.site_group;
  const std::string url = !a.master.empty() ? a.master : j.value("orchestrator_url", "http://127.0.0.1:8480");
  const std::string token = !a.token.empty() ? a.token : j.value("node_token", "");
  const auto registry = appscan::HandlerRegistry::load(a.handlers);
  api::HttpLink link(url, token);
  node::ScanNode n(cfg, link, registry);
  n.start();
  std::cerr << "node " << n.id() << " pulling from " << url << "\n";
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(200));
  n.stop();
  const auto s = n.stats();
  std::cerr << "units " << s.units_completed << ", probes " << s.probes_sent << ", grabs " << s.grabs << "\n";
  return 0;
}

// ---- simulate ----

int run_simulate(const std::string& scenario, bool over_http, const std::string& out) {
  const auto sc = simnet::load_scenario(scenario);
  const auto registry = appscan::HandlerRegistry::load(config_path("handlers.json"));
  harness::Options opt;
  opt.over_http = over_http;
  const auto r = harness::run_scenario(sc, registry, opt);
  write_out(out, r.to_json().dump(2) + "\n");
  return r.finished && r.coverage_exact() && r.manifest_check.ok() && r.spoofs_accepted == 0 ? 0 : 1;
}

// ---- analyze ----

struct AnalyzeArgs {
  std::string data = "data", operation, entities, registry, asn, geo, nvd, canonical = config_path("canonical.csv"),
              scoring = config_path("attrib.json");
  bool rdns = false;
};

int run_analyze(const AnalyzeArgs& a) {
  store::FileStore st(a.data);
  std::vector<appscan::ServiceRecord> raw;
  for (const auto& d : all_docs(st, store::Collection::records, a.operation)) {
    if (d.value("late", false)) continue;
    raw.push_back(appscan::record_from_json(d));
  }
  if (raw.empty()) throw NotFound("operation " + a.operation + " has no records");

  std::optional<enrich::RegistryIndex> reg;
  std::optional<enrich::AsnIndex> asn;
  std::optional<enrich::GeoIndex> geo;
  if (!a.registry.empty()) reg.emplace(enrich::load_registry(a.registry));
  if (!a.asn.empty()) asn.emplace(enrich::load_prefix_asn(a.asn));
  if (!a.geo.empty()) geo.emplace(enrich::load_geo(a.geo));
  dns::SystemResolver resolver;
  enrich::Indices idx{reg ? &*reg : nullptr, asn ? &*asn : nullptr, geo ? &*geo : nullptr,
                      a.rdns ? &resolver : nullptr};
  const auto records = enrich::enrich_all(raw, a.operation, idx);

  const auto loaded = attrib::load_entities_file(a.entities);
  for (const auto& w : loaded.warnings) std::cerr << "entities: " << w << "\n";
  const auto scoring = attrib::ScoringConfig::load(a.scoring);
  auto entities = loaded.entities;
  auto assignments = attrib::propose_assignments(records, entities, scoring);
  std::vector<attrib::AssetAssignment> accepted;
  for (const auto& x : assignments)
    if (x.status == attrib::AssignmentStatus::auto_accepted) accepted.push_back(x);
  const std::size_t before = entities.size();
  const auto expansion = attrib::expand_to_fixed_point(accepted, entities);
  if (entities.size() != before) assignments = attrib::propose_assignments(records, entities, scoring);

  const auto table = vuln::Canonicalizer::load(a.canonical);
  const vuln::CveIndex index(vuln::load_nvd(a.nvd, table));
  const auto matches = vuln::match_records(records, index, table);

  fixtures::Dataset d{entities, assignments, records, matches};
  save_dataset(st, a.operation, d);
  std::cerr << records.size() << " records, " << entities.size() << " entities (" << expansion
            << " expansion rounds), " << assignments.size() << " assignments, " << matches.size()
            << " potential CVE matches\n";
  return 0;
}

// ---- fixture ----

int run_fixture(const std::string& kind, const std::string& data, const std::string& op, const std::string& scenario) {
  store::FileStore st(data);
  if (kind == "hospital") {
    const auto sc = read_json(simnet::scenario_dir() + "/" + scenario + ".json");
    save_dataset(st, op, fixtures::hospital_fixture(fixtures::HospitalParams::from_json(sc.at("fixture"))));
  } else {
    save_dataset(st, op, fixtures::cohort_fixture());
  }
  std::cerr << "wrote " << kind << " fixture as " << op << "\n";
  return 0;
}

// ---- report ----

struct ReportArgs {
  std::string kind, data = "data", operation, out, format = "csv", product = "apache_httpd",
              canonical = config_path("canonical.csv"), kritis = "any";
  std::int64_t max_beds = 0;
  bool by_company = false, vulnerable_only = false;
};

int run_report(const ReportArgs& a) {
  const store::FileStore st(a.data);
  const auto d = load_operation(st, a.operation);
  std::vector<attrib::RecordRef> services;
  for (const auto& r : d.records) services.push_back(vuln::ref_of(r));
  const std::optional<std::int64_t> max_beds = a.max_beds > 0 ? std::optional(a.max_beds) : std::nullopt;

  if (a.kind == "stats") {
    const auto s = report::compute_stats(d.entities, d.assignments, services, d.matches, {a.by_company});
    json j = s.to_json();
    j["severity_table"] = s.severity.render();
    write_out(a.out, j.dump(2) + "\n");
  } else if (a.kind == "versions") {
    const auto table = vuln::Canonicalizer::load(a.canonical);
    write_out(a.out, report::version_distribution(a.product, d.records, table).to_json().dump(2) + "\n");
  } else if (a.kind == "regression") {
    const auto counts = report::cve_counts(d.assignments, d.matches);
    const auto r = report::fit_regression(report::bed_cve_points(d.entities, counts, max_beds));
    write_out(a.out, json{{"slope", r.slope}, {"intercept", r.intercept}, {"n", r.n}, {"r_squared", r.r_squared}}.dump(2) + "\n");
  } else if (a.kind == "cohorts") {
    const auto counts = report::cve_counts(d.assignments, d.matches);
    std::optional<bool> k;
    if (a.kritis == "yes") k = true;
    if (a.kritis == "no") k = false;
    std::vector<std::optional<std::int64_t>> bounds = {800, 1800};
    if (max_beds) bounds = {max_beds};
    std::vector<std::optional<bool>> kinds = {true, std::nullopt};
    if (a.kritis != "any") kinds = {k};
    json out = json::array();
    for (const auto& bound : bounds) {
      for (const auto& kk : kinds) {
        const auto r = report::cohort_average(d.entities, counts, {kk, bound});
        json row{{"kritis", kk ? json(*kk) : json("any")}, {"max_beds", bound ? json(*bound) : json(nullptr)}};
        if (r) {
          row.update({{"n", r->n}, {"cves", r->total}, {"mean", r->display}});
        } else {
          row["mean"] = "no data";
        }
        out.push_back(row);
      }
    }
    write_out(a.out, out.dump(2) + "\n");
  } else if (a.kind == "geo") {
    const auto pts = report::geo_export(d.records, d.matches, a.vulnerable_only);
    if (a.format == "geojson") {
      write_out(a.out, report::geo_geojson(pts).dump() + "\n");
    } else {
      std::ostringstream o;
      report::write_geo_csv(o, pts);
      write_out(a.out, o.str());
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"distributed service reconnaissance on simulated or authorized networks"};
  app.require_subcommand(1);

  MasterArgs ma;
  auto* master = app.add_subcommand("master", "run the scan master and its HTTP API");
  master->add_option("--bind", ma.bind);
  master->add_option("--port", ma.port);
  master->add_option("--node-token", ma.node_token)->required();
  master->add_option("--operator-token", ma.operator_token);
  master->add_option("--data", ma.data, "store directory");
  master->add_flag("--i-am-authorized", ma.authorized, "allow target ranges outside loopback/RFC1918");

  OperationArgs oa;
  auto* operation = app.add_subcommand("operation", "create scan operations on a running master");
  operation->add_option("--master", oa.master);
  operation->add_option("--operator-token", oa.operator_token);
  operation->add_option("--range", oa.ranges, "CIDR or a-b range")->required();
  operation->add_option("--port", oa.port);
  operation->add_option("--protocol", oa.protocol);
  operation->add_option("--catalog", oa.catalog, "JSON list of {protocol_id, port}");
  operation->add_option("--seed", oa.seed);
  operation->add_option("--unit-size", oa.unit_size);
  operation->add_option("--site-group", oa.site_groups);
  operation->add_flag("--i-am-authorized", oa.authorized, "allow target ranges outside loopback/RFC1918");

  NodeArgs na;
  auto* nodecmd = app.add_subcommand("node", "run a scan node against a master");
  nodecmd->add_option("--config", na.config, "node config JSON");
  nodecmd->add_option("--master", na.master);
  nodecmd->add_option("--token", na.token);
  nodecmd->add_option("--handlers", na.handlers);
  nodecmd->add_option("--site-group", na.site_group);

  std::string scenario, sim_out;
  bool over_http = false;
  auto* sim = app.add_subcommand("simulate", "run a shipped scenario against the loopback simnet");
  sim->add_option("scenario", scenario, "scenario name or path")->required();
  sim->add_flag("--over-http", over_http);
  sim->add_option("--out", sim_out);

  AnalyzeArgs aa;
  auto* analyze = app.add_subcommand("analyze", "enrich, attribute and match the records of an operation");
  analyze->add_option("--data", aa.data);
  analyze->add_option("--operation", aa.operation)->required();
  analyze->add_option("--entities", aa.entities)->required();
  analyze->add_option("--nvd", aa.nvd)->required();
  analyze->add_option("--registry", aa.registry);
  analyze->add_option("--asn", aa.asn);
  analyze->add_option("--geo", aa.geo);
  analyze->add_option("--canonical", aa.canonical);
  analyze->add_option("--scoring", aa.scoring);
  analyze->add_flag("--rdns", aa.rdns, "reverse DNS through the system resolver");

  std::string fx_kind, fx_data = "data", fx_op, fx_scenario = "hospital_fixture";
  auto* fx = app.add_subcommand("fixture", "write a synthetic dataset into the store");
  fx->add_option("kind", fx_kind)->required()->check(CLI::IsMember({"hospital", "cohort"}));
  fx->add_option("--data", fx_data);
  fx->add_option("--operation", fx_op)->required();
  fx->add_option("--scenario", fx_scenario);

  ReportArgs ra;
  auto* rep = app.add_subcommand("report", "statistics and exports for an analyzed operation");
  rep->add_option("kind", ra.kind)->required()->check(CLI::IsMember({"stats", "versions", "regression", "cohorts", "geo"}));
  rep->add_option("--operation", ra.operation)->required();
  rep->add_option("--out", ra.out, "output file, - for stdout");
  rep->add_option("--data", ra.data);
  rep->add_option("--format", ra.format)->check(CLI::IsMember({"csv", "geojson"}));
  rep->add_option("--product", ra.product);
  rep->add_option("--canonical", ra.canonical);
  rep->add_option("--kritis", ra.kritis)->check(CLI::IsMember({"yes", "no", "any"}));
  rep->add_option("--max-beds", ra.max_beds);
  rep->add_flag("--by-operating-company", ra.by_company);
  rep->add_flag("--vulnerable-only", ra.vulnerable_only);

  CLI11_PARSE(app, argc, argv);
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  try {
    if (*master) return run_master(ma);
    if (*operation) return run_operation(oa);
    if (*nodecmd) return run_node(na);
    if (*sim) return run_simulate(scenario, over_http, sim_out);
    if (*analyze) return run_analyze(aa);
    if (*fx) return run_fixture(fx_kind, fx_data, fx_op, fx_scenario);
    if (*rep) return run_report(ra);
  } catch (const std::exception& e) {
    std::cerr << "recon: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

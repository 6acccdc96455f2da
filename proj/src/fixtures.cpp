#include "recon/fixtures.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "recon/error.hpp"

namespace recon::fixtures {

using nlohmann::json;

std::vector<attrib::RecordRef> Dataset::services() const {
  std::vector<attrib::RecordRef> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(vuln::ref_of(r));
  return out;
}

// n values >= min_each summing to total, randomly weighted.
static std::vector<std::int64_t> split(std::int64_t total, std::size_t n, std::int64_t min_each, std::mt19937_64& rng) {
  std::vector<std::int64_t> out(n, min_each);
  if (n == 0) {
    if (total != 0) throw InvalidArgument("cannot split a non-zero total over nothing");
    return out;
  }
  std::int64_t rest = total - static_cast<std::int64_t>(n) * min_each;
  if (rest < 0) throw InvalidArgument("total too small for the minimum");
  std::uniform_int_distribution<std::int64_t> wd(1, 1000);
  std::vector<std::int64_t> w(n);
  for (auto& x : w) x = wd(rng);
  const std::int64_t wsum = std::accumulate(w.begin(), w.end(), std::int64_t{0});
  std::int64_t given = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto share = static_cast<std::int64_t>(static_cast<__int128>(rest) * w[i] / wsum);
    out[i] += share;
    given += share;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t k = 0; given < rest; ++k, ++given) ++out[order[k % n]];
  return out;
}

HospitalParams HospitalParams::from_json(const json& f) {
  HospitalParams p;
  p.seed = f.value("seed", std::uint64_t{1});
  p.entities = f.at("entities").get<std::uint64_t>();
  p.entities_with_services = f.at("entities_with_services").get<std::uint64_t>();
  p.services = f.at("services").get<std::uint64_t>();
  p.vulnerable_entities = f.at("vulnerable_entities").get<std::uint64_t>();
  const auto& s = f.at("severity");
  p.critical = s.value("critical", std::uint64_t{0});
  p.high = s.value("high", std::uint64_t{0});
  p.medium = s.value("medium", std::uint64_t{0});
  p.low_only = f.value("low_only", std::uint64_t{250});
  p.beds_total = f.at("beds_total").get<std::int64_t>();
  p.beds_vulnerable = f.at("beds_vulnerable").get<std::int64_t>();
  p.validate();
  return p;
}

void HospitalParams::validate() const {
  const std::uint64_t vul = critical + high + medium;
  if (entities_with_services > entities) throw InvalidArgument("more entities with services than entities");
  if (vulnerable_entities > entities_with_services) throw InvalidArgument("more vulnerable entities than entities with services");
  if (vul < vulnerable_entities) throw InvalidArgument("fewer vulnerable services than vulnerable entities");
  if (vul > services) throw InvalidArgument("more vulnerable services than services");
  if (services - vul < entities_with_services - vulnerable_entities)
    throw InvalidArgument("not enough services for every entity with services");
  if (low_only > services - vul) throw InvalidArgument("low_only exceeds the non-vulnerable services");
  if (beds_vulnerable > beds_total || beds_vulnerable < static_cast<std::int64_t>(vulnerable_entities) ||
      beds_total - beds_vulnerable < static_cast<std::int64_t>(entities - vulnerable_entities))
    throw InvalidArgument("bed totals cannot give every entity at least one bed");
}

namespace {

struct Builder {
  Dataset d;
  std::uint32_t next_ip = Ipv4(10, 0, 0, 0).value;
  std::uint64_t next_cve = 1;

  attrib::Entity& add_entity(std::optional<std::int64_t> beds, std::optional<std::int64_t> cases) {
    attrib::Entity e;
    const auto n = d.entities.size() + 1;
    e.entity_id = "e" + std::to_string(n);
    e.name = "Hospital " + std::to_string(n);
    e.domains = {"hospital-" + std::to_string(n) + ".example"};
    e.beds = beds;
    e.inpatient_cases_per_year = cases;
    e.kritis = attrib::kritis_by_cases(cases);
    d.entities.push_back(std::move(e));
    return d.entities.back();
  }

  attrib::RecordRef add_service(const std::string& entity_id, const std::string& banner) {
    const std::string e_domain = "hospital-" + entity_id.substr(1) + ".example";
    enrich::EnrichedRecord r;
    r.operation_id = "op-fixture";
    r.service.ip = Ipv4(++next_ip);
    r.service.port = 443;
    r.service.protocol_id = "https";
    r.service.site_group = "g1";
    r.service.banner = banner;
    r.service.node_id = "fixture";
    const double lat = 47.0 + static_cast<double>(next_ip % 8);
    const double lon = 6.0 + static_cast<double>(next_ip % 9);
    r.geo = enrich::GeoInfo{Ipv4Range{r.service.ip, r.service.ip}, lat, lon, "", "DE"};
    const auto ref = vuln::ref_of(r);
    d.records.push_back(std::move(r));

    attrib::AssetAssignment a;
    a.record = ref;
    a.entity_id = entity_id;
    a.assignment_id = "as-fixture-" + std::to_string(d.assignments.size() + 1);
    a.status = attrib::AssignmentStatus::auto_accepted;
    a.score.evidence.push_back({attrib::Signal::cert_exact_domain, e_domain, 100});
    a.score.total = 100;
    d.assignments.push_back(std::move(a));
    return ref;
  }

  void add_match(const attrib::RecordRef& ref, double score) {
    char id[32];
    std::snprintf(id, sizeof id, "CVE-2099-%06llu", static_cast<unsigned long long>(next_cve++));
    d.matches.push_back({ref, id, score, vuln::bucket(score), true});
  }
};

}  // namespace

Dataset hospital_fixture(const HospitalParams& p) {
  p.validate();
  std::mt19937_64 rng(p.seed);
  Builder b;

  const std::size_t E = p.entities, S = p.entities_with_services, V = p.vulnerable_entities;
  std::vector<std::size_t> role(E);  // 0 vulnerable, 1 services only, 2 none
  for (std::size_t i = 0; i < E; ++i) role[i] = i < V ? 0 : (i < S ? 1 : 2);
  std::shuffle(role.begin(), role.end(), rng);

  std::vector<std::size_t> vul_idx, svc_idx, rest_idx;
  for (std::size_t i = 0; i < E; ++i) (role[i] == 0 ? vul_idx : role[i] == 1 ? svc_idx : rest_idx).push_back(i);
  const auto beds_v = split(p.beds_vulnerable, V, 1, rng);
  const auto beds_o = split(p.beds_total - p.beds_vulnerable, E - V, 1, rng);
  std::vector<std::int64_t> beds(E);
  for (std::size_t k = 0; k < V; ++k) beds[vul_idx[k]] = beds_v[k];
  std::vector<std::size_t> others = svc_idx;
  others.insert(others.end(), rest_idx.begin(), rest_idx.end());
  for (std::size_t k = 0; k < others.size(); ++k) beds[others[k]] = beds_o[k];
  for (std::size_t i = 0; i < E; ++i) b.add_entity(beds[i], 1000 + beds[i] * 30);

  const std::uint64_t vul_total = p.critical + p.high + p.medium;
  const auto vul_per = split(static_cast<std::int64_t>(vul_total), V, 1, rng);
  std::vector<int> labels;  // 3 critical, 2 high, 1 medium
  labels.insert(labels.end(), p.critical, 3);
  labels.insert(labels.end(), p.high, 2);
  labels.insert(labels.end(), p.medium, 1);
  std::shuffle(labels.begin(), labels.end(), rng);

  // Non-vulnerable services over every entity with services; their own
  // entities need at least one.
  std::vector<std::size_t> with_services = vul_idx;
  with_services.insert(with_services.end(), svc_idx.begin(), svc_idx.end());
  const auto clean_extra =
      split(static_cast<std::int64_t>(p.services - vul_total - (S - V)), S, 0, rng);

  std::size_t li = 0;
  std::uint64_t low_left = p.low_only;
  std::uint64_t nth = 0;
  for (std::size_t k = 0; k < S; ++k) {
    const auto& id = b.d.entities[with_services[k]].entity_id;
    if (k < V) {
      for (std::int64_t j = 0; j < vul_per[k]; ++j) {
        const int label = labels[li++];
        const auto ref = b.add_service(id, label == 3 ? "Apache/2.2.34" : label == 2 ? "Microsoft-IIS/7.5" : "nginx/1.14.0");
        b.add_match(ref, label == 3 ? 9.8 : label == 2 ? 7.5 : 5.0);
        // Secondary weaker matches do not change the service's bucket.
        if (++nth % 3 == 0) b.add_match(ref, label == 1 ? 2.0 : 5.0);
      }
    }
    const std::int64_t clean = clean_extra[k] + (k < V ? 0 : 1);
    for (std::int64_t j = 0; j < clean; ++j) {
      const auto ref = b.add_service(id, low_left ? "OpenSSH_8.9p1" : "nginx");
      if (low_left) {
        b.add_match(ref, 2.0);
        --low_left;
      }
    }
  }
  return std::move(b.d);
}

Dataset cohort_fixture(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Builder b;
  struct Cohort {
    bool kritis;
    std::int64_t lo, hi;
    std::size_t n;
    std::int64_t cves;
  };
  const std::vector<Cohort> cohorts = {
      {true, 50, 800, 10, 31},      {false, 50, 800, 40, 90},    {true, 801, 1800, 90, 1132},
      {false, 801, 1800, 360, 787}, {true, 1801, 3000, 10, 900}, {false, 1801, 3000, 20, 800},
  };
  for (const auto& c : cohorts) {
    std::uniform_int_distribution<std::int64_t> bd(c.lo, c.hi);
    const auto per = split(c.cves, c.n, 0, rng);
    for (std::size_t i = 0; i < c.n; ++i) {
      const auto id = b.add_entity(bd(rng), c.kritis ? 31000 : 10000).entity_id;
      const auto ref = b.add_service(id, "Apache/2.4.41");
      for (std::int64_t j = 0; j < per[i]; ++j) b.add_match(ref, 5.0);
    }
  }
  // Unknown beds: dropped by any bed bound.
  for (int i = 0; i < 12; ++i) {
    const auto id = b.add_entity(std::nullopt, i % 2 ? 31000 : 10000).entity_id;
    const auto ref = b.add_service(id, "Apache/2.4.41");
    for (int j = 0; j < 60; ++j) b.add_match(ref, 7.5);
  }
  // No services: never analyzed.
  for (int i = 0; i < 20; ++i) b.add_entity(400, i % 2 ? 31000 : 10000);
  return std::move(b.d);
}

}  // namespace recon::fixtures

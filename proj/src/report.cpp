#include "recon/report.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>

#include "recon/error.hpp"

namespace recon::report {

using nlohmann::json;

std::string format_ratio(std::uint64_t num, std::uint64_t den, int decimals) {
  if (den == 0) throw InvalidArgument("ratio with zero denominator");
  if (decimals < 0 || decimals > 12) throw InvalidArgument("decimals out of range");
  unsigned __int128 scale = 1;
  for (int i = 0; i < decimals; ++i) scale *= 10;
  // floor((2 * num * scale + den) / (2 * den)) is num/den half-up.
  const unsigned __int128 q = (2 * static_cast<unsigned __int128>(num) * scale + den) / (2 * static_cast<unsigned __int128>(den));
  const auto whole = static_cast<std::uint64_t>(q / scale);
  auto frac = static_cast<std::uint64_t>(q % scale);
  std::string out = std::to_string(whole);
  if (decimals > 0) {
    std::string f = std::to_string(frac);
    out += "." + std::string(static_cast<std::size_t>(decimals) - f.size(), '0') + f;
  }
  return out;
}

std::string format_percent(std::uint64_t num, std::uint64_t den, int decimals) {
  return format_ratio(num * 100, den, decimals) + "%";
}

std::string format_fixed(double v, int decimals) {
  if (!std::isfinite(v)) throw InvalidArgument("cannot format non-finite value");
  const double scale = std::pow(10.0, decimals);
  const double r = std::floor(std::abs(v) * scale + 0.5) / scale;
  std::ostringstream o;
  o << std::fixed << std::setprecision(decimals) << (v < 0 && r != 0 ? -r : r);
  return o.str();
}

static double safe_div(double a, double b) { return b == 0 ? 0.0 : a / b; }

json StatsBundle::to_json() const {
  return {{"total_entities", total_entities},
          {"entities_with_services", entities_with_services},
          {"total_services", total_services},
          {"mean_services_per_entity", mean_services_per_entity},
          {"mean_services_display", mean_services_display},
          {"vulnerable_entities", vulnerable_entities},
          {"vulnerable_entity_ratio", vulnerable_entity_ratio},
          {"vulnerable_entity_ratio_display", vulnerable_entity_ratio_display},
          {"severity", severity.to_json()},
          {"vulnerable_beds", vulnerable_beds},
          {"total_beds", total_beds},
          {"bed_ratio", bed_ratio},
          {"bed_ratio_display", bed_ratio_display},
          {"bed_ratio_whole_display", bed_ratio_whole_display},
          {"vulnerable_service_ratio", vulnerable_service_ratio},
          {"vulnerable_service_ratio_display", vulnerable_service_ratio_display},
          {"caveat", "counts are potential known vulnerabilities matched by banner version"}};
}

static bool effective(const attrib::AssetAssignment& a) {
  return a.status == attrib::AssignmentStatus::auto_accepted || a.status == attrib::AssignmentStatus::accepted;
}

StatsBundle compute_stats(const std::vector<attrib::Entity>& entities,
                          const std::vector<attrib::AssetAssignment>& assignments,
                          const std::vector<attrib::RecordRef>& services, const std::vector<vuln::VulnMatch>& matches,
                          const StatsOptions& options) {
  // entity id -> analysis unit key
  std::map<std::string, std::string> unit_of;
  std::map<std::string, std::optional<std::int64_t>> unit_beds;
  if (options.by_operating_company) {
    for (const auto& u : attrib::entity_grouping(entities)) {
      for (const auto& id : u.entity_ids) unit_of[id] = u.key;
      unit_beds[u.key] = u.beds;
    }
  } else {
    for (const auto& e : entities) {
      unit_of[e.entity_id] = e.entity_id;
      unit_beds[e.entity_id] = e.beds;
    }
  }

  const std::set<attrib::RecordRef> service_set(services.begin(), services.end());
  std::map<attrib::RecordRef, vuln::Severity> worst;
  for (const auto& m : matches) {
    auto [it, fresh] = worst.try_emplace(m.record, m.severity);
    if (!fresh && m.severity > it->second) it->second = m.severity;
  }

  std::set<attrib::RecordRef> attributed;
  std::map<std::string, bool> unit_vulnerable;  // units with at least one service
  for (const auto& a : assignments) {
    if (!effective(a) || !service_set.contains(a.record)) continue;
    auto u = unit_of.find(a.entity_id);
    if (u == unit_of.end()) continue;
    attributed.insert(a.record);
    auto w = worst.find(a.record);
    const bool vul = w != worst.end() && vuln::is_vulnerable(w->second);
    auto& flag = unit_vulnerable[u->second];
    flag = flag || vul;
  }

  StatsBundle s;
  s.total_entities = unit_beds.size();
  s.entities_with_services = unit_vulnerable.size();
  s.total_services = attributed.size();
  for (const auto& [_, v] : unit_vulnerable) s.vulnerable_entities += v;
  for (const auto& [k, beds] : unit_beds) {
    if (!beds) continue;
    s.total_beds += *beds;
    auto it = unit_vulnerable.find(k);
    if (it != unit_vulnerable.end() && it->second) s.vulnerable_beds += *beds;
  }
  s.severity = vuln::severity_table({attributed.begin(), attributed.end()}, matches);

  s.mean_services_per_entity = safe_div(static_cast<double>(s.total_services), static_cast<double>(s.total_entities));
  s.vulnerable_entity_ratio = safe_div(static_cast<double>(s.vulnerable_entities), static_cast<double>(s.entities_with_services));
  s.bed_ratio = safe_div(static_cast<double>(s.vulnerable_beds), static_cast<double>(s.total_beds));
  s.vulnerable_service_ratio =
      safe_div(static_cast<double>(s.severity.total_vulnerable()), static_cast<double>(s.total_services));

  auto ratio = [](std::uint64_t n, std::uint64_t d, int dec) { return d == 0 ? std::string("n/a") : format_ratio(n, d, dec); };
  auto pct = [](std::uint64_t n, std::uint64_t d, int dec) { return d == 0 ? std::string("n/a") : format_percent(n, d, dec); };
  s.mean_services_display = ratio(s.total_services, s.total_entities, 1);
  s.vulnerable_entity_ratio_display = pct(s.vulnerable_entities, s.entities_with_services, 1);
  s.bed_ratio_display = pct(static_cast<std::uint64_t>(s.vulnerable_beds), static_cast<std::uint64_t>(s.total_beds), 1);
  s.bed_ratio_whole_display = pct(static_cast<std::uint64_t>(s.vulnerable_beds), static_cast<std::uint64_t>(s.total_beds), 0);
  s.vulnerable_service_ratio_display = pct(s.severity.total_vulnerable(), s.total_services, 1);
  return s;
}

// ---- distributions ----

std::string VersionDistribution::unknown_percent(int decimals) const {
  return total == 0 ? std::string("n/a") : format_percent(unknown, total, decimals);
}

json VersionDistribution::to_json() const {
  json known_j = json::array();
  for (const auto& b : known)
    known_j.push_back({{"version", b.version}, {"count", b.count},
                       {"percent", total ? format_percent(b.count, total, 2) : "n/a"}});
  return {{"product", product},
          {"total", total},
          {"unknown", unknown},
          {"unknown_percent", unknown_percent(2)},
          {"known", known_j}};
}

VersionDistribution version_distribution(const std::string& product, const std::vector<enrich::EnrichedRecord>& records,
                                         const vuln::Canonicalizer& table) {
  VersionDistribution d;
  d.product = product;
  std::map<std::string, std::uint64_t> counts;
  for (const auto& r : records) {
    const auto pv = vuln::parse_banner(r.service.banner, table);
    if (!pv || pv->product != product) continue;
    ++d.total;
    if (!pv->version) {
      ++d.unknown;
    } else {
      ++counts[*pv->version];
    }
  }
  for (const auto& [v, c] : counts) d.known.push_back({v, c});
  std::stable_sort(d.known.begin(), d.known.end(), [](const VersionBucket& a, const VersionBucket& b) {
    return *vuln::Version::parse(a.version) < *vuln::Version::parse(b.version);
  });
  return d;
}

std::vector<GroupShare> banner_group_distribution(const std::vector<appscan::ServiceRecord>& records) {
  std::map<std::string, std::uint64_t> counts;
  for (const auto& r : records) ++counts[appscan::classify_banner_group(r)];
  std::vector<GroupShare> out;
  if (records.empty()) return out;
  const std::uint64_t total = records.size();
  // Tenths of a percent, floored, then hand out the remainder by largest fraction.
  struct Part {
    std::size_t i;
    std::uint64_t floor_tenths;
    std::uint64_t rem;
  };
  std::vector<Part> parts;
  std::uint64_t assigned = 0;
  for (const auto& [g, c] : counts) {
    out.push_back({g, c, ""});
    const std::uint64_t scaled = c * 1000;
    parts.push_back({out.size() - 1, scaled / total, scaled % total});
    assigned += scaled / total;
  }
  std::vector<std::size_t> order(parts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return parts[a].rem > parts[b].rem; });
  for (std::size_t k = 0; assigned < 1000 && k < order.size(); ++k, ++assigned) ++parts[order[k]].floor_tenths;
  for (const auto& p : parts)
    out[p.i].percent = std::to_string(p.floor_tenths / 10) + "." + std::to_string(p.floor_tenths % 10) + "%";
  std::stable_sort(out.begin(), out.end(), [](const GroupShare& a, const GroupShare& b) { return a.count > b.count; });
  return out;
}

// ---- regression ----

RegressionResult fit_regression(const std::vector<std::pair<double, double>>& points) {
  const std::size_t n = points.size();
  if (n < 2) throw InvalidArgument("regression needs at least two points");
  for (const auto& [x, y] : points)
    if (!std::isfinite(x) || !std::isfinite(y)) throw InvalidArgument("regression input is not finite");
  if (std::all_of(points.begin(), points.end(), [&](const auto& p) { return p.first == points[0].first; }))
    throw InvalidArgument("regression needs at least two distinct x values");
  double mx = 0, my = 0;
  for (const auto& [x, y] : points) {
    mx += x;
    my += y;
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0, sxy = 0, syy = 0;
  for (const auto& [x, y] : points) {
    sxx += (x - mx) * (x - mx);
    sxy += (x - mx) * (y - my);
    syy += (y - my) * (y - my);
  }
  if (!(sxx > 0)) throw InvalidArgument("regression x variance vanished");
  RegressionResult r;
  r.n = n;
  r.slope = sxy / sxx;
  r.intercept = my - r.slope * mx;
  double ss_res = 0;
  for (const auto& [x, y] : points) {
    const double e = y - (r.slope * x + r.intercept);
    ss_res += e * e;
  }
  r.r_squared = syy == 0 ? 1.0 : std::max(0.0, 1.0 - ss_res / syy);
  if (!std::isfinite(r.slope) || !std::isfinite(r.intercept)) throw InvalidArgument("regression overflowed");
  return r;
}

// ---- cohorts ----

std::map<std::string, std::uint64_t> cve_counts(const std::vector<attrib::AssetAssignment>& assignments,
                                                const std::vector<vuln::VulnMatch>& matches) {
  std::map<attrib::RecordRef, std::set<std::string>> per_record;
  for (const auto& m : matches) per_record[m.record].insert(m.cve_id);
  std::map<std::string, std::set<attrib::RecordRef>> records_of;
  for (const auto& a : assignments)
    if (effective(a)) records_of[a.entity_id].insert(a.record);
  std::map<std::string, std::uint64_t> out;
  for (const auto& [entity, recs] : records_of) {
    std::uint64_t n = 0;
    for (const auto& r : recs) {
      auto it = per_record.find(r);
      if (it != per_record.end()) n += it->second.size();
    }
    out[entity] = n;
  }
  return out;
}

std::optional<CohortResult> cohort_average(const std::vector<attrib::Entity>& entities,
                                           const std::map<std::string, std::uint64_t>& counts,
                                           const CohortFilter& filter) {
  CohortResult r;
  for (const auto& e : entities) {
    auto it = counts.find(e.entity_id);
    if (it == counts.end()) continue;
    if (filter.kritis && e.kritis != *filter.kritis) continue;
    if (filter.max_beds && (!e.beds || *e.beds > *filter.max_beds)) continue;
    ++r.n;
    r.total += it->second;
  }
  if (r.n == 0) return std::nullopt;
  r.mean = static_cast<double>(r.total) / static_cast<double>(r.n);
  r.display = format_ratio(r.total, r.n, 2);
  return r;
}

std::vector<std::pair<double, double>> bed_cve_points(const std::vector<attrib::Entity>& entities,
                                                      const std::map<std::string, std::uint64_t>& counts,
                                                      std::optional<std::int64_t> max_beds) {
  std::vector<std::pair<double, double>> out;
  for (const auto& e : entities) {
    auto it = counts.find(e.entity_id);
    if (it == counts.end() || !e.beds) continue;
    if (max_beds && *e.beds > *max_beds) continue;
    out.emplace_back(static_cast<double>(*e.beds), static_cast<double>(it->second));
  }
  return out;
}

// ---- geo ----

std::vector<GeoPoint> geo_export(const std::vector<enrich::EnrichedRecord>& records,
                                 const std::vector<vuln::VulnMatch>& matches, bool vulnerable_only) {
  std::set<attrib::RecordRef> vulnerable;
  for (const auto& m : matches)
    if (m.severity >= vuln::Severity::medium) vulnerable.insert(m.record);
  std::map<std::pair<double, double>, std::uint64_t> agg;
  std::set<attrib::RecordRef> seen;
  for (const auto& r : records) {
    if (!r.geo) continue;
    const auto ref = vuln::ref_of(r);
    if (!seen.insert(ref).second) continue;
    if (vulnerable_only && !vulnerable.contains(ref)) continue;
    ++agg[{r.geo->lat, r.geo->lon}];
  }
  std::vector<GeoPoint> out;
  for (const auto& [ll, w] : agg) out.push_back({ll.first, ll.second, w});
  return out;
}

void write_geo_csv(std::ostream& out, const std::vector<GeoPoint>& points) {
  out << "lat,lon,weight\n";
  for (const auto& p : points) out << format_fixed(p.lat, 6) << "," << format_fixed(p.lon, 6) << "," << p.weight << "\n";
}

json geo_geojson(const std::vector<GeoPoint>& points) {
  json features = json::array();
  for (const auto& p : points)
    features.push_back({{"type", "Feature"},
                        {"geometry", {{"type", "Point"}, {"coordinates", {p.lon, p.lat}}}},
                        {"properties", {{"weight", p.weight}}}});
  return {{"type", "FeatureCollection"}, {"features", features}};
}

}  // namespace recon::report

#include <doctest.h>

#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "recon/error.hpp"
#include "recon/fixtures.hpp"
#include "recon/report.hpp"

using namespace recon;
using namespace recon::report;

namespace {

fixtures::HospitalParams hospital_params() {
  fixtures::HospitalParams p;
  p.seed = 2021;
  p.entities = 1555;
  p.entities_with_services = 1228;
  p.services = 13497;
  p.vulnerable_entities = 447;
  p.critical = 931;
  p.high = 443;
  p.medium = 518;
  p.low_only = 250;
  p.beds_total = 520000;
  p.beds_vulnerable = 167000;
  return p;
}

const vuln::Canonicalizer& table() {
  static const auto t = vuln::Canonicalizer::load(std::string(RECON_SOURCE_DIR) + "/config/canonical.csv");
  return t;
}

enrich::EnrichedRecord rec(std::uint32_t n, std::string banner) {
  enrich::EnrichedRecord r;
  r.operation_id = "op";
  r.service.ip = Ipv4(0x0A000000u + n);
  r.service.port = 80;
  r.service.protocol_id = "http";
  r.service.banner = std::move(banner);
  return r;
}

double rel(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

}  // namespace

TEST_CASE("half-up formatting") {
  CHECK(format_ratio(13497, 1555, 1) == "8.7");
  CHECK(format_percent(447, 1228, 1) == "36.4%");
  CHECK(format_percent(167000, 520000, 0) == "32%");
  CHECK(format_percent(167000, 520000, 1) == "32.1%");
  CHECK(format_percent(444, 709, 2) == "62.62%");
  CHECK(format_ratio(1, 8, 2) == "0.13");   // exact tie rounds up
  CHECK(format_ratio(1, 8, 1) == "0.1");
  CHECK(format_ratio(5, 2, 0) == "3");
  CHECK(format_ratio(1, 3, 0) == "0");
  CHECK(format_ratio(2, 3, 0) == "1");
  CHECK(format_ratio(0, 7, 2) == "0.00");
  CHECK(format_ratio(1, 200, 2) == "0.01");
  CHECK(format_ratio(31, 10, 2) == "3.10");
  CHECK_THROWS_AS(format_ratio(1, 0, 1), InvalidArgument);
  CHECK(format_fixed(2.5, 0) == "3");
  CHECK(format_fixed(-1.25, 1) == "-1.3");
  CHECK(format_fixed(47.123456789, 6) == "47.123457");
  CHECK_THROWS_AS(format_fixed(std::nan(""), 1), InvalidArgument);
}

TEST_CASE("half-up formatting agrees with a long-division oracle") {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 2000; ++i) {
    const std::uint64_t den = 1 + rng() % 100000, num = rng() % 1000000;
    const int dec = static_cast<int>(rng() % 4);
    // Oracle: digits by long division, then look at the next digit and remainder.
    std::uint64_t whole = num / den, r = num % den;
    std::vector<int> digits;
    for (int k = 0; k < dec; ++k) {
      r *= 10;
      digits.push_back(static_cast<int>(r / den));
      r %= den;
    }
    const bool up = 2 * r >= den;
    if (up) {
      int k = dec - 1;
      for (; k >= 0 && digits[k] == 9; --k) digits[k] = 0;
      if (k >= 0) ++digits[k]; else ++whole;
    }
    std::string want = std::to_string(whole);
    if (dec) {
      want += ".";
      for (int d : digits) want += static_cast<char>('0' + d);
    }
    CHECK(format_ratio(num, den, dec) == want);
  }
}

TEST_CASE("hospital fixture headline statistics") {
  const auto d = fixtures::hospital_fixture(hospital_params());
  const auto s = compute_stats(d.entities, d.assignments, d.services(), d.matches);
  CHECK(s.total_entities == 1555);
  CHECK(s.entities_with_services == 1228);
  CHECK(s.total_services == 13497);
  CHECK(s.vulnerable_entities == 447);
  CHECK(s.total_beds == 520000);
  CHECK(s.vulnerable_beds == 167000);
  CHECK(s.mean_services_display == "8.7");
  CHECK(s.vulnerable_entity_ratio_display == "36.4%");
  CHECK(s.bed_ratio_whole_display == "32%");
  CHECK(s.bed_ratio_display == "32.1%");
  CHECK(s.vulnerable_service_ratio_display == "14.0%");
  CHECK(s.severity.total_vulnerable() == 1892);
  CHECK(s.mean_services_per_entity == doctest::Approx(13497.0 / 1555.0));
  const auto j = s.to_json();
  CHECK(j.at("bed_ratio_whole_display") == "32%");
  CHECK(j.at("vulnerable_service_ratio_display") == "14.0%");
}

TEST_CASE("fixture generation is deterministic and validated") {
  const auto a = fixtures::hospital_fixture(hospital_params());
  const auto b = fixtures::hospital_fixture(hospital_params());
  REQUIRE(a.records.size() == b.records.size());
  CHECK(a.assignments.back().entity_id == b.assignments.back().entity_id);
  CHECK(a.entities[17].beds == b.entities[17].beds);
  auto bad = hospital_params();
  bad.vulnerable_entities = 1300;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  bad = hospital_params();
  bad.beds_vulnerable = 600000;
  CHECK_THROWS_AS(fixtures::hospital_fixture(bad), InvalidArgument);
}

TEST_CASE("stats ignore pending and rejected assignments") {
  auto d = fixtures::hospital_fixture(hospital_params());
  const auto base = compute_stats(d.entities, d.assignments, d.services(), d.matches);
  d.assignments[0].status = attrib::AssignmentStatus::pending_review;
  d.assignments[1].status = attrib::AssignmentStatus::rejected;
  const auto s = compute_stats(d.entities, d.assignments, d.services(), d.matches);
  CHECK(s.total_services == base.total_services - 2);
}

TEST_CASE("operating company grouping") {
  std::vector<attrib::Entity> es(3);
  for (int i = 0; i < 3; ++i) {
    es[i].entity_id = "e" + std::to_string(i + 1);
    es[i].name = "H" + std::to_string(i + 1);
    es[i].beds = 100 * (i + 1);
  }
  es[0].operating_company = "Group A";
  es[1].operating_company = " group a ";
  std::vector<attrib::AssetAssignment> as;
  std::vector<attrib::RecordRef> svc;
  for (int i = 0; i < 3; ++i) {
    attrib::AssetAssignment a;
    a.record = {"op", Ipv4(static_cast<std::uint32_t>(i + 1)), 80, "http", ""};
    a.entity_id = es[i].entity_id;
    a.status = attrib::AssignmentStatus::accepted;
    as.push_back(a);
    svc.push_back(a.record);
  }
  std::vector<vuln::VulnMatch> ms = {{svc[0], "CVE-1", 9.8, vuln::Severity::critical, true}};
  const auto per_entity = compute_stats(es, as, svc, ms);
  CHECK(per_entity.total_entities == 3);
  CHECK(per_entity.vulnerable_entities == 1);
  CHECK(per_entity.vulnerable_beds == 100);
  const auto grouped = compute_stats(es, as, svc, ms, {.by_operating_company = true});
  CHECK(grouped.total_entities == 2);
  CHECK(grouped.vulnerable_entities == 1);
  CHECK(grouped.vulnerable_beds == 300);
  CHECK(grouped.total_beds == 600);
}

TEST_CASE("empty inputs produce n/a, not NaN") {
  const auto s = compute_stats({}, {}, {}, {});
  CHECK(s.total_entities == 0);
  CHECK(s.mean_services_display == "n/a");
  CHECK(s.bed_ratio_display == "n/a");
  CHECK(s.mean_services_per_entity == 0.0);
  const auto v = version_distribution("apache_httpd", {}, table());
  CHECK(v.total == 0);
  CHECK(v.unknown_percent(1) == "n/a");
  CHECK(banner_group_distribution({}).empty());
}

TEST_CASE("version distribution") {
  std::vector<enrich::EnrichedRecord> rs = {rec(1, "Apache/2.4.41 (Ubuntu)"), rec(2, "Apache/2.2.34"), rec(3, "Apache"),
                                            rec(4, "nginx/1.18.0"), rec(5, "")};
  const auto v = version_distribution("apache_httpd", rs, table());
  CHECK(v.total == 3);
  CHECK(v.unknown == 1);
  CHECK(v.unknown_percent(1) == "33.3%");
  REQUIRE(v.known.size() == 2);
  CHECK(v.known[0].version == "2.2.34");  // numeric order
  CHECK(v.known[1].version == "2.4.41");
  CHECK(v.to_json().at("unknown_percent") == "33.33%");

  std::vector<enrich::EnrichedRecord> big;
  for (std::uint32_t i = 0; i < 709; ++i) big.push_back(rec(i, i < 444 ? "nginx" : "nginx/1.1" + std::to_string(i % 9)));
  CHECK(version_distribution("nginx", big, table()).unknown_percent(2) == "62.62%");
}

TEST_CASE("banner groups use largest remainder and sum to 100") {
  std::vector<appscan::ServiceRecord> rs;
  for (int i = 0; i < 100; ++i) {
    appscan::ServiceRecord r;
    r.banner = i < 47 ? "" : (i < 80 ? "nginx" : "Apache/2.4.1");
    rs.push_back(r);
  }
  const auto g = banner_group_distribution(rs);
  REQUIRE(g.size() == 3);
  CHECK(g[0].group == "empty");
  CHECK(g[0].percent == "47.0%");

  std::mt19937_64 rng(8);
  const std::vector<std::string> pool = {"", "nginx", "Apache/2", "SSH-2.0-OpenSSH_8.0", "Microsoft-IIS/10.0", "x"};
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<appscan::ServiceRecord> v(1 + rng() % 500);
    for (auto& r : v) r.banner = pool[rng() % pool.size()];
    std::uint64_t tenths = 0, count = 0;
    for (const auto& s : banner_group_distribution(v)) {
      const auto dot = s.percent.find('.');
      tenths += std::stoull(s.percent.substr(0, dot)) * 10 + std::stoull(s.percent.substr(dot + 1, 1));
      count += s.count;
    }
    CHECK(tenths == 1000);
    CHECK(count == v.size());
  }
}

TEST_CASE("regression matches a normal-equations oracle") {
  std::mt19937_64 rng(100);
  std::uniform_real_distribution<double> xd(10, 2000), nd(-50, 50);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::pair<double, double>> pts;
    for (int i = 0; i < 100; ++i) {
      const double x = xd(rng);
      pts.emplace_back(x, 0.004 * x + 1.5 + nd(rng) / 10);
    }
    // Oracle: solve [n Sx; Sx Sxx][b; a] = [Sy; Sxy] by Cramer's rule in long double.
    long double n = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (const auto& [x, y] : pts) {
      n += 1;
      sx += x;
      sy += y;
      sxx += static_cast<long double>(x) * x;
      sxy += static_cast<long double>(x) * y;
    }
    const long double det = n * sxx - sx * sx;
    const double a = static_cast<double>((n * sxy - sx * sy) / det);
    const double b = static_cast<double>((sxx * sy - sx * sxy) / det);
    const auto r = fit_regression(pts);
    CHECK(r.n == 100);
    CHECK(rel(r.slope, a) < 1e-9);
    CHECK(rel(r.intercept, b) < 1e-9);
    CHECK(r.r_squared >= 0.0);
    CHECK(r.r_squared <= 1.0);
  }
}

TEST_CASE("regression degenerate inputs") {
  CHECK_THROWS_AS(fit_regression({}), InvalidArgument);
  CHECK_THROWS_AS(fit_regression({{1, 2}}), InvalidArgument);
  CHECK_THROWS_AS(fit_regression({{3, 1}, {3, 2}, {3, 5}}), InvalidArgument);
  CHECK_THROWS_AS(fit_regression({{1, 2}, {2, std::nan("")}}), InvalidArgument);
  CHECK_THROWS_AS(fit_regression({{1, 2}, {INFINITY, 3}}), InvalidArgument);
  const auto flat = fit_regression({{1, 4}, {2, 4}, {3, 4}});
  CHECK(flat.slope == 0.0);
  CHECK(flat.intercept == 4.0);
  CHECK(flat.r_squared == 1.0);
  const auto line = fit_regression({{0, 1}, {1, 3}});
  CHECK(line.slope == doctest::Approx(2.0));
  CHECK(!std::isnan(line.r_squared));
}

TEST_CASE("cohort averages") {
  const auto d = fixtures::cohort_fixture();
  const auto counts = cve_counts(d.assignments, d.matches);
  auto avg = [&](std::optional<bool> k, std::int64_t beds) {
    auto r = cohort_average(d.entities, counts, {k, beds});
    REQUIRE(r);
    return r->display;
  };
  CHECK(avg(true, 1800) == "11.63");
  CHECK(avg(std::nullopt, 1800) == "4.08");
  CHECK(avg(true, 800) == "3.10");
  CHECK(avg(std::nullopt, 800) == "2.42");
  // Entities without services never enter a cohort.
  std::size_t with_service = counts.size();
  CHECK(with_service == d.entities.size() - 20);
  CHECK_FALSE(cohort_average(d.entities, counts, {true, 10}).has_value());
  const auto unbounded = cohort_average(d.entities, counts, {std::nullopt, std::nullopt});
  REQUIRE(unbounded);
  CHECK(unbounded->n == with_service);
  CHECK(bed_cve_points(d.entities, counts).size() == with_service - 12);
  CHECK(bed_cve_points(d.entities, counts, 800).size() == 50);
}

TEST_CASE("cve counts conserve matches") {
  const auto d = fixtures::cohort_fixture(11);
  const auto counts = cve_counts(d.assignments, d.matches);
  std::uint64_t sum = 0;
  for (const auto& [_, c] : counts) sum += c;
  CHECK(sum == d.matches.size());
}

TEST_CASE("geo export is sorted and byte stable") {
  auto d = fixtures::hospital_fixture(hospital_params());
  std::reverse(d.records.begin(), d.records.end());
  const auto all = geo_export(d.records, d.matches, false);
  const auto vul = geo_export(d.records, d.matches, true);
  std::uint64_t wa = 0, wv = 0;
  for (const auto& p : all) wa += p.weight;
  for (const auto& p : vul) wv += p.weight;
  CHECK(wa == 13497);
  CHECK(wv == 1892);
  CHECK(std::is_sorted(all.begin(), all.end(),
                       [](const GeoPoint& a, const GeoPoint& b) { return std::pair(a.lat, a.lon) < std::pair(b.lat, b.lon); }));
  std::ostringstream a, b;
  write_geo_csv(a, all);
  std::reverse(d.records.begin(), d.records.end());
  write_geo_csv(b, geo_export(d.records, d.matches, false));
  CHECK(a.str() == b.str());
  CHECK(a.str().starts_with("lat,lon,weight\n"));
  const auto gj = geo_geojson(all);
  CHECK(gj.at("type") == "FeatureCollection");
  CHECK(gj.at("features").size() == all.size());
  CHECK(gj.dump() == geo_geojson(all).dump());
}

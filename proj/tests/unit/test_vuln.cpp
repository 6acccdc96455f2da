#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>
#include <sstream>

#include "recon/error.hpp"
#include "recon/fixtures.hpp"
#include "recon/vuln.hpp"

using namespace recon;
using namespace recon::vuln;

namespace {

const Canonicalizer& table() {
  static const Canonicalizer t = Canonicalizer::load(std::string(RECON_SOURCE_DIR) + "/config/canonical.csv");
  return t;
}

std::string nvd(const char* name) { return std::string(RECON_SOURCE_DIR) + "/fixtures/nvd/" + name; }

ProductVersion pv(std::string product, std::string version) {
  ProductVersion p;
  p.product = std::move(product);
  p.version = std::move(version);
  return p;
}

std::set<std::string> ids(const std::vector<const CveEntry*>& v) {
  std::set<std::string> out;
  for (const auto* e : v) out.insert(e->cve_id);
  return out;
}

// Independent comparison: split on '.', pad with zeros.
std::vector<unsigned long> oracle_parts(const std::string& s) {
  std::vector<unsigned long> out;
  std::stringstream ss(s);
  for (std::string p; std::getline(ss, p, '.');) out.push_back(std::stoul(p));
  return out;
}
int oracle_cmp(const std::string& a, const std::string& b) {
  auto x = oracle_parts(a), y = oracle_parts(b);
  const auto n = std::max(x.size(), y.size());
  x.resize(n, 0);
  y.resize(n, 0);
  return x < y ? -1 : (x == y ? 0 : 1);
}
bool oracle_contains(const VersionRange& r, const std::string& v) {
  if (r.exact) return oracle_cmp(v, *r.exact) == 0;
  bool ok = true;
  if (r.start_including) ok = ok && oracle_cmp(v, *r.start_including) >= 0;
  if (r.start_excluding) ok = ok && oracle_cmp(v, *r.start_excluding) > 0;
  if (r.end_including) ok = ok && oracle_cmp(v, *r.end_including) <= 0;
  if (r.end_excluding) ok = ok && oracle_cmp(v, *r.end_excluding) < 0;
  return ok;
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

}  // namespace

TEST_CASE("version parsing and ordering") {
  CHECK(Version::parse("2.2.34")->to_string() == "2.2.34");
  CHECK(Version::parse("7.4p1")->to_string() == "7.4");
  CHECK(Version::parse(" 1.0. ")->to_string() == "1.0");
  CHECK_FALSE(Version::parse("beta").has_value());
  CHECK_FALSE(Version::parse("").has_value());
  CHECK(*Version::parse("2.4") == *Version::parse("2.4.0"));
  CHECK(*Version::parse("2.4.9") < *Version::parse("2.4.10"));
  CHECK(compare(*Version::parse("1.20"), *Version::parse("1.3")) > 0);
}

TEST_CASE("banner parsing examples") {
  auto a = parse_banner("Apache/2.2.34", table());
  REQUIRE(a);
  CHECK(a->product == "apache_httpd");
  CHECK(a->version == "2.2.34");
  CHECK(a->vendor == "apache");

  auto iis = parse_banner("Microsoft-IIS/6.0", table());
  REQUIRE(iis);
  CHECK(iis->product == "iis");
  CHECK(iis->version == "6.0");

  auto n = parse_banner("nginx", table());
  REQUIRE(n);
  CHECK(n->product == "nginx");
  CHECK_FALSE(n->version.has_value());
  CHECK(match_cves(*n, CveIndex(load_nvd(nvd("feed_v11.json"), table()))).empty());
}

TEST_CASE("banner parsing per-product rules") {
  auto ssh = parse_banner("SSH-2.0-OpenSSH_7.4p1 Debian-10+deb9u7", table());
  REQUIRE(ssh);
  CHECK(ssh->product == "openssh");
  CHECK(ssh->version == "7.4");

  auto ftp = parse_banner("220 ProFTPD 1.3.5 Server (Debian) [::ffff:10.0.0.1]", table());
  REQUIRE(ftp);
  CHECK(ftp->product == "proftpd");
  CHECK(ftp->version == "1.3.5");

  auto vs = parse_banner("220 (vsFTPd 2.3.4)", table());
  REQUIRE(vs);
  CHECK(vs->product == "vsftpd");
  CHECK(vs->version == "2.3.4");

  auto comment = parse_banner("Apache/2.4.41 (Ubuntu)", table());
  REQUIRE(comment);
  CHECK(comment->version == "2.4.41");

  auto db = parse_banner("SSH-2.0-dropbear_2019.78", table());
  REQUIRE(db);
  CHECK(db->product == "dropbear_ssh");
  CHECK(db->version == "2019.78");

  CHECK_FALSE(parse_banner("", table()).has_value());
  CHECK_FALSE(parse_banner("Welcome to my toaster", table()).has_value());
  CHECK_FALSE(parse_banner("SSH-2.0-UnknownSSH_1.0", table()).has_value());
}

TEST_CASE("canonicalization table errors") {
  std::istringstream bad("apache\n");
  CHECK_THROWS_AS(Canonicalizer::parse(bad), InvalidArgument);
  std::istringstream bad_cpe("apache,apache_httpd,nocolon\n");
  CHECK_THROWS_AS(Canonicalizer::parse(bad_cpe), InvalidArgument);
  std::istringstream ok("banner_token,product\nFoo,Bar\n");
  auto t = Canonicalizer::parse(ok);
  CHECK(t.size() == 1);
  CHECK(t.product_for_token("FOO") == "bar");
}

TEST_CASE("range boundaries") {
  VersionRange inc{"p", std::nullopt, "2.2.0", std::nullopt, "2.2.99", std::nullopt};
  CHECK(inc.contains(*Version::parse("2.2.34")));
  CHECK(inc.contains(*Version::parse("2.2.0")));
  CHECK(inc.contains(*Version::parse("2.2.99")));
  CHECK_FALSE(inc.contains(*Version::parse("2.2.100")));
  CHECK_FALSE(inc.contains(*Version::parse("2.1.99")));

  VersionRange exc{"p", std::nullopt, std::nullopt, "2.0", std::nullopt, "2.4.0"};
  CHECK_FALSE(exc.contains(*Version::parse("2.4.0")));
  CHECK_FALSE(exc.contains(*Version::parse("2.4")));
  CHECK(exc.contains(*Version::parse("2.3.99")));
  CHECK_FALSE(exc.contains(*Version::parse("2.0")));
  CHECK(exc.contains(*Version::parse("2.0.1")));

  VersionRange exact{"p", "6.0", std::nullopt, std::nullopt, std::nullopt, std::nullopt};
  CHECK(exact.contains(*Version::parse("6")));
  CHECK_FALSE(exact.contains(*Version::parse("6.0.1")));
}

TEST_CASE("severity buckets") {
  CHECK(bucket(9.0) == Severity::critical);
  CHECK(bucket(8.9) == Severity::high);
  CHECK(bucket(7.0) == Severity::high);
  CHECK(bucket(6.9) == Severity::medium);
  CHECK(bucket(4.0) == Severity::medium);
  CHECK(bucket(10.0) == Severity::critical);
  CHECK(bucket(3.9) == Severity::low);
  CHECK(bucket(0.0) == Severity::low);
  CHECK_THROWS_AS(bucket(10.1), InvalidArgument);
  CHECK_THROWS_AS(bucket(-0.1), InvalidArgument);
  CHECK_THROWS_AS(bucket(std::nan("")), InvalidArgument);
  CHECK_FALSE(is_vulnerable(Severity::low));
  CHECK(is_vulnerable(Severity::medium));
  CHECK_FALSE(is_vulnerable(std::nullopt));
}

TEST_CASE("bucket totality over a fine grid") {
  int counts[4] = {0, 0, 0, 0};
  for (int i = 0; i <= 1000; ++i) {
    const double s = i / 100.0;
    const auto b = bucket(s);
    ++counts[static_cast<int>(b)];
    const int expect = s >= 9.0 ? 3 : s >= 7.0 ? 2 : s >= 4.0 ? 1 : 0;
    CHECK(static_cast<int>(b) == expect);
  }
  CHECK(counts[0] + counts[1] + counts[2] + counts[3] == 1001);
}

TEST_CASE("NVD 1.1 feed") {
  const auto entries = load_nvd(nvd("feed_v11.json"), table());
  std::map<std::string, const CveEntry*> by;
  for (const auto& e : entries) by[e.cve_id] = &e;
  CHECK_FALSE(by.contains("CVE-2099-0009"));  // unmapped cpe
  CHECK_FALSE(by.contains("CVE-2099-0011"));  // vulnerable=false only
  REQUIRE(by.contains("CVE-2099-0006"));
  CHECK(by["CVE-2099-0006"]->cvss_score == doctest::Approx(5.9));  // v3 over v2
  CHECK(by["CVE-2099-0006"]->cvss_version.starts_with("3"));
  REQUIRE(by.contains("CVE-2099-0005"));
  CHECK(by["CVE-2099-0005"]->cvss_score == doctest::Approx(4.3));
  CHECK(by["CVE-2099-0005"]->cvss_version == "2.0");

  const CveIndex index(entries);
  CHECK(ids(match_cves(pv("apache_httpd", "2.2.34"), index)) == std::set<std::string>{"CVE-2099-0001"});
  CHECK(ids(match_cves(pv("apache_httpd", "2.4.41"), index)) == std::set<std::string>{"CVE-2099-0002", "CVE-2099-0003"});
  CHECK(ids(match_cves(pv("apache_httpd", "2.4.42"), index)).empty());
  CHECK(ids(match_cves(pv("iis", "6.0"), index)) == std::set<std::string>{"CVE-2099-0004"});
  CHECK(ids(match_cves(pv("openssh", "7.4"), index)) == std::set<std::string>{"CVE-2099-0006"});
  CHECK(ids(match_cves(pv("openssh", "7.5"), index)) == std::set<std::string>{"CVE-2099-0006", "CVE-2099-0007"});
  CHECK(ids(match_cves(pv("openssh", "8.0"), index)) == std::set<std::string>{"CVE-2099-0007"});
  CHECK(ids(match_cves(pv("vsftpd", "2.3.4"), index)) == std::set<std::string>{"CVE-2099-0010"});
  CHECK(ids(match_cves(pv("vsftpd", "3.0.3"), index)).empty());
}

TEST_CASE("NVD 2.0 API response") {
  const auto entries = load_nvd(nvd("api_v20.json"), table());
  REQUIRE(entries.size() == 2);
  std::map<std::string, const CveEntry*> by;
  for (const auto& e : entries) by[e.cve_id] = &e;
  CHECK(by["CVE-2099-0101"]->cvss_score == doctest::Approx(8.1));  // primary metric
  CHECK(by["CVE-2099-0102"]->cvss_score == doctest::Approx(10.0));
  const CveIndex index(entries);
  CHECK(ids(match_cves(pv("nginx", "1.18.0"), index)) == std::set<std::string>{"CVE-2099-0101"});
  CHECK(ids(match_cves(pv("nginx", "1.19.0"), index)).empty());
  CHECK(ids(match_cves(pv("openssh", "7.4"), index)) == std::set<std::string>{"CVE-2099-0102"});
}

TEST_CASE("NVD input errors") {
  CHECK_THROWS(load_nvd(nvd("missing.json"), table()));
  CHECK_THROWS_AS(parse_nvd(nlohmann::json::object(), table()), InvalidArgument);
}

TEST_CASE("matcher equals brute force on a 200 x 50 grid") {
  std::mt19937_64 rng(99);
  const std::vector<std::string> products = {"apache_httpd", "nginx", "openssh", "iis"};
  auto rnd_version = [&] {
    std::uniform_int_distribution<int> len(1, 3), comp(0, 12);
    std::string s = std::to_string(comp(rng));
    for (int i = 1, n = len(rng); i < n; ++i) s += "." + std::to_string(comp(rng));
    return s;
  };
  std::vector<CveEntry> cves;
  for (int i = 0; i < 200; ++i) {
    CveEntry e;
    e.cve_id = "CVE-2098-" + std::to_string(1000 + i);
    e.cvss_score = static_cast<double>(i % 101) / 10.0;
    const int nr = 1 + static_cast<int>(rng() % 3);
    for (int k = 0; k < nr; ++k) {
      VersionRange r;
      r.product = products[rng() % products.size()];
      const auto kind = rng() % 6;
      if (kind == 0) {
        r.exact = rnd_version();
      } else {
        if (kind & 1) r.start_including = rnd_version(); else if (kind & 2) r.start_excluding = rnd_version();
        if (rng() % 2) r.end_including = rnd_version(); else r.end_excluding = rnd_version();
      }
      e.affected.push_back(r);
    }
    cves.push_back(e);
  }
  // Versions include every bound value so inclusive/exclusive edges are hit.
  std::vector<std::string> versions;
  for (int i = 0; i < 30; ++i) versions.push_back(rnd_version());
  for (const auto& e : cves)
    for (const auto& r : e.affected)
      for (const auto& b : {r.exact, r.start_including, r.end_excluding})
        if (b && versions.size() < 50) versions.push_back(*b);
  REQUIRE(versions.size() == 50);

  const CveIndex index(cves);
  std::size_t pairs = 0, hits = 0;
  for (const auto& prod : products) {
    for (const auto& v : versions) {
      std::set<std::string> want;
      for (const auto& e : cves)
        for (const auto& r : e.affected)
          if (r.product == prod && oracle_contains(r, v)) want.insert(e.cve_id);
      pairs += cves.size();
      hits += want.size();
      CHECK(ids(match_cves(pv(prod, v), index)) == want);
    }
  }
  CHECK(pairs == 200 * 50 * products.size());
  CHECK(hits > 0);
}

TEST_CASE("parallel matching equals serial") {
  const CveIndex index(load_nvd(nvd("feed_v11.json"), table()));
  std::vector<enrich::EnrichedRecord> records;
  const std::vector<std::string> banners = {"Apache/2.2.34", "Apache/2.4.41 (Ubuntu)", "Microsoft-IIS/6.0", "nginx",
                                            "SSH-2.0-OpenSSH_7.5", "220 ProFTPD 1.3.5 Server", "", "garbage"};
  for (std::uint32_t i = 0; i < 3000; ++i) records.push_back(rec(i, banners[i % banners.size()]));
  const auto par = match_records(records, index, table());
  const auto ser = match_records_serial(records, index, table());
  REQUIRE(par.size() == ser.size());
  for (std::size_t i = 0; i < par.size(); ++i) {
    CHECK(par[i].record == ser[i].record);
    CHECK(par[i].cve_id == ser[i].cve_id);
  }
  for (const auto& m : par) {
    CHECK(m.potential);
    CHECK(m.severity == bucket(m.cvss_score));
  }
  CHECK(to_json(par.front()).at("potential") == true);
}

TEST_CASE("severity table reproduces the fixture distribution") {
  auto p = fixtures::HospitalParams::from_json(nlohmann::json::parse(R"({
    "seed": 2021, "entities": 1555, "entities_with_services": 1228, "services": 13497,
    "vulnerable_entities": 447, "severity": {"critical": 931, "high": 443, "medium": 518},
    "beds_total": 520000, "beds_vulnerable": 167000})"));
  const auto d = fixtures::hospital_fixture(p);
  const auto t = severity_table(d.services(), d.matches);
  CHECK(t.critical == 931);
  CHECK(t.high == 443);
  CHECK(t.medium == 518);
  CHECK(t.total_vulnerable() == 1892);
  CHECK(t.total_services() == 13497);
  CHECK(t.low == 250);
  const std::string expected =
      "CVSS-SCORE            Number of vulnerable services\n"
      "9.0-10 (critical)     931\n"
      "7.0-8.9 (high)        443\n"
      "4.0-6.9 (medium)      518\n"
      "Total vulnerable services: 1,892\n";
  CHECK(t.render() == expected);
}

TEST_CASE("raising a score never lowers service severity") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> sd(0.0, 10.0);
  for (int trial = 0; trial < 300; ++trial) {
    attrib::RecordRef ref{"op", Ipv4(1), 80, "http", ""};
    std::vector<VulnMatch> ms;
    const int n = 1 + static_cast<int>(rng() % 5);
    for (int i = 0; i < n; ++i) {
      const double s = sd(rng);
      ms.push_back({ref, "c" + std::to_string(i), s, bucket(s), true});
    }
    const auto before = *service_severity(ms);
    auto& m = ms[rng() % ms.size()];
    m.cvss_score = std::min(10.0, m.cvss_score + sd(rng) / 2);
    m.severity = bucket(m.cvss_score);
    CHECK(*service_severity(ms) >= before);
  }
  CHECK_FALSE(service_severity({}).has_value());
}

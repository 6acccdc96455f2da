#include <doctest.h>

#include <random>
#include <sstream>

#include "recon/dns.hpp"
#include "recon/enrich.hpp"
#include "recon/error.hpp"
#include "recon/simnet.hpp"

using namespace recon;
using namespace recon::enrich;
using nlohmann::json;

namespace {

// Linear scans, written without the interval index.
const RegistryRecord* registry_oracle(const std::vector<RegistryRecord>& all, Ipv4 ip) {
  const RegistryRecord* best = nullptr;
  for (const auto& r : all) {
    if (ip < r.start_ip || r.end_ip < ip) continue;
    if (!best) {
      best = &r;
      continue;
    }
    const std::uint64_t s = std::uint64_t{r.end_ip.value} - r.start_ip.value;
    const std::uint64_t bs = std::uint64_t{best->end_ip.value} - best->start_ip.value;
    if (s < bs || (s == bs && r.netname < best->netname)) best = &r;
  }
  return best;
}

const PrefixAsn* asn_oracle(const std::vector<PrefixAsn>& all, Ipv4 ip) {
  const PrefixAsn* best = nullptr;
  for (const auto& p : all) {
    const std::uint32_t mask = p.length == 0 ? 0 : ~std::uint32_t{0} << (32 - p.length);
    if ((ip.value & mask) != p.prefix.value) continue;
    if (!best || p.length > best->length) best = &p;
  }
  return best;
}

std::vector<RegistryRecord> random_registry(std::mt19937_64& rng, std::size_t n) {
  std::vector<RegistryRecord> out;
  const std::uint32_t base = Ipv4(10, 0, 0, 0).value;
  std::uniform_int_distribution<std::uint32_t> off(0, 1 << 16);
  std::geometric_distribution<std::uint32_t> len(0.002);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t s = base + off(rng);
    const std::uint32_t e = s + std::min<std::uint32_t>(len(rng), 1 << 15);
    // Few distinct netnames so equal-size ties happen.
    out.push_back({Ipv4(s), Ipv4(e), "NET-" + std::to_string(rng() % 7), "d" + std::to_string(i), "DE", "RIPE"});
  }
  // Some exact duplicates of range with different names.
  for (std::size_t i = 0; i < n / 10; ++i) {
    auto r = out[rng() % out.size()];
    r.netname = "DUP-" + std::to_string(i % 3);
    out.push_back(r);
  }
  return out;
}

std::vector<PrefixAsn> random_prefixes(std::mt19937_64& rng, std::size_t n) {
  std::vector<PrefixAsn> out;
  std::uniform_int_distribution<int> len(8, 28);
  for (std::size_t i = 0; i < n; ++i) {
    const int l = len(rng);
    const std::uint32_t mask = ~std::uint32_t{0} << (32 - l);
    // Keep everything inside 10/8 so prefixes nest.
    const std::uint32_t v = (Ipv4(10, 0, 0, 0).value | (static_cast<std::uint32_t>(rng()) & 0x00FFFFFF)) & mask;
    out.push_back({Ipv4(v), static_cast<std::uint8_t>(l), static_cast<std::uint32_t>(64500 + i), "AS" + std::to_string(i), ""});
  }
  return out;
}

}  // namespace

TEST_CASE("registry lookup agrees with linear scan on random overlapping ranges") {
  std::mt19937_64 rng(20200);
  const auto recs = random_registry(rng, 400);
  const RegistryIndex idx(recs);
  std::uniform_int_distribution<std::uint32_t> q(Ipv4(10, 0, 0, 0).value - 100, Ipv4(10, 1, 0, 0).value + 40000);
  std::size_t agree = 0, hits = 0;
  const std::size_t n = 5000;
  for (std::size_t i = 0; i < n; ++i) {
    const Ipv4 ip(q(rng));
    const auto* got = idx.find(ip);
    const auto* want = registry_oracle(recs, ip);
    hits += want != nullptr;
    if ((got == nullptr) == (want == nullptr) && (!got || *got == *want)) ++agree;
  }
  CHECK(agree == n);
  CHECK(hits > n / 2);
  // Segments are sorted and disjoint.
  const auto& seg = idx.segments();
  for (std::size_t i = 1; i < seg.size(); ++i) CHECK(seg[i - 1].hi < seg[i].lo);
}

TEST_CASE("registry boundaries and ties") {
  const std::vector<RegistryRecord> recs = {
      {Ipv4(10, 0, 0, 0), Ipv4(10, 0, 255, 255), "BIG", "", "", ""},
      {Ipv4(10, 0, 1, 0), Ipv4(10, 0, 1, 255), "ZETA", "", "", ""},
      {Ipv4(10, 0, 1, 0), Ipv4(10, 0, 1, 255), "ALPHA", "", "", ""},
      {Ipv4(255, 255, 255, 0), Ipv4(255, 255, 255, 255), "TOP", "", "", ""},
  };
  const RegistryIndex idx(recs);
  CHECK(idx.find(Ipv4(10, 0, 0, 255))->netname == "BIG");
  CHECK(idx.find(Ipv4(10, 0, 1, 0))->netname == "ALPHA");
  CHECK(idx.find(Ipv4(10, 0, 1, 255))->netname == "ALPHA");
  CHECK(idx.find(Ipv4(10, 0, 2, 0))->netname == "BIG");
  CHECK(idx.find(Ipv4(9, 255, 255, 255)) == nullptr);
  CHECK(idx.find(Ipv4(10, 1, 0, 0)) == nullptr);
  CHECK(idx.find(Ipv4(255, 255, 255, 255))->netname == "TOP");
  CHECK_FALSE(RegistryIndex{}.lookup(Ipv4(1, 2, 3, 4)));
}

TEST_CASE("asn lookup agrees with longest-prefix linear scan") {
  std::mt19937_64 rng(7);
  auto prefixes = random_prefixes(rng, 600);
  prefixes.push_back({Ipv4(0, 0, 0, 0), 0, 1, "default", ""});
  const AsnIndex idx(prefixes);
  std::size_t agree = 0;
  const std::size_t n = 5000;
  for (std::size_t i = 0; i < n; ++i) {
    // Mostly inside 10/8, some outside to hit the default route.
    const Ipv4 ip(i % 10 == 0 ? static_cast<std::uint32_t>(rng())
                              : (Ipv4(10, 0, 0, 0).value | (static_cast<std::uint32_t>(rng()) & 0x00FFFFFF)));
    const auto* got = idx.find(ip);
    const auto* want = asn_oracle(prefixes, ip);
    // Duplicate (prefix, length) pairs: first in file order.
    if (got && want && got->length == want->length && got->prefix == want->prefix) {
      const PrefixAsn* first = nullptr;
      for (const auto& p : prefixes)
        if (p.prefix == want->prefix && p.length == want->length) {
          first = &p;
          break;
        }
      agree += *got == *first;
    } else {
      agree += got == want;
    }
  }
  CHECK(agree == n);
}

TEST_CASE("parallel registry batch equals serial") {
  std::mt19937_64 rng(3);
  const RegistryIndex idx(random_registry(rng, 300));
  std::vector<Ipv4> ips;
  for (int i = 0; i < 20000; ++i) ips.emplace_back(Ipv4(10, 0, 0, 0).value + static_cast<std::uint32_t>(rng() % 90000));
  CHECK(lookup_registry_all(idx, ips) == lookup_registry_all_serial(idx, ips));
}

TEST_CASE("registry csv keeps descriptions verbatim") {
  std::istringstream in(
      "start_ip,end_ip,netname,description,country,source\n"
      "# comment\n"
      "192.0.2.0,192.0.2.255,KLINIKUM-NET,\"Klinikum Musterstadt gGmbH, IT \\\"Abteilung\\\"\",DE,RIPE\n"
      "\n"
      "198.51.100.0,198.51.100.127,DOC-NET,Documentation,ZZ,TEST\n");
  const auto recs = parse_registry(in);
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].description == "Klinikum Musterstadt gGmbH, IT \"Abteilung\"");
  CHECK(recs[0].start_ip == Ipv4(192, 0, 2, 0));
  CHECK(recs[1].netname == "DOC-NET");

  std::istringstream bad("192.0.2.9,192.0.2.0,X,d,DE,RIPE\n");
  CHECK_THROWS_AS(parse_registry(bad), InvalidArgument);
  std::istringstream short_row("192.0.2.0,192.0.2.9,X\n");
  CHECK_THROWS_AS(parse_registry(short_row), InvalidArgument);
}

TEST_CASE("prefix-to-as tsv") {
  std::istringstream in("192.0.2.0\t24\t64500\tEXAMPLE-AS\n198.51.100.0\t22\t64501_64502\n");
  const auto p = parse_prefix_asn(in, "2020-11-01");
  REQUIRE(p.size() == 2);
  CHECK(p[0].asn == 64500);
  CHECK(p[0].as_name == "EXAMPLE-AS");
  CHECK(p[1].asn == 64501);
  CHECK(p[1].snapshot_date == "2020-11-01");
  std::istringstream host_bits("192.0.2.1\t24\t1\n");
  CHECK_THROWS_AS(parse_prefix_asn(host_bits), InvalidArgument);
  std::istringstream too_long("192.0.2.0\t33\t1\n");
  CHECK_THROWS_AS(parse_prefix_asn(too_long), InvalidArgument);
}

TEST_CASE("geo csv and smallest-range lookup") {
  std::istringstream in("cidr,lat,lon,city,country\n10.0.0.0/8,51.0,10.0,Germany,DE\n10.1.0.0/16,52.52,13.405,Berlin,DE\n");
  const GeoIndex g(parse_geo(in));
  CHECK(g.find(Ipv4(10, 1, 2, 3))->city == "Berlin");
  CHECK(g.find(Ipv4(10, 2, 2, 3))->city == "Germany");
  std::istringstream bad("10.0.0.0/8,95.0,10.0,X,DE\n");
  CHECK_THROWS_AS(parse_geo(bad), InvalidArgument);
}

TEST_CASE("enriched record ndjson round trip") {
  appscan::ServiceRecord s;
  s.ip = Ipv4(192, 0, 2, 7);
  s.port = 443;
  s.protocol_id = "https";
  s.banner = "Apache/2.4.41";
  s.raw_excerpt = std::string("\x00\x01HTTP", 6);
  s.collected_at = 1600000000000000;
  s.tls = std::vector<CertInfo>{{"www.example.org", {"www.example.org"}, "CN=ca", "2020-01-01T00:00:00Z",
                                 "2021-01-01T00:00:00Z", std::string(64, 'a')}};
  EnrichedRecord e;
  e.service = s;
  e.operation_id = "op-1";
  e.registry = RegistryRecord{Ipv4(192, 0, 2, 0), Ipv4(192, 0, 2, 255), "N", "Desc, with comma", "DE", "RIPE"};
  e.asn = PrefixAsn{Ipv4(192, 0, 2, 0), 24, 64500, "EX", "2020-11-01"};
  e.rdns = "host7.example.org";
  EnrichedRecord bare;
  bare.service = s;
  bare.operation_id = "op-1";

  std::stringstream io;
  write_ndjson(io, {e, bare});
  const auto text = io.str();
  CHECK(std::count(text.begin(), text.end(), '\n') == 2);
  const auto j = json::parse(text.substr(0, text.find('\n')));
  CHECK(j["schema"] == 1);
  const auto back = read_ndjson(io);
  REQUIRE(back.size() == 2);
  CHECK(back[0].service == s);
  CHECK(back[0].registry == e.registry);
  CHECK(back[0].asn == e.asn);
  CHECK(back[0].rdns == e.rdns);
  CHECK_FALSE(back[1].registry);
  CHECK_FALSE(back[1].rdns);

  auto wrong = j;
  wrong["schema"] = 2;
  CHECK_THROWS_AS(enriched_from_json(wrong), InvalidArgument);
}

TEST_CASE("enrich_all resolves each address once") {
  const simnet::DnsFixture dns({}, {{Ipv4(127, 0, 0, 5), "srv5.hospital-x.de"}});
  dns::UdpResolver resolver(dns.endpoint());
  std::vector<appscan::ServiceRecord> recs(3);
  recs[0].ip = recs[1].ip = Ipv4(127, 0, 0, 5);
  recs[1].port = 22;
  recs[2].ip = Ipv4(127, 0, 0, 6);
  Indices idx;
  idx.resolver = &resolver;
  const auto out = enrich_all(recs, "op", idx);
  REQUIRE(out.size() == 3);
  CHECK(out[0].rdns == std::optional<std::string>("srv5.hospital-x.de"));
  CHECK(out[1].rdns == out[0].rdns);
  CHECK_FALSE(out[2].rdns);
  CHECK(dns.queries() == 2);
}

TEST_CASE("consistency merge keeps latest per key and rejects foreign units") {
  auto rec = [](std::uint8_t d, std::int64_t at, const std::string& banner) {
    appscan::ServiceRecord r;
    r.ip = Ipv4(127, 0, 0, d);
    r.port = 80;
    r.protocol_id = "http";
    r.banner = banner;
    r.collected_at = at;
    return appscan::to_json(r);
  };
  orchestrator::Orchestrator::LoggedResult a, b;
  a.unit.unit_id = 1;
  a.unit.operation_id = "op";
  a.unit.site_group = "eu";
  a.batch.records = {rec(1, 100, "old"), rec(2, 100, "x")};
  b.unit = a.unit;
  b.unit.unit_id = 2;
  b.batch.records = {rec(1, 200, "new"), rec(2, 100, "y")};
  const auto m = consistency_merge({a, b}, "op", {1, 2});
  REQUIRE(m.records.size() == 2);
  CHECK(m.records[0].banner == "new");
  CHECK(m.records[0].site_group == "eu");
  CHECK(m.records[1].banner == "y");  // equal timestamps: later arrival
  CHECK(m.archived.size() == 2);

  auto other = b;
  other.unit.site_group = "us";
  CHECK(consistency_merge({a, other}, "op", {1, 2}).records.size() == 4);
  CHECK_THROWS_AS(consistency_merge({a}, "op", {2}), InvalidArgument);
  CHECK_THROWS_AS(consistency_merge({a}, "op-2", {1}), InvalidArgument);
}

#include "recon/enrich.hpp"

#include <fstream>
#include <map>
#include <tuple>

#include "recon/csv.hpp"
#include "recon/error.hpp"

namespace recon::enrich {

using nlohmann::json;

namespace {

bool looks_like_header(const csv::Row& row) { return !row.empty() && !Ipv4::try_parse(trim(row[0])) && row[0].find('/') == std::string::npos; }

double parse_double(const std::string& s, const char* what) {
  try {
    return std::stod(std::string(trim(s)));
  } catch (const std::logic_error&) {
    throw InvalidArgument(std::string("bad ") + what + ": '" + s + "'");
  }
}

std::uint64_t parse_uint(const std::string& s, const char* what) {
  const auto t = std::string(trim(s));
  if (t.empty() || t.find_first_not_of("0123456789") != std::string::npos) {
    throw InvalidArgument(std::string("bad ") + what + ": '" + s + "'");
  }
  return std::stoull(t);
}

std::ifstream open(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NotFound("cannot open " + path);
  return in;
}

}  // namespace

RegistryIndex::RegistryIndex(std::vector<RegistryRecord> records)
    : IntervalIndex<RegistryRecord>(
          std::move(records), [](const RegistryRecord& r) { return Ipv4Range{r.start_ip, r.end_ip}; },
          [](const RegistryRecord& a, const RegistryRecord& b) {
            const auto sa = std::uint64_t{a.end_ip.value} - a.start_ip.value;
            const auto sb = std::uint64_t{b.end_ip.value} - b.start_ip.value;
            return std::tie(sa, a.netname) < std::tie(sb, b.netname);
          }) {}

AsnIndex::AsnIndex(std::vector<PrefixAsn> prefixes)
    : IntervalIndex<PrefixAsn>(
          std::move(prefixes), [](const PrefixAsn& p) { return Ipv4Range::from_prefix(p.prefix, p.length); },
          [](const PrefixAsn& a, const PrefixAsn& b) { return a.length > b.length; }) {}

GeoIndex::GeoIndex(std::vector<GeoInfo> rows)
    : IntervalIndex<GeoInfo>(
          std::move(rows), [](const GeoInfo& g) { return g.range; },
          [](const GeoInfo& a, const GeoInfo& b) { return a.range.size() < b.range.size(); }) {}

std::vector<RegistryRecord> parse_registry(std::istream& in) {
  std::vector<RegistryRecord> out;
  bool first = true;
  for (auto& row : csv::read(in)) {
    if (first && looks_like_header(row)) {
      first = false;
      continue;
    }
    first = false;
    if (row.size() != 6) throw InvalidArgument("registry row needs 6 fields, got " + std::to_string(row.size()));
    RegistryRecord r{Ipv4::parse(trim(row[0])), Ipv4::parse(trim(row[1])), row[2], row[3], row[4], row[5]};
    if (r.end_ip < r.start_ip) throw InvalidArgument("registry range start > end: " + row[0] + "," + row[1]);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<PrefixAsn> parse_prefix_asn(std::istream& in, const std::string& snapshot_date) {
  std::vector<PrefixAsn> out;
  for (auto& row : csv::read(in, '\t')) {
    if (row.size() < 3) throw InvalidArgument("prefix row needs prefix, length, asn");
    const auto len = parse_uint(row[1], "prefix length");
    if (len > 32) throw InvalidArgument("prefix length out of range: " + row[1]);
    PrefixAsn p;
    p.prefix = Ipv4::parse(trim(row[0]));
    p.length = static_cast<std::uint8_t>(len);
    Ipv4Range::from_prefix(p.prefix, p.length);  // rejects host bits
    // CAIDA multi-origin entries look like "123_456"; keep the first origin.
    p.asn = static_cast<std::uint32_t>(parse_uint(split(row[2], '_').front(), "asn"));
    p.as_name = row.size() > 3 ? row[3] : "";
    p.snapshot_date = snapshot_date;
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<GeoInfo> parse_geo(std::istream& in) {
  std::vector<GeoInfo> out;
  bool first = true;
  for (auto& row : csv::read(in)) {
    if (first && looks_like_header(row)) {
      first = false;
      continue;
    }
    first = false;
    if (row.size() != 5) throw InvalidArgument("geo row needs 5 fields");
    GeoInfo g;
    g.range = Ipv4Range::parse(trim(row[0]));
    g.lat = parse_double(row[1], "latitude");
    g.lon = parse_double(row[2], "longitude");
    if (g.lat < -90 || g.lat > 90 || g.lon < -180 || g.lon > 180) throw InvalidArgument("coordinates out of range: " + row[0]);
    g.city = row[3];
    g.country = row[4];
    out.push_back(std::move(g));
  }
  return out;
}

std::vector<RegistryRecord> load_registry(const std::string& path) {
  auto in = open(path);
  return parse_registry(in);
}
std::vector<PrefixAsn> load_prefix_asn(const std::string& path, const std::string& snapshot_date) {
  auto in = open(path);
  return parse_prefix_asn(in, snapshot_date);
}
std::vector<GeoInfo> load_geo(const std::string& path) {
  auto in = open(path);
  return parse_geo(in);
}

std::vector<const RegistryRecord*> lookup_registry_all(const RegistryIndex& index, const std::vector<Ipv4>& ips) {
  std::vector<const RegistryRecord*> out(ips.size());
  const auto n = static_cast<std::int64_t>(ips.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) out[i] = index.find(ips[i]);
  return out;
}

std::vector<const RegistryRecord*> lookup_registry_all_serial(const RegistryIndex& index, const std::vector<Ipv4>& ips) {
  std::vector<const RegistryRecord*> out;
  out.reserve(ips.size());
  for (Ipv4 ip : ips) out.push_back(index.find(ip));
  return out;
}

// ---- serialization ----

namespace {

json registry_json(const RegistryRecord& r) {
  return {{"start_ip", r.start_ip.to_string()}, {"end_ip", r.end_ip.to_string()}, {"netname", r.netname},
          {"description", r.description}, {"country", r.country}, {"source", r.source}};
}

json asn_json(const PrefixAsn& p) {
  return {{"prefix", p.prefix.to_string() + "/" + std::to_string(p.length)}, {"asn", p.asn},
          {"as_name", p.as_name}, {"snapshot_date", p.snapshot_date}};
}

json geo_json(const GeoInfo& g) {
  return {{"range", g.range.to_string()}, {"lat", g.lat}, {"lon", g.lon}, {"city", g.city}, {"country", g.country}};
}

}  // namespace

json to_json(const EnrichedRecord& r) {
  // nlohmann::json objects keep keys sorted, so output is byte-stable.
  json j{{"schema", kSchemaVersion}, {"service", appscan::to_json(r.service)}, {"operation_id", r.operation_id}};
  j["registry"] = r.registry ? registry_json(*r.registry) : json(nullptr);
  j["asn"] = r.asn ? asn_json(*r.asn) : json(nullptr);
  j["rdns"] = r.rdns ? json(*r.rdns) : json(nullptr);
  j["geo"] = r.geo ? geo_json(*r.geo) : json(nullptr);
  return j;
}

EnrichedRecord enriched_from_json(const json& j) {
  if (j.value("schema", 0) != kSchemaVersion) throw InvalidArgument("unsupported enriched record schema");
  EnrichedRecord r;
  r.service = appscan::record_from_json(j.at("service"));
  r.operation_id = j.value("operation_id", "");
  if (j.contains("registry") && !j["registry"].is_null()) {
    const auto& g = j["registry"];
    r.registry = RegistryRecord{Ipv4::parse(g.at("start_ip").get<std::string>()),
                                Ipv4::parse(g.at("end_ip").get<std::string>()),
                                g.value("netname", ""),
                                g.value("description", ""),
                                g.value("country", ""),
                                g.value("source", "")};
  }
  if (j.contains("asn") && !j["asn"].is_null()) {
    const auto& a = j["asn"];
    const auto pfx = a.at("prefix").get<std::string>();
    const auto slash = pfx.find('/');
    if (slash == std::string::npos) throw InvalidArgument("asn prefix needs a length");
    PrefixAsn p;
    p.prefix = Ipv4::parse(pfx.substr(0, slash));
    p.length = static_cast<std::uint8_t>(std::stoi(pfx.substr(slash + 1)));
    p.asn = a.value("asn", 0u);
    p.as_name = a.value("as_name", "");
    p.snapshot_date = a.value("snapshot_date", "");
    r.asn = p;
  }
  if (j.contains("rdns") && !j["rdns"].is_null()) r.rdns = j["rdns"].get<std::string>();
  if (j.contains("geo") && !j["geo"].is_null()) {
    const auto& g = j["geo"];
    r.geo = GeoInfo{Ipv4Range::parse(g.at("range").get<std::string>()), g.value("lat", 0.0), g.value("lon", 0.0),
                    g.value("city", ""), g.value("country", "")};
  }
  return r;
}

void write_ndjson(std::ostream& out, const std::vector<EnrichedRecord>& records) {
  for (const auto& r : records) out << to_json(r).dump() << '\n';
}

std::vector<EnrichedRecord> read_ndjson(std::istream& in) {
  std::vector<EnrichedRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    try {
      out.push_back(enriched_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw InvalidArgument("line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

std::vector<EnrichedRecord> load_ndjson(const std::string& path) {
  auto in = open(path);
  return read_ndjson(in);
}

// ---- enrichment ----

std::optional<std::string> reverse_dns(Ipv4 ip, dns::Resolver& resolver) { return resolver.reverse(ip); }

EnrichedRecord enrich(const appscan::ServiceRecord& record, const std::string& operation_id, const Indices& idx) {
  EnrichedRecord e;
  e.service = record;
  e.operation_id = operation_id;
  if (idx.registry) e.registry = idx.registry->lookup(record.ip);
  if (idx.asn) e.asn = idx.asn->lookup(record.ip);
  if (idx.geo) e.geo = idx.geo->lookup(record.ip);
  if (idx.resolver) e.rdns = reverse_dns(record.ip, *idx.resolver);
  return e;
}

std::vector<EnrichedRecord> enrich_all(const std::vector<appscan::ServiceRecord>& records,
                                       const std::string& operation_id, const Indices& idx) {
  std::map<Ipv4, std::optional<std::string>> ptr_cache;
  Indices no_dns = idx;
  no_dns.resolver = nullptr;
  std::vector<EnrichedRecord> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    auto e = enrich(r, operation_id, no_dns);
    if (idx.resolver) {
      auto it = ptr_cache.find(r.ip);
      if (it == ptr_cache.end()) it = ptr_cache.emplace(r.ip, reverse_dns(r.ip, *idx.resolver)).first;
      e.rdns = it->second;
    }
    out.push_back(std::move(e));
  }
  return out;
}

MergeResult consistency_merge(const std::vector<orchestrator::Orchestrator::LoggedResult>& batches,
                              const std::string& operation_id, const std::set<std::uint64_t>& known_units) {
  using Key = std::tuple<Ipv4, std::uint16_t, std::string, std::string>;
  std::map<Key, appscan::ServiceRecord> best;
  MergeResult out;
  // Later wins on equal timestamps, so arrival order breaks ties.
  for (const auto& b : batches) {
    if (b.unit.operation_id != operation_id || !known_units.count(b.unit.unit_id)) {
      throw InvalidArgument("batch references unknown unit " + std::to_string(b.unit.unit_id) + " of '" +
                            b.unit.operation_id + "'");
    }
    for (const auto& j : b.batch.records) {
      auto rec = appscan::record_from_json(j);
      if (rec.site_group.empty()) rec.site_group = b.unit.site_group;
      Key k{rec.ip, rec.port, rec.protocol_id, rec.site_group};
      auto it = best.find(k);
      if (it == best.end()) {
        best.emplace(std::move(k), std::move(rec));
      } else if (rec.collected_at >= it->second.collected_at) {
        out.archived.push_back(std::move(it->second));
        it->second = std::move(rec);
      } else {
        out.archived.push_back(std::move(rec));
      }
    }
  }
  for (auto& [_, r] : best) out.records.push_back(std::move(r));
  return out;
}

}  // namespace recon::enrich

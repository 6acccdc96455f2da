#include "recon/vuln.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "recon/csv.hpp"
#include "recon/error.hpp"

namespace recon::vuln {

using nlohmann::json;

// ---- versions ----

std::optional<Version> Version::parse(std::string_view text) {
  const auto t = trim(text);
  Version v;
  std::size_t i = 0;
  while (i < t.size()) {
    if (t[i] < '0' || t[i] > '9') break;
    std::uint64_t n = 0;
    std::size_t digits = 0;
    while (i < t.size() && t[i] >= '0' && t[i] <= '9') {
      if (++digits > 18) return std::nullopt;
      n = n * 10 + static_cast<std::uint64_t>(t[i] - '0');
      ++i;
    }
    v.parts.push_back(n);
    if (i + 1 < t.size() && t[i] == '.' && t[i + 1] >= '0' && t[i + 1] <= '9') {
      ++i;
      continue;
    }
    break;
  }
  if (v.parts.empty()) return std::nullopt;
  return v;
}

std::string Version::to_string() const {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += '.';
    out += std::to_string(parts[i]);
  }
  return out;
}

int compare(const Version& a, const Version& b) {
  const std::size_t n = std::max(a.parts.size(), b.parts.size());
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t x = i < a.parts.size() ? a.parts[i] : 0;
    const std::uint64_t y = i < b.parts.size() ? b.parts[i] : 0;
    if (x != y) return x < y ? -1 : 1;
  }
  return 0;
}

// ---- canonicalization ----

Canonicalizer Canonicalizer::parse(std::istream& in) {
  Canonicalizer c;
  for (const auto& row : csv::read(in, ',')) {
    if (row.size() < 2) throw InvalidArgument("canonicalization row needs banner_token,product");
    const auto token = to_lower(trim(row[0]));
    const auto product = to_lower(trim(row[1]));
    if (token == "banner_token") continue;
    if (token.empty() || product.empty()) throw InvalidArgument("empty canonicalization field");
    c.tokens_[token] = product;
    if (row.size() > 2) {
      std::istringstream cpes(row[2]);
      for (std::string cpe; cpes >> cpe;) {
        cpe = to_lower(cpe);
        if (cpe.find(':') == std::string::npos) throw InvalidArgument("cpe name needs vendor:product: " + cpe);
        c.cpes_[cpe] = product;
        c.vendors_.try_emplace(product, cpe.substr(0, cpe.find(':')));
      }
    }
  }
  return c;
}

Canonicalizer Canonicalizer::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NotFound("cannot open " + path);
  return parse(in);
}

std::optional<std::string> Canonicalizer::product_for_token(std::string_view token) const {
  auto it = tokens_.find(to_lower(token));
  if (it == tokens_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::string> Canonicalizer::product_for_cpe(std::string_view vendor, std::string_view product) const {
  auto it = cpes_.find(to_lower(vendor) + ":" + to_lower(product));
  if (it == cpes_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::string> Canonicalizer::vendor_of(const std::string& product) const {
  auto it = vendors_.find(product);
  if (it == vendors_.end()) return std::nullopt;
  return it->second;
}

// ---- banner grammar ----

namespace {

std::vector<std::string> words(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string strip_punct(std::string w) {
  auto junk = [](char c) { return c == '(' || c == ')' || c == '[' || c == ']' || c == ',' || c == ';' || c == ':'; };
  while (!w.empty() && junk(w.front())) w.erase(0, 1);
  while (!w.empty() && (junk(w.back()) || w.back() == '.')) w.pop_back();
  return w;
}

std::optional<std::string> numeric_version(std::string_view s) {
  auto v = Version::parse(s);
  if (!v) return std::nullopt;
  return v->to_string();
}

ProductVersion make(const std::string& product, std::optional<std::string> version, std::string_view banner,
                    const Canonicalizer& table) {
  ProductVersion pv;
  pv.product = product;
  pv.version = std::move(version);
  pv.raw_banner = std::string(banner);
  pv.vendor = table.vendor_of(product);
  return pv;
}

}  // namespace

std::optional<ProductVersion> parse_banner(std::string_view banner, const Canonicalizer& table) {
  std::string_view b = trim(banner);
  if (b.empty()) return std::nullopt;

  // SSH-2.0-OpenSSH_7.4p1 Debian-10
  if (b.size() > 4 && to_lower(b.substr(0, 4)) == "ssh-") {
    const auto dash = b.find('-', 4);
    if (dash == std::string_view::npos) return std::nullopt;
    std::string_view soft = b.substr(dash + 1);
    soft = soft.substr(0, soft.find_first_of(" \t"));
    const auto sep = soft.find_first_of("_-");
    const std::string name(soft.substr(0, sep));
    auto product = table.product_for_token(name);
    if (!product) return std::nullopt;
    std::optional<std::string> ver;
    if (sep != std::string_view::npos) ver = numeric_version(soft.substr(sep + 1));
    return make(*product, ver, banner, table);
  }

  // Greeting prefixes: "220 ", "220-", "+OK ", "* OK ".
  auto stripped = std::string(b);
  for (std::string_view p : {"* OK ", "+OK ", "* ok ", "+ok "}) {
    if (stripped.starts_with(p)) {
      stripped.erase(0, p.size());
      break;
    }
  }
  if (stripped.size() >= 4 && std::isdigit(static_cast<unsigned char>(stripped[0])) &&
      std::isdigit(static_cast<unsigned char>(stripped[1])) && std::isdigit(static_cast<unsigned char>(stripped[2])) &&
      (stripped[3] == ' ' || stripped[3] == '-')) {
    stripped.erase(0, 4);
  }

  const auto ws = words(stripped);
  for (std::size_t i = 0; i < ws.size(); ++i) {
    const std::string w = strip_punct(ws[i]);
    if (w.empty()) continue;
    const auto slash = w.find('/');
    const std::string name = w.substr(0, slash);
    auto product = table.product_for_token(name);
    std::optional<std::string> ver;
    if (!product) {
      // Name_version (dropbear_2019.78) and Name-version forms.
      const auto sep = name.find_last_of("_-");
      if (sep == std::string::npos || sep + 1 >= name.size() || !std::isdigit(static_cast<unsigned char>(name[sep + 1])))
        continue;
      product = table.product_for_token(name.substr(0, sep));
      if (!product) continue;
      ver = numeric_version(name.substr(sep + 1));
      return make(*product, ver, banner, table);
    }
    if (slash != std::string::npos) {
      ver = numeric_version(std::string_view(w).substr(slash + 1));
    } else if (i + 1 < ws.size()) {
      const auto next = strip_punct(ws[i + 1]);
      if (!next.empty() && std::isdigit(static_cast<unsigned char>(next[0]))) ver = numeric_version(next);
    }
    return make(*product, ver, banner, table);
  }
  return std::nullopt;
}

// ---- CVE entries ----

bool VersionRange::contains(const Version& v) const {
  auto cmp = [&](const std::optional<std::string>& bound) -> std::optional<int> {
    if (!bound) return std::nullopt;
    const auto b = Version::parse(*bound);
    if (!b) return std::nullopt;
    return compare(v, *b);
  };
  if (exact) {
    const auto c = cmp(exact);
    return c && *c == 0;
  }
  if (auto c = cmp(start_including); c && *c < 0) return false;
  if (auto c = cmp(start_excluding); c && *c <= 0) return false;
  if (auto c = cmp(end_including); c && *c > 0) return false;
  if (auto c = cmp(end_excluding); c && *c >= 0) return false;
  return true;
}

std::string to_string(Severity s) {
  switch (s) {
    case Severity::low: return "low";
    case Severity::medium: return "medium";
    case Severity::high: return "high";
    case Severity::critical: return "critical";
  }
  return "?";
}

Severity bucket(double score) {
  if (!(score >= 0.0 && score <= 10.0)) throw InvalidArgument("cvss score outside [0, 10]");
  if (score >= 9.0) return Severity::critical;
  if (score >= 7.0) return Severity::high;
  if (score >= 4.0) return Severity::medium;
  return Severity::low;
}

namespace {

const json* path(const json& j, std::initializer_list<const char*> keys) {
  const json* cur = &j;
  for (const char* k : keys) {
    if (!cur->is_object() || !cur->contains(k)) return nullptr;
    cur = &(*cur)[k];
  }
  return cur;
}

std::optional<std::string> opt_str(const json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_string()) return std::nullopt;
  return j[key].get<std::string>();
}

bool well_formed(const VersionRange& r) {
  for (const auto* b : {&r.exact, &r.start_including, &r.start_excluding, &r.end_including, &r.end_excluding})
    if (*b && !Version::parse(**b)) return false;
  const auto& lo = r.start_including ? r.start_including : r.start_excluding;
  const auto& hi = r.end_including ? r.end_including : r.end_excluding;
  if (lo && hi && compare(*Version::parse(*hi), *Version::parse(*lo)) < 0) return false;
  return true;
}

// One cpe_match / cpeMatch object. `uri_key` differs between feed versions.
std::optional<VersionRange> range_from_match(const json& m, const char* uri_key, const Canonicalizer& table) {
  if (!m.value("vulnerable", true)) return std::nullopt;
  const auto uri = opt_str(m, uri_key);
  if (!uri) return std::nullopt;
  const auto f = split(*uri, ':');
  if (f.size() < 6 || f[0] != "cpe" || f[1] != "2.3" || f[2] != "a") return std::nullopt;
  const auto product = table.product_for_cpe(f[3], f[4]);
  if (!product) return std::nullopt;
  VersionRange r;
  r.product = *product;
  const std::string& ver = f[5];
  if (ver == "-") return std::nullopt;  // not applicable
  r.start_including = opt_str(m, "versionStartIncluding");
  r.start_excluding = opt_str(m, "versionStartExcluding");
  r.end_including = opt_str(m, "versionEndIncluding");
  r.end_excluding = opt_str(m, "versionEndExcluding");
  const bool bounded = r.start_including || r.start_excluding || r.end_including || r.end_excluding;
  if (ver != "*" && !bounded) r.exact = ver;
  if (!well_formed(r)) return std::nullopt;
  return r;
}

void collect_v11(const json& node, std::vector<VersionRange>& out, const Canonicalizer& table) {
  if (node.contains("cpe_match"))
    for (const auto& m : node["cpe_match"])
      if (auto r = range_from_match(m, "cpe23Uri", table)) out.push_back(std::move(*r));
  if (node.contains("children"))
    for (const auto& c : node["children"]) collect_v11(c, out, table);
}

std::optional<std::pair<double, std::string>> metric_v20(const json& metrics) {
  for (const char* key : {"cvssMetricV31", "cvssMetricV30", "cvssMetricV2"}) {
    if (!metrics.contains(key) || !metrics[key].is_array() || metrics[key].empty()) continue;
    const json* pick = &metrics[key][0];
    for (const auto& m : metrics[key])
      if (m.value("type", "") == "Primary") {
        pick = &m;
        break;
      }
    const json* data = path(*pick, {"cvssData"});
    if (!data || !data->contains("baseScore")) continue;
    return std::make_pair((*data)["baseScore"].get<double>(), data->value("version", std::string(key).ends_with("V2") ? "2.0" : "3.x"));
  }
  return std::nullopt;
}

}  // namespace

std::vector<CveEntry> parse_nvd(const json& doc, const Canonicalizer& table) {
  std::vector<CveEntry> out;
  try {
    if (doc.contains("CVE_Items")) {
      for (const auto& item : doc["CVE_Items"]) {
        CveEntry e;
        const json* id = path(item, {"cve", "CVE_data_meta", "ID"});
        if (!id) continue;
        e.cve_id = id->get<std::string>();
        if (const json* d = path(item, {"cve", "description", "description_data"}); d && d->is_array() && !d->empty())
          e.summary = (*d)[0].value("value", "");
        if (const json* v3 = path(item, {"impact", "baseMetricV3", "cvssV3"})) {
          e.cvss_score = v3->at("baseScore").get<double>();
          e.cvss_version = v3->value("version", "3.x");
        } else if (const json* v2 = path(item, {"impact", "baseMetricV2", "cvssV2"})) {
          e.cvss_score = v2->at("baseScore").get<double>();
          e.cvss_version = v2->value("version", "2.0");
        } else {
          continue;
        }
        if (const json* nodes = path(item, {"configurations", "nodes"}))
          for (const auto& n : *nodes) collect_v11(n, e.affected, table);
        if (!e.affected.empty()) out.push_back(std::move(e));
      }
    } else if (doc.contains("vulnerabilities")) {
      for (const auto& v : doc["vulnerabilities"]) {
        const json& cve = v.at("cve");
        CveEntry e;
        e.cve_id = cve.at("id").get<std::string>();
        for (const auto& d : cve.value("descriptions", json::array()))
          if (d.value("lang", "") == "en") {
            e.summary = d.value("value", "");
            break;
          }
        const auto metric = cve.contains("metrics") ? metric_v20(cve["metrics"]) : std::nullopt;
        if (!metric) continue;
        e.cvss_score = metric->first;
        e.cvss_version = metric->second;
        for (const auto& conf : cve.value("configurations", json::array()))
          for (const auto& n : conf.value("nodes", json::array()))
            for (const auto& m : n.value("cpeMatch", json::array()))
              if (auto r = range_from_match(m, "criteria", table)) e.affected.push_back(std::move(*r));
        if (!e.affected.empty()) out.push_back(std::move(e));
      }
    } else {
      throw InvalidArgument("not an NVD feed: expected CVE_Items or vulnerabilities");
    }
  } catch (const json::exception& ex) {
    throw InvalidArgument(std::string("malformed NVD feed: ") + ex.what());
  }
  for (const auto& e : out) bucket(e.cvss_score);  // validates range
  return out;
}

std::vector<CveEntry> load_nvd(const std::string& p, const Canonicalizer& table) {
  std::ifstream in(p);
  if (!in) throw NotFound("cannot open " + p);
  try {
    return parse_nvd(json::parse(in), table);
  } catch (const json::parse_error& e) {
    throw InvalidArgument(p + ": " + e.what());
  }
}

CveIndex::CveIndex(std::vector<CveEntry> entries) : entries_(std::move(entries)) {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    std::set<std::string> products;
    for (const auto& r : entries_[i].affected) products.insert(r.product);
    for (const auto& p : products) by_product_[p].push_back(i);
  }
}

const std::vector<std::size_t>& CveIndex::for_product(const std::string& product) const {
  static const std::vector<std::size_t> none;
  auto it = by_product_.find(product);
  return it == by_product_.end() ? none : it->second;
}

json to_json(const VulnMatch& m) {
  return {{"operation_id", m.record.operation_id},
          {"ip", m.record.ip.to_string()},
          {"port", m.record.port},
          {"protocol_id", m.record.protocol_id},
          {"site_group", m.record.site_group},
          {"cve_id", m.cve_id},
          {"cvss_score", m.cvss_score},
          {"severity", to_string(m.severity)},
          {"potential", m.potential}};
}

VulnMatch match_from_json(const json& j) {
  VulnMatch m;
  m.record.operation_id = j.at("operation_id").get<std::string>();
  m.record.ip = Ipv4::parse(j.at("ip").get<std::string>());
  m.record.port = j.at("port").get<std::uint16_t>();
  m.record.protocol_id = j.at("protocol_id").get<std::string>();
  m.record.site_group = j.value("site_group", "");
  m.cve_id = j.at("cve_id").get<std::string>();
  m.cvss_score = j.at("cvss_score").get<double>();
  m.severity = bucket(m.cvss_score);
  if (j.contains("severity") && j["severity"] != to_string(m.severity))
    throw InvalidArgument("match severity does not agree with its score: " + m.cve_id);
  m.potential = true;
  return m;
}

std::vector<const CveEntry*> match_cves(const ProductVersion& pv, const CveIndex& index) {
  std::vector<const CveEntry*> out;
  if (!pv.version) return out;
  const auto v = Version::parse(*pv.version);
  if (!v) return out;
  for (std::size_t i : index.for_product(pv.product)) {
    const auto& e = index.entries()[i];
    for (const auto& r : e.affected) {
      if (r.product == pv.product && r.contains(*v)) {
        out.push_back(&e);
        break;
      }
    }
  }
  return out;
}

attrib::RecordRef ref_of(const enrich::EnrichedRecord& r) {
  return {r.operation_id, r.service.ip, r.service.port, r.service.protocol_id, r.service.site_group};
}

static std::vector<VulnMatch> match_one(const enrich::EnrichedRecord& r, const CveIndex& index,
                                        const Canonicalizer& table) {
  std::vector<VulnMatch> out;
  const auto pv = parse_banner(r.service.banner, table);
  if (!pv) return out;
  for (const auto* e : match_cves(*pv, index))
    out.push_back({ref_of(r), e->cve_id, e->cvss_score, bucket(e->cvss_score), true});
  return out;
}

std::vector<VulnMatch> match_records_serial(const std::vector<enrich::EnrichedRecord>& records, const CveIndex& index,
                                            const Canonicalizer& table) {
  std::vector<VulnMatch> out;
  for (const auto& r : records) {
    auto m = match_one(r, index, table);
    out.insert(out.end(), m.begin(), m.end());
  }
  return out;
}

std::vector<VulnMatch> match_records(const std::vector<enrich::EnrichedRecord>& records, const CveIndex& index,
                                     const Canonicalizer& table) {
  std::vector<std::vector<VulnMatch>> parts(records.size());
  const auto n = static_cast<std::int64_t>(records.size());
#pragma omp parallel for schedule(dynamic, 32)
  for (std::int64_t i = 0; i < n; ++i) parts[i] = match_one(records[i], index, table);
  std::vector<VulnMatch> out;
  for (auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

std::optional<Severity> service_severity(const std::vector<VulnMatch>& matches) {
  std::optional<Severity> best;
  for (const auto& m : matches)
    if (!best || m.severity > *best) best = m.severity;
  return best;
}

bool is_vulnerable(std::optional<Severity> s) { return s && *s >= Severity::medium; }

static std::string thousands(std::uint64_t n) {
  std::string s = std::to_string(n);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

std::string SeverityTable::render() const {
  std::ostringstream o;
  o << "CVSS-SCORE            Number of vulnerable services\n"
    << "9.0-10 (critical)     " << thousands(critical) << "\n"
    << "7.0-8.9 (high)        " << thousands(high) << "\n"
    << "4.0-6.9 (medium)      " << thousands(medium) << "\n"
    << "Total vulnerable services: " << thousands(total_vulnerable()) << "\n";
  return o.str();
}

json SeverityTable::to_json() const {
  return {{"critical", critical}, {"high", high},     {"medium", medium},
          {"low", low},           {"none", none},     {"total_vulnerable", total_vulnerable()},
          {"total_services", total_services()}};
}

SeverityTable severity_table(const std::vector<attrib::RecordRef>& services, const std::vector<VulnMatch>& matches) {
  std::map<attrib::RecordRef, Severity> worst;
  for (const auto& m : matches) {
    auto [it, fresh] = worst.try_emplace(m.record, m.severity);
    if (!fresh && m.severity > it->second) it->second = m.severity;
  }
  SeverityTable t;
  const std::set<attrib::RecordRef> distinct(services.begin(), services.end());
  for (const auto& s : distinct) {
    auto it = worst.find(s);
    if (it == worst.end()) {
      ++t.none;
      continue;
    }
    switch (it->second) {
      case Severity::critical: ++t.critical; break;
      case Severity::high: ++t.high; break;
      case Severity::medium: ++t.medium; break;
      case Severity::low: ++t.low; break;
    }
  }
  return t;
}

}  // namespace recon::vuln

#include "recon/attrib.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <unordered_map>

#include <httplib.h>

#include "recon/csv.hpp"
#include "recon/error.hpp"
#include "recon/tls.hpp"

namespace recon::attrib {

using nlohmann::json;

namespace {

std::string iso_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::optional<std::int64_t> parse_count(std::string_view s, const std::string& what) {
  const auto t = trim(s);
  if (t.empty()) return std::nullopt;
  std::string digits;
  for (char c : t) {
    if (c == '_' || c == ',' || c == '.') continue;  // thousands separators
    if (c < '0' || c > '9') throw InvalidArgument("bad " + what + ": " + std::string(t));
    digits += c;
  }
  if (digits.empty() || digits.size() > 15) throw InvalidArgument("bad " + what + ": " + std::string(t));
  return std::stoll(digits);
}

void add_domain(std::vector<std::string>& domains, std::string_view d) {
  std::string v = to_lower(trim(d));
  while (!v.empty() && v.back() == '.') v.pop_back();
  if (v.empty()) return;
  if (std::find(domains.begin(), domains.end(), v) == domains.end()) domains.push_back(std::move(v));
}

std::string strip_wildcard(std::string name) {
  name = to_lower(trim(name));
  while (name.starts_with("*.")) name.erase(0, 2);
  while (!name.empty() && name.back() == '.') name.pop_back();
  return name;
}

bool covered_by(std::string_view host, std::string_view domain) {
  return host == domain || ends_with_domain(host, domain);
}

// Tokens without legal-form removal.
std::vector<std::string> raw_tokens(std::string_view text) {
  const std::string folded = fold_diacritics(text);
  std::vector<std::string> out;
  std::string cur;
  for (char c : folded) {
    const auto u = static_cast<unsigned char>(c);
    if ((u >= 'a' && u <= 'z') || (u >= '0' && u <= '9')) {
      cur += c;
    } else if (u >= 'A' && u <= 'Z') {
      cur += static_cast<char>(u - 'A' + 'a');
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string normalize_legal(std::string_view form) {
  std::string out;
  for (char c : fold_diacritics(form)) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isalnum(u)) out += static_cast<char>(std::tolower(u));
  }
  return out;
}

}  // namespace

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::seed_list: return "seed_list";
    case Provenance::cert_expansion: return "cert_expansion";
    case Provenance::manual: return "manual";
  }
  return "?";
}

static Provenance provenance_from_string(const std::string& s) {
  if (s == "seed_list") return Provenance::seed_list;
  if (s == "cert_expansion") return Provenance::cert_expansion;
  if (s == "manual") return Provenance::manual;
  throw InvalidArgument("unknown provenance: " + s);
}

bool kritis_by_cases(std::optional<std::int64_t> cases) { return cases && *cases > kKritisCaseThreshold; }

json to_json(const Entity& e) {
  auto opt = [](const std::optional<std::int64_t>& v) { return v ? json(*v) : json(nullptr); };
  return {{"entity_id", e.entity_id},
          {"name", e.name},
          {"domains", e.domains},
          {"beds", opt(e.beds)},
          {"inpatient_cases_per_year", opt(e.inpatient_cases_per_year)},
          {"kritis", e.kritis},
          {"kritis_manual", e.kritis_manual},
          {"operating_company", e.operating_company},
          {"provenance", to_string(e.provenance)},
          {"domainless", e.domainless},
          {"pending_review", e.pending_review},
          {"discovered_from", e.discovered_from}};
}

Entity entity_from_json(const json& j) {
  try {
    Entity e;
    e.entity_id = j.at("entity_id").get<std::string>();
    e.name = j.at("name").get<std::string>();
    for (const auto& d : j.value("domains", std::vector<std::string>{})) add_domain(e.domains, d);
    if (j.contains("beds") && !j["beds"].is_null()) e.beds = j["beds"].get<std::int64_t>();
    if (j.contains("inpatient_cases_per_year") && !j["inpatient_cases_per_year"].is_null())
      e.inpatient_cases_per_year = j["inpatient_cases_per_year"].get<std::int64_t>();
    e.kritis_manual = j.value("kritis_manual", false);
    e.kritis = e.kritis_manual || kritis_by_cases(e.inpatient_cases_per_year);
    e.operating_company = j.value("operating_company", "");
    e.provenance = provenance_from_string(j.value("provenance", "seed_list"));
    e.domainless = e.domains.empty();
    e.pending_review = j.value("pending_review", false);
    e.discovered_from = j.value("discovered_from", "");
    return e;
  } catch (const json::exception& ex) {
    throw InvalidArgument(std::string("malformed entity: ") + ex.what());
  }
}

LoadResult load_entities(std::istream& in) {
  LoadResult out;
  std::unordered_map<std::string, std::size_t> by_name;
  auto rows = csv::read(in, ',');
  std::size_t line = 0;
  for (auto& row : rows) {
    ++line;
    if (line == 1 && !row.empty() && to_lower(trim(row[0])) == "name") continue;
    if (row.size() < 1 || row.size() > 5) throw InvalidArgument("entity row " + std::to_string(line) + ": expected up to 5 fields");
    row.resize(5);
    const std::string name(trim(row[0]));
    if (name.empty()) throw InvalidArgument("entity row " + std::to_string(line) + ": empty name");
    Entity e;
    e.name = name;
    for (const auto& d : split(row[1], ';')) add_domain(e.domains, d);
    e.beds = parse_count(row[2], "beds");
    e.inpatient_cases_per_year = parse_count(row[3], "cases");
    e.operating_company = std::string(trim(row[4]));

    const std::string key = to_lower(name);
    if (auto it = by_name.find(key); it != by_name.end()) {
      Entity& prev = out.entities[it->second];
      out.warnings.push_back("duplicate entity name merged: " + name);
      for (const auto& d : e.domains) add_domain(prev.domains, d);
      if (!prev.beds) prev.beds = e.beds;
      if (!prev.inpatient_cases_per_year) prev.inpatient_cases_per_year = e.inpatient_cases_per_year;
      if (prev.operating_company.empty()) prev.operating_company = e.operating_company;
      prev.domainless = prev.domains.empty();
      prev.kritis = prev.kritis_manual || kritis_by_cases(prev.inpatient_cases_per_year);
      continue;
    }
    e.entity_id = "e" + std::to_string(out.entities.size() + 1);
    e.provenance = Provenance::seed_list;
    e.domainless = e.domains.empty();
    e.kritis = kritis_by_cases(e.inpatient_cases_per_year);
    if (e.domainless) out.warnings.push_back("entity without domains: " + name);
    by_name.emplace(key, out.entities.size());
    out.entities.push_back(std::move(e));
  }
  return out;
}

LoadResult load_entities_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NotFound("cannot open " + path);
  return load_entities(in);
}

// ---- subdomains ----

HttpCtSource::HttpCtSource(std::string base_url, std::chrono::milliseconds timeout)
    : base_(std::move(base_url)), timeout_(timeout) {
  while (!base_.empty() && base_.back() == '/') base_.pop_back();
}

std::optional<std::vector<std::string>> HttpCtSource::names(const std::string& domain) {
  httplib::Client cli(base_);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout_);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout_ - secs);
  cli.set_connection_timeout(secs.count(), usecs.count());
  cli.set_read_timeout(secs.count(), usecs.count());
  auto res = cli.Get("/?q=%25." + domain + "&output=json");
  if (!res || res->status != 200) return std::nullopt;
  std::vector<std::string> out;
  try {
    const auto j = json::parse(res->body);
    if (!j.is_array()) return std::nullopt;
    for (const auto& e : j) {
      if (!e.is_object() || !e.contains("name_value") || !e["name_value"].is_string()) continue;
      for (const auto& n : split(e["name_value"].get<std::string>(), '\n')) {
        auto v = strip_wildcard(n);
        if (!v.empty()) out.push_back(std::move(v));
      }
    }
  } catch (const json::exception&) {
    return std::nullopt;
  }
  return out;
}

bool valid_domain(std::string_view domain) {
  if (domain.empty() || domain.size() > 253) return false;
  const auto labels = split(domain, '.');
  if (labels.size() < 2) return false;
  for (const auto& l : labels) {
    if (l.empty() || l.size() > 63 || l.front() == '-' || l.back() == '-') return false;
    for (char c : l) {
      const bool ok = (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '-';
      if (!ok) return false;
    }
  }
  // TLD must not be all digits.
  return !std::all_of(labels.back().begin(), labels.back().end(), [](char c) { return c >= '0' && c <= '9'; });
}

SubdomainResult discover_subdomains(const std::string& domain_in, CtSource* ct, const std::vector<std::string>& wordlist,
                                    dns::Resolver& resolver) {
  const std::string domain = to_lower(trim(domain_in));
  if (!valid_domain(domain)) throw InvalidArgument("invalid domain: " + domain_in);
  std::set<std::string> hosts;
  SubdomainResult out;
  std::optional<std::vector<std::string>> ct_names;
  if (ct) ct_names = ct->names(domain);
  if (ct_names) {
    for (const auto& n : *ct_names) {
      const auto v = strip_wildcard(n);
      if (covered_by(v, domain) && valid_domain(v)) hosts.insert(v);
    }
  } else {
    out.partial = true;
  }
  for (const auto& w : wordlist) {
    const auto label = to_lower(trim(w));
    if (label.empty()) continue;
    const std::string host = label + "." + domain;
    if (!valid_domain(host) || hosts.contains(host)) continue;
    if (!resolver.resolve(host).empty()) hosts.insert(host);
  }
  out.hosts.assign(hosts.begin(), hosts.end());
  return out;
}

// ---- scoring ----

std::string to_string(Signal s) {
  switch (s) {
    case Signal::cert_exact_domain: return "cert_exact_domain";
    case Signal::cert_subdomain: return "cert_subdomain";
    case Signal::whois_name_match: return "whois_name_match";
    case Signal::rdns_suffix: return "rdns_suffix";
    case Signal::generic_keyword: return "generic_keyword";
  }
  return "?";
}

static Signal signal_from_string(const std::string& s) {
  for (auto v : {Signal::cert_exact_domain, Signal::cert_subdomain, Signal::whois_name_match, Signal::rdns_suffix,
                 Signal::generic_keyword})
    if (to_string(v) == s) return v;
  throw InvalidArgument("unknown signal: " + s);
}

double AttributionScore::non_keyword_total() const {
  double t = 0;
  for (const auto& e : evidence)
    if (e.signal != Signal::generic_keyword) t += e.weight;
  return t;
}

ScoringConfig ScoringConfig::from_json(const json& j) {
  ScoringConfig c;
  try {
    if (j.contains("weights")) {
      const auto& w = j["weights"];
      c.w_cert_exact = w.value("cert_exact_domain", c.w_cert_exact);
      c.w_cert_subdomain = w.value("cert_subdomain", c.w_cert_subdomain);
      c.w_rdns_suffix = w.value("rdns_suffix", c.w_rdns_suffix);
      c.w_whois_name = w.value("whois_name_match", c.w_whois_name);
      c.w_keyword = w.value("generic_keyword", c.w_keyword);
    }
    if (j.contains("thresholds")) {
      c.auto_threshold = j["thresholds"].value("auto", c.auto_threshold);
      c.review_threshold = j["thresholds"].value("review", c.review_threshold);
    }
    if (j.contains("legal_forms")) c.legal_forms = j["legal_forms"].get<std::vector<std::string>>();
    if (j.contains("keywords")) c.keywords = j["keywords"].get<std::vector<std::string>>();
    if (j.contains("wordlist")) c.wordlist = j["wordlist"].get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("malformed scoring config: ") + e.what());
  }
  for (double w : {c.w_cert_exact, c.w_cert_subdomain, c.w_rdns_suffix, c.w_whois_name, c.w_keyword})
    if (!(w >= 0)) throw InvalidArgument("weights must be non-negative");
  if (!(c.auto_threshold > c.review_threshold) || !(c.review_threshold > 0))
    throw InvalidArgument("need auto_threshold > review_threshold > 0");
  return c;
}

ScoringConfig ScoringConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NotFound("cannot open " + path);
  try {
    return from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw InvalidArgument(std::string("scoring config: ") + e.what());
  }
}

std::string fold_diacritics(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    if (c < 0x80) {
      out += static_cast<char>(c);
      ++i;
      continue;
    }
    // Two-byte sequences cover Latin-1 Supplement and Latin Extended-A.
    if ((c & 0xE0) == 0xC0 && i + 1 < s.size()) {
      const unsigned cp = ((c & 0x1Fu) << 6) | (static_cast<unsigned char>(s[i + 1]) & 0x3Fu);
      i += 2;
      switch (cp) {
        case 0xE4: out += "ae"; continue;
        case 0xC4: out += "Ae"; continue;
        case 0xF6: out += "oe"; continue;
        case 0xD6: out += "Oe"; continue;
        case 0xFC: out += "ue"; continue;
        case 0xDC: out += "Ue"; continue;
        case 0xDF: out += "ss"; continue;
        default: break;
      }
      // Remaining Latin-1 letters map to their base letter.
      static const char* lower = "aaaaaaaceeeeiiiidnooooo/ouuuuyty";  // U+00E0..U+00FF
      static const char* upper = "AAAAAAACEEEEIIIIDNOOOOOxOUUUUYTs";  // U+00C0..U+00DF
      if (cp >= 0xE0 && cp <= 0xFF) {
        out += lower[cp - 0xE0];
      } else if (cp >= 0xC0 && cp <= 0xDF) {
        out += upper[cp - 0xC0];
      } else if (cp >= 0x100 && cp <= 0x17F) {
        // Latin Extended-A, base letter per code point.
        static const char* ext =
            "AaAaAaCcCcCcCcDdDdEeEeEeEeEeGgGgGgGgHhHhIiIiIiIiIiJjJjKkkLlLlLlLlLlNnNnNnnNnOoOoOoOoRrRrRrSsSsSsSsTtTtTtUuUuUuUuUuUuWwYyYZzZzZzs";
        const std::size_t k = cp - 0x100;
        if (k < std::char_traits<char>::length(ext)) out += ext[k];
      }
      continue;
    }
    // Longer sequences: copy through.
    std::size_t len = (c & 0xF0) == 0xE0 ? 3 : (c & 0xF8) == 0xF0 ? 4 : 1;
    out.append(s.substr(i, len));
    i += len;
  }
  return out;
}

std::vector<std::string> name_tokens(std::string_view name, const std::vector<std::string>& legal_forms) {
  std::set<std::string> drop;
  for (const auto& f : legal_forms) drop.insert(normalize_legal(f));
  std::vector<std::string> out;
  for (auto& t : raw_tokens(name)) {
    if (drop.contains(t)) continue;
    out.push_back(std::move(t));
  }
  // Dotted forms like "e.V." split into single letters; drop the joined pair too.
  std::vector<std::string> merged;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (i + 1 < out.size() && out[i].size() == 1 && out[i + 1].size() == 1 && drop.contains(out[i] + out[i + 1])) {
      ++i;
      continue;
    }
    merged.push_back(out[i]);
  }
  return merged;
}

std::vector<std::string> cert_names(const appscan::ServiceRecord& r) {
  std::vector<std::string> out;
  if (!r.tls || r.tls->empty()) return out;
  const auto& leaf = r.tls->front();
  auto push = [&](const std::string& n) {
    auto v = strip_wildcard(n);
    if (!valid_domain(v)) return;
    if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(std::move(v));
  };
  push(leaf.subject_cn);
  for (const auto& s : leaf.sans) push(s);
  return out;
}

AttributionScore score_candidate(const enrich::EnrichedRecord& record, const Entity& entity, const ScoringConfig& cfg) {
  AttributionScore score;
  auto add = [&](Signal s, std::string v, double w) {
    if (w <= 0) return;
    score.evidence.push_back({s, std::move(v), w});
    score.total += w;
  };

  const auto names = cert_names(record.service);
  std::optional<std::string> exact, sub;
  if (record.service.tls && !record.service.tls->empty()) {
    const auto& leaf = record.service.tls->front();
    std::vector<std::string> raw{leaf.subject_cn};
    raw.insert(raw.end(), leaf.sans.begin(), leaf.sans.end());
    for (const auto& r : raw) {
      const std::string n = to_lower(trim(r));
      const bool wildcard = n.starts_with("*.");
      const std::string bare = strip_wildcard(n);
      for (const auto& d : entity.domains) {
        // "*.d" covers hosts below d, not d itself.
        if (!exact && !wildcard && bare == d) exact = bare;
        if (!sub && (ends_with_domain(bare, d) || (wildcard && bare == d))) sub = n;
      }
    }
  }
  if (exact) add(Signal::cert_exact_domain, *exact, cfg.w_cert_exact);
  if (sub) add(Signal::cert_subdomain, *sub, cfg.w_cert_subdomain);

  if (record.registry && !record.registry->description.empty()) {
    const auto want = name_tokens(entity.name, cfg.legal_forms);
    if (!want.empty()) {
      const auto have_v = name_tokens(record.registry->description, cfg.legal_forms);
      const std::set<std::string> have(have_v.begin(), have_v.end());
      if (std::all_of(want.begin(), want.end(), [&](const std::string& t) { return have.contains(t); }))
        add(Signal::whois_name_match, record.registry->description, cfg.w_whois_name);
    }
  }

  if (record.rdns) {
    const auto host = strip_wildcard(*record.rdns);
    for (const auto& d : entity.domains) {
      if (covered_by(host, d)) {
        add(Signal::rdns_suffix, host, cfg.w_rdns_suffix);
        break;
      }
    }
  }

  // Keyword: a generic term shared by the entity name and record text that
  // the domain signals have not already explained.
  {
    const auto ent = raw_tokens(entity.name);
    const std::set<std::string> ent_set(ent.begin(), ent.end());
    auto owned = [&](const std::string& host) {
      return std::any_of(entity.domains.begin(), entity.domains.end(),
                         [&](const std::string& d) { return covered_by(host, d); });
    };
    std::string text;
    for (const auto& n : names)
      if (!owned(n)) text += n + " ";
    if (record.rdns && !owned(strip_wildcard(*record.rdns))) text += *record.rdns + " ";
    if (record.registry) text += record.registry->description + " " + record.registry->netname;
    text = to_lower(fold_diacritics(text));
    for (const auto& kw_raw : cfg.keywords) {
      const auto kw = to_lower(fold_diacritics(kw_raw));
      if (kw.empty()) continue;
      const bool in_entity = std::any_of(ent_set.begin(), ent_set.end(), [&](const std::string& t) {
        return t.find(kw) != std::string::npos;
      });
      if (in_entity && text.find(kw) != std::string::npos) {
        add(Signal::generic_keyword, kw, cfg.w_keyword);
        break;
      }
    }
  }
  return score;
}

// ---- assignments ----

std::string to_string(AssignmentStatus s) {
  switch (s) {
    case AssignmentStatus::auto_accepted: return "auto_accepted";
    case AssignmentStatus::pending_review: return "pending_review";
    case AssignmentStatus::accepted: return "accepted";
    case AssignmentStatus::rejected: return "rejected";
  }
  return "?";
}

AssignmentStatus assignment_status_from_string(const std::string& s) {
  for (auto v : {AssignmentStatus::auto_accepted, AssignmentStatus::pending_review, AssignmentStatus::accepted,
                 AssignmentStatus::rejected})
    if (to_string(v) == s) return v;
  throw InvalidArgument("unknown assignment status: " + s);
}

json to_json(const AssetAssignment& a) {
  json ev = json::array();
  for (const auto& e : a.score.evidence)
    ev.push_back({{"signal", to_string(e.signal)}, {"matched_value", e.matched_value}, {"weight", e.weight}});
  auto opt = [](const std::optional<std::string>& v) { return v ? json(*v) : json(nullptr); };
  return {{"assignment_id", a.assignment_id},
          {"record",
           {{"operation_id", a.record.operation_id},
            {"ip", a.record.ip.to_string()},
            {"port", a.record.port},
            {"protocol_id", a.record.protocol_id},
            {"site_group", a.record.site_group}}},
          {"entity_id", a.entity_id},
          {"score", {{"total", a.score.total}, {"evidence", ev}}},
          {"status", to_string(a.status)},
          {"conflict", a.conflict},
          {"cert_names", a.cert_names},
          {"decided_by", opt(a.decided_by)},
          {"decided_at", opt(a.decided_at)}};
}

AssetAssignment assignment_from_json(const json& j) {
  try {
    AssetAssignment a;
    a.assignment_id = j.at("assignment_id").get<std::string>();
    const auto& r = j.at("record");
    a.record.operation_id = r.value("operation_id", "");
    a.record.ip = Ipv4::parse(r.at("ip").get<std::string>());
    a.record.port = r.at("port").get<std::uint16_t>();
    a.record.protocol_id = r.value("protocol_id", "");
    a.record.site_group = r.value("site_group", "");
    a.entity_id = j.at("entity_id").get<std::string>();
    const auto& s = j.at("score");
    for (const auto& e : s.value("evidence", json::array()))
      a.score.evidence.push_back({signal_from_string(e.at("signal").get<std::string>()),
                                  e.value("matched_value", ""), e.at("weight").get<double>()});
    a.score.total = 0;
    for (const auto& e : a.score.evidence) a.score.total += e.weight;
    a.status = assignment_status_from_string(j.at("status").get<std::string>());
    a.conflict = j.value("conflict", false);
    a.cert_names = j.value("cert_names", std::vector<std::string>{});
    if (j.contains("decided_by") && !j["decided_by"].is_null()) a.decided_by = j["decided_by"].get<std::string>();
    if (j.contains("decided_at") && !j["decided_at"].is_null()) a.decided_at = j["decided_at"].get<std::string>();
    return a;
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("malformed assignment: ") + e.what());
  }
}

static std::vector<AssetAssignment> propose_for_record(const enrich::EnrichedRecord& rec,
                                                       const std::vector<Entity>& entities, const ScoringConfig& cfg) {
  std::vector<AssetAssignment> out;
  RecordRef ref{rec.operation_id, rec.service.ip, rec.service.port, rec.service.protocol_id, rec.service.site_group};
  const auto names = cert_names(rec.service);
  for (const auto& ent : entities) {
    auto score = score_candidate(rec, ent, cfg);
    if (score.total < cfg.review_threshold) continue;
    AssetAssignment a;
    a.record = ref;
    a.entity_id = ent.entity_id;
    a.status = score.non_keyword_total() >= cfg.auto_threshold ? AssignmentStatus::auto_accepted
                                                                : AssignmentStatus::pending_review;
    a.score = std::move(score);
    a.cert_names = names;
    const std::string key = ref.operation_id + "|" + ref.ip.to_string() + "|" + std::to_string(ref.port) + "|" +
                            ref.protocol_id + "|" + ref.site_group + "|" + ent.entity_id;
    a.assignment_id = "as-" + sha256_hex(key).substr(0, 16);
    out.push_back(std::move(a));
  }
  std::size_t autos = 0;
  for (const auto& a : out) autos += a.status == AssignmentStatus::auto_accepted;
  if (autos > 1)
    for (auto& a : out)
      if (a.status == AssignmentStatus::auto_accepted) a.conflict = true;
  return out;
}

std::vector<AssetAssignment> propose_assignments_serial(const std::vector<enrich::EnrichedRecord>& records,
                                                        const std::vector<Entity>& entities, const ScoringConfig& cfg) {
  std::vector<AssetAssignment> out;
  for (const auto& r : records) {
    auto part = propose_for_record(r, entities, cfg);
    std::move(part.begin(), part.end(), std::back_inserter(out));
  }
  return out;
}

std::vector<AssetAssignment> propose_assignments(const std::vector<enrich::EnrichedRecord>& records,
                                                 const std::vector<Entity>& entities, const ScoringConfig& cfg) {
  std::vector<std::vector<AssetAssignment>> parts(records.size());
  const auto n = static_cast<std::int64_t>(records.size());
#pragma omp parallel for schedule(dynamic, 16)
  for (std::int64_t i = 0; i < n; ++i) parts[i] = propose_for_record(records[i], entities, cfg);
  std::vector<AssetAssignment> out;
  for (auto& p : parts) std::move(p.begin(), p.end(), std::back_inserter(out));
  return out;
}

// ---- book ----

AssignmentBook::AssignmentBook(std::string path) : path_(std::move(path)) {
  std::ifstream in(path_);
  if (!in) return;  // new book
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw InvalidArgument("assignment book " + path_ + ": " + e.what());
  }
  for (const auto& a : j.value("assignments", json::array())) {
    auto v = assignment_from_json(a);
    items_.emplace(v.assignment_id, std::move(v));
  }
  for (const auto& e : j.value("audit", json::array()))
    audit_.push_back({e.at("assignment_id").get<std::string>(),
                      assignment_status_from_string(e.at("from").get<std::string>()),
                      assignment_status_from_string(e.at("to").get<std::string>()), e.value("reviewer", ""),
                      e.value("at", "")});
}

void AssignmentBook::save_locked() const {
  if (path_.empty()) return;
  json items = json::array();
  for (const auto& [_, a] : items_) items.push_back(to_json(a));
  json audit = json::array();
  for (const auto& e : audit_)
    audit.push_back({{"assignment_id", e.assignment_id},
                     {"from", to_string(e.from)},
                     {"to", to_string(e.to)},
                     {"reviewer", e.reviewer},
                     {"at", e.at}});
  const std::string tmp = path_ + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << json{{"assignments", items}, {"audit", audit}}.dump(1) << '\n';
  }
  std::filesystem::rename(tmp, path_);
}

std::size_t AssignmentBook::add(const std::vector<AssetAssignment>& assignments) {
  std::lock_guard lk(mu_);
  std::size_t added = 0;
  for (const auto& a : assignments) added += items_.emplace(a.assignment_id, a).second;
  if (added) save_locked();
  return added;
}

std::vector<AssetAssignment> AssignmentBook::list(std::optional<AssignmentStatus> status) const {
  std::lock_guard lk(mu_);
  std::vector<AssetAssignment> out;
  for (const auto& [_, a] : items_)
    if (!status || a.status == *status) out.push_back(a);
  return out;
}

AssetAssignment AssignmentBook::get(const std::string& id) const {
  std::lock_guard lk(mu_);
  auto it = items_.find(id);
  if (it == items_.end()) throw NotFound("no assignment " + id);
  return it->second;
}

AssetAssignment AssignmentBook::decide(const std::string& id, bool accept, const std::string& reviewer) {
  if (trim(reviewer).empty()) throw InvalidArgument("reviewer required");
  std::lock_guard lk(mu_);
  auto it = items_.find(id);
  if (it == items_.end()) throw NotFound("no assignment " + id);
  auto& a = it->second;
  if (a.status == AssignmentStatus::accepted || a.status == AssignmentStatus::rejected)
    throw Conflict("assignment " + id + " already " + to_string(a.status));
  const auto from = a.status;
  a.status = accept ? AssignmentStatus::accepted : AssignmentStatus::rejected;
  a.decided_by = reviewer;
  a.decided_at = iso_now();
  audit_.push_back({id, from, a.status, reviewer, *a.decided_at});
  save_locked();
  return a;
}

std::vector<AuditEntry> AssignmentBook::audit() const {
  std::lock_guard lk(mu_);
  return audit_;
}

std::vector<AssetAssignment> AssignmentBook::effective() const {
  std::lock_guard lk(mu_);
  std::vector<AssetAssignment> out;
  for (const auto& [_, a] : items_)
    if (a.status == AssignmentStatus::auto_accepted || a.status == AssignmentStatus::accepted) out.push_back(a);
  return out;
}

// ---- expansion ----

std::string registrable_domain(std::string_view host) {
  const auto h = strip_wildcard(std::string(host));
  const auto labels = split(h, '.');
  if (labels.size() <= 2) return h;
  return labels[labels.size() - 2] + "." + labels.back();
}

ExpansionResult expand_entities(const std::vector<AssetAssignment>& accepted, const std::vector<Entity>& entities) {
  ExpansionResult out;
  std::set<std::pair<std::string, std::string>> links;
  std::set<std::string> created;
  auto owner_of = [&](const std::string& host) -> const Entity* {
    for (const auto& e : entities)
      for (const auto& d : e.domains)
        if (covered_by(host, d)) return &e;
    return nullptr;
  };
  for (const auto& a : accepted) {
    if (a.status != AssignmentStatus::accepted && a.status != AssignmentStatus::auto_accepted) continue;
    for (const auto& name : a.cert_names) {
      if (const Entity* owner = owner_of(name)) {
        if (owner->entity_id != a.entity_id) links.insert({a.entity_id, owner->entity_id});
        continue;
      }
      const auto reg = registrable_domain(name);
      if (!valid_domain(reg) || created.contains(reg)) continue;
      created.insert(reg);
      Entity e;
      e.entity_id = "cx-" + reg;
      e.name = reg;
      e.domains = {reg};
      e.provenance = Provenance::cert_expansion;
      e.pending_review = true;
      e.discovered_from = a.entity_id;
      out.new_entities.push_back(std::move(e));
      links.insert({a.entity_id, "cx-" + reg});
    }
  }
  out.links.assign(links.begin(), links.end());
  return out;
}

std::size_t expand_to_fixed_point(const std::vector<AssetAssignment>& accepted, std::vector<Entity>& entities) {
  std::size_t iterations = 0;
  const std::size_t cap = entities.size() + accepted.size() + 1;
  while (iterations < cap) {
    ++iterations;
    auto r = expand_entities(accepted, entities);
    if (r.new_entities.empty()) break;
    std::move(r.new_entities.begin(), r.new_entities.end(), std::back_inserter(entities));
  }
  return iterations;
}

std::vector<AnalysisUnit> entity_grouping(const std::vector<Entity>& entities) {
  std::map<std::string, AnalysisUnit> units;
  std::vector<std::string> order;
  for (const auto& e : entities) {
    std::string key = to_lower(trim(e.operating_company));
    if (key.empty()) key = e.entity_id;
    auto [it, fresh] = units.try_emplace(key);
    auto& u = it->second;
    if (fresh) {
      u.key = key;
      order.push_back(key);
    }
    u.entity_ids.push_back(e.entity_id);
    if (e.beds) u.beds = u.beds.value_or(0) + *e.beds;
    if (e.inpatient_cases_per_year) u.cases = u.cases.value_or(0) + *e.inpatient_cases_per_year;
    u.kritis = u.kritis || e.kritis;
  }
  std::vector<AnalysisUnit> out;
  for (const auto& k : order) {
    auto u = std::move(units[k]);
    u.kritis = u.kritis || kritis_by_cases(u.cases);
    out.push_back(std::move(u));
  }
  return out;
}

}  // namespace recon::attrib

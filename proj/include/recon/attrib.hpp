#pragma once

// Attribution of enriched records to named entities (hospitals), subdomain
// discovery, certificate-driven entity expansion and the curation queue.

#include <chrono>
#include <cstdint>
#include <istream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "recon/dns.hpp"
#include "recon/enrich.hpp"

namespace recon::attrib {

inline constexpr std::int64_t kKritisCaseThreshold = 30000;  // strictly more than

enum class Provenance { seed_list, cert_expansion, manual };
std::string to_string(Provenance p);

struct Entity {
  std::string entity_id;
  std::string name;
  std::vector<std::string> domains;  // lowercase, deduplicated
  std::optional<std::int64_t> beds;
  std::optional<std::int64_t> inpatient_cases_per_year;
  bool kritis = false;
  bool kritis_manual = false;
  std::string operating_company;
  Provenance provenance = Provenance::seed_list;
  bool domainless = false;
  bool pending_review = false;  // cert_expansion entities until a human confirms them
  std::string discovered_from;  // entity id that led to this one
};

bool kritis_by_cases(std::optional<std::int64_t> cases);
nlohmann::json to_json(const Entity& e);
Entity entity_from_json(const nlohmann::json& j);

struct LoadResult {
  std::vector<Entity> entities;
  std::vector<std::string> warnings;
};

// CSV name,domains(;-separated),beds,cases,operating_company.
LoadResult load_entities(std::istream& in);
LoadResult load_entities_file(const std::string& path);

// ---- subdomains ----

class CtSource {
 public:
  virtual ~CtSource() = default;
  // nullopt: source unreachable.
  virtual std::optional<std::vector<std::string>> names(const std::string& domain) = 0;
};

// crt.sh-shaped JSON search: GET {base}/?q=%25.{domain}&output=json
class HttpCtSource final : public CtSource {
 public:
  explicit HttpCtSource(std::string base_url, std::chrono::milliseconds timeout = std::chrono::milliseconds(5000));
  std::optional<std::vector<std::string>> names(const std::string& domain) override;

 private:
  std::string base_;
  std::chrono::milliseconds timeout_;
};

struct SubdomainResult {
  std::vector<std::string> hosts;  // sorted
  bool partial = false;            // CT unavailable, wordlist only
};

bool valid_domain(std::string_view domain);
SubdomainResult discover_subdomains(const std::string& domain, CtSource* ct, const std::vector<std::string>& wordlist,
                                    dns::Resolver& resolver);

// ---- scoring ----

enum class Signal { cert_exact_domain, cert_subdomain, whois_name_match, rdns_suffix, generic_keyword };
std::string to_string(Signal s);

struct Evidence {
  Signal signal;
  std::string matched_value;
  double weight = 0;
  friend bool operator==(const Evidence&, const Evidence&) = default;
};

struct AttributionScore {
  double total = 0;
  std::vector<Evidence> evidence;
  double non_keyword_total() const;
};

struct ScoringConfig {
  double w_cert_exact = 100;
  double w_cert_subdomain = 80;
  double w_rdns_suffix = 60;
  double w_whois_name = 50;
  double w_keyword = 10;
  double auto_threshold = 100;
  double review_threshold = 50;
  std::vector<std::string> legal_forms = {"ggmbh", "gmbh", "e.v.", "ev", "ag", "kg", "mbh", "klinikum", "gag"};
  std::vector<std::string> keywords = {"klinik", "kliniken", "klinikum", "krankenhaus", "hospital", "spital", "clinic"};
  std::vector<std::string> wordlist = {"www", "mail", "vpn", "portal", "remote", "webmail", "owa", "intranet"};

  static ScoringConfig from_json(const nlohmann::json& j);
  static ScoringConfig load(const std::string& path);
};

// Lowercase, fold umlauts and accents, split on non-alphanumerics, drop
// legal-form tokens.
std::vector<std::string> name_tokens(std::string_view name, const std::vector<std::string>& legal_forms);
std::string fold_diacritics(std::string_view utf8);

// Leaf-certificate DNS names of a record (CN and SANs, wildcard label removed).
std::vector<std::string> cert_names(const appscan::ServiceRecord& r);

AttributionScore score_candidate(const enrich::EnrichedRecord& record, const Entity& entity, const ScoringConfig& cfg);

// ---- assignments ----

enum class AssignmentStatus { auto_accepted, pending_review, accepted, rejected };
std::string to_string(AssignmentStatus s);
AssignmentStatus assignment_status_from_string(const std::string& s);

struct RecordRef {
  std::string operation_id;
  Ipv4 ip;
  std::uint16_t port = 0;
  std::string protocol_id;
  std::string site_group;
  friend auto operator<=>(const RecordRef&, const RecordRef&) = default;
};

struct AssetAssignment {
  std::string assignment_id;  // stable across reruns
  RecordRef record;
  std::string entity_id;
  AttributionScore score;
  AssignmentStatus status = AssignmentStatus::pending_review;
  bool conflict = false;  // record auto-accepted for more than one entity
  std::vector<std::string> cert_names;
  std::optional<std::string> decided_by;
  std::optional<std::string> decided_at;  // ISO 8601 UTC
};

nlohmann::json to_json(const AssetAssignment& a);
AssetAssignment assignment_from_json(const nlohmann::json& j);

std::vector<AssetAssignment> propose_assignments(const std::vector<enrich::EnrichedRecord>& records,
                                                 const std::vector<Entity>& entities, const ScoringConfig& cfg);
// Single-threaded reference for the above.
std::vector<AssetAssignment> propose_assignments_serial(const std::vector<enrich::EnrichedRecord>& records,
                                                        const std::vector<Entity>& entities, const ScoringConfig& cfg);

struct AuditEntry {
  std::string assignment_id;
  AssignmentStatus from, to;
  std::string reviewer;
  std::string at;
};

// Curation store. Decisions are final: a decided assignment refuses writes.
// With a path, state is loaded from and written back to that JSON file.
class AssignmentBook {
 public:
  AssignmentBook() = default;
  explicit AssignmentBook(std::string path);

  // New ids are inserted; existing ids are left as they are.
  std::size_t add(const std::vector<AssetAssignment>& assignments);
  std::vector<AssetAssignment> list(std::optional<AssignmentStatus> status = std::nullopt) const;
  AssetAssignment get(const std::string& id) const;
  AssetAssignment decide(const std::string& id, bool accept, const std::string& reviewer);
  std::vector<AuditEntry> audit() const;
  // Assignments currently counting as true: auto_accepted or accepted.
  std::vector<AssetAssignment> effective() const;

 private:
  void save_locked() const;
  mutable std::mutex mu_;
  std::string path_;
  std::map<std::string, AssetAssignment> items_;
  std::vector<AuditEntry> audit_;
};

// ---- expansion and grouping ----

// Last two labels ("a.b.klinikum-x.de" -> "klinikum-x.de").
std::string registrable_domain(std::string_view host);

struct ExpansionResult {
  std::vector<Entity> new_entities;
  std::vector<std::pair<std::string, std::string>> links;  // (source entity, owning entity) via shared certificate
};

ExpansionResult expand_entities(const std::vector<AssetAssignment>& accepted, const std::vector<Entity>& entities);
// Applies expand_entities until nothing new appears. Returns iterations used.
std::size_t expand_to_fixed_point(const std::vector<AssetAssignment>& accepted, std::vector<Entity>& entities);

struct AnalysisUnit {
  std::string key;  // operating company, or the entity id when none
  std::vector<std::string> entity_ids;
  std::optional<std::int64_t> beds;   // sum over members with data
  std::optional<std::int64_t> cases;  // sum over members with data
  bool kritis = false;
};

std::vector<AnalysisUnit> entity_grouping(const std::vector<Entity>& entities);

}  // namespace recon::attrib

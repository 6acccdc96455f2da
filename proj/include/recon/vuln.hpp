#pragma once

// Product/version extraction from banners and CVE matching against an NVD
// JSON feed. Every match is a potential finding: backported patches and
// edited banners are invisible from here.

#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "recon/appscan.hpp"
#include "recon/attrib.hpp"

namespace recon::vuln {

// Dotted numeric version; missing trailing components compare as zero.
struct Version {
  std::vector<std::uint64_t> parts;
  static std::optional<Version> parse(std::string_view text);
  std::string to_string() const;
};
int compare(const Version& a, const Version& b);
inline bool operator<(const Version& a, const Version& b) { return compare(a, b) < 0; }
inline bool operator==(const Version& a, const Version& b) { return compare(a, b) == 0; }

struct ProductVersion {
  std::optional<std::string> vendor;
  std::string product;                 // canonical token
  std::optional<std::string> version;  // dotted numeric
  std::string raw_banner;
};

// Operator-editable CSV banner_token,product[,cpe_vendor:cpe_product...].
// The optional third field lists CPE names (space separated) that map to
// the same canonical product.
class Canonicalizer {
 public:
  Canonicalizer() = default;
  static Canonicalizer parse(std::istream& in);
  static Canonicalizer load(const std::string& path);

  std::optional<std::string> product_for_token(std::string_view token) const;
  std::optional<std::string> product_for_cpe(std::string_view vendor, std::string_view product) const;
  std::optional<std::string> vendor_of(const std::string& product) const;
  std::size_t size() const { return tokens_.size(); }

 private:
  std::map<std::string, std::string> tokens_;  // lowercase token -> product
  std::map<std::string, std::string> cpes_;    // "vendor:product" -> product
  std::map<std::string, std::string> vendors_; // product -> cpe vendor
};

// Grammar Name[/version][ (comment)] plus rules for SSH identification
// strings and FTP/mail greetings. nullopt when no canonical product is found.
std::optional<ProductVersion> parse_banner(std::string_view banner, const Canonicalizer& table);

struct VersionRange {
  std::string product;                  // canonical
  std::optional<std::string> exact;     // single version
  std::optional<std::string> start_including, start_excluding;
  std::optional<std::string> end_including, end_excluding;
  bool contains(const Version& v) const;
};

struct CveEntry {
  std::string cve_id;
  double cvss_score = 0;
  std::string cvss_version;  // "3.1", "3.0" or "2.0"
  std::vector<VersionRange> affected;
  std::string summary;
};

enum class Severity { low, medium, high, critical };  // ordered
std::string to_string(Severity s);
// critical [9,10], high [7,9), medium [4,7), low [0,4). Throws outside [0,10].
Severity bucket(double score);

// Reads NVD 1.1 feed files ("CVE_Items") and 2.0 API responses
// ("vulnerabilities"). CPEs without a canonical mapping are skipped.
std::vector<CveEntry> parse_nvd(const nlohmann::json& doc, const Canonicalizer& table);
std::vector<CveEntry> load_nvd(const std::string& path, const Canonicalizer& table);

class CveIndex {
 public:
  CveIndex() = default;
  explicit CveIndex(std::vector<CveEntry> entries);
  const std::vector<CveEntry>& entries() const { return entries_; }
  // Entries with at least one range for `product`.
  const std::vector<std::size_t>& for_product(const std::string& product) const;

 private:
  std::vector<CveEntry> entries_;
  std::map<std::string, std::vector<std::size_t>> by_product_;
};

struct VulnMatch {
  attrib::RecordRef record;
  std::string cve_id;
  double cvss_score = 0;
  Severity severity = Severity::low;
  bool potential = true;  // always
};

nlohmann::json to_json(const VulnMatch& m);
VulnMatch match_from_json(const nlohmann::json& j);

// CVE ids (index order) whose ranges contain pv.version. Empty without a version.
std::vector<const CveEntry*> match_cves(const ProductVersion& pv, const CveIndex& index);

attrib::RecordRef ref_of(const enrich::EnrichedRecord& r);

// Parses every banner and matches. Parallel, plus a serial reference.
std::vector<VulnMatch> match_records(const std::vector<enrich::EnrichedRecord>& records, const CveIndex& index,
                                     const Canonicalizer& table);
std::vector<VulnMatch> match_records_serial(const std::vector<enrich::EnrichedRecord>& records, const CveIndex& index,
                                            const Canonicalizer& table);

// Highest severity among the matches; nullopt when there are none.
std::optional<Severity> service_severity(const std::vector<VulnMatch>& matches_for_service);
// At least one match of medium or above.
bool is_vulnerable(std::optional<Severity> s);

struct SeverityTable {
  std::uint64_t critical = 0, high = 0, medium = 0, low = 0, none = 0;
  std::uint64_t total_vulnerable() const { return critical + high + medium; }
  std::uint64_t total_services() const { return total_vulnerable() + low + none; }
  std::string render() const;
  nlohmann::json to_json() const;
};

// One row per service (by max severity). `services` lists every service so
// unmatched ones land in `none`.
SeverityTable severity_table(const std::vector<attrib::RecordRef>& services, const std::vector<VulnMatch>& matches);

}  // namespace recon::vuln

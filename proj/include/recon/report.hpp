#pragma once

// Statistics over attributed, matched services: headline ratios, severity
// table, version and banner-group distributions, bed/CVE regression,
// cohort means and geo exports. Pure functions; exports are byte-stable.

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "recon/attrib.hpp"
#include "recon/enrich.hpp"
#include "recon/vuln.hpp"

namespace recon::report {

// Exact half-up rounding of num/den (den > 0) to `decimals` places.
std::string format_ratio(std::uint64_t num, std::uint64_t den, int decimals);
// 100 * num/den with a trailing '%'.
std::string format_percent(std::uint64_t num, std::uint64_t den, int decimals);
// Half-up rounding of a double; for values that are not exact rationals.
std::string format_fixed(double v, int decimals);

struct StatsBundle {
  std::uint64_t total_entities = 0;
  std::uint64_t entities_with_services = 0;
  std::uint64_t total_services = 0;
  double mean_services_per_entity = 0;
  std::uint64_t vulnerable_entities = 0;
  double vulnerable_entity_ratio = 0;  // of entities with services
  vuln::SeverityTable severity;
  std::int64_t vulnerable_beds = 0;
  std::int64_t total_beds = 0;
  double bed_ratio = 0;
  double vulnerable_service_ratio = 0;  // vulnerable services / all services

  // Presentation strings.
  std::string mean_services_display;            // 1 decimal
  std::string vulnerable_entity_ratio_display;  // 1 decimal percent
  std::string bed_ratio_display;                // 1 decimal percent
  std::string bed_ratio_whole_display;          // 0 decimals
  std::string vulnerable_service_ratio_display; // 1 decimal percent

  nlohmann::json to_json() const;
};

struct StatsOptions {
  // Collapse entities sharing an operating company into one unit.
  bool by_operating_company = false;
};

// `assignments`: only auto_accepted/accepted ones are counted.
StatsBundle compute_stats(const std::vector<attrib::Entity>& entities,
                          const std::vector<attrib::AssetAssignment>& assignments,
                          const std::vector<attrib::RecordRef>& services, const std::vector<vuln::VulnMatch>& matches,
                          const StatsOptions& options = {});

struct VersionBucket {
  std::string version;
  std::uint64_t count = 0;
};

struct VersionDistribution {
  std::string product;
  std::uint64_t total = 0;    // records of this product
  std::uint64_t unknown = 0;  // no version in the banner
  std::vector<VersionBucket> known;  // numeric version order
  std::string unknown_percent(int decimals) const;
  nlohmann::json to_json() const;
};

VersionDistribution version_distribution(const std::string& product, const std::vector<enrich::EnrichedRecord>& records,
                                         const vuln::Canonicalizer& table);

struct GroupShare {
  std::string group;
  std::uint64_t count = 0;
  std::string percent;  // 1 decimal, displayed shares sum to 100.0
};

// Largest-remainder rounding so the table adds up.
std::vector<GroupShare> banner_group_distribution(const std::vector<appscan::ServiceRecord>& records);

struct RegressionResult {
  double slope = 0;
  double intercept = 0;
  std::size_t n = 0;
  double r_squared = 0;
};

// Least squares y = slope * x + intercept. Throws InvalidArgument for n < 2,
// constant x or non-finite input.
RegressionResult fit_regression(const std::vector<std::pair<double, double>>& points);

// Matches per entity over its effective assignments, for every entity with
// at least one service.
std::map<std::string, std::uint64_t> cve_counts(const std::vector<attrib::AssetAssignment>& assignments,
                                                const std::vector<vuln::VulnMatch>& matches);

struct CohortFilter {
  std::optional<bool> kritis;             // nullopt: any
  std::optional<std::int64_t> max_beds;   // inclusive; entities without beds drop out
};

struct CohortResult {
  std::size_t n = 0;
  std::uint64_t total = 0;
  double mean = 0;
  std::string display;  // 2 decimals
};

// nullopt when the cohort is empty.
std::optional<CohortResult> cohort_average(const std::vector<attrib::Entity>& entities,
                                           const std::map<std::string, std::uint64_t>& counts,
                                           const CohortFilter& filter);

// (beds, cve_count) for entities with both.
std::vector<std::pair<double, double>> bed_cve_points(const std::vector<attrib::Entity>& entities,
                                                      const std::map<std::string, std::uint64_t>& counts,
                                                      std::optional<std::int64_t> max_beds = std::nullopt);

struct GeoPoint {
  double lat = 0, lon = 0;
  std::uint64_t weight = 0;
};

// Services aggregated per coordinate; with `vulnerable_only`, only services
// with a medium-or-worse match. Records without geo data are skipped.
std::vector<GeoPoint> geo_export(const std::vector<enrich::EnrichedRecord>& records,
                                 const std::vector<vuln::VulnMatch>& matches, bool vulnerable_only);
void write_geo_csv(std::ostream& out, const std::vector<GeoPoint>& points);
nlohmann::json geo_geojson(const std::vector<GeoPoint>& points);

}  // namespace recon::report

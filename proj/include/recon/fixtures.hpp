#pragma once

// Deterministic synthetic datasets for the statistics layer: a hospital
// population with a fixed service/vulnerability mix, and a KRITIS cohort set.

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "recon/attrib.hpp"
#include "recon/enrich.hpp"
#include "recon/vuln.hpp"

namespace recon::fixtures {

struct Dataset {
  std::vector<attrib::Entity> entities;
  std::vector<attrib::AssetAssignment> assignments;  // all auto_accepted
  std::vector<enrich::EnrichedRecord> records;
  std::vector<vuln::VulnMatch> matches;

  std::vector<attrib::RecordRef> services() const;
};

struct HospitalParams {
  std::uint64_t seed = 1;
  std::uint64_t entities = 0;
  std::uint64_t entities_with_services = 0;
  std::uint64_t services = 0;
  std::uint64_t vulnerable_entities = 0;
  std::uint64_t critical = 0, high = 0, medium = 0;
  std::uint64_t low_only = 0;  // non-vulnerable services carrying a low match
  std::int64_t beds_total = 0;
  std::int64_t beds_vulnerable = 0;

  // Reads the "fixture" object of a scenario file. Validates feasibility.
  static HospitalParams from_json(const nlohmann::json& fixture);
  void validate() const;
};

Dataset hospital_fixture(const HospitalParams& p);

// Bed-size/KRITIS cohorts with fixed CVE totals per cohort, plus entities
// above 1800 beds and entities with unknown beds that every bounded cohort
// must drop.
Dataset cohort_fixture(std::uint64_t seed = 7);

}  // namespace recon::fixtures

#include <doctest.h>

#include <iostream>

#include "recon/harness.hpp"

using namespace recon;
using namespace std::chrono_literals;

namespace {

const appscan::HandlerRegistry& registry() {
  static const auto r = appscan::HandlerRegistry::load(std::string(RECON_SOURCE_DIR) + "/config/handlers.json");
  return r;
}

void dump_on_failure(const harness::Result& r) {
  if (r.coverage_exact() && r.manifest_check.ok()) return;
  std::cerr << r.to_json().dump(2) << "\n";
}

}  // namespace

TEST_CASE("basic3 matches its manifest") {
  const auto sc = simnet::load_scenario("basic3");
  const auto r = harness::run_scenario(sc, registry());
  dump_on_failure(r);
  CHECK(r.finished);
  CHECK(r.coverage_exact());
  CHECK(r.manifest_check.ok());
  CHECK(r.records.size() == 3);
  CHECK(r.units_failed == 0);
  CHECK(r.grabs == 3);
}

TEST_CASE("basic3 over the http api") {
  const auto sc = simnet::load_scenario("basic3");
  harness::Options o;
  o.over_http = true;
  const auto r = harness::run_scenario(sc, registry(), o);
  dump_on_failure(r);
  CHECK(r.finished);
  CHECK(r.coverage_exact());
  CHECK(r.manifest_check.ok());
}

TEST_CASE("empty banner scenario reports 47 of 100 empty") {
  const auto sc = simnet::load_scenario("empty_banners_47pct");
  const auto r = harness::run_scenario(sc, registry());
  dump_on_failure(r);
  CHECK(r.coverage_exact());
  CHECK(r.manifest_check.ok());
  REQUIRE(r.records.size() == 100);
  std::size_t empty = 0;
  for (const auto& rec : r.records) empty += rec.banner.empty();
  CHECK(empty == 47);
}

TEST_CASE("failover covers every target once per group") {
  const auto sc = simnet::load_scenario("failover");
  REQUIRE(sc.kill_nodes == 2);
  const auto r = harness::run_scenario(sc, registry());
  dump_on_failure(r);
  CHECK(r.finished);
  CHECK(r.killed_nodes.size() == 2);
  CHECK(r.units_reassigned >= 2);
  CHECK(r.units_failed == 0);
  CHECK(r.coverage.size() == 2);
  CHECK(r.coverage_exact());
  CHECK(r.manifest_check.ok());
  CHECK(r.elapsed < 60s);
}

TEST_CASE("spoofstorm accepts nothing it did not probe") {
  const auto sc = simnet::load_scenario("spoofstorm");
  const auto r = harness::run_scenario(sc, registry());
  dump_on_failure(r);
  CHECK(r.spoofs_sent >= 100);
  CHECK(r.spoofs_accepted == 0);
  CHECK(r.canary_hits == 0);
  CHECK(r.rejected.total() >= r.spoofs_sent);
  CHECK(r.grabs == sc.services.size());
  CHECK(r.coverage_exact());
  CHECK(r.manifest_check.ok());
}

TEST_CASE("manifest check reports differences") {
  simnet::ManifestEntry m;
  m.endpoint = {Ipv4(127, 0, 0, 9), 80};
  m.protocol_id = "http";
  m.banner = "nginx";
  appscan::ServiceRecord r;
  r.ip = m.endpoint.ip;
  r.port = 80;
  r.protocol_id = "http";
  r.banner = "nginx";
  CHECK(harness::check_manifest({m}, {r}, {}).ok());
  r.banner = "nginx ";
  CHECK_FALSE(harness::check_manifest({m}, {r}, {}).ok());
  r.banner = "nginx";
  CHECK_FALSE(harness::check_manifest({m}, {r, r}, {}).ok());
  CHECK_FALSE(harness::check_manifest({m}, {}, {}).ok());
  // Both groups must see it.
  r.site_group = "eu";
  CHECK_FALSE(harness::check_manifest({m}, {r}, {"eu", "us"}).ok());
  auto r2 = r;
  r2.site_group = "us";
  CHECK(harness::check_manifest({m}, {r, r2}, {"eu", "us"}).ok());
}

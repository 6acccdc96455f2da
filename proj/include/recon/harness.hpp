#pragma once

// End-to-end scenario runner: a master, N scan nodes and a simnet on
// loopback, with optional crashes and spoofed replies. Used by the CLI's
// `simulate` command, the acceptance suite and the tests.

#include <chrono>
#include <string>
#include <vector>

#include "recon/appscan.hpp"
#include "recon/node.hpp"
#include "recon/orchestrator.hpp"
#include "recon/simnet.hpp"

namespace recon::harness {

// Sub-second heartbeat/suspect/dead timers so failover runs in seconds.
orchestrator::Config fast_timers();

struct Options {
  orchestrator::Config orchestrator = fast_timers();
  std::chrono::milliseconds node_heartbeat{100};
  std::chrono::milliseconds probe_timeout{400};
  std::chrono::milliseconds drain_timeout{600};
  std::chrono::milliseconds grab_connect{1000};
  std::chrono::milliseconds grab_read{700};
  std::chrono::milliseconds grab_total{3000};
  std::chrono::seconds deadline{120};
  node::EngineKind engine = node::EngineKind::connect;
  // Run nodes against the HTTP API instead of in-process calls.
  bool over_http = false;
  std::string node_token = "simnet-token";
};

struct Coverage {
  std::string operation_id;
  std::string site_group;
  std::uint64_t expected = 0;   // |target space|
  std::uint64_t distinct = 0;   // distinct targets in submitted logs
  std::uint64_t duplicates = 0; // targets submitted more than once
  std::uint64_t outside = 0;    // submitted targets not in the space
  bool exact() const { return distinct == expected && duplicates == 0 && outside == 0; }
};

struct ManifestCheck {
  std::size_t expected = 0;  // manifest entries x groups
  std::size_t matched = 0;   // found once with identical banner/TLS
  std::vector<std::string> problems;
  bool ok() const { return matched == expected && problems.empty(); }
};

struct Result {
  std::string scenario;
  bool finished = false;
  std::chrono::steady_clock::duration elapsed{};
  std::vector<std::string> operation_ids;
  std::vector<Coverage> coverage;
  std::vector<appscan::ServiceRecord> records;  // every submitted record
  std::vector<simnet::ManifestEntry> manifest;
  ManifestCheck manifest_check;
  std::vector<std::string> killed_nodes;
  std::uint64_t units_total = 0;
  std::uint64_t units_reassigned = 0;  // completed units with attempt_count > 0
  std::uint64_t units_failed = 0;
  std::uint64_t spoofs_sent = 0;
  std::uint64_t spoofs_accepted = 0;   // records for spoofed endpoints
  std::uint64_t canary_hits = 0;
  probe::RejectCounts rejected;
  std::uint64_t probes_sent = 0;
  std::uint64_t responders = 0;
  std::uint64_t grabs = 0;

  bool coverage_exact() const;
  nlohmann::json to_json() const;
};

Result run_scenario(const simnet::Scenario& scenario, const appscan::HandlerRegistry& registry,
                    const Options& options = {});

// Each manifest entry must appear exactly once per group with the same bytes.
ManifestCheck check_manifest(const std::vector<simnet::ManifestEntry>& manifest,
                             const std::vector<appscan::ServiceRecord>& records,
                             const std::vector<std::string>& groups);

}  // namespace recon::harness

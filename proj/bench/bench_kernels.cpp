// Parallel kernels against their serial references.

#include <benchmark/benchmark.h>

#include <random>

#include "recon/attrib.hpp"
#include "recon/enrich.hpp"
#include "recon/ipgen.hpp"
#include "recon/vuln.hpp"

using namespace recon;

namespace {

const vuln::Canonicalizer& table() {
  static const auto t = vuln::Canonicalizer::load(std::string(RECON_SOURCE_DIR) + "/config/canonical.csv");
  return t;
}

std::vector<enrich::EnrichedRecord> records(std::size_t n) {
  static const std::vector<std::string> banners = {"Apache/2.2.34", "Apache/2.4.41 (Ubuntu)", "Microsoft-IIS/6.0",
                                                   "nginx/1.18.0", "SSH-2.0-OpenSSH_7.5", "220 ProFTPD 1.3.5 Server",
                                                   "", "nginx"};
  std::vector<enrich::EnrichedRecord> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& r = out[i];
    r.operation_id = "op";
    r.service.ip = Ipv4(0x0A000000u + static_cast<std::uint32_t>(i));
    r.service.port = 443;
    r.service.protocol_id = "https";
    r.service.banner = banners[i % banners.size()];
    CertInfo c;
    c.subject_cn = "www.hospital-" + std::to_string(i % 500) + ".example";
    r.service.tls = std::vector<CertInfo>{c};
  }
  return out;
}

vuln::CveIndex synthetic_index(std::size_t n) {
  std::mt19937_64 rng(1);
  const std::vector<std::string> products = {"apache_httpd", "nginx", "openssh", "iis", "proftpd"};
  std::vector<vuln::CveEntry> cves;
  for (std::size_t i = 0; i < n; ++i) {
    vuln::CveEntry e;
    e.cve_id = "CVE-2098-" + std::to_string(i);
    e.cvss_score = static_cast<double>(rng() % 101) / 10.0;
    vuln::VersionRange r;
    r.product = products[rng() % products.size()];
    r.start_including = std::to_string(rng() % 3) + "." + std::to_string(rng() % 10);
    r.end_excluding = std::to_string(2 + rng() % 8) + "." + std::to_string(rng() % 10);
    e.affected.push_back(r);
    cves.push_back(e);
  }
  return vuln::CveIndex(std::move(cves));
}

template <bool Parallel>
void BM_permute_range(benchmark::State& st) {
  const ipgen::IndexPermutation p(9, static_cast<std::uint64_t>(st.range(0)));
  for (auto _ : st) {
    auto v = Parallel ? ipgen::permute_range(p, 0, p.space_size()) : ipgen::permute_range_serial(p, 0, p.space_size());
    benchmark::DoNotOptimize(v.data());
  }
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

template <bool Parallel>
void BM_registry_lookup(benchmark::State& st) {
  std::mt19937_64 rng(2);
  std::vector<enrich::RegistryRecord> rows;
  for (int i = 0; i < 20000; ++i) {
    const auto start = static_cast<std::uint32_t>(rng());
    rows.push_back({Ipv4(start), Ipv4(start + static_cast<std::uint32_t>(rng() % 65536)), "net", "d", "DE", "x"});
  }
  const enrich::RegistryIndex idx(rows);
  std::vector<Ipv4> ips(static_cast<std::size_t>(st.range(0)));
  for (auto& ip : ips) ip = Ipv4(static_cast<std::uint32_t>(rng()));
  for (auto _ : st) {
    auto v = Parallel ? enrich::lookup_registry_all(idx, ips) : enrich::lookup_registry_all_serial(idx, ips);
    benchmark::DoNotOptimize(v.data());
  }
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

template <bool Parallel>
void BM_propose_assignments(benchmark::State& st) {
  const auto recs = records(static_cast<std::size_t>(st.range(0)));
  std::vector<attrib::Entity> es;
  for (int i = 0; i < 500; ++i) {
    attrib::Entity e;
    e.entity_id = "e" + std::to_string(i);
    e.name = "Hospital " + std::to_string(i);
    e.domains = {"hospital-" + std::to_string(i) + ".example"};
    es.push_back(e);
  }
  const attrib::ScoringConfig cfg;
  for (auto _ : st) {
    auto v = Parallel ? attrib::propose_assignments(recs, es, cfg) : attrib::propose_assignments_serial(recs, es, cfg);
    benchmark::DoNotOptimize(v.data());
  }
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

template <bool Parallel>
void BM_match_records(benchmark::State& st) {
  const auto recs = records(static_cast<std::size_t>(st.range(0)));
  const auto index = synthetic_index(2000);
  for (auto _ : st) {
    auto v = Parallel ? vuln::match_records(recs, index, table()) : vuln::match_records_serial(recs, index, table());
    benchmark::DoNotOptimize(v.data());
  }
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

}  // namespace

BENCHMARK(BM_permute_range<false>)->Name("permute_range/serial")->Arg(1 << 20);
BENCHMARK(BM_permute_range<true>)->Name("permute_range/omp")->Arg(1 << 20);
BENCHMARK(BM_registry_lookup<false>)->Name("registry_lookup/serial")->Arg(200000);
BENCHMARK(BM_registry_lookup<true>)->Name("registry_lookup/omp")->Arg(200000);
BENCHMARK(BM_propose_assignments<false>)->Name("propose_assignments/serial")->Arg(2000);
BENCHMARK(BM_propose_assignments<true>)->Name("propose_assignments/omp")->Arg(2000);
BENCHMARK(BM_match_records<false>)->Name("match_records/serial")->Arg(5000);
BENCHMARK(BM_match_records<true>)->Name("match_records/omp")->Arg(5000);

BENCHMARK_MAIN();

#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "recon/error.hpp"
#include "recon/ipgen.hpp"

using namespace recon;
using namespace recon::ipgen;

namespace {

// Materialize every output and compare with the identity set.
bool is_bijection(const IndexPermutation& perm) {
  std::vector<std::uint64_t> out(perm.space_size());
  for (std::uint64_t i = 0; i < perm.space_size(); ++i) out[i] = perm.permute(i);
  std::sort(out.begin(), out.end());
  for (std::uint64_t i = 0; i < out.size(); ++i) {
    if (out[i] != i) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("single element space maps to itself") {
  for (std::uint64_t seed : {0ull, 1ull, 42ull, ~0ull}) {
    CHECK(build_permutation(seed, 1).permute(0) == 0);
  }
}

TEST_CASE("permutation is a bijection on power-of-two and odd sizes") {
  CHECK(is_bijection(build_permutation(42, 65536)));
  CHECK(is_bijection(build_permutation(42, 1000003)));
  for (std::uint64_t n : {2ull, 3ull, 5ull, 255ull, 256ull, 257ull, 4097ull}) {
    for (std::uint64_t seed : {1ull, 7ull, 99ull}) {
      CAPTURE(n);
      CHECK(is_bijection(build_permutation(seed, n)));
    }
  }
}

TEST_CASE("zero-size space and out-of-range index are rejected") {
  CHECK_THROWS_AS(build_permutation(1, 0), InvalidArgument);
  auto perm = build_permutation(1, 10);
  CHECK_THROWS_AS(perm.permute(10), InvalidArgument);
  CHECK_THROWS_AS(perm.inverse(10), InvalidArgument);
}

TEST_CASE("brute-force inverse table agrees with inverse()") {
  auto perm = build_permutation(2024, 3000);
  std::vector<std::uint64_t> inverse(3000, ~0ull);
  for (std::uint64_t i = 0; i < 3000; ++i) inverse[perm.permute(i)] = i;
  for (std::uint64_t i = 0; i < 3000; ++i) {
    CHECK(inverse[perm.permute(i)] == i);
    CHECK(perm.inverse(i) == inverse[i]);
  }
}

TEST_CASE("determinism: rebuilding yields the identical sequence") {
  auto a = build_permutation(77, 50000);
  auto b = build_permutation(77, 50000);
  for (std::uint64_t i = 0; i < 50000; i += 7) CHECK(a.permute(i) == b.permute(i));
}

TEST_CASE("different seeds differ in at least 99% of positions") {
  auto a = build_permutation(1, 65536);
  auto b = build_permutation(2, 65536);
  std::uint64_t same = 0;
  for (std::uint64_t i = 0; i < 65536; ++i) same += a.permute(i) == b.permute(i);
  CHECK(same <= 655);
}

TEST_CASE("index_to_target follows concatenation order of sorted ranges") {
  TargetSpace one({Ipv4Range::parse("10.0.0.0-10.0.0.255")}, 80, "http");
  CHECK(one.size() == 256);
  CHECK(one.index_to_target(0).ip == Ipv4(10, 0, 0, 0));
  CHECK(one.index_to_target(0).port == 80);

  TargetSpace two({Ipv4Range::parse("10.0.0.0-10.0.0.3"), Ipv4Range::parse("10.0.1.0-10.0.1.1")},
                  22, "ssh");
  CHECK(two.size() == 6);
  CHECK(two.index_to_target(4).ip == Ipv4(10, 0, 1, 0));
  CHECK_THROWS_AS(two.index_to_target(6), InvalidArgument);
}

TEST_CASE("target_to_index inverts index_to_target on a /24") {
  TargetSpace space({Ipv4Range::parse("192.168.7.0/24")}, 443, "https");
  for (std::uint64_t i = 0; i < space.size(); ++i) {
    CHECK(space.target_to_index(space.index_to_target(i).ip) == i);
  }
  CHECK_THROWS_AS(space.target_to_index(Ipv4(192, 168, 8, 0)), InvalidArgument);
}

TEST_CASE("range normalization merges adjacent ranges and rejects overlap") {
  TargetSpace merged({Ipv4Range::parse("10.0.0.128/25"), Ipv4Range::parse("10.0.0.0/25")}, 80, "http");
  REQUIRE(merged.ranges().size() == 1);
  CHECK(merged.ranges()[0] == Ipv4Range::parse("10.0.0.0/24"));
  CHECK_THROWS_AS(TargetSpace({Ipv4Range::parse("10.0.0.0/24"), Ipv4Range::parse("10.0.0.5")}, 80, "http"),
                  InvalidArgument);
  CHECK_THROWS_AS(TargetSpace({}, 80, "http"), InvalidArgument);
  CHECK_THROWS_AS(TargetSpace({Ipv4Range::parse("10.0.0.1")}, 0, "http"), InvalidArgument);
}

TEST_CASE("CIDR and dashed notation parse; malformed input is rejected") {
  CHECK(Ipv4Range::parse("10.0.0.0/24").size() == 256);
  CHECK(Ipv4Range::parse("10.0.0.1-10.0.0.9").size() == 9);
  CHECK(Ipv4Range::parse("0.0.0.0/0").size() == (1ull << 32));
  CHECK_THROWS_AS(Ipv4Range::parse("10.0.0.1/24"), InvalidArgument);
  CHECK_THROWS_AS(Ipv4Range::parse("10.0.0.9-10.0.0.1"), InvalidArgument);
  CHECK_THROWS_AS(Ipv4Range::parse("10.0.0/24"), InvalidArgument);
  CHECK_THROWS_AS(Ipv4Range::parse("256.0.0.0"), InvalidArgument);
  CHECK_THROWS_AS(Ipv4Range::parse("10.0.0.0/33"), InvalidArgument);
}

TEST_CASE("split_work_units partitions the index space") {
  TargetSpace ten({Ipv4Range::parse("10.0.0.0-10.0.0.9")}, 80, "http");
  auto units = split_work_units(ten, 4);
  REQUIRE(units.size() == 3);
  CHECK(units[0].start_index == 0);
  CHECK(units[0].end_index == 4);
  CHECK(units[1].start_index == 4);
  CHECK(units[1].end_index == 8);
  CHECK(units[2].start_index == 8);
  CHECK(units[2].end_index == 10);

  TargetSpace four({Ipv4Range::parse("10.0.0.0-10.0.0.3")}, 80, "http");
  auto single = split_work_units(four, 4);
  REQUIRE(single.size() == 1);
  CHECK(single[0].length() == 4);

  CHECK_THROWS_AS(split_work_units(four, 0), InvalidArgument);
}

TEST_CASE("65536 targets in units of 1000: 66 units covering each index once") {
  TargetSpace space({Ipv4Range::parse("10.1.0.0/16")}, 80, "http");
  auto units = split_work_units(space, 1000);
  CHECK(units.size() == 66);
  std::vector<int> hits(65536, 0);
  for (const auto& u : units) {
    CHECK(u.start_index < u.end_index);
    for (auto i = u.start_index; i < u.end_index; ++i) ++hits[i];
  }
  CHECK(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
}

TEST_CASE("property: random multi-range spaces are covered exactly once through the permutation") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Ipv4Range> ranges;
    std::uint32_t cursor = 0x0a000000;
    const int n = 1 + static_cast<int>(rng() % 4);
    for (int r = 0; r < n; ++r) {
      cursor += 2 + static_cast<std::uint32_t>(rng() % 300);
      const std::uint32_t len = 1 + static_cast<std::uint32_t>(rng() % 500);
      ranges.push_back({Ipv4{cursor}, Ipv4{cursor + len - 1}});
      cursor += len;
    }
    TargetSpace space(ranges, 80, "http");
    auto perm = build_permutation(rng(), space.size());
    std::set<Ipv4> seen;
    for (const auto& u : split_work_units(space, 1 + rng() % 97)) {
      for (auto i = u.start_index; i < u.end_index; ++i) {
        auto t = space.index_to_target(perm.permute(i));
        CHECK(space.contains(t.ip));
        CHECK(seen.insert(t.ip).second);
      }
    }
    std::uint64_t declared = 0;
    for (const auto& r : ranges) declared += r.size();
    CHECK(seen.size() == declared);
  }
}

TEST_CASE("parallel range permutation equals the serial reference") {
  const IndexPermutation p(77, 100003);
  CHECK(permute_range(p, 0, 100003) == permute_range_serial(p, 0, 100003));
  CHECK(permute_range(p, 500, 900) == permute_range_serial(p, 500, 900));
  CHECK(permute_range(p, 7, 7).empty());
  CHECK_THROWS_AS(permute_range(p, 0, 100004), InvalidArgument);
  CHECK_THROWS_AS(permute_range(p, 9, 8), InvalidArgument);
}

#pragma once

// Target-space enumeration: keyed pseudorandom ordering of the addresses in a
// scan and their division into work units.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "recon/net.hpp"

namespace recon::ipgen {

inline constexpr std::uint64_t kDefaultUnitSize = 4096;
inline constexpr int kDefaultRounds = 4;

// Addresses to sweep for one (protocol, port) pair. Ranges are sorted and
// adjacent ranges merged at construction; overlapping input is rejected.
class TargetSpace {
 public:
  TargetSpace(std::vector<Ipv4Range> ranges, std::uint16_t port, std::string protocol_id);

  const std::vector<Ipv4Range>& ranges() const { return ranges_; }
  std::uint16_t port() const { return port_; }
  const std::string& protocol_id() const { return protocol_id_; }
  std::uint64_t size() const { return size_; }

  Endpoint index_to_target(std::uint64_t index) const;
  std::uint64_t target_to_index(Ipv4 ip) const;
  bool contains(Ipv4 ip) const;

 private:
  std::vector<Ipv4Range> ranges_;
  std::vector<std::uint64_t> offsets_;  // offsets_[i] = index of ranges_[i].first
  std::uint16_t port_;
  std::string protocol_id_;
  std::uint64_t size_ = 0;
};

// Stateless bijection on [0, N): balanced Feistel network over the smallest
// even bit width covering N, with cycle-walking back into range.
class IndexPermutation {
 public:
  IndexPermutation(std::uint64_t seed, std::uint64_t space_size, int rounds = kDefaultRounds);

  std::uint64_t permute(std::uint64_t index) const;
  std::uint64_t inverse(std::uint64_t value) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t space_size() const { return size_; }
  int rounds() const { return static_cast<int>(round_keys_.size()); }

 private:
  std::uint64_t encrypt(std::uint64_t x) const;
  std::uint64_t decrypt(std::uint64_t x) const;
  std::uint64_t round_fn(std::uint64_t key, std::uint64_t half) const;

  std::uint64_t seed_;
  std::uint64_t size_;
  unsigned half_bits_ = 0;
  std::uint64_t half_mask_ = 0;
  std::vector<std::uint64_t> round_keys_;
};

IndexPermutation build_permutation(std::uint64_t seed, std::uint64_t space_size,
                                   int rounds = kDefaultRounds);

// permute(i) for i in [begin, end). Parallel, plus a serial reference.
std::vector<std::uint64_t> permute_range(const IndexPermutation& p, std::uint64_t begin, std::uint64_t end);
std::vector<std::uint64_t> permute_range_serial(const IndexPermutation& p, std::uint64_t begin, std::uint64_t end);

enum class UnitState { pending, assigned, completed, failed };

std::string to_string(UnitState s);
UnitState unit_state_from_string(const std::string& s);

struct WorkUnit {
  std::uint64_t unit_id = 0;
  std::string operation_id;
  std::uint64_t start_index = 0;  // half-open [start, end) over the permuted sequence
  std::uint64_t end_index = 0;
  UnitState state = UnitState::pending;
  std::optional<std::string> assigned_node;
  std::uint32_t attempt_count = 0;
  std::string site_group;

  std::uint64_t length() const { return end_index - start_index; }
};

std::vector<WorkUnit> split_work_units(const TargetSpace& space, std::uint64_t unit_size);

// 64-bit finalizer from SplitMix64.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace recon::ipgen

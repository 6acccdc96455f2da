#include "recon/ipgen.hpp"

#include <algorithm>
#include <bit>

#include "recon/error.hpp"

namespace recon::ipgen {

TargetSpace::TargetSpace(std::vector<Ipv4Range> ranges, std::uint16_t port,
                         std::string protocol_id)
    : port_(port), protocol_id_(std::move(protocol_id)) {
  if (ranges.empty()) throw InvalidArgument("target space needs at least one range");
  if (port == 0) throw InvalidArgument("port must be in 1-65535");
  std::sort(ranges.begin(), ranges.end(),
            [](const Ipv4Range& a, const Ipv4Range& b) { return a.first < b.first; });
  for (const auto& r : ranges) {
    if (r.last < r.first) throw InvalidArgument("malformed range " + r.to_string());
    if (!ranges_.empty()) {
      auto& prev = ranges_.back();
      if (r.first <= prev.last) {
        throw InvalidArgument("overlapping target ranges " + prev.to_string() + " and " +
                              r.to_string());
      }
      if (std::uint64_t{prev.last.value} + 1 == r.first.value) {
        prev.last = r.last;
        continue;
      }
    }
    ranges_.push_back(r);
  }
  offsets_.reserve(ranges_.size());
  for (const auto& r : ranges_) {
    offsets_.push_back(size_);
    size_ += r.size();
  }
}

Endpoint TargetSpace::index_to_target(std::uint64_t index) const {
  if (index >= size_) {
    throw InvalidArgument("target index " + std::to_string(index) + " out of range [0," +
                          std::to_string(size_) + ")");
  }
  auto it = std::upper_bound(offsets_.begin(), offsets_.end(), index);
  const auto i = static_cast<std::size_t>(it - offsets_.begin()) - 1;
  return {Ipv4{static_cast<std::uint32_t>(ranges_[i].first.value + (index - offsets_[i]))},
          port_};
}

bool TargetSpace::contains(Ipv4 ip) const {
  auto it = std::upper_bound(ranges_.begin(), ranges_.end(), ip,
                             [](Ipv4 v, const Ipv4Range& r) { return v < r.first; });
  return it != ranges_.begin() && std::prev(it)->contains(ip);
}

std::uint64_t TargetSpace::target_to_index(Ipv4 ip) const {
  auto it = std::upper_bound(ranges_.begin(), ranges_.end(), ip,
                             [](Ipv4 v, const Ipv4Range& r) { return v < r.first; });
  if (it == ranges_.begin() || !std::prev(it)->contains(ip)) {
    throw InvalidArgument(ip.to_string() + " is not in the target space");
  }
  const auto i = static_cast<std::size_t>(it - ranges_.begin()) - 1;
  return offsets_[i] + (ip.value - ranges_[i].first.value);
}

IndexPermutation::IndexPermutation(std::uint64_t seed, std::uint64_t space_size, int rounds)
    : seed_(seed), size_(space_size) {
  if (space_size == 0) throw InvalidArgument("permutation space size must be >= 1");
  if (rounds < 1) throw InvalidArgument("permutation needs at least one round");
  const unsigned bits = space_size <= 2 ? 2u : static_cast<unsigned>(std::bit_width(space_size - 1));
  half_bits_ = (bits + 1) / 2;
  half_mask_ = (std::uint64_t{1} << half_bits_) - 1;
  std::uint64_t state = seed;
  for (int r = 0; r < rounds; ++r) {
    state += 0x9e3779b97f4a7c15ULL;
    round_keys_.push_back(mix64(state));
  }
}

std::uint64_t IndexPermutation::round_fn(std::uint64_t key, std::uint64_t half) const {
  return mix64(half ^ key) & half_mask_;
}

std::uint64_t IndexPermutation::encrypt(std::uint64_t x) const {
  std::uint64_t left = x >> half_bits_;
  std::uint64_t right = x & half_mask_;
  for (auto key : round_keys_) {
    const std::uint64_t next = left ^ round_fn(key, right);
    left = right;
    right = next;
  }
  return (left << half_bits_) | right;
}

std::uint64_t IndexPermutation::decrypt(std::uint64_t x) const {
  std::uint64_t left = x >> half_bits_;
  std::uint64_t right = x & half_mask_;
  for (auto it = round_keys_.rbegin(); it != round_keys_.rend(); ++it) {
    const std::uint64_t prev = right ^ round_fn(*it, left);
    right = left;
    left = prev;
  }
  return (left << half_bits_) | right;
}

std::uint64_t IndexPermutation::permute(std::uint64_t index) const {
  if (index >= size_) {
    throw InvalidArgument("permutation index " + std::to_string(index) + " out of range");
  }
  // Cycle-walk: the Feistel domain is at most 4x the space, so the expected
  // number of extra steps is small.
  std::uint64_t x = encrypt(index);
  while (x >= size_) x = encrypt(x);
  return x;
}

std::uint64_t IndexPermutation::inverse(std::uint64_t value) const {
  if (value >= size_) {
    throw InvalidArgument("permutation value " + std::to_string(value) + " out of range");
  }
  std::uint64_t x = decrypt(value);
  while (x >= size_) x = decrypt(x);
  return x;
}

IndexPermutation build_permutation(std::uint64_t seed, std::uint64_t space_size, int rounds) {
  return IndexPermutation(seed, space_size, rounds);
}

std::string to_string(UnitState s) {
  switch (s) {
    case UnitState::pending: return "pending";
    case UnitState::assigned: return "assigned";
    case UnitState::completed: return "completed";
    case UnitState::failed: return "failed";
  }
  return "unknown";
}

UnitState unit_state_from_string(const std::string& s) {
  if (s == "pending") return UnitState::pending;
  if (s == "assigned") return UnitState::assigned;
  if (s == "completed") return UnitState::completed;
  if (s == "failed") return UnitState::failed;
  throw InvalidArgument("unknown unit state '" + s + "'");
}

std::vector<WorkUnit> split_work_units(const TargetSpace& space, std::uint64_t unit_size) {
  if (unit_size == 0) throw InvalidArgument("unit_size must be >= 1");
  std::vector<WorkUnit> units;
  units.reserve(static_cast<std::size_t>((space.size() + unit_size - 1) / unit_size));
  for (std::uint64_t start = 0, id = 0; start < space.size(); start += unit_size, ++id) {
    WorkUnit u;
    u.unit_id = id;
    u.start_index = start;
    u.end_index = std::min(space.size(), start + unit_size);
    units.push_back(std::move(u));
  }
  return units;
}

std::vector<std::uint64_t> permute_range_serial(const IndexPermutation& p, std::uint64_t begin, std::uint64_t end) {
  if (begin > end || end > p.space_size()) throw InvalidArgument("permute_range bounds outside the space");
  std::vector<std::uint64_t> out(end - begin);
  for (std::uint64_t i = begin; i < end; ++i) out[i - begin] = p.permute(i);
  return out;
}

std::vector<std::uint64_t> permute_range(const IndexPermutation& p, std::uint64_t begin, std::uint64_t end) {
  if (begin > end || end > p.space_size()) throw InvalidArgument("permute_range bounds outside the space");
  std::vector<std::uint64_t> out(end - begin);
  const auto n = static_cast<std::int64_t>(end - begin);
#pragma omp parallel for schedule(static)
  for (std::int64_t k = 0; k < n; ++k) out[static_cast<std::size_t>(k)] = p.permute(begin + static_cast<std::uint64_t>(k));
  return out;
}

}  // namespace recon::ipgen

#pragma once

// Aggregation: dedup node results per operation, then annotate each record
// with registry (INETNUM/WHOIS), prefix-to-AS, reverse DNS and geo data.

#include <algorithm>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "recon/appscan.hpp"
#include "recon/dns.hpp"
#include "recon/net.hpp"
#include "recon/orchestrator.hpp"

namespace recon::enrich {

inline constexpr int kSchemaVersion = 1;

struct RegistryRecord {
  Ipv4 start_ip;
  Ipv4 end_ip;
  std::string netname;
  std::string description;  // verbatim
  std::string country;
  std::string source;
  friend bool operator==(const RegistryRecord&, const RegistryRecord&) = default;
};

struct PrefixAsn {
  Ipv4 prefix;
  std::uint8_t length = 0;
  std::uint32_t asn = 0;
  std::string as_name;
  std::string snapshot_date;
  friend bool operator==(const PrefixAsn&, const PrefixAsn&) = default;
};

struct GeoInfo {
  Ipv4Range range;
  double lat = 0;
  double lon = 0;
  std::string city;
  std::string country;
  friend bool operator==(const GeoInfo&, const GeoInfo&) = default;
};

// Interval table resolved to a sorted, non-overlapping decomposition at
// construction. Among the entries covering a point, the one ranked first by
// `Better` wins. Immutable afterwards, so lookups are safe from any thread.
template <class T>
class IntervalIndex {
 public:
  struct Segment {
    std::uint32_t lo, hi;  // inclusive
    std::size_t entry;
  };

  IntervalIndex() = default;
  template <class RangeOf, class Better>
  IntervalIndex(std::vector<T> entries, RangeOf range_of, Better better);

  const T* find(Ipv4 ip) const {
    auto it = std::upper_bound(segments_.begin(), segments_.end(), ip.value,
                               [](std::uint32_t v, const Segment& s) { return v < s.lo; });
    if (it == segments_.begin()) return nullptr;
    --it;
    return ip.value <= it->hi ? &entries_[it->entry] : nullptr;
  }
  std::optional<T> lookup(Ipv4 ip) const {
    const T* p = find(ip);
    return p ? std::optional<T>(*p) : std::nullopt;
  }
  const std::vector<T>& entries() const { return entries_; }
  const std::vector<Segment>& segments() const { return segments_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<T> entries_;
  std::vector<Segment> segments_;
};

// Registry: smallest covering range wins; ties go to the smallest netname.
class RegistryIndex : public IntervalIndex<RegistryRecord> {
 public:
  RegistryIndex() = default;
  explicit RegistryIndex(std::vector<RegistryRecord> records);
};

// Longest-prefix match.
class AsnIndex : public IntervalIndex<PrefixAsn> {
 public:
  AsnIndex() = default;
  explicit AsnIndex(std::vector<PrefixAsn> prefixes);
};

class GeoIndex : public IntervalIndex<GeoInfo> {
 public:
  GeoIndex() = default;
  explicit GeoIndex(std::vector<GeoInfo> rows);
};

// CSV start_ip,end_ip,netname,description,country,source (header optional).
std::vector<RegistryRecord> parse_registry(std::istream& in);
// TSV prefix, length, asn, as_name.
std::vector<PrefixAsn> parse_prefix_asn(std::istream& in, const std::string& snapshot_date = "");
// CSV cidr,lat,lon,city,country (header optional).
std::vector<GeoInfo> parse_geo(std::istream& in);

std::vector<RegistryRecord> load_registry(const std::string& path);
std::vector<PrefixAsn> load_prefix_asn(const std::string& path, const std::string& snapshot_date = "");
std::vector<GeoInfo> load_geo(const std::string& path);

// Parallel batch lookups and their serial reference.
std::vector<const RegistryRecord*> lookup_registry_all(const RegistryIndex& index, const std::vector<Ipv4>& ips);
std::vector<const RegistryRecord*> lookup_registry_all_serial(const RegistryIndex& index, const std::vector<Ipv4>& ips);

struct EnrichedRecord {
  appscan::ServiceRecord service;
  std::optional<RegistryRecord> registry;
  std::optional<PrefixAsn> asn;
  std::optional<std::string> rdns;
  std::optional<GeoInfo> geo;
  std::string operation_id;
};

nlohmann::json to_json(const EnrichedRecord& r);
EnrichedRecord enriched_from_json(const nlohmann::json& j);
void write_ndjson(std::ostream& out, const std::vector<EnrichedRecord>& records);
std::vector<EnrichedRecord> read_ndjson(std::istream& in);
std::vector<EnrichedRecord> load_ndjson(const std::string& path);

struct Indices {
  const RegistryIndex* registry = nullptr;
  const AsnIndex* asn = nullptr;
  const GeoIndex* geo = nullptr;
  dns::Resolver* resolver = nullptr;  // reverse DNS; skipped when null
};

std::optional<std::string> reverse_dns(Ipv4 ip, dns::Resolver& resolver);
EnrichedRecord enrich(const appscan::ServiceRecord& record, const std::string& operation_id, const Indices& idx);
// PTR lookups are cached per distinct address.
std::vector<EnrichedRecord> enrich_all(const std::vector<appscan::ServiceRecord>& records,
                                       const std::string& operation_id, const Indices& idx);

struct MergeResult {
  std::vector<appscan::ServiceRecord> records;   // one per (ip, port, protocol_id, site_group)
  std::vector<appscan::ServiceRecord> archived;  // superseded duplicates
};

// Batches must come from units of `operation_id` whose ids are in
// `known_units`; anything else throws InvalidArgument. Latest collected_at
// wins per key.
MergeResult consistency_merge(const std::vector<orchestrator::Orchestrator::LoggedResult>& batches,
                              const std::string& operation_id, const std::set<std::uint64_t>& known_units);

// ---- template implementation ----

template <class T>
template <class RangeOf, class Better>
IntervalIndex<T>::IntervalIndex(std::vector<T> entries, RangeOf range_of, Better better) : entries_(std::move(entries)) {
  // Sweep over boundary points; `active` holds covering entries ordered by rank.
  struct Event {
    std::uint64_t at;
    bool open;
    std::size_t i;
  };
  std::vector<Event> events;
  events.reserve(entries_.size() * 2);
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const Ipv4Range r = range_of(entries_[i]);
    events.push_back({r.first.value, true, i});
    events.push_back({std::uint64_t{r.last.value} + 1, false, i});
  }
  std::sort(events.begin(), events.end(), [](const Event& a, const Event& b) { return a.at < b.at; });
  auto cmp = [&](std::size_t a, std::size_t b) {
    if (better(entries_[a], entries_[b])) return true;
    if (better(entries_[b], entries_[a])) return false;
    return a < b;
  };
  std::set<std::size_t, decltype(cmp)> active(cmp);
  std::size_t e = 0;
  while (e < events.size()) {
    const std::uint64_t at = events[e].at;
    for (; e < events.size() && events[e].at == at; ++e) {
      if (events[e].open) {
        active.insert(events[e].i);
      } else {
        active.erase(events[e].i);
      }
    }
    if (active.empty() || at > 0xFFFFFFFFull) continue;
    const std::uint64_t next = e < events.size() ? events[e].at : 0x100000000ull;
    const std::size_t winner = *active.begin();
    const auto lo = static_cast<std::uint32_t>(at), hi = static_cast<std::uint32_t>(next - 1);
    if (!segments_.empty() && segments_.back().entry == winner && std::uint64_t{segments_.back().hi} + 1 == at) {
      segments_.back().hi = hi;
    } else {
      segments_.push_back({lo, hi, winner});
    }
  }
}

}  // namespace recon::enrich

#include "recon/store.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <set>

#include "recon/error.hpp"
#include "recon/net.hpp"

namespace recon::store {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kIndexedFields[] = {"ip", "entity_id", "severity", "status"};

const json* field_value(const json& doc, const std::string& field) {
  if (!doc.is_object()) return nullptr;
  if (auto it = doc.find(field); it != doc.end()) return &*it;
  if (auto rec = doc.find("record"); rec != doc.end() && rec->is_object()) {
    if (auto it = rec->find(field); it != rec->end()) return &*it;
  }
  return nullptr;
}

int severity_rank(const std::string& s) {
  if (s == "none") return 0;
  if (s == "low") return 1;
  if (s == "medium") return 2;
  if (s == "high") return 3;
  if (s == "critical") return 4;
  return -1;
}

std::uint64_t wall_micros() {
  return static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::microseconds>(
                                        std::chrono::system_clock::now().time_since_epoch())
                                        .count());
}

}  // namespace

std::string to_string(Collection c) {
  switch (c) {
    case Collection::operations: return "operations";
    case Collection::records: return "records";
    case Collection::enriched: return "enriched";
    case Collection::entities: return "entities";
    case Collection::assignments: return "assignments";
    case Collection::matches: return "matches";
    case Collection::reports: return "reports";
  }
  return "unknown";
}

Collection collection_from_string(const std::string& s) {
  for (auto c : {Collection::operations, Collection::records, Collection::enriched,
                 Collection::entities, Collection::assignments, Collection::matches,
                 Collection::reports}) {
    if (to_string(c) == s) return c;
  }
  throw InvalidArgument("unknown collection '" + s + "'");
}

std::string sort_key(const std::string& field, const json& value) {
  if (field == "ip" && value.is_string()) {
    if (auto ip = Ipv4::try_parse(value.get<std::string>())) {
      char buf[9];
      std::snprintf(buf, sizeof buf, "%08x", ip->value);
      return buf;
    }
  }
  if (field == "severity" && value.is_string()) {
    const int rank = severity_rank(value.get<std::string>());
    if (rank >= 0) return std::to_string(rank);
  }
  if (value.is_number_integer() || value.is_number_unsigned()) {
    // Offset so negative numbers sort before positive ones.
    char buf[24];
    const auto v = value.get<std::int64_t>();
    std::snprintf(buf, sizeof buf, "%020llu",
                  static_cast<unsigned long long>(v) ^ 0x8000000000000000ULL);
    return buf;
  }
  if (value.is_string()) return value.get<std::string>();
  return value.dump();
}

FileStore::FileStore(fs::path root, bool fsync_each_put) : root_(std::move(root)), fsync_(fsync_each_put) {
  fs::create_directories(root_);
  load();
}

FileStore::~FileStore() {
  for (auto& [k, p] : partitions_) {
    if (p.log_fd >= 0) ::close(p.log_fd);
  }
}

FileStore::Partition& FileStore::partition_locked(const std::string& op, Collection c) {
  auto& p = partitions_[{op, c}];
  return p;
}

bool FileStore::apply_locked(Partition& p, const std::string& id, const json& doc, std::uint64_t ts) {
  auto it = p.docs.find(id);
  if (it != p.docs.end()) {
    if (ts < it->second.ts) return false;
    for (const char* f : kIndexedFields) {
      if (const json* v = field_value(it->second.doc, f)) {
        auto& idx = p.indexes[f];
        auto [lo, hi] = idx.equal_range(sort_key(f, *v));
        for (auto e = lo; e != hi; ++e) {
          if (e->second == id) {
            idx.erase(e);
            break;
          }
        }
      }
    }
    it->second = {doc, ts};
  } else {
    p.docs.emplace(id, Stored{doc, ts});
  }
  for (const char* f : kIndexedFields) {
    if (const json* v = field_value(doc, f)) p.indexes[f].emplace(sort_key(f, *v), id);
  }
  clock_ = std::max(clock_, ts);
  return true;
}

void FileStore::append_locked(const std::string& op, Collection c, Partition& p,
                              const std::string& line) {
  if (p.log_fd < 0) {
    const auto dir = root_ / op;
    fs::create_directories(dir);
    const auto path = dir / (to_string(c) + ".ndjson");
    p.log_fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (p.log_fd < 0) throw std::runtime_error("cannot open store log " + path.string());
  }
  std::string buf = line;
  buf.push_back('\n');
  const char* data = buf.data();
  std::size_t left = buf.size();
  while (left > 0) {
    const auto n = ::write(p.log_fd, data, left);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw std::runtime_error("store write failed");
    }
    data += n;
    left -= static_cast<std::size_t>(n);
  }
  if (fsync_) ::fdatasync(p.log_fd);
}

PutResult FileStore::put(const DocumentKey& key, const json& doc, std::optional<std::uint64_t> timestamp) {
  if (key.operation_id.empty() || key.document_id.empty()) {
    throw InvalidArgument("document key needs operation_id and document_id");
  }
  if (key.operation_id.find('/') != std::string::npos || key.operation_id.starts_with('.')) {
    throw InvalidArgument("operation_id must be a plain path segment");
  }
  std::unique_lock lock(mutex_);
  const std::uint64_t ts = timestamp ? *timestamp : std::max(clock_ + 1, wall_micros());
  auto& p = partition_locked(key.operation_id, key.collection);
  if (auto it = p.docs.find(key.document_id); it != p.docs.end()) {
    if (ts < it->second.ts) return {false, it->second.ts};
    if (it->second.doc == doc && ts == it->second.ts) return {true, ts};
  }
  append_locked(key.operation_id, key.collection, p,
                json{{"id", key.document_id}, {"ts", ts}, {"doc", doc}}.dump());
  apply_locked(p, key.document_id, doc, ts);
  return {true, ts};
}

std::optional<json> FileStore::get(const DocumentKey& key) const {
  std::shared_lock lock(mutex_);
  auto pit = partitions_.find({key.operation_id, key.collection});
  if (pit == partitions_.end()) return std::nullopt;
  auto it = pit->second.docs.find(key.document_id);
  if (it == pit->second.docs.end()) return std::nullopt;
  return it->second.doc;
}

QueryResult FileStore::query(Collection c, const std::string& operation_id,
                             const std::vector<Filter>& filters, Page page) const {
  std::shared_lock lock(mutex_);
  QueryResult result;
  auto pit = partitions_.find({operation_id, c});
  if (pit == partitions_.end()) return result;
  const auto& p = pit->second;

  auto matches = [&](const json& doc, const Filter& f) {
    const json* v = field_value(doc, f.field);
    if (!v) return false;
    const auto k = sort_key(f.field, *v);
    if (f.equals && k != sort_key(f.field, *f.equals)) return false;
    if (f.min && k < sort_key(f.field, *f.min)) return false;
    if (f.max && k > sort_key(f.field, *f.max)) return false;
    return true;
  };

  // Seed candidates from the first indexed filter, verify the rest per document.
  std::set<std::string> candidates;
  bool seeded = false;
  for (const auto& f : filters) {
    auto idx = p.indexes.find(f.field);
    if (idx == p.indexes.end() && std::find(std::begin(kIndexedFields), std::end(kIndexedFields),
                                            f.field) == std::end(kIndexedFields)) {
      continue;
    }
    seeded = true;
    if (idx == p.indexes.end()) break;
    const auto& m = idx->second;
    auto lo = m.begin();
    auto hi = m.end();
    if (f.equals) {
      std::tie(lo, hi) = m.equal_range(sort_key(f.field, *f.equals));
    } else {
      if (f.min) lo = m.lower_bound(sort_key(f.field, *f.min));
      if (f.max) hi = m.upper_bound(sort_key(f.field, *f.max));
    }
    for (auto it = lo; it != hi && it != m.end(); ++it) candidates.insert(it->second);
    break;
  }

  auto consider = [&](const std::string& id, const json& doc) {
    for (const auto& f : filters) {
      if (!matches(doc, f)) return;
    }
    if (result.total >= page.offset && result.documents.size() < page.limit) {
      result.documents.push_back(doc);
      result.ids.push_back(id);
    }
    ++result.total;
  };
  if (seeded) {
    for (const auto& id : candidates) consider(id, p.docs.at(id).doc);
  } else {
    for (const auto& [id, stored] : p.docs) consider(id, stored.doc);
  }
  return result;
}

std::size_t FileStore::snapshot(const std::string& operation_id, const fs::path& path) const {
  std::shared_lock lock(mutex_);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write snapshot " + path.string());
  std::size_t n = 0;
  for (const auto& [key, p] : partitions_) {
    if (key.first != operation_id) continue;
    for (const auto& [id, stored] : p.docs) {
      out << json{{"collection", to_string(key.second)},
                  {"operation_id", key.first},
                  {"id", id},
                  {"ts", stored.ts},
                  {"doc", stored.doc}}
                 .dump()
          << '\n';
      ++n;
    }
  }
  out.flush();
  if (!out) throw std::runtime_error("snapshot write failed");
  return n;
}

std::size_t FileStore::restore(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFound("cannot open snapshot " + path.string());
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto j = json::parse(line);
    put({collection_from_string(j.at("collection").get<std::string>()),
         j.at("operation_id").get<std::string>(), j.at("id").get<std::string>()},
        j.at("doc"), j.at("ts").get<std::uint64_t>());
    ++n;
  }
  return n;
}

std::vector<std::string> FileStore::operations() const {
  std::shared_lock lock(mutex_);
  std::set<std::string> ops;
  for (const auto& [key, p] : partitions_) ops.insert(key.first);
  return {ops.begin(), ops.end()};
}

void FileStore::load() {
  std::unique_lock lock(mutex_);
  for (const auto& op_dir : fs::directory_iterator(root_)) {
    if (!op_dir.is_directory()) continue;
    const auto op = op_dir.path().filename().string();
    for (const auto& file : fs::directory_iterator(op_dir.path())) {
      if (file.path().extension() != ".ndjson") continue;
      Collection c;
      try {
        c = collection_from_string(file.path().stem().string());
      } catch (const InvalidArgument&) {
        continue;
      }
      auto& p = partition_locked(op, c);
      std::ifstream in(file.path(), std::ios::binary);
      std::string line;
      std::uintmax_t good = 0;
      bool torn = false;
      while (std::getline(in, line)) {
        if (in.eof()) {
          torn = !trim(line).empty();  // last line lacks its newline
          if (torn) break;
        }
        if (!trim(line).empty()) {
          json j;
          try {
            j = json::parse(line);
          } catch (const json::parse_error&) {
            torn = true;
            break;
          }
          apply_locked(p, j.at("id").get<std::string>(), j.at("doc"), j.at("ts").get<std::uint64_t>());
        }
        good += line.size() + 1;
      }
      in.close();
      // Drop a partially written tail so later appends start on a clean line.
      if (torn) fs::resize_file(file.path(), good);
    }
  }
}

}  // namespace recon::store

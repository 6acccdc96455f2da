#pragma once

// Append-oriented document persistence. Each (operation, collection) pair is
// one newline-delimited JSON log under <data>/<operation_id>/; the in-memory
// index is rebuilt by replaying the logs at startup.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include <json.hpp>

namespace recon::store {

enum class Collection { operations, records, enriched, entities, assignments, matches, reports };

std::string to_string(Collection c);
Collection collection_from_string(const std::string& s);

struct DocumentKey {
  Collection collection = Collection::records;
  std::string operation_id;
  std::string document_id;
};

struct Filter {
  std::string field;  // one of ip, entity_id, severity, status (indexed) or any top-level field
  std::optional<nlohmann::json> equals;
  std::optional<nlohmann::json> min;  // inclusive
  std::optional<nlohmann::json> max;  // inclusive

  static Filter eq(std::string field, nlohmann::json v) { return {std::move(field), std::move(v), {}, {}}; }
  static Filter range(std::string field, std::optional<nlohmann::json> lo, std::optional<nlohmann::json> hi) {
    return {std::move(field), {}, std::move(lo), std::move(hi)};
  }
};

struct Page {
  std::size_t offset = 0;
  std::size_t limit = 100;
};

struct QueryResult {
  std::vector<nlohmann::json> documents;  // ordered by document id
  std::vector<std::string> ids;
  std::size_t total = 0;                  // matches before pagination
};

struct PutResult {
  bool applied = false;  // false: older than the stored version, ignored
  std::uint64_t timestamp = 0;
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual PutResult put(const DocumentKey& key, const nlohmann::json& doc,
                        std::optional<std::uint64_t> timestamp = std::nullopt) = 0;
  virtual std::optional<nlohmann::json> get(const DocumentKey& key) const = 0;
  virtual QueryResult query(Collection c, const std::string& operation_id,
                            const std::vector<Filter>& filters, Page page = {}) const = 0;
  virtual std::size_t snapshot(const std::string& operation_id,
                               const std::filesystem::path& path) const = 0;
  virtual std::size_t restore(const std::filesystem::path& path) = 0;
  virtual std::vector<std::string> operations() const = 0;
};

// Field value normalized so that byte order equals semantic order
// (ip numerically, severity by rank).
std::string sort_key(const std::string& field, const nlohmann::json& value);

class FileStore final : public Backend {
 public:
  explicit FileStore(std::filesystem::path root, bool fsync_each_put = false);
  ~FileStore() override;

  PutResult put(const DocumentKey& key, const nlohmann::json& doc,
                std::optional<std::uint64_t> timestamp = std::nullopt) override;
  std::optional<nlohmann::json> get(const DocumentKey& key) const override;
  QueryResult query(Collection c, const std::string& operation_id,
                    const std::vector<Filter>& filters, Page page = {}) const override;
  std::size_t snapshot(const std::string& operation_id,
                       const std::filesystem::path& path) const override;
  std::size_t restore(const std::filesystem::path& path) override;
  std::vector<std::string> operations() const override;

  const std::filesystem::path& root() const { return root_; }

 private:
  struct Stored {
    nlohmann::json doc;
    std::uint64_t ts = 0;
  };
  struct Partition {
    std::map<std::string, Stored> docs;
    std::map<std::string, std::multimap<std::string, std::string>> indexes;  // field -> key -> id
    int log_fd = -1;
  };
  using PartitionKey = std::pair<std::string, Collection>;

  void load();
  bool apply_locked(Partition& p, const std::string& id, const nlohmann::json& doc, std::uint64_t ts);
  Partition& partition_locked(const std::string& op, Collection c);
  void append_locked(const std::string& op, Collection c, Partition& p, const std::string& line);

  std::filesystem::path root_;
  bool fsync_;
  mutable std::shared_mutex mutex_;
  std::map<PartitionKey, Partition> partitions_;
  std::uint64_t clock_ = 0;
};

}  // namespace recon::store

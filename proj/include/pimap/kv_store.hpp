#pragma once

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>

struct sqlite3;

namespace pimap {

// Embedded key-value store in one SQLite file. Values are opaque bytes. Every
// write is its own transaction; safe to share between threads.
class KvStore {
 public:
  // ":memory:" gives a private in-memory store.
  explicit KvStore(const std::filesystem::path& path);
  ~KvStore();
  KvStore(const KvStore&) = delete;
  KvStore& operator=(const KvStore&) = delete;

  void put(const std::string& key, const std::string& value);
  std::optional<std::string> get(const std::string& key) const;
  bool erase(const std::string& key);
  // Keys starting with `prefix`, in key order.
  std::map<std::string, std::string> scan(const std::string& prefix) const;
  // Atomically adds `delta` to the integer stored at key (0 when absent) and
  // returns the new value.
  long long increment(const std::string& key, long long delta = 1);

 private:
  void exec(const char* sql) const;

  sqlite3* db_ = nullptr;
  mutable std::mutex mutex_;
};

}  // namespace pimap

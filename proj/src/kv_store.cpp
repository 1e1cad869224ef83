#include "pimap/kv_store.hpp"

#include "pimap/errors.hpp"

#include <sqlite3.h>

namespace pimap {
namespace {

class Statement {
 public:
  Statement(sqlite3* db, const char* sql) : db_(db) {
    if (sqlite3_prepare_v2(db, sql, -1, &stmt_, nullptr) != SQLITE_OK) {
      throw CorruptFileError(std::string("kv store: ") + sqlite3_errmsg(db));
    }
  }
  ~Statement() { sqlite3_finalize(stmt_); }
  Statement(const Statement&) = delete;
  Statement& operator=(const Statement&) = delete;

  void bind(int i, const std::string& s) {
    sqlite3_bind_blob(stmt_, i, s.data(), static_cast<int>(s.size()), SQLITE_TRANSIENT);
  }
  // True while rows remain.
  bool step() {
    const int rc = sqlite3_step(stmt_);
    if (rc == SQLITE_ROW) return true;
    if (rc == SQLITE_DONE) return false;
    throw CorruptFileError(std::string("kv store: ") + sqlite3_errmsg(db_));
  }
  std::string column(int i) const {
    const auto* p = static_cast<const char*>(sqlite3_column_blob(stmt_, i));
    return p ? std::string(p, static_cast<std::size_t>(sqlite3_column_bytes(stmt_, i))) : std::string();
  }

 private:
  sqlite3* db_;
  sqlite3_stmt* stmt_ = nullptr;
};

}  // namespace

KvStore::KvStore(const std::filesystem::path& path) {
  if (path != ":memory:" && path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (sqlite3_open(path.string().c_str(), &db_) != SQLITE_OK) {
    const std::string msg = db_ ? sqlite3_errmsg(db_) : "out of memory";
    sqlite3_close(db_);
    throw CorruptFileError("kv store " + path.string() + ": " + msg);
  }
  sqlite3_busy_timeout(db_, 5000);
  exec("PRAGMA journal_mode=WAL");
  exec("CREATE TABLE IF NOT EXISTS kv (key BLOB PRIMARY KEY, value BLOB NOT NULL)");
}

KvStore::~KvStore() { sqlite3_close(db_); }

void KvStore::exec(const char* sql) const {
  char* err = nullptr;
  if (sqlite3_exec(db_, sql, nullptr, nullptr, &err) != SQLITE_OK) {
    std::string msg = err ? err : "unknown error";
    sqlite3_free(err);
    throw CorruptFileError("kv store: " + msg);
  }
}

void KvStore::put(const std::string& key, const std::string& value) {
  std::lock_guard lock(mutex_);
  Statement s(db_, "INSERT INTO kv(key, value) VALUES(?1, ?2) ON CONFLICT(key) DO UPDATE SET value = excluded.value");
  s.bind(1, key);
  s.bind(2, value);
  s.step();
}

std::optional<std::string> KvStore::get(const std::string& key) const {
  std::lock_guard lock(mutex_);
  Statement s(db_, "SELECT value FROM kv WHERE key = ?1");
  s.bind(1, key);
  if (!s.step()) return std::nullopt;
  return s.column(0);
}

bool KvStore::erase(const std::string& key) {
  std::lock_guard lock(mutex_);
  Statement s(db_, "DELETE FROM kv WHERE key = ?1");
  s.bind(1, key);
  s.step();
  return sqlite3_changes(db_) > 0;
}

std::map<std::string, std::string> KvStore::scan(const std::string& prefix) const {
  std::lock_guard lock(mutex_);
  // Blobs compare bytewise, so [prefix, prefix + 0xff...) is the prefix range.
  Statement s(db_, "SELECT key, value FROM kv WHERE key >= ?1 ORDER BY key");
  s.bind(1, prefix);
  std::map<std::string, std::string> out;
  while (s.step()) {
    auto key = s.column(0);
    if (key.compare(0, prefix.size(), prefix) != 0) break;
    out.emplace(std::move(key), s.column(1));
  }
  return out;
}

long long KvStore::increment(const std::string& key, long long delta) {
  std::lock_guard lock(mutex_);
  exec("BEGIN IMMEDIATE");
  try {
    long long v = 0;
    {
      Statement s(db_, "SELECT value FROM kv WHERE key = ?1");
      s.bind(1, key);
      if (s.step()) v = std::stoll(s.column(0));
    }
    v += delta;
    Statement w(db_, "INSERT INTO kv(key, value) VALUES(?1, ?2) ON CONFLICT(key) DO UPDATE SET value = excluded.value");
    w.bind(1, key);
    w.bind(2, std::to_string(v));
    w.step();
    exec("COMMIT");
    return v;
  } catch (...) {
    exec("ROLLBACK");
    throw;
  }
}

}  // namespace pimap

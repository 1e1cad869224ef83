#include "pimap/retrieval.hpp"

#include "pimap/errors.hpp"

#include "binary_io.hpp"

#include <algorithm>
#include <cstdio>
#include <mutex>
#include <set>
#include <sstream>

namespace pimap {
namespace {

constexpr std::string_view kIndexMagic = "PIIDX1";
constexpr std::uint32_t kIndexVersion = 1;

bool hit_before(const RankedHit& a, const RankedHit& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.media_id < b.media_id;
}

}  // namespace

void IndexEntry::validate(std::size_t d_joint) const {
  if (media_id.empty()) throw ValidationError("index entry without media_id");
  if (embeddings.empty()) throw ValidationError(media_id + ": index entry has no embeddings");
  if (kind == MediaKind::image && embeddings.size() != 1) {
    throw ValidationError(media_id + ": an image entry holds exactly one embedding");
  }
  for (const auto& e : embeddings) {
    if (static_cast<std::size_t>(e.size()) != d_joint) {
      throw ShapeError(media_id + ": embedding has dimension " + std::to_string(e.size()) + ", index has " +
                       std::to_string(d_joint));
    }
    if (!e.allFinite()) throw ValidationError(media_id + ": non-finite embedding");
  }
}

EmbeddingIndex::EmbeddingIndex(std::string encoder_id, std::size_t d_joint)
    : encoder_id_(std::move(encoder_id)), d_joint_(d_joint) {
  if (d_joint == 0) throw ShapeError("index dimension must be positive");
}

EmbeddingIndex::EmbeddingIndex(const EmbeddingIndex& other) {
  std::shared_lock lock(other.mutex_);
  encoder_id_ = other.encoder_id_;
  d_joint_ = other.d_joint_;
  entries_ = other.entries_;
  by_id_ = other.by_id_;
}

EmbeddingIndex& EmbeddingIndex::operator=(const EmbeddingIndex& other) {
  if (this == &other) return *this;
  EmbeddingIndex copy(other);
  std::unique_lock lock(mutex_);
  encoder_id_ = std::move(copy.encoder_id_);
  d_joint_ = copy.d_joint_;
  entries_ = std::move(copy.entries_);
  by_id_ = std::move(copy.by_id_);
  return *this;
}

std::size_t EmbeddingIndex::size() const {
  std::shared_lock lock(mutex_);
  return entries_.size();
}

void EmbeddingIndex::add(IndexEntry entry) {
  std::vector<IndexEntry> one;
  one.push_back(std::move(entry));
  add_all(std::move(one));
}

void EmbeddingIndex::add_all(std::vector<IndexEntry> entries) {
  std::set<std::string> incoming;
  for (const auto& e : entries) {
    e.validate(d_joint_);
    if (!incoming.insert(e.media_id).second) throw ValidationError("duplicate media_id `" + e.media_id + "`");
  }
  std::unique_lock lock(mutex_);
  for (const auto& e : entries) {
    if (by_id_.count(e.media_id)) throw ValidationError("duplicate media_id `" + e.media_id + "`");
  }
  for (auto& e : entries) {
    by_id_[e.media_id] = entries_.size();
    entries_.push_back(std::move(e));
  }
}

std::vector<IndexEntry> EmbeddingIndex::entries() const {
  std::shared_lock lock(mutex_);
  return entries_;
}

bool EmbeddingIndex::contains(const std::string& media_id) const {
  std::shared_lock lock(mutex_);
  return by_id_.count(media_id) != 0;
}

std::vector<RankedHit> EmbeddingIndex::rank(const Vector& query, std::size_t k) const {
  if (k == 0) throw UsageError("rank: k must be >= 1");
  std::shared_lock lock(mutex_);
  if (entries_.empty()) throw UsageError("rank: the index is empty");
  if (static_cast<std::size_t>(query.size()) != d_joint_) throw ShapeError("rank: query dimension mismatch");
  std::vector<RankedHit> hits;
  hits.reserve(entries_.size());
  for (const auto& e : entries_) hits.push_back({e.media_id, score(query, e)});
  const std::size_t n = std::min(k, hits.size());
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(n), hits.end(), hit_before);
  hits.resize(n);
  return hits;
}

std::vector<IndexEntry> embed_gallery(const std::vector<MediaDescriptor>& media, const EncoderPair& encoders) {
  std::vector<IndexEntry> out;
  out.reserve(media.size());
  for (const auto& m : media) {
    IndexEntry e;
    e.media_id = m.media_id;
    e.kind = m.kind;
    e.metadata = m.metadata;
    if (m.kind == MediaKind::image) {
      e.embeddings.push_back(encoders.encode_image(m).values);
    } else {
      for (auto& f : encoders.encode_frames(m)) e.embeddings.push_back(std::move(f.values));
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::string serialize_index(const EmbeddingIndex& index) {
  const auto entries = index.entries();
  detail::BinaryWriter w;
  w.raw(kIndexMagic);
  w.u32(kIndexVersion);
  w.str(index.encoder_id());
  w.u64(index.d_joint());
  w.u64(entries.size());
  for (const auto& e : entries) {
    w.str(e.media_id);
    w.u8(e.kind == MediaKind::image ? 0 : 1);
    w.u32(static_cast<std::uint32_t>(e.embeddings.size()));
    for (const auto& v : e.embeddings) w.f64s(v.data(), v.data() + v.size());
    w.u32(static_cast<std::uint32_t>(e.metadata.size()));
    for (const auto& [k, v] : e.metadata) {
      w.str(k);
      w.str(v);
    }
  }
  return w.bytes();
}

EmbeddingIndex deserialize_index(std::string_view bytes) {
  detail::BinaryReader r(bytes, "index file");
  if (bytes.size() < kIndexMagic.size() || r.raw(kIndexMagic.size()) != kIndexMagic) {
    throw CorruptFileError("index file: bad magic");
  }
  const auto version = r.u32();
  if (version != kIndexVersion) throw VersionError("index file: unsupported version " + std::to_string(version));
  const std::string encoder_id = r.str();
  const auto d = r.u64();
  const auto count = r.u64();
  if (d == 0) throw CorruptFileError("index file: zero dimension");
  EmbeddingIndex index(encoder_id, d);
  std::vector<IndexEntry> entries;
  for (std::uint64_t i = 0; i < count; ++i) {
    IndexEntry e;
    e.media_id = r.str();
    const auto kind = r.u8();
    if (kind > 1) throw CorruptFileError("index file: bad media kind");
    e.kind = kind == 0 ? MediaKind::image : MediaKind::video;
    const auto frames = r.u32();
    if (frames > r.remaining() / (8 * d)) throw CorruptFileError("index file: truncated file");
    for (std::uint32_t f = 0; f < frames; ++f) {
      Vector v(static_cast<Eigen::Index>(d));
      for (Eigen::Index k = 0; k < v.size(); ++k) v[k] = r.f64();
      e.embeddings.push_back(std::move(v));
    }
    const auto n_meta = r.u32();
    for (std::uint32_t m = 0; m < n_meta; ++m) {
      auto key = r.str();
      e.metadata[key] = r.str();
    }
    entries.push_back(std::move(e));
  }
  if (!r.at_end()) throw CorruptFileError("index file: trailing bytes");
  index.add_all(std::move(entries));
  return index;
}

void save_index(const EmbeddingIndex& index, const std::filesystem::path& path) {
  detail::write_file_atomic(path.string(), serialize_index(index));
}

EmbeddingIndex load_index(const std::filesystem::path& path) {
  return deserialize_index(detail::read_file(path.string()));
}

// ---------------------------------------------------------------------------

Embedding compose_query(const std::string& text, const std::map<std::string, Vector>& bindings,
                        const EncoderPair& encoders) {
  const PromptTemplate tmpl(text);
  if (tmpl.placeholders().empty()) return encoders.encode_text(text);
  return encoders.encode_text(tmpl.bind(encoders.vocabulary(), bindings));
}

Embedding compose_query(const std::string& text, const std::map<std::string, PersonaToken>& tokens,
                        const EncoderPair& encoders) {
  const PromptTemplate tmpl(text);
  std::map<std::string, Vector> bindings;
  for (const auto& name : tmpl.placeholders()) {
    auto it = tokens.find(name);
    if (it == tokens.end()) throw UsageError("unbound placeholder <" + name + ">");
    if (it->second.encoder_id != encoders.descriptor().encoder_id) {
      throw ConfigError("token <" + name + "> was trained against encoder " + it->second.encoder_id +
                        ", the active encoder is " + encoders.descriptor().encoder_id);
    }
    bindings[name] = it->second.token;
  }
  return compose_query(text, bindings, encoders);
}

double score(const Vector& query, const IndexEntry& entry) {
  if (entry.embeddings.empty()) throw ValidationError(entry.media_id + ": entry has no embeddings");
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& e : entry.embeddings) {
    if (e.size() != query.size()) throw ShapeError("score: dimension mismatch");
    best = std::max(best, query.dot(e));
  }
  return best;
}

std::vector<RankedHit> rank(const Vector& query, const EmbeddingIndex& index, std::size_t k) {
  return index.rank(query, k);
}

std::vector<RankedHit> rank_full_sort(const Vector& query, const std::vector<IndexEntry>& entries) {
  std::vector<RankedHit> hits;
  for (const auto& e : entries) hits.push_back({e.media_id, score(query, e)});
  std::sort(hits.begin(), hits.end(), hit_before);
  return hits;
}

// ---------------------------------------------------------------------------

MetricsReport compute_metrics(const std::vector<QueryOutcome>& outcomes, const std::vector<std::size_t>& ks) {
  MetricsReport r;
  for (auto k : ks) r.recall_at[k] = 0.0;
  std::size_t in_top5 = 0;
  std::size_t ceiling = 0;
  for (const auto& q : outcomes) {
    const std::set<std::string> pos(q.positives.begin(), q.positives.end());
    if (pos.empty()) {
      r.warnings.push_back(q.query_id + ": no positives, excluded");
      ++r.n_excluded;
      continue;
    }
    ++r.n_queries;
    r.total_positives += pos.size();
    ceiling += std::min<std::size_t>(5, pos.size());
    double ap = 0.0;
    std::size_t found = 0;
    std::size_t first = 0;
    for (std::size_t i = 0; i < q.ranking.size(); ++i) {
      if (!pos.count(q.ranking[i])) continue;
      ++found;
      if (first == 0) first = i + 1;
      ap += static_cast<double>(found) / static_cast<double>(i + 1);
      if (i < 5) ++in_top5;
    }
    r.map += ap / static_cast<double>(pos.size());
    if (first > 0) {
      r.mrr += 1.0 / static_cast<double>(first);
      for (auto k : ks) {
        if (first <= k) r.recall_at[k] += 1.0;
      }
    }
  }
  if (r.n_queries > 0) {
    const double n = static_cast<double>(r.n_queries);
    r.map /= n;
    r.mrr /= n;
    for (auto& [k, v] : r.recall_at) v /= n;
    r.tr_at5 = static_cast<double>(in_top5) / static_cast<double>(r.total_positives);
    r.p_at5 = static_cast<double>(in_top5) / (5.0 * n);
    r.tr_at5_ceiling = static_cast<double>(ceiling) / static_cast<double>(r.total_positives);
  }
  return r;
}

std::string format_report(const std::string& title, const MetricsReport& r, bool percent) {
  const double s = percent ? 100.0 : 1.0;
  const char* unit = percent ? "%.1f" : "%.4f";
  std::ostringstream out;
  auto line = [&](const std::string& name, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, unit, v * s);
    out << "  " << name << ": " << buf << "\n";
  };
  out << title << " (" << r.n_queries << " queries";
  if (r.n_excluded) out << ", " << r.n_excluded << " excluded";
  out << ")\n";
  line("mAP", r.map);
  line("MRR", r.mrr);
  for (const auto& [k, v] : r.recall_at) line("R@" + std::to_string(k), v);
  line("tR@5", r.tr_at5);
  line("P@5", r.p_at5);
  line("tR@5 ceiling", r.tr_at5_ceiling);
  for (const auto& w : r.warnings) out << "  warning: " << w << "\n";
  return out.str();
}

std::string format_report_table(const std::string& label, const MetricsReport& r) {
  std::ostringstream head, row;
  char buf[64];
  head << "set\tqueries\tmAP\tMRR";
  row << label << '\t' << r.n_queries;
  auto cell = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    row << '\t' << buf;
  };
  cell(r.map);
  cell(r.mrr);
  for (const auto& [k, v] : r.recall_at) {
    head << "\tR@" << k;
    cell(v);
  }
  head << "\ttR@5\tP@5\ttR@5_ceiling";
  cell(r.tr_at5);
  cell(r.p_at5);
  cell(r.tr_at5_ceiling);
  return head.str() + "\n" + row.str() + "\n";
}

}  // namespace pimap

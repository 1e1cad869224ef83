#pragma once

#include "pimap/encoder.hpp"
#include "pimap/trainer.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <shared_mutex>
#include <string>
#include <vector>

namespace pimap {

struct IndexEntry {
  std::string media_id;
  MediaKind kind = MediaKind::image;
  std::vector<Vector> embeddings;  // one for an image, one per sampled frame for a video
  std::map<std::string, std::string> metadata;

  void validate(std::size_t d_joint) const;
};

struct RankedHit {
  std::string media_id;
  double score = 0.0;
};

// Exact in-memory index. Reads take a shared lock; ingestion is exclusive.
class EmbeddingIndex {
 public:
  EmbeddingIndex() = default;
  EmbeddingIndex(std::string encoder_id, std::size_t d_joint);
  EmbeddingIndex(const EmbeddingIndex& other);
  EmbeddingIndex& operator=(const EmbeddingIndex& other);

  const std::string& encoder_id() const { return encoder_id_; }
  std::size_t d_joint() const { return d_joint_; }
  std::size_t size() const;
  bool empty() const { return size() == 0; }

  // Throws ValidationError on a duplicate media_id, ShapeError on wrong dims.
  void add(IndexEntry entry);
  void add_all(std::vector<IndexEntry> entries);
  std::vector<IndexEntry> entries() const;
  bool contains(const std::string& media_id) const;
  std::vector<RankedHit> rank(const Vector& query, std::size_t k) const;

 private:
  std::string encoder_id_;
  std::size_t d_joint_ = 0;
  std::vector<IndexEntry> entries_;
  std::map<std::string, std::size_t> by_id_;
  mutable std::shared_mutex mutex_;
};

// Embeds every gallery item: images as one vector, videos as their frames
// (already sampled by whoever built the descriptors).
std::vector<IndexEntry> embed_gallery(const std::vector<MediaDescriptor>& media, const EncoderPair& encoders);

// PIIDX1 index file.
std::string serialize_index(const EmbeddingIndex& index);
EmbeddingIndex deserialize_index(std::string_view bytes);
void save_index(const EmbeddingIndex& index, const std::filesystem::path& path);
EmbeddingIndex load_index(const std::filesystem::path& path);

// ---------------------------------------------------------------------------

// Encodes `text` with every `<name>` placeholder replaced by the bound token's
// embedding. Throws UsageError on an unbound placeholder and ConfigError when
// a token was trained against another encoder.
Embedding compose_query(const std::string& text, const std::map<std::string, PersonaToken>& tokens,
                        const EncoderPair& encoders);
// Same with raw token-space vectors (the image-as-query path binds pi(f_v(x))).
Embedding compose_query(const std::string& text, const std::map<std::string, Vector>& bindings,
                        const EncoderPair& encoders);

// Dot product for an image; maximum over frames for a video.
double score(const Vector& query, const IndexEntry& entry);

// Top-k by descending score; equal scores are ordered by media_id. k larger
// than the index returns everything. Throws UsageError on k == 0 or an empty
// index.
std::vector<RankedHit> rank(const Vector& query, const EmbeddingIndex& index, std::size_t k);
// Reference implementation: score everything and sort it all.
std::vector<RankedHit> rank_full_sort(const Vector& query, const std::vector<IndexEntry>& entries);

// ---------------------------------------------------------------------------
// Metrics

struct QueryOutcome {
  std::string query_id;
  std::vector<std::string> ranking;  // full ranking, best first
  std::vector<std::string> positives;
};

struct MetricsReport {
  std::size_t n_queries = 0;   // queries scored
  std::size_t n_excluded = 0;  // queries dropped for having no positives
  double map = 0.0;
  double mrr = 0.0;
  std::map<std::size_t, double> recall_at;  // R@k
  double tr_at5 = 0.0;
  double p_at5 = 0.0;
  std::size_t total_positives = 0;
  // Best tR@5 any ranking could reach: sum_q min(5, |P_q|) / sum_q |P_q|.
  double tr_at5_ceiling = 0.0;
  std::vector<std::string> warnings;
};

MetricsReport compute_metrics(const std::vector<QueryOutcome>& outcomes,
                              const std::vector<std::size_t>& ks = {1, 5, 10});

// Human-readable block; percentages when `percent` is set.
std::string format_report(const std::string& title, const MetricsReport& r, bool percent = true);
// One tab-separated header line plus one row; fractions, full precision.
std::string format_report_table(const std::string& label, const MetricsReport& r);

}  // namespace pimap

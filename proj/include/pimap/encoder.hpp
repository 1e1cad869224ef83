#pragma once

#include "pimap/linalg.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

namespace pimap {

enum class Space { joint, token };

const char* to_string(Space s);
Space parse_space(std::string_view s);

struct EncoderPairDescriptor {
  std::string encoder_id;
  std::size_t d_joint = 0;
  std::size_t d_tok = 0;
  bool normalizes_output = true;

  void validate() const;
};

// A vector tagged with the space it lives in.
struct Embedding {
  Vector values;
  Space space = Space::joint;

  std::size_t size() const { return static_cast<std::size_t>(values.size()); }
};

// ---------------------------------------------------------------------------
// Media

enum class MediaKind { image, video };

const char* to_string(MediaKind k);
MediaKind parse_media_kind(std::string_view s);

struct BoundingBox {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  bool valid() const { return x0 < x1 && y0 < y1; }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

// Abstract description of a synthetic image or video. The toy encoder renders
// it straight into the joint space; there are no pixels.
struct SyntheticMediaDescriptor {
  std::string media_id;
  std::string instance_id;
  std::string background_id;
  double background_weight = 0.0;
  bool is_video = false;
  std::size_t n_frames = 1;
  // Which frame of the source this descriptor stands for when it has been cut
  // out of a video (templates sampled from a clip).
  std::size_t frame_index = 0;
  bool localized = false;

  void validate() const;
};

// Anything an encoder can embed: real media on disk (one path per frame) or a
// synthetic descriptor.
struct MediaDescriptor {
  std::string media_id;
  MediaKind kind = MediaKind::image;
  std::vector<std::string> frame_paths;
  double fps = 0.0;  // source frame rate of frame_paths when kind == video
  std::optional<std::pair<double, double>> time_range;  // seconds, video segments
  std::optional<SyntheticMediaDescriptor> synthetic;
  std::optional<BoundingBox> box;
  std::map<std::string, std::string> metadata;

  std::size_t frame_count() const;
};

// ---------------------------------------------------------------------------
// Text side

using TokenId = std::uint32_t;

// Whole-word vocabulary with a token-embedding table (one column per word).
class Vocabulary {
 public:
  Vocabulary() = default;
  Vocabulary(std::vector<std::string> words, Matrix embeddings);

  std::size_t size() const { return words_.size(); }
  std::size_t d_tok() const { return static_cast<std::size_t>(embeddings_.rows()); }
  bool has_embeddings() const { return embeddings_.cols() > 0; }

  std::optional<TokenId> find(std::string_view word) const;
  TokenId id_of(std::string_view word) const;  // throws VocabularyError
  const std::string& word(TokenId id) const;   // throws VocabularyError
  Eigen::Ref<const Vector> embedding(TokenId id) const;

  // Lower-cases and splits on anything that is not a letter, digit, '_' or '-'.
  static std::vector<std::string> split_words(std::string_view text);
  std::vector<TokenId> tokenize(std::string_view text) const;

  const std::vector<std::string>& words() const { return words_; }
  const Matrix& embeddings() const { return embeddings_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
  Matrix embeddings_;  // d_tok x size
};

// Discrete ids interleaved with continuous token embeddings that bypass the
// vocabulary lookup.
class TokenSequence {
 public:
  using Element = std::variant<TokenId, Vector>;

  TokenSequence() = default;

  void push_token(TokenId id) { elements_.emplace_back(id); }
  void push_embedding(Vector v) { elements_.emplace_back(std::move(v)); }

  const std::vector<Element>& elements() const { return elements_; }
  std::size_t size() const { return elements_.size(); }
  bool empty() const { return elements_.empty(); }

  std::vector<std::size_t> injection_positions() const;
  std::size_t injection_count() const;

  // Throws ShapeError when a continuous element is not d_tok long or holds
  // non-finite values, VocabularyError when an id is out of range.
  void validate(std::size_t d_tok, std::size_t vocab_size) const;

 private:
  std::vector<Element> elements_;
};

// Prompt text with `<name>` placeholders, e.g. "a photo of <tok> in the park".
class PromptTemplate {
 public:
  struct Part {
    bool is_placeholder = false;
    std::string text;  // literal text or placeholder name
  };

  explicit PromptTemplate(std::string_view text);

  const std::vector<Part>& parts() const { return parts_; }
  std::vector<std::string> placeholders() const;
  const std::string& text() const { return text_; }

  // Every placeholder must be bound; throws UsageError naming the first
  // unbound one.
  TokenSequence bind(const Vocabulary& vocab,
                     const std::map<std::string, Vector>& bindings) const;

  // Replaces each placeholder with literal text.
  std::string substitute(const std::map<std::string, std::string>& words) const;

 private:
  std::string text_;
  std::vector<Part> parts_;
};

// ---------------------------------------------------------------------------
// Encoder pair

// The frozen image/text encoder pair. Implementations are immutable after
// construction; every method is const and safe to call concurrently.
class EncoderPair {
 public:
  virtual ~EncoderPair() = default;

  virtual const EncoderPairDescriptor& descriptor() const = 0;
  virtual const Vocabulary& vocabulary() const = 0;

  // Image embedding. A video is embedded as the mean of its frame embeddings
  // (re-normalized when the encoder normalizes its outputs).
  virtual Embedding encode_image(const MediaDescriptor& media) const;
  // One embedding per frame (a single one for an image).
  virtual std::vector<Embedding> encode_frames(const MediaDescriptor& media) const = 0;

  virtual Embedding encode_text(const TokenSequence& seq) const = 0;

  // d(upstream . f_t(seq)) / d(each injected embedding), in injection order.
  // Throws UsageError when seq has no injections.
  virtual std::vector<Vector> encode_text_grad(const TokenSequence& seq,
                                               const Vector& upstream) const = 0;

  Embedding encode_text(std::string_view text) const;
  TokenSequence tokenize(std::string_view text) const;
};

}  // namespace pimap

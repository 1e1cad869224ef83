#pragma once

#include "pimap/encoder.hpp"
#include "pimap/kv_config.hpp"
#include "pimap/manifest.hpp"

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace pimap {

// Parameters of a seeded synthetic joint-embedding world.
//
// Geometry: categories are random unit vectors c_g; an instance is
// c_i = normalize(c_g + instance_offset_scale * (delta_i + visual_detail_ratio * e_i)),
// where delta_i is the scaled sum of the instance's attribute directions and
// e_i a random unit direction with no word for it. Images mix the instance
// with a background from a shared pool; text is a linear map of the mean token
// embedding. Image and text outputs carry opposite offsets on the two
// modality-gap dimensions.
struct WorldConfig {
  std::uint64_t seed = 1234;
  std::size_t d_joint = 64;
  std::size_t d_tok = 96;
  std::size_t n_categories = 4;
  std::size_t n_instances_per_category = 3;
  double instance_offset_scale = 0.6;
  std::size_t background_pool_size = 32;
  std::pair<std::size_t, std::size_t> modality_gap_dims{0, 1};
  double modality_gap_magnitude = 0.3;
  double noise_scale = 0.04;

  std::size_t n_attributes = 24;
  std::size_t attributes_per_instance = 4;
  std::size_t n_pretrain_instances = 256;
  // Relative weight of a per-instance direction that no word expresses: the
  // part of an instance's look a caption cannot carry.
  double visual_detail_ratio = 0.6;
  double filler_scale = 0.05;
  double localization_factor = 0.2;
  bool normalize_outputs = true;
  // Drop the internal normalization and modality offset of the text encoder so
  // f_t(seq) = M * mean(token embeddings) exactly.
  bool linear_text = false;

  void validate() const;

  KeyValueConfig to_kv() const;
  static WorldConfig from_kv(const KeyValueConfig& kv);
  std::string canonical() const { return to_kv().to_string(); }
};

struct WorldCategory {
  std::string word;
  Vector concept_vec;
};

struct WorldAttribute {
  std::string word;
  Vector direction;  // unit
};

struct WorldInstance {
  std::string instance_id;
  std::size_t category = 0;
  std::vector<std::size_t> attributes;
  Vector concept_vec;  // unit
};

struct WorldBackground {
  std::string background_id;  // also its word
  Vector direction;           // unit
};

class World {
 public:
  static std::shared_ptr<const World> generate(const WorldConfig& cfg);

  const WorldConfig& config() const { return cfg_; }
  const std::string& encoder_id() const { return encoder_id_; }

  const std::vector<WorldCategory>& categories() const { return categories_; }
  const std::vector<WorldAttribute>& attributes() const { return attributes_; }
  const std::vector<WorldInstance>& instances() const { return instances_; }
  const std::vector<WorldInstance>& pretrain_instances() const { return pretrain_instances_; }
  const std::vector<WorldBackground>& backgrounds() const { return backgrounds_; }

  // Looks up benchmark and pretraining instances alike.
  const WorldInstance& instance(std::string_view id) const;
  const WorldBackground& background(std::string_view id) const;
  const std::string& category_word(const WorldInstance& inst) const;

  const Vocabulary& vocabulary() const { return vocab_; }
  // Joint-space meaning of every vocabulary word (column per word).
  const Matrix& word_meanings() const { return meanings_; }
  // d_joint x d_tok text projection.
  const Matrix& text_matrix() const { return text_matrix_; }
  const Vector& image_offset() const { return image_offset_; }
  const Vector& text_offset() const { return text_offset_; }

  // "a photo of a dog"
  std::string generic_caption(const WorldInstance& inst) const;
  // What an owner would write: category plus the first attribute.
  std::string user_caption(const WorldInstance& inst) const;
  // Seed caption extended with the instance's attribute words it does not
  // mention yet; stands in for the LLM-written detailed description.
  std::string augment_caption(const WorldInstance& inst, const std::string& seed_caption) const;
  std::string full_caption(const WorldInstance& inst) const;

  // Generic image/caption pairs drawn from the pretraining instances.
  std::vector<std::pair<MediaDescriptor, std::string>> pretraining_set(
      std::size_t n_items, double max_background_weight, std::uint64_t seed) const;

 private:
  World() = default;

  WorldConfig cfg_;
  std::string encoder_id_;
  std::vector<WorldCategory> categories_;
  std::vector<WorldAttribute> attributes_;
  std::vector<WorldInstance> instances_;
  std::vector<WorldInstance> pretrain_instances_;
  std::vector<WorldBackground> backgrounds_;
  std::unordered_map<std::string, std::size_t> instance_index_;  // >= instances_.size() -> pretrain
  std::unordered_map<std::string, std::size_t> background_index_;
  Vocabulary vocab_;
  Matrix meanings_;
  Matrix text_matrix_;
  Vector image_offset_;
  Vector text_offset_;
};

// The toy frozen encoder pair over a World.
class ToyEncoderPair final : public EncoderPair {
 public:
  explicit ToyEncoderPair(std::shared_ptr<const World> world);

  const EncoderPairDescriptor& descriptor() const override { return desc_; }
  const Vocabulary& vocabulary() const override { return world_->vocabulary(); }

  std::vector<Embedding> encode_frames(const MediaDescriptor& media) const override;
  using EncoderPair::encode_text;
  Embedding encode_text(const TokenSequence& seq) const override;
  std::vector<Vector> encode_text_grad(const TokenSequence& seq,
                                       const Vector& upstream) const override;

  const World& world() const { return *world_; }

 private:
  Vector encode_synthetic_frame(const SyntheticMediaDescriptor& m, std::size_t frame) const;

  std::shared_ptr<const World> world_;
  EncoderPairDescriptor desc_;
};

// Copy with localized=true and the background weight scaled by `factor`.
SyntheticMediaDescriptor localize_descriptor(const SyntheticMediaDescriptor& m,
                                             double factor = 0.2);

// Layout of a synthetic personalization benchmark.
struct BenchmarkSpec {
  std::size_t n_instances = 12;
  std::size_t n_gallery = 200;
  std::size_t templates_per_instance = 10;
  double template_background_weight = 0.5;
  // Templates cycle through this many backgrounds (photos taken at home);
  // 0 gives every template its own.
  std::size_t template_backgrounds = 0;
  double gallery_background_weight = 0.5;
  bool context_queries = true;
  bool generic_queries = true;
  bool gallery_videos = false;
  std::size_t gallery_video_frames = 6;
  bool template_videos = false;
  std::size_t template_video_frames = 30;
  std::uint64_t seed = 1234;

  KeyValueConfig to_kv() const;
  static BenchmarkSpec from_kv(const KeyValueConfig& kv);
};

struct BenchmarkManifests {
  Manifest train;    // instances with templates and user captions
  Manifest gallery;  // media to index
  Manifest queries;  // context and generic query sets
};

// Throws CapacityError when the spec asks for more instances than the world
// has, or more gallery items per instance than there are backgrounds.
BenchmarkManifests emit_benchmark(const World& world, const BenchmarkSpec& spec);

}  // namespace pimap

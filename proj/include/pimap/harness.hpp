#pragma once

#include "pimap/caption_augment.hpp"
#include "pimap/encoder.hpp"
#include "pimap/kv_config.hpp"
#include "pimap/localize.hpp"
#include "pimap/manifest.hpp"
#include "pimap/pi_map.hpp"
#include "pimap/retrieval.hpp"
#include "pimap/synthetic_world.hpp"
#include "pimap/trainer.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace pimap {

enum class Profile { this_is_my, deepfashion2, synthetic };

const char* to_string(Profile p);
Profile parse_profile(std::string_view s);

// Everything that shapes one evaluation run besides the data.
struct ProtocolConfig {
  Profile profile = Profile::synthetic;
  std::size_t n_templates = 5;
  // Ablation switches. Off means: alpha = 0, y_s = the user (or generic)
  // caption, pi sees raw template embeddings.
  bool image_loss = true;
  bool caption_augmentation = true;
  bool localization = true;
  // Draw templates from the eval-split instance records as well as the train
  // split.
  bool train_on_eval = false;
  // Gallery videos are sampled to this rate before indexing.
  double gallery_fps = 1.0;
  // A video template contributes this many evenly spaced frames to the pool.
  std::size_t video_template_frames = 10;
  bool run_baselines = true;
  std::uint64_t seed = 1234;
  TrainConfig train = TrainConfig::personalize_defaults();
  std::vector<std::size_t> ks{1, 5, 10};

  static ProtocolConfig for_profile(Profile p);

  // The personalization config with the ablation switches and seed applied.
  TrainConfig effective_train() const;

  void validate() const;
  KeyValueConfig to_kv() const;  // train settings under `train.`
  static ProtocolConfig from_kv(const KeyValueConfig& kv);
  std::string hash() const;
};

struct ProtocolInputs {
  const EncoderPair* encoders = nullptr;
  const Manifest* train = nullptr;    // instance records
  const Manifest* gallery = nullptr;  // media to index
  const Manifest* queries = nullptr;
  const Manifest* eval_instances = nullptr;  // used with train_on_eval
  const Localizer* localizer = nullptr;      // required with localization
  LlmClient* llm = nullptr;                  // required with caption augmentation
  CaptionCache* captions = nullptr;          // an in-memory cache when null
  const PiMapParams* pretrained = nullptr;   // required when anything is trained
  // Tokens trained earlier, keyed by instance id. Missing ones are trained
  // inline when train_missing is set.
  std::map<std::string, PersonaToken> tokens;
  bool train_missing = true;
  ProgressFn progress;
};

struct InstanceTraining {
  std::string instance_id;
  std::string specific_caption;
  CaptionSource caption_source = CaptionSource::user;
  std::vector<std::string> template_ids;
  bool trained = false;  // false when the token was supplied
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

struct ArmReport {
  std::string arm;  // personalized | generic_text | image_only
  MetricsReport context;
  MetricsReport generic;
  MetricsReport all;
  std::vector<QueryOutcome> outcomes;
};

struct Reproducibility {
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string encoder_id;
};

struct ProtocolReport {
  Reproducibility repro;
  std::string index_digest;  // hash of the serialized index
  std::vector<InstanceTraining> training;
  std::map<std::string, PersonaToken> tokens;
  std::vector<ArmReport> arms;

  const ArmReport& arm(const std::string& name) const;  // throws NotFoundError
};

struct InstanceTokens {
  std::vector<InstanceTraining> training;
  std::map<std::string, PersonaToken> tokens;
  std::map<std::string, Vector> image_queries;  // mean raw template embedding
  std::map<std::string, std::string> categories;
};

// The per-instance half of the protocol: template choice, localization,
// captions, then one token per instance (supplied or trained). Needs only the
// encoders and the train manifest.
InstanceTokens personalize_instances(const ProtocolInputs& in, const ProtocolConfig& cfg);

// Deterministic text and JSON renderings (no timings).
std::string format_protocol_report(const ProtocolReport& r);
std::string protocol_report_json(const ProtocolReport& r);

// Builds the index, trains or loads one token per instance, composes every
// query and scores the personalized arm plus the generic-text and image-only
// baselines over the same index.
// Throws NotFoundError for a missing token and ConfigError on an encoder
// mismatch.
ProtocolReport run_protocol(const ProtocolInputs& in, const ProtocolConfig& cfg);

// Gallery video subsampled to `fps` (every round(src_fps / fps)-th frame).
// Images and videos without a source rate pass through.
MediaDescriptor sample_video_frames(const MediaDescriptor& m, double fps);

// A template as single frames: images as-is, videos as n evenly spaced frames.
std::vector<MediaDescriptor> template_frames(const MediaDescriptor& m, std::size_t n);

// Seeded template choice: a fixed permutation of the frame pool per instance,
// so a smaller count always picks a prefix of a larger one.
std::vector<MediaDescriptor> choose_templates(const std::vector<MediaDescriptor>& pool, std::size_t n,
                                              std::uint64_t seed, const std::string& instance_id);

// Query text with every placeholder replaced by "a <category>".
std::string generic_query_text(const std::string& text, const std::map<std::string, std::string>& categories);

// ---------------------------------------------------------------------------
// Synthetic benchmark

struct SyntheticBenchmarkConfig {
  WorldConfig world;
  BenchmarkSpec bench;
  TrainConfig pretrain = TrainConfig::pretrain_defaults();
  std::size_t pretrain_items = 2048;
  double pretrain_max_background = 0.6;
  std::uint64_t pretrain_init_seed = 7;
  ProtocolConfig protocol = ProtocolConfig::for_profile(Profile::synthetic);

  // The reference desk benchmark: 12 instances over 4 categories, 200
  // gallery items.
  static SyntheticBenchmarkConfig reference(std::uint64_t seed = 1234);

  void validate() const;
  KeyValueConfig to_kv() const;  // world., bench., pretrain., protocol.
  static SyntheticBenchmarkConfig from_kv(const KeyValueConfig& kv);
  std::string hash() const;
};

struct SyntheticSetup {
  std::shared_ptr<const World> world;
  std::shared_ptr<const ToyEncoderPair> encoders;
  BenchmarkManifests manifests;
  PiMapParams pretrained;
  std::vector<double> pretrain_losses;
};

// World, manifests and the pretrained pi-map.
SyntheticSetup prepare_synthetic(const SyntheticBenchmarkConfig& cfg);

// Runs the protocol on a prepared setup with the given protocol settings.
ProtocolReport run_synthetic(const SyntheticSetup& setup, const ProtocolConfig& protocol);

ProtocolReport run_synthetic_benchmark(const SyntheticBenchmarkConfig& cfg);

}  // namespace pimap

#pragma once

#include "pimap/encoder.hpp"
#include "pimap/kv_config.hpp"
#include "pimap/objectives.hpp"
#include "pimap/pi_map.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace pimap {

enum class Phase { pretrain, personalize };
enum class Schedule { cosine, constant };

const char* to_string(Phase p);
const char* to_string(Schedule s);

struct TrainConfig {
  Phase phase = Phase::personalize;
  std::size_t batch_size = 16;
  double base_lr = 1e-4;
  std::size_t epochs = 50;
  std::size_t warmup_steps = 200;
  Schedule schedule = Schedule::cosine;
  std::uint64_t seed = 1234;

  // AdamW
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  double eps = 1e-8;

  LossConfig loss;

  // Prompt the pretraining phase wraps pi(f_v(x)) in.
  std::string pretrain_prompt = "a photo of a <tok>";
  // Re-initialize the conditioning vectors from the data before training.
  bool init_conditioning = true;
  // Personalization feeds pi the localized template embeddings; the
  // conditioning init uses them too unless told otherwise.
  bool use_localization = true;
  bool conditioning_from_localized = true;

  // Pretraining: batch 256, lr 3e-4, 10 epochs, no warmup, cosine.
  static TrainConfig pretrain_defaults();
  // Personalization: lr 1e-4, 200 warmup steps, cosine; 50 epochs for the
  // this-is-my profile, 80 for DeepFashion2.
  static TrainConfig personalize_defaults(const std::string& profile = "this_is_my");

  void validate() const;
  KeyValueConfig to_kv() const;
  // Starts from the defaults of the phase named by `phase` (personalize when
  // absent) and overrides with whatever keys are present.
  static TrainConfig from_kv(const KeyValueConfig& kv);
  std::string hash() const;
};

// Linear warmup from 0 to base_lr over warmup_steps, then cosine decay to 0 at
// total_steps (or constant base_lr for the constant schedule).
double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg);

// Decoupled-weight-decay Adam over the flattened pi-map parameters.
class AdamW {
 public:
  explicit AdamW(const TrainConfig& cfg) : cfg_(cfg) {}

  void step(PiMapParams& params, const PiMapParams& grads, double lr);
  std::size_t steps_taken() const { return t_; }

 private:
  TrainConfig cfg_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

// Tensors shaped like `like`, all zero.
PiMapParams zero_grads(const PiMapParams& like);

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double loss_text = 0.0;   // L_t, or the symmetric CE in pretraining
  double loss_image = 0.0;  // L_i; 0 in pretraining
};

// Training log: one JSON object per line with step, lr, loss, loss_text,
// loss_image. Appends.
void append_training_log(const std::filesystem::path& path, const std::vector<StepRecord>& records);
std::vector<StepRecord> read_training_log(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Pretraining

struct PretrainResult {
  PiMapParams params;
  std::vector<double> epoch_losses;  // mean loss per epoch
  std::vector<StepRecord> log;
};

// Symmetric cross-entropy between f_v(x) and f_t(prompt(pi(f_v(x)))) over
// seeded minibatches. The captions only feed the conditioning init. Zero
// epochs returns the input params untouched.
PretrainResult pretrain(const PiMapParams& init,
                        const std::vector<std::pair<MediaDescriptor, std::string>>& data,
                        const EncoderPair& encoders, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Personalization

struct TemplateEmbedding {
  std::string media_id;
  Vector raw;        // f_v(x)
  Vector localized;  // f_v(x^loc)
};

struct PersonalizeInput {
  std::string instance_id;
  std::string specific_caption;  // y_s
  std::string generic_caption;   // y_g
  std::vector<TemplateEmbedding> templates;
  // Items of other instances the minibatches draw their negatives from.
  std::vector<BatchItem> distractors;
};

struct PersonaToken {
  Vector token;  // y*, length d_tok
  std::string instance_id;
  std::string encoder_id;
  std::size_t n_templates_used = 0;
  std::string config_hash;
  std::int64_t created_at = 0;  // unix seconds; 0 unless the caller stamps it

  void validate() const;
  friend bool operator==(const PersonaToken&, const PersonaToken&);
};

struct PersonalizeResult {
  PersonaToken token;
  PiMapParams params;
  std::vector<StepRecord> log;
  // Total loss over every template against a fixed evaluation batch, before
  // and after training.
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

using ProgressFn = std::function<void(std::size_t step, std::size_t total)>;

PersonalizeResult personalize(const PersonalizeInput& input, const PiMapParams& pretrained,
                              const EncoderPair& encoders, const TrainConfig& cfg,
                              const ProgressFn& progress = {});

// y* = mean over templates, in media_id order, of pi of their (localized)
// embeddings.
Vector average_projection(const std::vector<TemplateEmbedding>& templates, const PiMapParams& params,
                          bool use_localization);

// index_k = floor(k (T - 1) / (n - 1)), k = 0..n-1; every frame when T <= n.
std::vector<std::size_t> prepare_video_templates(std::size_t n_frames, std::size_t n = 10);

// PITOK1 token file.
std::string serialize_token(const PersonaToken& t);
PersonaToken deserialize_token(std::string_view bytes);
void save_token(const PersonaToken& t, const std::filesystem::path& path);
PersonaToken load_token(const std::filesystem::path& path);

}  // namespace pimap

#pragma once

#include "pimap/encoder.hpp"
#include "pimap/kv_config.hpp"
#include "pimap/linalg.hpp"

#include <string>
#include <vector>

namespace pimap {

// `temperature`: d(a, b) = exp(cos(a, b) / tau).
// `literal`: the printed form exp((a.b / tau) / (|a||b| / tau)), in which tau
// cancels, i.e. exp(cos(a, b)).
enum class KernelForm { temperature, literal };

// Which space the image loss compares the personalized token in.
//   automatic: raw pi output when d_tok == d_joint, else the encoded prompt
//   encoded:   always f_t(prompt with the token)
//   raw:       always the raw pi output (requires d_tok == d_joint)
enum class ImageLossSpace { automatic, encoded, raw };

struct LossConfig {
  double alpha = 0.25;
  double tau = 0.07;
  bool include_positive_in_denominator = false;
  std::string y_star_prompt_template = "A photo of <tok>";
  KernelForm kernel = KernelForm::temperature;
  ImageLossSpace image_loss_space = ImageLossSpace::automatic;

  void validate() const;
  // Log-kernel scale: 1/tau for the temperature form, 1 for the literal form.
  double kernel_scale() const;
  bool compare_encoded(const EncoderPairDescriptor& enc) const;

  KeyValueConfig to_kv() const;
  static LossConfig from_kv(const KeyValueConfig& kv);
};

// Cosine similarity; throws DomainError on a zero-norm input and ShapeError on
// a dimension mismatch.
double cosine(const Vector& a, const Vector& b);
// d cos(a, b) / d a
Vector cosine_grad(const Vector& a, const Vector& b);

double similarity_d(const Vector& a, const Vector& b, double tau,
                    KernelForm form = KernelForm::temperature);

struct LossGrad {
  double value = 0.0;
  Vector grad;  // d value / d anchor
};

// -log( d(anchor, positive) / sum_{n in D} d(anchor, n) ), where D is the
// negatives plus, when cfg says so, the positive. Gradient wrt the anchor.
LossGrad contrastive_loss(const Vector& anchor, const Vector& positive,
                          const std::vector<Vector>& negatives, const LossConfig& cfg);

struct BatchItem {
  Vector image_raw;        // f_v(x)
  Vector image_localized;  // f_v(x^loc)
  std::string specific_caption;  // y_s
  std::string generic_caption;   // y_g
  Vector specific_emb;           // f_t(y_s)
  Vector generic_emb;            // f_t(y_g)
};

struct Batch {
  std::vector<BatchItem> items;

  // >= 2 items, consistent dimensions, caption embeddings present.
  void validate() const;
};

// Fills specific_emb / generic_emb with the text encoder.
void encode_captions(Batch& batch, const EncoderPair& encoders);

// Personalized token wrapped in the prompt template and encoded.
Embedding encode_token_prompt(const Vector& y_star, const LossConfig& cfg, const EncoderPair& encoders);

// Image regularization loss for batch item `anchor`: the projected embedding
// against the anchor's raw image embedding, with every other item's raw image
// embedding as a negative.
LossGrad image_loss(const Vector& projected, const Batch& batch, std::size_t anchor,
                    const LossConfig& cfg);

struct TextLoss {
  double value = 0.0;
  Vector grad_token;  // d L_t / d y*
  Vector encoded;     // u = f_t(prompt(y*))
  Vector grad_encoded;
};

// Text contrastive loss for batch item `anchor`: u against f_t(y_s), with the
// specific and generic captions of every other item plus the anchor's own
// generic caption as negatives. Gradients flow through the frozen text
// encoder into the token.
TextLoss text_loss(const Vector& y_star, const Batch& batch, std::size_t anchor,
                   const LossConfig& cfg, const EncoderPair& encoders);

inline double total_loss(double lt, double li, double alpha) {
  return (1.0 - alpha) * lt + alpha * li;
}

struct SymmetricCe {
  double value = 0.0;
  std::vector<Vector> grad_images;
  std::vector<Vector> grad_texts;
};

// Two-directional InfoNCE over the cosine similarity matrix scaled by 1/tau;
// matched pairs on the diagonal; the two directions are averaged.
SymmetricCe symmetric_ce_loss(const std::vector<Vector>& image_embs,
                              const std::vector<Vector>& text_embs, double tau);

}  // namespace pimap

#include "pimap/objectives.hpp"

#include "pimap/errors.hpp"

#include <cmath>
#include <cstdio>

namespace pimap {
namespace {

double log_sum_exp(const std::vector<double>& xs) {
  double m = -INFINITY;
  for (double x : xs) m = std::max(m, x);
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace

void LossConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("loss: alpha must lie in [0, 1]");
  if (!(tau > 0.0)) throw ConfigError("loss: tau must be > 0");
  if (PromptTemplate(y_star_prompt_template).placeholders().size() != 1) {
    throw ConfigError("loss: the token prompt template needs exactly one placeholder");
  }
}

double LossConfig::kernel_scale() const { return kernel == KernelForm::temperature ? 1.0 / tau : 1.0; }

bool LossConfig::compare_encoded(const EncoderPairDescriptor& enc) const {
  switch (image_loss_space) {
    case ImageLossSpace::encoded:
      return true;
    case ImageLossSpace::raw:
      if (enc.d_tok != enc.d_joint) {
        throw ConfigError("loss: raw image-loss comparison needs d_tok == d_joint");
      }
      return false;
    case ImageLossSpace::automatic:
      break;
  }
  return enc.d_tok != enc.d_joint;
}

KeyValueConfig LossConfig::to_kv() const {
  KeyValueConfig kv;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", alpha);
  kv.set("alpha", buf);
  std::snprintf(buf, sizeof buf, "%.17g", tau);
  kv.set("tau", buf);
  kv.set("include_positive_in_denominator", include_positive_in_denominator ? "true" : "false");
  kv.set("y_star_prompt_template", y_star_prompt_template);
  kv.set("kernel", kernel == KernelForm::temperature ? "temperature" : "literal");
  kv.set("image_loss_space", image_loss_space == ImageLossSpace::automatic ? "auto"
                             : image_loss_space == ImageLossSpace::encoded ? "encoded"
                                                                           : "raw");
  return kv;
}

LossConfig LossConfig::from_kv(const KeyValueConfig& kv) {
  LossConfig c;
  c.alpha = kv.get_double("alpha", c.alpha);
  c.tau = kv.get_double("tau", c.tau);
  c.include_positive_in_denominator =
      kv.get_bool("include_positive_in_denominator", c.include_positive_in_denominator);
  c.y_star_prompt_template = kv.get_string("y_star_prompt_template", c.y_star_prompt_template);
  const auto kernel = kv.get_string("kernel", "temperature");
  if (kernel == "temperature") {
    c.kernel = KernelForm::temperature;
  } else if (kernel == "literal") {
    c.kernel = KernelForm::literal;
  } else {
    throw ConfigError("loss: kernel must be `temperature` or `literal`");
  }
  const auto space = kv.get_string("image_loss_space", "auto");
  if (space == "auto") {
    c.image_loss_space = ImageLossSpace::automatic;
  } else if (space == "encoded") {
    c.image_loss_space = ImageLossSpace::encoded;
  } else if (space == "raw") {
    c.image_loss_space = ImageLossSpace::raw;
  } else {
    throw ConfigError("loss: image_loss_space must be auto, encoded or raw");
  }
  c.validate();
  return c;
}

double cosine(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw ShapeError("cosine: dimension mismatch");
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw DomainError("cosine: zero-norm input");
  return a.dot(b) / (na * nb);
}

Vector cosine_grad(const Vector& a, const Vector& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw DomainError("cosine: zero-norm input");
  const double c = a.dot(b) / (na * nb);
  return b / (na * nb) - c * a / (na * na);
}

double similarity_d(const Vector& a, const Vector& b, double tau, KernelForm form) {
  if (!(tau > 0.0)) throw DomainError("similarity_d: tau must be > 0");
  const double c = cosine(a, b);
  return form == KernelForm::temperature ? std::exp(c / tau) : std::exp(c);
}

LossGrad contrastive_loss(const Vector& anchor, const Vector& positive,
                          const std::vector<Vector>& negatives, const LossConfig& cfg) {
  if (negatives.empty()) throw UsageError("contrastive loss: no negatives");
  const double s = cfg.kernel_scale();
  std::vector<const Vector*> denom;
  denom.reserve(negatives.size() + 1);
  for (const auto& n : negatives) denom.push_back(&n);
  if (cfg.include_positive_in_denominator) denom.push_back(&positive);

  std::vector<double> logits;
  logits.reserve(denom.size());
  for (const auto* n : denom) logits.push_back(s * cosine(anchor, *n));
  const double lse = log_sum_exp(logits);

  LossGrad out;
  out.value = -s * cosine(anchor, positive) + lse;
  out.grad = -s * cosine_grad(anchor, positive);
  for (std::size_t k = 0; k < denom.size(); ++k) {
    const double w = std::exp(logits[k] - lse);
    out.grad += w * s * cosine_grad(anchor, *denom[k]);
  }
  return out;
}

void Batch::validate() const {
  if (items.size() < 2) throw UsageError("batch needs >= 2 items so negatives exist");
  const auto d = items.front().image_raw.size();
  for (const auto& it : items) {
    if (it.image_raw.size() != d || it.image_localized.size() != d) {
      throw ShapeError("batch: image embeddings differ in dimension");
    }
    if (it.specific_emb.size() == 0 || it.generic_emb.size() == 0) {
      throw UsageError("batch: caption embeddings missing (call encode_captions)");
    }
  }
}

void encode_captions(Batch& batch, const EncoderPair& encoders) {
  for (auto& it : batch.items) {
    it.specific_emb = encoders.encode_text(it.specific_caption).values;
    it.generic_emb = encoders.encode_text(it.generic_caption).values;
  }
}

Embedding encode_token_prompt(const Vector& y_star, const LossConfig& cfg, const EncoderPair& encoders) {
  const PromptTemplate tmpl(cfg.y_star_prompt_template);
  const auto seq = tmpl.bind(encoders.vocabulary(), {{tmpl.placeholders().front(), y_star}});
  return encoders.encode_text(seq);
}

LossGrad image_loss(const Vector& projected, const Batch& batch, std::size_t anchor,
                    const LossConfig& cfg) {
  if (batch.items.size() < 2) throw UsageError("image loss: batch of size 1 has no negatives");
  if (anchor >= batch.items.size()) throw UsageError("image loss: anchor out of range");
  std::vector<Vector> negatives;
  negatives.reserve(batch.items.size() - 1);
  for (std::size_t i = 0; i < batch.items.size(); ++i) {
    if (i != anchor) negatives.push_back(batch.items[i].image_raw);
  }
  return contrastive_loss(projected, batch.items[anchor].image_raw, negatives, cfg);
}

TextLoss text_loss(const Vector& y_star, const Batch& batch, std::size_t anchor,
                   const LossConfig& cfg, const EncoderPair& encoders) {
  batch.validate();
  if (anchor >= batch.items.size()) throw UsageError("text loss: anchor out of range");
  const PromptTemplate tmpl(cfg.y_star_prompt_template);
  const auto seq = tmpl.bind(encoders.vocabulary(), {{tmpl.placeholders().front(), y_star}});
  TextLoss out;
  out.encoded = encoders.encode_text(seq).values;

  std::vector<Vector> negatives;
  negatives.reserve(2 * batch.items.size() - 1);
  for (std::size_t i = 0; i < batch.items.size(); ++i) {
    if (i == anchor) continue;
    negatives.push_back(batch.items[i].specific_emb);
    negatives.push_back(batch.items[i].generic_emb);
  }
  negatives.push_back(batch.items[anchor].generic_emb);

  const auto lg = contrastive_loss(out.encoded, batch.items[anchor].specific_emb, negatives, cfg);
  out.value = lg.value;
  out.grad_encoded = lg.grad;
  out.grad_token = encoders.encode_text_grad(seq, lg.grad).front();
  return out;
}

SymmetricCe symmetric_ce_loss(const std::vector<Vector>& images, const std::vector<Vector>& texts,
                              double tau) {
  if (images.size() != texts.size()) throw ShapeError("symmetric CE: list lengths differ");
  if (images.size() < 2) throw UsageError("symmetric CE: need a batch of >= 2 pairs");
  if (!(tau > 0.0)) throw DomainError("symmetric CE: tau must be > 0");
  const std::size_t n = images.size();
  const double s = 1.0 / tau;
  Matrix logits(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      logits(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = s * cosine(images[i], texts[j]);
    }
  }
  // d loss / d logits
  Matrix g = Matrix::Zero(logits.rows(), logits.cols());
  double image_to_text = 0.0;
  double text_to_image = 0.0;
  const double half_over_n = 0.5 / static_cast<double>(n);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    std::vector<double> row;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) row.push_back(logits(i, j));
    const double lse = log_sum_exp(row);
    image_to_text += lse - logits(i, i);
    for (Eigen::Index j = 0; j < logits.cols(); ++j) g(i, j) += half_over_n * std::exp(logits(i, j) - lse);
    g(i, i) -= half_over_n;
  }
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    std::vector<double> col;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) col.push_back(logits(i, j));
    const double lse = log_sum_exp(col);
    text_to_image += lse - logits(j, j);
    for (Eigen::Index i = 0; i < logits.rows(); ++i) g(i, j) += half_over_n * std::exp(logits(i, j) - lse);
    g(j, j) -= half_over_n;
  }
  SymmetricCe out;
  out.value = 0.5 * (image_to_text + text_to_image) / static_cast<double>(n);
  out.grad_images.assign(n, Vector::Zero(images.front().size()));
  out.grad_texts.assign(n, Vector::Zero(texts.front().size()));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double gij = g(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * s;
      if (gij == 0.0) continue;
      out.grad_images[i] += gij * cosine_grad(images[i], texts[j]);
      out.grad_texts[j] += gij * cosine_grad(texts[j], images[i]);
    }
  }
  return out;
}

}  // namespace pimap

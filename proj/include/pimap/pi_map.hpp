#pragma once

#include "pimap/linalg.hpp"
#include "pimap/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace pimap {

enum class Activation { gelu, silu };

const char* to_string(Activation a);
Activation parse_activation(std::string_view s);

// Trainable parameters of the image-to-token mapping network: three MLP
// layers with residual skips, two conditioning vectors gating the outputs of
// the first two layers, and a final linear projection to the token space.
//
// Skips are identity when shapes match (hidden == d_joint for the first
// layer, always for the other two); otherwise the first skip is learned.
struct PiMapParams {
  std::size_t d_joint = 0;
  std::size_t d_tok = 0;
  std::size_t hidden = 0;
  Activation activation = Activation::gelu;

  Matrix w1;  // hidden x d_joint
  Vector b1;
  Matrix skip1;  // hidden x d_joint, empty when hidden == d_joint
  Matrix w2;     // hidden x hidden
  Vector b2;
  Matrix w3;  // hidden x hidden
  Vector b3;
  Vector cond1;  // hidden
  Vector cond2;  // hidden
  Matrix proj;   // d_tok x hidden

  bool learned_skip() const { return skip1.size() != 0; }

  // Zero tensors of the right shapes; conditioning vectors uniform (1/hidden).
  static PiMapParams zeros(std::size_t d_joint, std::size_t d_tok, std::size_t hidden = 0,
                           Activation act = Activation::gelu);
  // Seeded random init (scaled Gaussian weights, zero biases).
  static PiMapParams random(std::size_t d_joint, std::size_t d_tok, std::uint64_t seed,
                            std::size_t hidden = 0, Activation act = Activation::gelu);

  // Visits every tensor in a fixed order as (name, data, count). The order
  // defines the file layout and the optimizer's flat view.
  void for_each_tensor(const std::function<void(std::string_view, double*, std::size_t)>& fn);
  void for_each_tensor(
      const std::function<void(std::string_view, const double*, std::size_t)>& fn) const;

  std::size_t parameter_count() const;
  bool all_finite() const;
  void validate() const;  // throws ShapeError

  friend bool operator==(const PiMapParams& a, const PiMapParams& b);
};

// The conditioning vectors act as gains on the hidden units. They are stored
// as probability vectors (sum 1) and scaled by the hidden width when applied,
// so a uniform vector is the identity gain.
double conditioning_gain(const PiMapParams& p);

struct PiMapCache {
  Vector x, a1, h1, g1, a2, h2, g2, a3, h3;
};

Vector pi_forward(const Vector& x, const PiMapParams& params, PiMapCache* cache = nullptr);

// Accumulates d(out . upstream)/d(params) into `grads` (same shapes as
// params) and returns d/dx.
Vector pi_backward(const PiMapCache& cache, const Vector& upstream, const PiMapParams& params,
                   PiMapParams& grads);

// Conditioning initialization from the per-dimension gap between the mean
// template-image embedding and the mean caption embedding. Ties on the
// largest gaps go to the lowest dimension index.
struct ConditioningInit {
  Vector gap;  // |mean(images) - mean(captions)|
  std::size_t largest = 0;
  std::size_t second = 0;
  Vector cond1;
  Vector cond2;
};

ConditioningInit init_conditioning(const std::vector<Vector>& template_image_embs,
                                   const std::vector<Vector>& caption_embs);
ConditioningInit init_conditioning_from_gap(const Vector& gap);

Vector softmax(const Vector& v);

// PIMAP1 parameter file.
std::string serialize_params(const PiMapParams& p);
PiMapParams deserialize_params(std::string_view bytes);
void save_params(const PiMapParams& p, const std::filesystem::path& path);
PiMapParams load_params(const std::filesystem::path& path);
// Also checks the stored dims against the active encoder (ConfigError).
PiMapParams load_params(const std::filesystem::path& path, std::size_t d_joint, std::size_t d_tok);

}  // namespace pimap

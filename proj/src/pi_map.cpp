#include "pimap/pi_map.hpp"

#include "pimap/errors.hpp"

#include "binary_io.hpp"

#include <cmath>
#include <numbers>

namespace pimap {
namespace {

constexpr std::string_view kMagic = "PIMAP1";
constexpr std::uint32_t kFormatVersion = 1;

double act(Activation a, double x) {
  switch (a) {
    case Activation::gelu:
      return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
    case Activation::silu:
      return x / (1.0 + std::exp(-x));
  }
  return x;
}

double act_grad(Activation a, double x) {
  switch (a) {
    case Activation::gelu: {
      const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
      const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
      return cdf + x * pdf;
    }
    case Activation::silu: {
      const double s = 1.0 / (1.0 + std::exp(-x));
      return s * (1.0 + x * (1.0 - s));
    }
  }
  return 1.0;
}

Vector apply_act(Activation a, const Vector& v) {
  return v.unaryExpr([a](double x) { return act(a, x); });
}

Vector apply_act_grad(Activation a, const Vector& v) {
  return v.unaryExpr([a](double x) { return act_grad(a, x); });
}

void fill_gaussian(Matrix& m, Rng& rng, double stddev) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = stddev * gaussian(rng);
  }
}

}  // namespace

const char* to_string(Activation a) { return a == Activation::gelu ? "gelu" : "silu"; }

Activation parse_activation(std::string_view s) {
  if (s == "gelu") return Activation::gelu;
  if (s == "silu") return Activation::silu;
  throw ConfigError("unknown activation `" + std::string(s) + "`");
}

PiMapParams PiMapParams::zeros(std::size_t d_joint, std::size_t d_tok, std::size_t hidden,
                               Activation act) {
  if (d_joint == 0 || d_tok == 0) throw ShapeError("pi-map: dimensions must be positive");
  PiMapParams p;
  p.d_joint = d_joint;
  p.d_tok = d_tok;
  p.hidden = hidden == 0 ? d_joint : hidden;
  p.activation = act;
  const auto h = static_cast<Eigen::Index>(p.hidden);
  const auto dj = static_cast<Eigen::Index>(d_joint);
  const auto dt = static_cast<Eigen::Index>(d_tok);
  p.w1 = Matrix::Zero(h, dj);
  p.b1 = Vector::Zero(h);
  if (p.hidden != d_joint) p.skip1 = Matrix::Zero(h, dj);
  p.w2 = Matrix::Zero(h, h);
  p.b2 = Vector::Zero(h);
  p.w3 = Matrix::Zero(h, h);
  p.b3 = Vector::Zero(h);
  p.cond1 = Vector::Constant(h, 1.0 / static_cast<double>(p.hidden));
  p.cond2 = p.cond1;
  p.proj = Matrix::Zero(dt, h);
  return p;
}

PiMapParams PiMapParams::random(std::size_t d_joint, std::size_t d_tok, std::uint64_t seed,
                                std::size_t hidden, Activation act) {
  PiMapParams p = zeros(d_joint, d_tok, hidden, act);
  Rng rng = make_stream(seed, "pi-map/init");
  // Residual branches start small so the network begins close to its skips.
  const double branch = 0.1 / std::sqrt(static_cast<double>(p.hidden));
  fill_gaussian(p.w1, rng, branch);
  if (p.learned_skip()) fill_gaussian(p.skip1, rng, 1.0 / std::sqrt(static_cast<double>(d_joint)));
  fill_gaussian(p.w2, rng, branch);
  fill_gaussian(p.w3, rng, branch);
  fill_gaussian(p.proj, rng, 1.0 / std::sqrt(static_cast<double>(p.hidden)));
  return p;
}

void PiMapParams::for_each_tensor(
    const std::function<void(std::string_view, double*, std::size_t)>& fn) {
  auto visit = [&](std::string_view name, auto& t) {
    fn(name, t.data(), static_cast<std::size_t>(t.size()));
  };
  visit("w1", w1);
  visit("b1", b1);
  visit("skip1", skip1);
  visit("w2", w2);
  visit("b2", b2);
  visit("w3", w3);
  visit("b3", b3);
  visit("cond1", cond1);
  visit("cond2", cond2);
  visit("proj", proj);
}

void PiMapParams::for_each_tensor(
    const std::function<void(std::string_view, const double*, std::size_t)>& fn) const {
  const_cast<PiMapParams*>(this)->for_each_tensor(
      [&](std::string_view name, double* d, std::size_t n) { fn(name, d, n); });
}

std::size_t PiMapParams::parameter_count() const {
  std::size_t n = 0;
  for_each_tensor([&](std::string_view, const double*, std::size_t c) { n += c; });
  return n;
}

bool PiMapParams::all_finite() const {
  bool ok = true;
  for_each_tensor([&](std::string_view, const double* d, std::size_t c) {
    for (std::size_t i = 0; i < c && ok; ++i) ok = std::isfinite(d[i]);
  });
  return ok;
}

void PiMapParams::validate() const {
  const auto h = static_cast<Eigen::Index>(hidden);
  const auto dj = static_cast<Eigen::Index>(d_joint);
  const auto dt = static_cast<Eigen::Index>(d_tok);
  auto check = [](bool ok, const char* what) {
    if (!ok) throw ShapeError(std::string("pi-map params: inconsistent shape of ") + what);
  };
  check(hidden > 0 && d_joint > 0 && d_tok > 0, "dimensions");
  check(w1.rows() == h && w1.cols() == dj, "w1");
  check(b1.size() == h, "b1");
  check(hidden == d_joint ? skip1.size() == 0 : (skip1.rows() == h && skip1.cols() == dj), "skip1");
  check(w2.rows() == h && w2.cols() == h, "w2");
  check(b2.size() == h, "b2");
  check(w3.rows() == h && w3.cols() == h, "w3");
  check(b3.size() == h, "b3");
  check(cond1.size() == h && cond2.size() == h, "conditioning vectors");
  check(proj.rows() == dt && proj.cols() == h, "proj");
}

bool operator==(const PiMapParams& a, const PiMapParams& b) {
  return serialize_params(a) == serialize_params(b);
}

double conditioning_gain(const PiMapParams& p) { return static_cast<double>(p.hidden); }

Vector pi_forward(const Vector& x, const PiMapParams& p, PiMapCache* cache) {
  if (static_cast<std::size_t>(x.size()) != p.d_joint) {
    throw ShapeError("pi_forward: input has dimension " + std::to_string(x.size()) + ", expected " +
                     std::to_string(p.d_joint));
  }
  const double gain = conditioning_gain(p);
  PiMapCache local;
  PiMapCache& c = cache ? *cache : local;
  c.x = x;
  c.a1 = p.w1 * x + p.b1;
  c.h1 = apply_act(p.activation, c.a1) + (p.learned_skip() ? Vector(p.skip1 * x) : x);
  c.g1 = gain * c.h1.cwiseProduct(p.cond1);
  c.a2 = p.w2 * c.g1 + p.b2;
  c.h2 = apply_act(p.activation, c.a2) + c.g1;
  c.g2 = gain * c.h2.cwiseProduct(p.cond2);
  c.a3 = p.w3 * c.g2 + p.b3;
  c.h3 = apply_act(p.activation, c.a3) + c.g2;
  return p.proj * c.h3;
}

Vector pi_backward(const PiMapCache& c, const Vector& upstream, const PiMapParams& p,
                   PiMapParams& g) {
  const double gain = conditioning_gain(p);
  g.proj.noalias() += upstream * c.h3.transpose();
  const Vector d_h3 = p.proj.transpose() * upstream;

  const Vector d_a3 = d_h3.cwiseProduct(apply_act_grad(p.activation, c.a3));
  g.w3.noalias() += d_a3 * c.g2.transpose();
  g.b3 += d_a3;
  const Vector d_g2 = p.w3.transpose() * d_a3 + d_h3;

  g.cond2 += gain * d_g2.cwiseProduct(c.h2);
  const Vector d_h2 = gain * d_g2.cwiseProduct(p.cond2);
  const Vector d_a2 = d_h2.cwiseProduct(apply_act_grad(p.activation, c.a2));
  g.w2.noalias() += d_a2 * c.g1.transpose();
  g.b2 += d_a2;
  const Vector d_g1 = p.w2.transpose() * d_a2 + d_h2;

  g.cond1 += gain * d_g1.cwiseProduct(c.h1);
  const Vector d_h1 = gain * d_g1.cwiseProduct(p.cond1);
  const Vector d_a1 = d_h1.cwiseProduct(apply_act_grad(p.activation, c.a1));
  g.w1.noalias() += d_a1 * c.x.transpose();
  g.b1 += d_a1;
  Vector d_x = p.w1.transpose() * d_a1;
  if (p.learned_skip()) {
    g.skip1.noalias() += d_h1 * c.x.transpose();
    d_x += p.skip1.transpose() * d_h1;
  } else {
    d_x += d_h1;
  }
  return d_x;
}

// ---------------------------------------------------------------------------

Vector softmax(const Vector& v) {
  const double m = v.maxCoeff();
  Vector e = (v.array() - m).exp().matrix();
  return e / e.sum();
}

ConditioningInit init_conditioning_from_gap(const Vector& gap) {
  if (gap.size() < 2) throw ShapeError("init_conditioning: need at least two dimensions");
  ConditioningInit out;
  out.gap = gap;
  // Strict comparisons keep the lowest index on ties.
  std::size_t best = 0;
  for (Eigen::Index i = 1; i < gap.size(); ++i) {
    if (gap[i] > gap[static_cast<Eigen::Index>(best)]) best = static_cast<std::size_t>(i);
  }
  std::size_t second = best == 0 ? 1 : 0;
  for (Eigen::Index i = 0; i < gap.size(); ++i) {
    const auto u = static_cast<std::size_t>(i);
    if (u == best) continue;
    if (gap[i] > gap[static_cast<Eigen::Index>(second)]) second = u;
  }
  out.largest = best;
  out.second = second;
  Vector z1 = gap;
  z1[static_cast<Eigen::Index>(best)] = 0.0;
  Vector z2 = gap;
  z2[static_cast<Eigen::Index>(second)] = 0.0;
  out.cond1 = softmax(z1);
  out.cond2 = softmax(z2);
  return out;
}

ConditioningInit init_conditioning(const std::vector<Vector>& template_image_embs,
                                   const std::vector<Vector>& caption_embs) {
  if (template_image_embs.empty() || caption_embs.empty()) {
    throw ShapeError("init_conditioning: both embedding lists must be non-empty");
  }
  const auto d = template_image_embs.front().size();
  for (const auto& v : template_image_embs) {
    if (v.size() != d) throw ShapeError("init_conditioning: template embeddings differ in dimension");
  }
  for (const auto& v : caption_embs) {
    if (v.size() != d) throw ShapeError("init_conditioning: caption dimension differs from image dimension");
  }
  const Vector gap = (mean_of(template_image_embs) - mean_of(caption_embs)).cwiseAbs();
  return init_conditioning_from_gap(gap);
}

// ---------------------------------------------------------------------------

std::string serialize_params(const PiMapParams& p) {
  p.validate();
  detail::BinaryWriter w;
  w.raw(kMagic);
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(p.d_joint));
  w.u32(static_cast<std::uint32_t>(p.d_tok));
  w.u32(static_cast<std::uint32_t>(p.hidden));
  w.str(to_string(p.activation));
  p.for_each_tensor([&](std::string_view name, const double*, std::size_t n) {
    w.str(name);
    w.u64(n);
  });
  // Payloads follow the table of contents. Matrices are stored row-major
  // (Eigen keeps them column-major in memory).
  auto put_matrix = [&](const Matrix& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) w.f64(m(i, j));
    }
  };
  auto put_vector = [&](const Vector& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) w.f64(v[i]);
  };
  put_matrix(p.w1);
  put_vector(p.b1);
  put_matrix(p.skip1);
  put_matrix(p.w2);
  put_vector(p.b2);
  put_matrix(p.w3);
  put_vector(p.b3);
  put_vector(p.cond1);
  put_vector(p.cond2);
  put_matrix(p.proj);
  return w.bytes();
}

PiMapParams deserialize_params(std::string_view bytes) {
  detail::BinaryReader r(bytes, "pi-map params");
  if (bytes.size() < kMagic.size() || r.raw(kMagic.size()) != kMagic) {
    throw CorruptFileError("pi-map params: bad magic (not a PIMAP1 file)");
  }
  const auto version = r.u32();
  if (version != kFormatVersion) {
    throw VersionError("pi-map params: unsupported format version " + std::to_string(version));
  }
  const auto d_joint = r.u32();
  const auto d_tok = r.u32();
  const auto hidden = r.u32();
  Activation act;
  try {
    act = parse_activation(r.str());
  } catch (const ConfigError& e) {
    throw CorruptFileError(std::string("pi-map params: ") + e.what());
  }
  if (d_joint == 0 || d_tok == 0 || hidden == 0 || d_joint > (1u << 20) || d_tok > (1u << 20) ||
      hidden > (1u << 20)) {
    throw CorruptFileError("pi-map params: implausible dimensions");
  }
  PiMapParams p = PiMapParams::zeros(d_joint, d_tok, hidden, act);
  p.for_each_tensor([&](std::string_view name, double*, std::size_t n) {
    if (r.str() != name || r.u64() != n) throw CorruptFileError("pi-map params: tensor table mismatch");
  });
  auto get_matrix = [&](Matrix& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = r.f64();
    }
  };
  auto get_vector = [&](Vector& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = r.f64();
  };
  get_matrix(p.w1);
  get_vector(p.b1);
  get_matrix(p.skip1);
  get_matrix(p.w2);
  get_vector(p.b2);
  get_matrix(p.w3);
  get_vector(p.b3);
  get_vector(p.cond1);
  get_vector(p.cond2);
  get_matrix(p.proj);
  if (!r.at_end()) throw CorruptFileError("pi-map params: trailing bytes");
  if (!p.all_finite()) throw CorruptFileError("pi-map params: non-finite values");
  return p;
}

void save_params(const PiMapParams& p, const std::filesystem::path& path) {
  detail::write_file_atomic(path.string(), serialize_params(p));
}

PiMapParams load_params(const std::filesystem::path& path) {
  return deserialize_params(detail::read_file(path.string()));
}

PiMapParams load_params(const std::filesystem::path& path, std::size_t d_joint, std::size_t d_tok) {
  PiMapParams p = load_params(path);
  if (p.d_joint != d_joint || p.d_tok != d_tok) {
    throw ConfigError("pi-map params in " + path.string() + " are for d_joint=" +
                      std::to_string(p.d_joint) + ", d_tok=" + std::to_string(p.d_tok) +
                      "; the active encoder has d_joint=" + std::to_string(d_joint) +
                      ", d_tok=" + std::to_string(d_tok));
  }
  return p;
}

}  // namespace pimap

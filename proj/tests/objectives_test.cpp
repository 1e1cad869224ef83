#include "support.hpp"

#include "pimap/errors.hpp"
#include "pimap/objectives.hpp"
#include "pimap/pi_map.hpp"

#include <doctest.h>

#include <cmath>

using namespace pimap;
using pimap::test::directional_fd;
using pimap::test::random_vector;
using pimap::test::relative_error;

namespace {

constexpr int kProbes = 100;
constexpr double kStep = 1e-5;
constexpr double kTol = 1e-4;

Batch random_batch(Rng& rng, const World& world, const EncoderPair& enc, std::size_t n) {
  Batch b;
  const auto d = world.config().d_joint;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& inst = world.instances()[i % world.instances().size()];
    BatchItem it;
    it.image_raw = random_vector(rng, d);
    it.image_localized = random_vector(rng, d);
    it.specific_caption = world.full_caption(inst);
    it.generic_caption = world.generic_caption(inst);
    b.items.push_back(std::move(it));
  }
  encode_captions(b, enc);
  return b;
}

PiMapParams random_direction(const PiMapParams& like, Rng& rng) {
  PiMapParams dir = like;
  dir.for_each_tensor([&](std::string_view, double* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) p[i] = gaussian(rng);
  });
  return dir;
}

PiMapParams axpy(const PiMapParams& p, double h, const PiMapParams& dir) {
  PiMapParams out = p;
  std::vector<const double*> src;
  dir.for_each_tensor([&](std::string_view, const double* d, std::size_t) { src.push_back(d); });
  std::size_t t = 0;
  out.for_each_tensor([&](std::string_view, double* o, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) o[i] += h * src[t][i];
    ++t;
  });
  return out;
}

double dot_params(const PiMapParams& a, const PiMapParams& b) {
  std::vector<std::pair<const double*, std::size_t>> bs;
  b.for_each_tensor([&](std::string_view, const double* d, std::size_t n) { bs.emplace_back(d, n); });
  double acc = 0.0;
  std::size_t t = 0;
  a.for_each_tensor([&](std::string_view, const double* d, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) acc += d[i] * bs[t].first[i];
    ++t;
  });
  return acc;
}

}  // namespace

TEST_SUITE("objectives") {

TEST_CASE("image loss gradient matches central differences") {
  Rng rng = make_stream(11, "li");
  const auto world = test::small_world();
  const ToyEncoderPair enc(world);
  LossConfig cfg;
  for (int probe = 0; probe < kProbes; ++probe) {
    cfg.include_positive_in_denominator = probe % 2 == 1;
    const auto batch = random_batch(rng, *world, enc, 2 + probe % 6);
    const std::size_t anchor = static_cast<std::size_t>(probe) % batch.items.size();
    const Vector x = random_vector(rng, world->config().d_joint);
    const Vector v = random_vector(rng, world->config().d_joint);
    const auto lg = image_loss(x, batch, anchor, cfg);
    const double analytic = lg.grad.dot(v);
    const double numeric = directional_fd(
        [&](double h) { return image_loss(Vector(x + h * v), batch, anchor, cfg).value; }, kStep);
    CHECK(relative_error(analytic, numeric) < kTol);
  }
}

TEST_CASE("text loss gradient flows through the frozen text encoder") {
  Rng rng = make_stream(12, "lt");
  const auto world = test::small_world();
  const ToyEncoderPair enc(world);
  LossConfig cfg;
  for (int probe = 0; probe < kProbes; ++probe) {
    cfg.include_positive_in_denominator = probe % 3 == 0;
    const auto batch = random_batch(rng, *world, enc, 2 + probe % 5);
    const std::size_t anchor = static_cast<std::size_t>(probe) % batch.items.size();
    const Vector y = random_vector(rng, world->config().d_tok, 0.5);
    const Vector v = random_vector(rng, world->config().d_tok);
    const auto tl = text_loss(y, batch, anchor, cfg, enc);
    const double analytic = tl.grad_token.dot(v);
    const double numeric = directional_fd(
        [&](double h) { return text_loss(Vector(y + h * v), batch, anchor, cfg, enc).value; }, kStep);
    CHECK(relative_error(analytic, numeric) < kTol);
  }
}

TEST_CASE("symmetric cross-entropy gradient matches central differences") {
  Rng rng = make_stream(13, "ce");
  const std::size_t d = 12;
  for (int probe = 0; probe < kProbes; ++probe) {
    const std::size_t n = 2 + static_cast<std::size_t>(probe) % 7;
    std::vector<Vector> imgs, txts, vi, vt;
    for (std::size_t i = 0; i < n; ++i) {
      imgs.push_back(random_vector(rng, d));
      txts.push_back(random_vector(rng, d));
      vi.push_back(random_vector(rng, d));
      vt.push_back(random_vector(rng, d));
    }
    const auto ce = symmetric_ce_loss(imgs, txts, 0.07);
    double analytic = 0.0;
    for (std::size_t i = 0; i < n; ++i) analytic += ce.grad_images[i].dot(vi[i]) + ce.grad_texts[i].dot(vt[i]);
    const double numeric = directional_fd(
        [&](double h) {
          std::vector<Vector> a = imgs, b = txts;
          for (std::size_t i = 0; i < n; ++i) {
            a[i] += h * vi[i];
            b[i] += h * vt[i];
          }
          return symmetric_ce_loss(a, b, 0.07).value;
        },
        kStep);
    CHECK(relative_error(analytic, numeric) < kTol);
  }
}

TEST_CASE("pi-map backward pass matches central differences") {
  struct Shape {
    std::size_t d_joint, d_tok, hidden;
    Activation act;
  };
  const Shape shapes[] = {{16, 24, 0, Activation::gelu},
                          {16, 24, 0, Activation::silu},
                          {12, 20, 18, Activation::gelu},
                          {12, 8, 10, Activation::silu}};
  for (const auto& s : shapes) {
    Rng rng = make_stream(14 + s.hidden, to_string(s.act));
    auto params = PiMapParams::random(s.d_joint, s.d_tok, 5, s.hidden, s.act);
    // Non-uniform gains so the conditioning gradient is exercised.
    params.cond1 = softmax(random_vector(rng, static_cast<std::size_t>(params.cond1.size())));
    params.cond2 = softmax(random_vector(rng, static_cast<std::size_t>(params.cond2.size())));
    for (int probe = 0; probe < kProbes; ++probe) {
      const Vector x = random_vector(rng, s.d_joint);
      const Vector up = random_vector(rng, s.d_tok);
      const Vector vx = random_vector(rng, s.d_joint);
      const auto dir = random_direction(params, rng);

      PiMapCache cache;
      pi_forward(x, params, &cache);
      auto grads = PiMapParams::zeros(s.d_joint, s.d_tok, s.hidden, s.act);
      grads.cond1.setZero();
      grads.cond2.setZero();
      const Vector gx = pi_backward(cache, up, params, grads);

      const double analytic = dot_params(grads, dir) + gx.dot(vx);
      const double numeric = directional_fd(
          [&](double h) { return up.dot(pi_forward(Vector(x + h * vx), axpy(params, h, dir))); }, kStep);
      CHECK(relative_error(analytic, numeric) < kTol);
    }
  }
}

TEST_CASE("kernel identities") {
  Rng rng = make_stream(15, "kernel");
  const double tau = 0.07;
  for (int i = 0; i < 50; ++i) {
    const Vector a = random_vector(rng, 10);
    const Vector b = random_vector(rng, 10);
    CHECK(similarity_d(a, b, tau) == similarity_d(b, a, tau));
    CHECK(relative_error(similarity_d(Vector(3.0 * a), b, tau), similarity_d(a, b, tau)) < 1e-14);
    CHECK(relative_error(similarity_d(a, Vector(0.25 * b), tau), similarity_d(a, b, tau)) < 1e-14);
    CHECK(relative_error(similarity_d(a, a, tau), std::exp(1.0 / 0.07)) < 1e-9);
  }
  Vector e0 = Vector::Zero(4), e1 = Vector::Zero(4);
  e0[0] = 1.0;
  e1[1] = 2.0;
  CHECK(similarity_d(e0, e1, tau) == 1.0);
  CHECK_THROWS_AS(similarity_d(e0, Vector::Zero(4), tau), DomainError);
  CHECK_THROWS_AS(cosine(e0, Vector::Zero(3)), ShapeError);
  CHECK(similarity_d(e0, e0, tau, KernelForm::literal) == doctest::Approx(std::exp(1.0)).epsilon(1e-15));
}

TEST_CASE("contrastive loss worked values") {
  Vector a = Vector::Zero(3), n = Vector::Zero(3);
  a[0] = 1.0;
  n[1] = 1.0;
  LossConfig cfg;
  const auto excl = contrastive_loss(a, a, {n}, cfg);
  CHECK(relative_error(excl.value, -1.0 / 0.07) < 1e-12);
  cfg.include_positive_in_denominator = true;
  const auto incl = contrastive_loss(a, a, {n}, cfg);
  // log(1 + e^{-1/tau}), about 6e-7; the loss is a difference of two ~14.3 terms.
  CHECK(std::abs(incl.value - std::log1p(std::exp(-1.0 / 0.07))) < 1e-12);
  CHECK(incl.value > 0.0);
  CHECK_THROWS_AS(contrastive_loss(a, a, {}, cfg), UsageError);
}

TEST_CASE("image loss needs negatives") {
  Batch b;
  BatchItem it;
  it.image_raw = Vector::Ones(4);
  it.image_localized = Vector::Ones(4);
  b.items.push_back(it);
  CHECK_THROWS_AS(image_loss(Vector::Ones(4), b, 0, LossConfig{}), UsageError);
}

TEST_CASE("total loss is the alpha mix") {
  CHECK(total_loss(2.0, 4.0, 0.25) == 0.75 * 2.0 + 0.25 * 4.0);
  CHECK(total_loss(-3.0, 1.5, 0.0) == -3.0);
  CHECK(total_loss(-3.0, 1.5, 1.0) == 1.5);
}

TEST_CASE("loss config defaults and validation") {
  const LossConfig cfg;
  CHECK(cfg.alpha == 0.25);
  CHECK(cfg.tau == 0.07);
  CHECK_FALSE(cfg.include_positive_in_denominator);
  CHECK(cfg.y_star_prompt_template == "A photo of <tok>");
  LossConfig bad;
  bad.alpha = 1.5;
  CHECK_THROWS(bad.validate());
  bad = LossConfig{};
  bad.tau = 0.0;
  CHECK_THROWS(bad.validate());
  bad = LossConfig{};
  bad.y_star_prompt_template = "two <a> <b>";
  CHECK_THROWS(bad.validate());
  const auto round = LossConfig::from_kv(cfg.to_kv());
  CHECK(round.to_kv().to_string() == cfg.to_kv().to_string());
}

}  // TEST_SUITE

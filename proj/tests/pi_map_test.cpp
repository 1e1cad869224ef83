#include "support.hpp"

#include "pimap/errors.hpp"
#include "pimap/pi_map.hpp"

#include <doctest.h>

#include <fstream>

using namespace pimap;
using pimap::test::random_vector;

namespace {

Vector vec(std::initializer_list<double> xs) {
  Vector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

void check_probability(const Vector& v) {
  CHECK(std::abs(v.sum() - 1.0) <= 1e-9);
  CHECK((v.array() > 0.0).all());
}

}  // namespace

TEST_SUITE("pi-map") {

TEST_CASE("conditioning init on the worked gap") {
  const auto c = init_conditioning_from_gap(vec({0.5, 0.1, 0.9, 0.2}));
  CHECK(c.largest == 2);
  CHECK(c.second == 0);
  const Vector v1 = vec({0.3313816142127412, 0.22213173889444915, 0.2009931090850913, 0.2454935378077184});
  const Vector v2 = vec({0.17282569073569506, 0.19100192729742607, 0.42508260662136443, 0.21108977534551446});
  for (Eigen::Index i = 0; i < 4; ++i) {
    CHECK(c.cond1[i] == doctest::Approx(v1[i]).epsilon(1e-15));
    CHECK(c.cond2[i] == doctest::Approx(v2[i]).epsilon(1e-15));
  }
  check_probability(c.cond1);
  check_probability(c.cond2);
  // The zeroed dimension carries the smallest logit, exp(0).
  CHECK(c.cond1[2] == doctest::Approx(1.0 / std::exp(0.5) * c.cond1[0]).epsilon(1e-14));
}

TEST_CASE("conditioning init tie-breaks to the lowest indices") {
  const auto c = init_conditioning_from_gap(Vector::Constant(6, 0.3));
  CHECK(c.largest == 0);
  CHECK(c.second == 1);
  CHECK(c.cond1[0] < c.cond1[1]);
  for (Eigen::Index i = 2; i < 6; ++i) CHECK(c.cond1[i] == c.cond1[1]);
  CHECK(c.cond2[1] < c.cond2[0]);

  const auto tie = init_conditioning_from_gap(vec({0.1, 0.7, 0.2, 0.7, 0.7}));
  CHECK(tie.largest == 1);
  CHECK(tie.second == 3);

  const auto again = init_conditioning_from_gap(vec({0.1, 0.7, 0.2, 0.7, 0.7}));
  CHECK(again.cond1 == tie.cond1);
  CHECK(again.cond2 == tie.cond2);
}

TEST_CASE("conditioning init zero gap is uniform") {
  const std::vector<Vector> same{vec({0.2, -0.4, 0.1}), vec({0.4, 0.0, 0.3})};
  const auto c = init_conditioning(same, same);
  for (Eigen::Index i = 0; i < 3; ++i) {
    CHECK(c.cond1[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(c.cond2[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }
}

TEST_CASE("conditioning init from embeddings is a valid probability pair") {
  Rng rng = make_stream(3, "cond");
  for (int t = 0; t < 200; ++t) {
    std::vector<Vector> imgs, caps;
    for (int i = 0; i < 1 + t % 5; ++i) imgs.push_back(random_vector(rng, 32));
    for (int i = 0; i < 1 + t % 3; ++i) caps.push_back(random_vector(rng, 32));
    const auto c = init_conditioning(imgs, caps);
    check_probability(c.cond1);
    check_probability(c.cond2);
    CHECK(c.largest != c.second);
    CHECK(c.gap[static_cast<Eigen::Index>(c.largest)] >= c.gap[static_cast<Eigen::Index>(c.second)]);
    CHECK(c.gap.maxCoeff() == c.gap[static_cast<Eigen::Index>(c.largest)]);
  }
  CHECK_THROWS_AS(init_conditioning({}, {Vector::Ones(3)}), ShapeError);
  CHECK_THROWS_AS(init_conditioning({Vector::Ones(3)}, {Vector::Ones(4)}), ShapeError);
}

TEST_CASE("forward output has the token width") {
  const auto p = PiMapParams::random(64, 48, 1);
  const Vector out = pi_forward(Vector::Ones(64), p);
  CHECK(out.size() == 48);
  CHECK_THROWS_AS(pi_forward(Vector::Ones(63), p), ShapeError);
}

TEST_CASE("zero weights leave only the residual path") {
  Rng rng = make_stream(4, "resid");
  for (const auto act : {Activation::gelu, Activation::silu}) {
    auto p = PiMapParams::zeros(16, 8, 0, act);
    p.proj = Matrix::NullaryExpr(8, 16, [&]() { return gaussian(rng); });
    const Vector x = random_vector(rng, 16);
    const Vector out = pi_forward(x, p);
    const Vector expected = p.proj * x;
    for (Eigen::Index i = 0; i < 8; ++i) CHECK(out[i] == doctest::Approx(expected[i]).epsilon(1e-14));

    auto q = PiMapParams::zeros(12, 8, 16, act);
    CHECK(q.learned_skip());
    q.proj = Matrix::NullaryExpr(8, 16, [&]() { return gaussian(rng); });
    q.skip1 = Matrix::NullaryExpr(16, 12, [&]() { return gaussian(rng); });
    const Vector y = random_vector(rng, 12);
    const Vector got = pi_forward(y, q);
    const Vector want = q.proj * (q.skip1 * y);
    for (Eigen::Index i = 0; i < 8; ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-13));
  }
}

TEST_CASE("forward is deterministic and locally Lipschitz") {
  Rng rng = make_stream(5, "lip");
  const auto p = PiMapParams::random(16, 24, 9);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const Vector x = random_vector(rng, 16);
    const Vector dx = random_vector(rng, 16, 1e-6);
    CHECK(pi_forward(x, p) == pi_forward(x, p));
    worst = std::max(worst, (pi_forward(Vector(x + dx), p) - pi_forward(x, p)).norm() / dx.norm());
  }
  MESSAGE("empirical local Lipschitz bound " << worst);
  CHECK(std::isfinite(worst));
}

TEST_CASE("parameter files round-trip bit-exactly") {
  const auto dir = test::scratch_dir("params");
  const auto p = PiMapParams::random(16, 24, 2, 20, Activation::silu);
  const auto bytes = serialize_params(p);
  CHECK(bytes.rfind("PIMAP1", 0) == 0);
  const auto q = deserialize_params(bytes);
  CHECK(q == p);
  CHECK(serialize_params(q) == bytes);

  save_params(p, dir / "p.bin");
  CHECK(load_params(dir / "p.bin") == p);
  CHECK_THROWS_AS(load_params(dir / "p.bin", 32, 24), ConfigError);
  CHECK(load_params(dir / "p.bin", 16, 24) == p);

  CHECK_THROWS_AS(deserialize_params(bytes.substr(0, bytes.size() / 2)), CorruptFileError);
  CHECK_THROWS_AS(deserialize_params("NOTPI!" + bytes.substr(6)), CorruptFileError);
  auto bumped = bytes;
  bumped[6] = static_cast<char>(99);
  CHECK_THROWS_AS(deserialize_params(bumped), VersionError);
}

TEST_CASE("softmax is stable for large inputs") {
  const Vector s = softmax(vec({1000.0, 999.0, -1000.0}));
  CHECK(s.allFinite());
  CHECK(std::abs(s.sum() - 1.0) < 1e-12);
}

}  // TEST_SUITE

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <vector>

namespace pimap {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline bool all_finite(const Vector& v) { return v.allFinite(); }

// Returns v / ||v||. A zero vector is returned unchanged.
inline Vector normalized(const Vector& v) {
  const double n = v.norm();
  return n > 0.0 ? Vector(v / n) : v;
}

// Vector-Jacobian product of z -> z / ||z||: maps an upstream gradient on the
// normalized output back onto z.
inline Vector normalize_backward(const Vector& z, const Vector& upstream) {
  const double n = z.norm();
  if (n == 0.0) return Vector::Zero(z.size());
  const Vector zh = z / n;
  return (upstream - zh * zh.dot(upstream)) / n;
}

inline Vector mean_of(const std::vector<Vector>& vs) {
  Vector acc = Vector::Zero(vs.front().size());
  for (const auto& v : vs) acc += v;
  return acc / static_cast<double>(vs.size());
}

}  // namespace pimap

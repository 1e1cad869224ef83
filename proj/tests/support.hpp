#pragma once

#include "pimap/linalg.hpp"
#include "pimap/rng.hpp"
#include "pimap/synthetic_world.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>

namespace pimap::test {

inline Vector random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  Vector v(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = scale * gaussian(rng);
  return v;
}

inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Central difference of f along direction v at step h.
inline double directional_fd(const std::function<double(double)>& f_at, double h = 1e-5) {
  return (f_at(h) - f_at(-h)) / (2.0 * h);
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("pimap-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::shared_ptr<const World> small_world(std::uint64_t seed = 1234) {
  WorldConfig cfg;
  cfg.seed = seed;
  cfg.d_joint = 16;
  cfg.d_tok = 24;
  cfg.n_pretrain_instances = 32;
  return World::generate(cfg);
}

}  // namespace pimap::test

#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace pimap {

using Rng = std::mt19937_64;

// Independent generator for a named substream of a run seed. Every random
// decision in the library draws from one of these so reruns are bit-exact.
Rng make_stream(std::uint64_t seed, std::string_view name);

// Standard normal draw that does not depend on std::normal_distribution's
// internal caching, so interleaved draws stay reproducible.
double gaussian(Rng& rng);

double uniform01(Rng& rng);

// Uniform index in [0, n).
std::size_t uniform_index(Rng& rng, std::size_t n);

// k distinct indices from [0, n) in draw order (partial Fisher-Yates).
std::vector<std::size_t> sample_without_replacement(Rng& rng, std::size_t n, std::size_t k);

}  // namespace pimap

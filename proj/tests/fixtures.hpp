#pragma once

#include <bdlab/rng.hpp>
#include <bdlab/tensor.hpp>

#include <random>

namespace bdlab::fixtures {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Pixel images with integer values, as ingested corpora have.
inline Tensor random_pixels(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> u(0, 255);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

}  // namespace bdlab::fixtures

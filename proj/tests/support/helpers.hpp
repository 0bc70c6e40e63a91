#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "medvit/ops.hpp"
#include "medvit/tensor.hpp"

namespace testing_support {

inline medvit::Tensor random_tensor(medvit::Shape shape, medvit::Rng& rng, double lo = -1.0, double hi = 1.0) {
  return medvit::Tensor::uniform(std::move(shape), rng, lo, hi);
}

/// Scalar loss Σ out ⊙ R with a fixed random R, so every output element
/// carries a distinct weight into the gradient.
inline std::function<medvit::Tensor(const medvit::Tensor&)> projection_loss(const medvit::Shape& shape,
                                                                           std::uint64_t seed) {
  medvit::Rng rng(seed);
  medvit::Tensor weights = medvit::Tensor::uniform(shape, rng, -1.0, 1.0);
  return [weights](const medvit::Tensor& out) { return medvit::ops::sum(medvit::ops::mul(out, weights)); };
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return a.size() == b.size() ? m : INFINITY;
}

inline std::vector<double> to_vector(const medvit::Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace testing_support

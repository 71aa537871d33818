#pragma once

#include <bdlab/autograd.hpp>
#include <bdlab/rng.hpp>

#include <algorithm>
#include <functional>
#include <numeric>

namespace bdlab {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t coords_checked = 0;
};

// Relative error with a floor on the denominator so near-zero gradients are judged
// on an absolute scale of 1e-3 * tolerance.
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-3});
}

// Central differences of value_fn around x compared against a supplied gradient.
// max_coords == 0 checks every coordinate; otherwise a seeded random subset.
inline GradCheckResult finite_diff_check(const std::function<double(const Tensor&)>& value_fn,
                                         const Tensor& analytic_grad, const Tensor& x, double h,
                                         std::size_t max_coords = 0, std::uint64_t seed = 0) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_check: step must be positive");
  x.require_same_shape(analytic_grad, "finite_diff_check");
  std::vector<std::size_t> coords(x.size());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (max_coords != 0 && max_coords < coords.size()) {
    Rng rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_coords);
  }
  GradCheckResult res;
  Tensor probe = x;
  for (std::size_t i : coords) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = value_fn(probe);
    probe[i] = orig - h;
    const double fm = value_fn(probe);
    probe[i] = orig;
    const double err = relative_error(analytic_grad[i], (fp - fm) / (2.0 * h));
    if (err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst_index = i;
    }
    ++res.coords_checked;
  }
  return res;
}

// Builds f(x) on a fresh graph with x as a differentiable leaf; the analytic gradient
// comes from backward().
using ScalarBuilder = std::function<Var(Graph&, Var)>;

inline Tensor gradient_of(const ScalarBuilder& f, const Tensor& x) {
  Graph g;
  Var in = g.leaf(x, true);
  Var out = f(g, in);
  g.backward(out);
  return g.grad(in);
}

inline double value_of(const ScalarBuilder& f, const Tensor& x) {
  Graph g;
  Var in = g.leaf(x, false);
  return g.value(f(g, in))[0];
}

inline GradCheckResult finite_diff_check(const ScalarBuilder& f, const Tensor& x, double h,
                                         std::size_t max_coords = 0, std::uint64_t seed = 0) {
  const Tensor grad = gradient_of(f, x);
  return finite_diff_check([&](const Tensor& p) { return value_of(f, p); }, grad, x, h, max_coords, seed);
}

}  // namespace bdlab

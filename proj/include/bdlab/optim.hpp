#pragma once

#include <bdlab/dataset.hpp>
#include <bdlab/model.hpp>

#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>

namespace bdlab {

enum class Norm { l2, linf };

inline std::string to_string(Norm p) { return p == Norm::l2 ? "2" : "inf"; }

inline Norm parse_norm(const std::string& s) {
  if (s == "2" || s == "l2") return Norm::l2;
  if (s == "inf" || s == "linf") return Norm::linf;
  throw std::invalid_argument("unsupported norm '" + s + "' (expected 2 or inf)");
}

inline double lp_norm(std::span<const double> v, Norm p) { return p == Norm::l2 ? l2_norm(v) : linf_norm(v); }

class SolverError : public std::runtime_error {
 public:
  SolverError(const std::string& what, std::size_t step) : std::runtime_error(what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

// Euclidean projection onto the l_p ball of radius eps, in place.
inline void project_lp_inplace(std::span<double> v, Norm p, double eps) {
  if (!(eps >= 0.0)) throw std::invalid_argument("project_lp: eps must be non-negative");
  if (p == Norm::linf) {
    for (auto& x : v) x = std::clamp(x, -eps, eps);
    return;
  }
  const double n = l2_norm(v);
  if (n > eps) {
    const double s = eps / n;
    for (auto& x : v) x *= s;
  }
}

inline Tensor project_lp(Tensor v, Norm p, double eps) {
  project_lp_inplace(v.data(), p, eps);
  return v;
}

struct PgdConfig {
  Norm norm = Norm::l2;
  double epsilon = 0.0;  // pixel units on the [0,255] scale
  std::size_t steps = 100;
  std::optional<double> step_size;  // unset: 1.5 * epsilon / steps
  bool clip = true;

  double effective_step_size() const {
    if (step_size) return *step_size;
    return steps ? 1.5 * epsilon / static_cast<double>(steps) : 0.0;
  }

  void validate() const {
    if (!(epsilon >= 0.0)) throw std::invalid_argument("pgd: epsilon must be non-negative");
    if (step_size && !(*step_size > 0.0)) throw std::invalid_argument("pgd: step size must be positive");
  }
};

// Loss-maximizing projected gradient ascent for a batch [n,H,W,C] started at the
// clean inputs. Every iterate is projected back onto the eps-ball around its own
// clean input and, with clip, onto [0,255].
inline Tensor pgd_perturb_batch(const ModelParams& model, const Tensor& clean, std::span<const Label> labels,
                                const PgdConfig& cfg) {
  cfg.validate();
  if (!model.is_classifier()) throw std::invalid_argument("pgd_perturb: model must be a classifier");
  require_batch_shape(model, clean);
  Tensor x = clean;
  if (cfg.steps == 0 || cfg.epsilon == 0.0) return x;
  const double alpha = cfg.effective_step_size();
  const std::size_t batch = clean.dim(0), n = clean.size() / batch;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const InputGrad ig = input_gradient(model, x, labels);
    if (!ig.grad.all_finite()) throw SolverError("pgd_perturb: non-finite gradient at step " + std::to_string(step), step);
    for (std::size_t i = 0; i < batch; ++i) {
      const std::span<const double> g(ig.grad.raw() + i * n, n);
      double* xi = x.raw() + i * n;
      const double* x0 = clean.raw() + i * n;
      if (cfg.norm == Norm::linf) {
        for (std::size_t j = 0; j < n; ++j) xi[j] += alpha * (g[j] > 0.0 ? 1.0 : (g[j] < 0.0 ? -1.0 : 0.0));
      } else {
        const double gn = l2_norm(g);
        if (gn > 0.0)
          for (std::size_t j = 0; j < n; ++j) xi[j] += alpha * g[j] / gn;
      }
      std::vector<double> delta(n);
      for (std::size_t j = 0; j < n; ++j) delta[j] = xi[j] - x0[j];
      project_lp_inplace(delta, cfg.norm, cfg.epsilon);
      for (std::size_t j = 0; j < n; ++j) {
        xi[j] = x0[j] + delta[j];
        if (cfg.clip) xi[j] = std::clamp(xi[j], 0.0, 255.0);
      }
    }
  }
  // Hard postcondition: clamping can only shrink the perturbation, so a violation
  // here is a solver bug rather than bad input.
  for (std::size_t i = 0; i < batch; ++i) {
    std::vector<double> delta(n);
    for (std::size_t j = 0; j < n; ++j) {
      delta[j] = x[i * n + j] - clean[i * n + j];
      if (cfg.clip && !(x[i * n + j] >= 0.0 && x[i * n + j] <= 255.0))
        throw std::logic_error("pgd_perturb: pixel left [0,255]");
    }
    if (lp_norm(delta, cfg.norm) > cfg.epsilon * (1.0 + 1e-6))
      throw std::logic_error("pgd_perturb: perturbation left the eps-ball");
  }
  return x;
}

inline Image pgd_perturb(const ModelParams& model, const Image& x, Label y, const PgdConfig& cfg) {
  const Image one[] = {x};
  const Label lab[] = {y};
  return unstack_images(pgd_perturb_batch(model, stack_images(one), lab, cfg)).front();
}

// --- latent-space tools ------------------------------------------------------------

enum class InvertInit { encoder, random };

struct InvertConfig {
  std::size_t steps = 1000;
  double step_size = 0.1;
  InvertInit init = InvertInit::encoder;
  std::uint64_t seed = 0;

  void validate() const {
    if (steps < 1) throw std::invalid_argument("latent_invert: steps must be >= 1");
    if (!(step_size > 0.0)) throw std::invalid_argument("latent_invert: step size must be positive");
  }
};

// ||x - decode(z)||^2 measured on pixels rescaled to [0,1], per example.
inline Tensor reconstruction_objective(const ModelParams& ae, const Tensor& images, const Tensor& z) {
  const Tensor rec = decode_batch(ae, z);
  const std::size_t batch = images.dim(0), n = images.size() / batch;
  Tensor out({batch});
  for (std::size_t i = 0; i < batch; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = (images[i * n + j] - rec[i * n + j]) / 255.0;
      s += d * d;
    }
    out[i] = s;
  }
  return out;
}

struct Inversion {
  Tensor z;              // [batch, d], best-so-far per example
  Tensor objective;      // [batch], objective at the returned z
  Tensor initial;        // [batch], objective at the starting point
};

// Gradient descent on the per-example reconstruction objective; returns the best
// iterate seen for each example. Throws SolverError when an objective exceeds ten
// times its starting value.
inline Inversion latent_invert_batch(const ModelParams& ae, const Tensor& images, const InvertConfig& cfg) {
  cfg.validate();
  require_autoencoder(ae);
  require_batch_shape(ae, images);
  const std::size_t batch = images.dim(0), d = ae.outputs;
  Tensor z;
  if (cfg.init == InvertInit::encoder) {
    z = encode(ae, images);
  } else {
    Rng rng(derive_seed(cfg.seed, "invert-init"));
    std::normal_distribution<double> nd(0.0, 1.0);
    z = Tensor({batch, d});
    for (auto& v : z.data()) v = nd(rng);
  }
  Inversion out{z, reconstruction_objective(ae, images, z), Tensor()};
  out.initial = out.objective;
  const Tensor target = images.reshaped({batch, images.size() / batch});
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Graph g;
    auto p = bind_params(g, ae, false);
    Var zv = g.leaf(z, true);
    Var rec = g.flatten(g.scale(decoder_graph(g, ae, p, zv), 1.0 / 255.0));
    Var diff = g.sub(rec, g.constant(target * (1.0 / 255.0)));
    Var obj = g.sum_squares(diff);
    g.backward(obj);
    const Tensor& gz = g.grad(zv);
    if (!gz.all_finite()) throw SolverError("latent_invert: non-finite gradient at step " + std::to_string(step), step);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] -= cfg.step_size * gz[i];
    const Tensor cur = reconstruction_objective(ae, images, z);
    for (std::size_t i = 0; i < batch; ++i) {
      if (!std::isfinite(cur[i]) || cur[i] > 10.0 * out.initial[i])
        throw SolverError("latent_invert: diverged at step " + std::to_string(step) + " (objective " +
                              std::to_string(cur[i]) + ", initial " + std::to_string(out.initial[i]) + ")",
                          step);
      if (cur[i] < out.objective[i]) {
        out.objective[i] = cur[i];
        std::copy(z.raw() + i * d, z.raw() + (i + 1) * d, out.z.raw() + i * d);
      }
    }
  }
  return out;
}

inline Tensor latent_invert(const ModelParams& ae, const Image& x, const InvertConfig& cfg) {
  const Image one[] = {x};
  const Inversion inv = latent_invert_batch(ae, stack_images(one), cfg);
  return inv.z.reshaped({ae.outputs});
}

// decode((1 - tau) z_src + tau z_dst): tau is the fraction moved from the source
// (label-giving) latent toward the donor.
inline Image latent_interpolate(const ModelParams& ae, const Tensor& z_src, const Tensor& z_dst, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("latent_interpolate: tau must be in [0,1]");
  z_src.require_same_shape(z_dst, "latent_interpolate");
  Tensor z = z_src;
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = (1.0 - tau) * z_src[i] + tau * z_dst[i];
  Image out = decode(ae, z.reshaped({z.size()}));
  clip_pixels(out);
  return out;
}

}  // namespace bdlab

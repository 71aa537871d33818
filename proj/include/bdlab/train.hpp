#pragma once

#include <bdlab/augment.hpp>
#include <bdlab/model.hpp>
#include <bdlab/optim.hpp>

#include <functional>
#include <utility>
#include <vector>

namespace bdlab {

// Piecewise-constant learning rate: (first step, rate) pairs with strictly
// increasing steps; the rate at step s is that of the last threshold <= s.
using LrSchedule = std::vector<std::pair<std::size_t, double>>;

// Drops at 40% and 60% of the budget; on budgets too short to separate them the
// colliding thresholds are skipped so the schedule stays strictly increasing.
inline LrSchedule default_schedule(std::size_t steps, double base_lr = 0.1) {
  LrSchedule s{{0, base_lr}};
  const auto drop = [&](double frac, double rate) {
    const auto at = static_cast<std::size_t>(frac * static_cast<double>(steps));
    if (at > s.back().first) s.emplace_back(at, rate);
  };
  drop(0.4, base_lr / 10.0);
  drop(0.6, base_lr / 100.0);
  return s;
}

inline double lr_at(const LrSchedule& schedule, std::size_t step) {
  double lr = schedule.empty() ? 0.0 : schedule.front().second;
  for (const auto& [from, rate] : schedule)
    if (from <= step) lr = rate;
  return lr;
}

struct TrainConfig {
  std::size_t steps = 4000;
  std::size_t batch = 50;
  double momentum = 0.9;
  double weight_decay = 2e-4;
  LrSchedule lr_schedule = default_schedule(4000);
  AugmentConfig augment;
  std::uint64_t seed = 0;
  std::size_t telemetry_interval = 0;  // 0: hook only at start and end

  void validate() const {
    if (batch < 1) throw std::invalid_argument("train: batch must be >= 1");
    for (std::size_t i = 1; i < lr_schedule.size(); ++i)
      if (lr_schedule[i].first <= lr_schedule[i - 1].first)
        throw std::invalid_argument("train: lr schedule thresholds must be strictly increasing");
  }
};

inline TrainConfig make_train_config(std::size_t steps, std::uint64_t seed, double base_lr = 0.1) {
  TrainConfig cfg;
  cfg.steps = steps;
  cfg.seed = seed;
  cfg.lr_schedule = default_schedule(steps, base_lr);
  return cfg;
}

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t step) : std::runtime_error(what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

using TelemetryHook = std::function<void(std::size_t step, const ModelParams&)>;
// Rewrites a prepared batch (after augmentation) against the current parameters.
using BatchTransform =
    std::function<Tensor(const ModelParams&, const Tensor&, std::span<const Label>, std::size_t step)>;

// Draws batches from per-epoch seeded permutations; an incomplete tail is skipped.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed) : n_(n), batch_(std::min(batch, n)), seed_(seed) {}

  std::span<const std::size_t> next() {
    if (perm_.empty() || at_ + batch_ > perm_.size()) {
      perm_ = all_indices(n_);
      Rng rng(derive_seed(seed_, "shuffle", epoch_++));
      std::shuffle(perm_.begin(), perm_.end(), rng);
      at_ = 0;
    }
    auto out = std::span<const std::size_t>(perm_).subspan(at_, batch_);
    at_ += batch_;
    return out;
  }

 private:
  std::size_t n_, batch_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<std::size_t> perm_;
  std::size_t at_ = 0;
};

// Momentum SGD with weight decay applied as a multiplicative shrink:
//   v <- mu v + g ;  theta <- (1 - lr wd) theta - lr v
class MomentumSgd {
 public:
  MomentumSgd(const ModelParams& m, double momentum, double weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& p : m.params) velocity_.emplace_back(p.shape(), 0.0);
  }

  void step(ModelParams& m, const std::vector<Tensor>& grads, double lr) {
    const double shrink = 1.0 - lr * weight_decay_;
    for (std::size_t k = 0; k < m.params.size(); ++k) {
      double* p = m.params[k].raw();
      double* v = velocity_[k].raw();
      const double* g = grads[k].raw();
      for (std::size_t i = 0; i < m.params[k].size(); ++i) {
        v[i] = momentum_ * v[i] + g[i];
        p[i] = shrink * p[i] - lr * v[i];
      }
    }
  }

 private:
  double momentum_, weight_decay_;
  std::vector<Tensor> velocity_;
};

namespace detail {

inline void maybe_report(const TelemetryHook& hook, std::size_t step, std::size_t total, std::size_t interval,
                         const ModelParams& m) {
  if (!hook) return;
  if (step == 0 || step == total || (interval && step % interval == 0)) hook(step, m);
}

}  // namespace detail

inline ModelParams train(ModelParams m, const LabeledDataset& ds, const TrainConfig& cfg,
                         const TelemetryHook& hook = {}, const BatchTransform& transform = {}) {
  cfg.validate();
  if (ds.empty()) throw std::invalid_argument("train: empty dataset");
  if (!m.is_classifier()) throw std::invalid_argument("train: model must be a classifier");
  m.input_norm = cfg.augment.standardize ? InputNorm::standardize : InputNorm::scale;
  AugmentConfig geometric = cfg.augment;
  geometric.standardize = false;  // standardization lives in the model input path

  BatchSampler sampler(ds.size(), cfg.batch, cfg.seed);
  MomentumSgd opt(m, cfg.momentum, cfg.weight_decay);
  detail::maybe_report(hook, 0, cfg.steps, cfg.telemetry_interval, m);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto idx = sampler.next();
    std::vector<Label> labels;
    labels.reserve(idx.size());
    for (std::size_t i : idx) labels.push_back(ds.labels[i]);
    Tensor batch;
    if (geometric.any()) {
      std::vector<Image> imgs;
      imgs.reserve(idx.size());
      for (std::size_t i : idx) imgs.push_back(ds.images[i]);
      Rng rng(derive_seed(cfg.seed, "augment", step));
      batch = stack_images(augment_batch(imgs, geometric, rng));
    } else {
      batch = stack_images(ds, idx);
    }
    if (transform) batch = transform(m, batch, labels, step);
    const LossAndGrad lg = loss_and_grad(m, batch, labels);
    if (!std::isfinite(lg.loss)) throw TrainingError("train: non-finite loss at step " + std::to_string(step), step);
    opt.step(m, lg.grads, lr_at(cfg.lr_schedule, step));
    if (!m.all_finite()) throw TrainingError("train: non-finite parameters after step " + std::to_string(step), step);
    detail::maybe_report(hook, step + 1, cfg.steps, cfg.telemetry_interval, m);
  }
  return m;
}

// Adversarial training: every batch is replaced by its PGD perturbation against the
// current parameters before the SGD step. The radius ramps linearly from 0 to
// pgd.epsilon over the first warmup fraction of the budget (an explicit step size
// is scaled along with it); training straight at the full radius tends to collapse
// to a constant classifier on small models.
inline ModelParams adv_train(ModelParams m, const LabeledDataset& ds, const TrainConfig& cfg, const PgdConfig& pgd,
                             const TelemetryHook& hook = {}, double warmup = 0.3) {
  pgd.validate();
  if (!(warmup >= 0.0 && warmup <= 1.0)) throw std::invalid_argument("adv_train: warmup must be in [0,1]");
  const double ramp = warmup * static_cast<double>(cfg.steps);
  BatchTransform attack = [pgd, ramp](const ModelParams& cur, const Tensor& batch, std::span<const Label> labels,
                                      std::size_t step) {
    PgdConfig c = pgd;
    if (ramp > 0.0) {
      const double f = std::min(1.0, static_cast<double>(step + 1) / ramp);
      c.epsilon *= f;
      if (c.step_size) *c.step_size *= f;
    }
    return pgd_perturb_batch(cur, batch, labels, c);
  };
  return train(std::move(m), ds, cfg, hook, attack);
}

// Reconstruction training for the autoencoder: mean squared pixel error on the
// [0,1] scale, same optimizer and schedule machinery as the classifiers. Labels are
// ignored.
inline ModelParams train_autoencoder(ModelParams ae, const LabeledDataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  require_autoencoder(ae);
  if (ds.empty()) throw std::invalid_argument("train_autoencoder: empty dataset");
  BatchSampler sampler(ds.size(), cfg.batch, cfg.seed);
  MomentumSgd opt(ae, cfg.momentum, cfg.weight_decay);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto idx = sampler.next();
    const Tensor batch = stack_images(ds, idx);
    const std::size_t n = batch.size();
    Graph g;
    auto p = bind_params(g, ae, true);
    Var rec = decoder_graph(g, ae, p, encoder_graph(g, ae, p, g.constant(batch)));
    Var loss = g.scale(g.sum_squares(g.scale(g.sub(rec, g.constant(batch)), 1.0 / 255.0)), 1.0 / static_cast<double>(n));
    const double lv = g.value(loss)[0];
    if (!std::isfinite(lv)) throw TrainingError("train_autoencoder: non-finite loss at step " + std::to_string(step), step);
    g.backward(loss);
    std::vector<Tensor> grads;
    for (Var v : p) grads.push_back(g.grad(v));
    opt.step(ae, grads, lr_at(cfg.lr_schedule, step));
  }
  return ae;
}

// Mean per-pixel squared error ([0,1] scale) of encode-then-decode.
inline double reconstruction_mse(const ModelParams& ae, const LabeledDataset& ds) {
  double s = 0.0;
  std::size_t count = 0;
  for (std::size_t at = 0; at < ds.size(); at += kEvalChunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = at; i < std::min(ds.size(), at + kEvalChunk); ++i) idx.push_back(i);
    const Tensor batch = stack_images(ds, idx);
    const Tensor obj = reconstruction_objective(ae, batch, encode(ae, batch));
    s += sum(obj);
    count += batch.size();
  }
  return s / static_cast<double>(count);
}

}  // namespace bdlab

#pragma once

// Poisoned training-set synthesis. Every method replaces the selected examples in
// place, marks them in poison_mask, and keeps the image as it was just before the
// trigger was stamped in provenance.pre_trigger.

#include <bdlab/dataset.hpp>
#include <bdlab/idx.hpp>
#include <bdlab/model.hpp>
#include <bdlab/optim.hpp>
#include <bdlab/trigger.hpp>

#include <algorithm>
#include <bit>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>

namespace bdlab {

enum class AttackMethod { standard, consistent_baseline, adversarial, latent_interp, pixel_interp };

inline std::string to_string(AttackMethod m) {
  switch (m) {
    case AttackMethod::standard: return "standard";
    case AttackMethod::consistent_baseline: return "consistent_baseline";
    case AttackMethod::adversarial: return "adversarial";
    case AttackMethod::latent_interp: return "latent_interp";
    case AttackMethod::pixel_interp: return "pixel_interp";
  }
  return "?";
}

inline AttackMethod parse_attack_method(const std::string& s) {
  for (auto m : {AttackMethod::standard, AttackMethod::consistent_baseline, AttackMethod::adversarial,
                 AttackMethod::latent_interp, AttackMethod::pixel_interp})
    if (s == to_string(m)) return m;
  throw std::invalid_argument("unknown attack method '" + s + "'");
}

enum class BudgetMode { count, class_fraction, dataset_fraction };

struct Budget {
  BudgetMode mode = BudgetMode::class_fraction;
  double value = 0.0;
};

inline std::string to_string(BudgetMode m) {
  switch (m) {
    case BudgetMode::count: return "count";
    case BudgetMode::class_fraction: return "class_fraction";
    case BudgetMode::dataset_fraction: return "dataset_fraction";
  }
  return "?";
}

inline BudgetMode parse_budget_mode(const std::string& s) {
  if (s == "count") return BudgetMode::count;
  if (s == "class_fraction") return BudgetMode::class_fraction;
  if (s == "dataset_fraction") return BudgetMode::dataset_fraction;
  throw std::invalid_argument("unknown budget mode '" + s + "'");
}

struct AttackConfig {
  AttackMethod method = AttackMethod::standard;
  Label target = 0;
  Budget budget;
  TriggerSpec trigger;
  PgdConfig pgd;
  double tau = 0.2;
  double noise_sigma = 0.0;
  InvertConfig invert;
  // Donor class for latent interpolation; unset picks (target + 1) mod k.
  std::optional<Label> donor_class;
  std::uint64_t seed = 0;
};

// Number of examples to poison. Fractions of the target class are taken relative to
// its size in ds; fractions of the dataset relative to ds.size(). Rounded to nearest.
inline std::size_t resolve_budget(const LabeledDataset& ds, const AttackConfig& cfg) {
  const double v = cfg.budget.value;
  if (!(v >= 0.0)) throw std::invalid_argument("budget must be non-negative");
  switch (cfg.budget.mode) {
    case BudgetMode::count: return static_cast<std::size_t>(std::llround(v));
    case BudgetMode::class_fraction:
      return static_cast<std::size_t>(std::llround(v * static_cast<double>(ds.indices_of_class(cfg.target).size())));
    case BudgetMode::dataset_fraction: return static_cast<std::size_t>(std::llround(v * static_cast<double>(ds.size())));
  }
  return 0;
}

class AttackError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

// Uniform sample without replacement, returned in ascending index order.
inline std::vector<std::size_t> sample_indices(std::vector<std::size_t> pool, std::size_t count, std::uint64_t seed) {
  if (count > pool.size())
    throw AttackError("budget " + std::to_string(count) + " exceeds the available pool of " + std::to_string(pool.size()));
  Rng rng(derive_seed(seed, "select"));
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(count);
  std::sort(pool.begin(), pool.end());
  return pool;
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

inline std::string attack_params(const AttackConfig& cfg) {
  std::string s = "target=" + std::to_string(cfg.target) + ";amp=" + fmt(cfg.trigger.amplitude) +
                  ";corners=" + (cfg.trigger.corners == Corners::four ? "four" : "one");
  switch (cfg.method) {
    case AttackMethod::adversarial:
      s += ";norm=" + to_string(cfg.pgd.norm) + ";eps=" + fmt(cfg.pgd.epsilon) + ";sigma=" + fmt(cfg.noise_sigma);
      break;
    case AttackMethod::latent_interp:
    case AttackMethod::pixel_interp: s += ";tau=" + fmt(cfg.tau); break;
    default: break;
  }
  return s;
}

inline void mark_poisoned(LabeledDataset& ds, std::size_t i, Image pre_trigger, const AttackConfig& cfg) {
  ds.images[i] = apply_trigger(pre_trigger, cfg.trigger);
  ds.poison_mask[i] = true;
  ds.provenance[i].method = to_string(cfg.method);
  ds.provenance[i].pre_trigger = std::move(pre_trigger);
  ds.provenance[i].params = attack_params(cfg);
}

inline void require_method(const AttackConfig& cfg, AttackMethod m) {
  if (cfg.method != m)
    throw AttackError("attack config method is " + to_string(cfg.method) + ", expected " + to_string(m));
}

}  // namespace detail

// i.i.d. N(0, sigma^2) per pixel, clipped to [0,255].
inline std::vector<Image> add_noise(std::span<const Image> images, double sigma, Rng& rng) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("add_noise: sigma must be non-negative");
  std::vector<Image> out(images.begin(), images.end());
  if (sigma == 0.0) return out;
  std::normal_distribution<double> nd(0.0, sigma);
  for (auto& img : out)
    for (auto& v : img.data()) v = std::clamp(v + nd(rng), 0.0, 255.0);
  return out;
}

// Target-class examples selected by a label-consistent method.
inline std::vector<std::size_t> select_target_examples(const LabeledDataset& ds, const AttackConfig& cfg) {
  return detail::sample_indices(ds.indices_of_class(cfg.target), resolve_budget(ds, cfg), cfg.seed);
}

inline LabeledDataset poison_standard(const LabeledDataset& ds, const AttackConfig& cfg) {
  detail::require_method(cfg, AttackMethod::standard);
  const auto sel = detail::sample_indices(all_indices(ds.size()), resolve_budget(ds, cfg), cfg.seed);
  LabeledDataset out = ds;
  for (std::size_t i : sel) {
    detail::mark_poisoned(out, i, ds.images[i], cfg);
    out.labels[i] = cfg.target;
  }
  return out;
}

inline LabeledDataset poison_consistent_baseline(const LabeledDataset& ds, const AttackConfig& cfg) {
  detail::require_method(cfg, AttackMethod::consistent_baseline);
  LabeledDataset out = ds;
  for (std::size_t i : select_target_examples(ds, cfg)) detail::mark_poisoned(out, i, ds.images[i], cfg);
  return out;
}

// Noise (optional), then PGD against the surrogate with the true label, then trigger.
inline LabeledDataset poison_adv(const LabeledDataset& ds, const AttackConfig& cfg, const ModelParams* surrogate) {
  detail::require_method(cfg, AttackMethod::adversarial);
  if (!surrogate) throw AttackError("adversarial attack needs a surrogate model");
  const auto sel = select_target_examples(ds, cfg);
  LabeledDataset out = ds;
  if (sel.empty()) return out;
  std::vector<Image> imgs;
  for (std::size_t i : sel) imgs.push_back(ds.images[i]);
  Rng noise_rng(derive_seed(cfg.seed, "noise"));
  imgs = add_noise(imgs, cfg.noise_sigma, noise_rng);
  std::vector<Label> labels(sel.size(), cfg.target);
  std::vector<Image> adv;
  for (std::size_t at = 0; at < imgs.size(); at += kEvalChunk) {
    const std::size_t len = std::min(kEvalChunk, imgs.size() - at);
    const Tensor batch = stack_images(std::span<const Image>(imgs).subspan(at, len));
    auto chunk = unstack_images(
        pgd_perturb_batch(*surrogate, batch, std::span<const Label>(labels).subspan(at, len), cfg.pgd));
    adv.insert(adv.end(), std::make_move_iterator(chunk.begin()), std::make_move_iterator(chunk.end()));
  }
  for (std::size_t j = 0; j < sel.size(); ++j) detail::mark_poisoned(out, sel[j], std::move(adv[j]), cfg);
  return out;
}

inline Label donor_class_for(const AttackConfig& cfg, std::size_t num_classes) {
  if (cfg.donor_class) return *cfg.donor_class;
  return static_cast<Label>((static_cast<std::size_t>(cfg.target) + 1) % std::max<std::size_t>(num_classes, 2));
}

// Invert the target-class image and a donor of the donor class, move tau of the way
// toward the donor in latent space, clip, trigger. Label stays the original one.
inline LabeledDataset poison_latent(const LabeledDataset& ds, const AttackConfig& cfg, const ModelParams& ae,
                                    const LabeledDataset& donors) {
  detail::require_method(cfg, AttackMethod::latent_interp);
  require_autoencoder(ae);
  if (!(cfg.tau >= 0.0 && cfg.tau <= 1.0)) throw AttackError("tau must be in [0,1]");
  const Label donor_class = donor_class_for(cfg, ds.num_classes);
  if (donor_class == cfg.target) throw AttackError("donor class must differ from the target class");
  const auto pool = donors.indices_of_class(donor_class);
  if (pool.empty()) throw AttackError("no donor images of class " + std::to_string(donor_class));
  const auto sel = select_target_examples(ds, cfg);
  LabeledDataset out = ds;
  if (sel.empty()) return out;
  Rng rng(derive_seed(cfg.seed, "donor"));
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  std::vector<Image> src, dst;
  for (std::size_t i : sel) {
    src.push_back(ds.images[i]);
    dst.push_back(donors.images[pool[pick(rng)]]);
  }
  const Inversion zs = latent_invert_batch(ae, stack_images(src), cfg.invert);
  const Inversion zd = latent_invert_batch(ae, stack_images(dst), cfg.invert);
  const std::size_t d = ae.outputs;
  for (std::size_t j = 0; j < sel.size(); ++j) {
    const Tensor a({d}, std::vector<double>(zs.z.raw() + j * d, zs.z.raw() + (j + 1) * d));
    const Tensor b({d}, std::vector<double>(zd.z.raw() + j * d, zd.z.raw() + (j + 1) * d));
    detail::mark_poisoned(out, sel[j], latent_interpolate(ae, a, b, cfg.tau), cfg);
  }
  return out;
}

// x' = (1 - tau) x + tau z with z drawn from the donor corpus (any class).
inline LabeledDataset poison_pixel(const LabeledDataset& ds, const AttackConfig& cfg, const LabeledDataset& donors) {
  detail::require_method(cfg, AttackMethod::pixel_interp);
  if (donors.empty()) throw AttackError("pixel interpolation needs a non-empty donor corpus");
  if (!(cfg.tau >= 0.0 && cfg.tau <= 1.0)) throw AttackError("tau must be in [0,1]");
  const auto sel = select_target_examples(ds, cfg);
  LabeledDataset out = ds;
  Rng rng(derive_seed(cfg.seed, "donor"));
  std::uniform_int_distribution<std::size_t> pick(0, donors.size() - 1);
  for (std::size_t i : sel) {
    const Image& z = donors.images[pick(rng)];
    ds.images[i].require_same_shape(z, "poison_pixel");
    Image mixed = ds.images[i];
    for (std::size_t j = 0; j < mixed.size(); ++j) mixed[j] = (1.0 - cfg.tau) * ds.images[i][j] + cfg.tau * z[j];
    detail::mark_poisoned(out, i, std::move(mixed), cfg);
  }
  return out;
}

// Optional inputs some methods need.
struct AttackResources {
  const ModelParams* surrogate = nullptr;
  const ModelParams* autoencoder = nullptr;
  const LabeledDataset* donors = nullptr;
};

inline LabeledDataset poison(const LabeledDataset& ds, const AttackConfig& cfg, const AttackResources& res = {}) {
  switch (cfg.method) {
    case AttackMethod::standard: return poison_standard(ds, cfg);
    case AttackMethod::consistent_baseline: return poison_consistent_baseline(ds, cfg);
    case AttackMethod::adversarial: return poison_adv(ds, cfg, res.surrogate);
    case AttackMethod::latent_interp:
      if (!res.autoencoder) throw AttackError("latent interpolation needs an autoencoder");
      return poison_latent(ds, cfg, *res.autoencoder, res.donors ? *res.donors : ds);
    case AttackMethod::pixel_interp:
      if (!res.donors) throw AttackError("pixel interpolation needs a donor corpus");
      return poison_pixel(ds, cfg, *res.donors);
  }
  throw AttackError("unknown attack method");
}

// --- audits --------------------------------------------------------------------------

struct AuditReport {
  bool label_consistent = true;      // poisoned labels equal the originals (non-standard methods)
  bool untouched_identical = true;   // non-selected examples bit-identical to the input
  bool trigger_last = true;          // stored pixels == apply_trigger(pre_trigger)
  bool pixel_range = true;
  double max_perturbation = 0.0;     // largest l_p distance outside trigger cells
  std::size_t poisoned = 0;
};

// Compares a poisoned dataset with the clean one it came from. The perturbation is
// measured in cfg.pgd.norm between pre-trigger and original pixels, with trigger
// cells excluded.
inline AuditReport audit_poisoned(const LabeledDataset& clean, const LabeledDataset& poisoned, const AttackConfig& cfg) {
  AuditReport r;
  if (clean.size() != poisoned.size()) throw std::invalid_argument("audit: dataset sizes differ");
  for (std::size_t i = 0; i < clean.size(); ++i) {
    for (double v : poisoned.images[i].data())
      if (!(v >= 0.0 && v <= 255.0)) r.pixel_range = false;
    if (!poisoned.poison_mask[i]) {
      if (!(poisoned.images[i] == clean.images[i]) || poisoned.labels[i] != clean.labels[i]) r.untouched_identical = false;
      continue;
    }
    ++r.poisoned;
    if (cfg.method != AttackMethod::standard && poisoned.labels[i] != clean.labels[i]) r.label_consistent = false;
    const auto& pre = poisoned.provenance[i].pre_trigger;
    if (!pre || !(apply_trigger(*pre, cfg.trigger) == poisoned.images[i])) {
      r.trigger_last = false;
      continue;
    }
    const Image restored = restore_trigger_cells(*pre, clean.images[i], cfg.trigger);
    const Tensor delta = restored - clean.images[i];
    r.max_perturbation = std::max(r.max_perturbation, lp_norm(delta.data(), cfg.pgd.norm));
  }
  return r;
}

// --- serialization ----------------------------------------------------------------------

inline std::uint64_t image_hash(const Image& img) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : img.data()) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int k = 0; k < 8; ++k) {
      h ^= (bits >> (8 * k)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

struct PoisonedPaths {
  std::string images, labels, provenance, pretrigger;

  static PoisonedPaths from_prefix(const std::string& prefix) {
    return {prefix + "-images.idx", prefix + "-labels.idx", prefix + "-provenance.txt", prefix + "-pretrigger.idx"};
  }
};

// IDX pair plus a sidecar with one line per row, "index origin method
// pre_trigger_hash params" ('-' for clean rows), and an images file holding the
// pre-trigger copies of the poisoned rows in row order.
inline void write_poisoned(const LabeledDataset& ds, const std::string& prefix) {
  const auto paths = PoisonedPaths::from_prefix(prefix);
  write_idx(ds, paths.images, paths.labels);
  std::ofstream prov(paths.provenance, std::ios::trunc);
  if (!prov) throw std::runtime_error(paths.provenance + ": cannot open for writing");
  prov << "# index origin method pre_trigger_hash params\n";
  std::vector<Image> pre;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& p = ds.provenance[i];
    prov << i << ' ' << p.origin << ' ' << p.method << ' ';
    if (ds.poison_mask[i]) {
      if (!p.pre_trigger) throw std::logic_error("poisoned example " + std::to_string(i) + " has no pre-trigger copy");
      prov << hex64(image_hash(*p.pre_trigger)) << ' ' << (p.params.empty() ? "-" : p.params) << '\n';
      pre.push_back(*p.pre_trigger);
    } else {
      prov << "- -\n";
    }
  }
  if (!pre.empty()) write_idx_images(paths.pretrigger, pre);
}

inline LabeledDataset read_poisoned(const std::string& prefix) {
  const auto paths = PoisonedPaths::from_prefix(prefix);
  LabeledDataset ds = load_idx(paths.images, paths.labels);
  std::ifstream prov(paths.provenance);
  if (!prov) throw std::runtime_error(paths.provenance + ": cannot open");
  std::vector<Image> pre;
  std::size_t row = 0, lines = 0;
  for (std::string line; std::getline(prov, line);) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::size_t idx;
    std::uint64_t origin;
    std::string method, hash, params;
    if (!(ls >> idx >> origin >> method >> hash >> params) || idx != lines++)
      throw std::runtime_error(paths.provenance + ": malformed line '" + line + "'");
    if (idx >= ds.size()) throw std::runtime_error(paths.provenance + ": more rows than " + paths.images);
    ds.provenance[idx].origin = origin;
    if (hash == "-") continue;
    if (pre.empty()) pre = read_idx_images(paths.pretrigger);
    if (row >= pre.size()) throw std::runtime_error(paths.pretrigger + ": fewer images than poisoned rows");
    if (hex64(image_hash(pre[row])) != hash)
      throw std::runtime_error(paths.provenance + ": pre-trigger hash mismatch for index " + std::to_string(idx));
    ds.poison_mask[idx] = true;
    ds.provenance[idx].method = method;
    ds.provenance[idx].params = params == "-" ? "" : params;
    ds.provenance[idx].pre_trigger = pre[row++];
  }
  if (lines != ds.size()) throw std::runtime_error(paths.provenance + ": row count does not match " + paths.images);
  return ds;
}

}  // namespace bdlab

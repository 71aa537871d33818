#pragma once

// End-to-end experiment pipeline: ingest -> split -> surrogate / autoencoder ->
// poison -> victim -> evaluation -> defense -> telemetry, driven by a flat config.
//
// Every random stream comes from derive_seed(seed, stage tag). Sweep replicates get
// their own master seed; sweep values never enter a seed, so cells that differ only
// in the swept value share data, surrogate and victim initialization.

#include <bdlab/attacks.hpp>
#include <bdlab/config.hpp>
#include <bdlab/defense.hpp>
#include <bdlab/idx.hpp>
#include <bdlab/imageio.hpp>
#include <bdlab/metrics.hpp>
#include <bdlab/synth.hpp>
#include <bdlab/train.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <unordered_set>

namespace bdlab {

// Desk-scale defaults. Order here is the order of the resolved config text.
inline const char* kDefaultSpec = R"(seed = 1
data.source = synth
data.synth.classes = 10
data.synth.per_class = 1500
data.synth.height = 16
data.synth.width = 16
data.synth.noise = 8
data.synth.contrast_min = 50
data.synth.contrast_max = 110
data.synth.background_min = 40
data.synth.background_max = 120
data.idx.images =
data.idx.labels =
split.train = 10000
split.test = 2000
split.trusted = 1024
split.heldout = 1976
victim.arch = cnn
victim.steps = 1000
victim.batch = 50
victim.lr = 0.03
victim.momentum = 0.9
victim.weight_decay = 0.0002
victim.augment.flip = false
victim.augment.crop_pad = 2
victim.augment.standardize = true
surrogate.arch = cnn
surrogate.adversarial = true
surrogate.corpus = train
surrogate.steps = 600
surrogate.batch = 50
surrogate.lr = 0.03
surrogate.momentum = 0.9
surrogate.weight_decay = 0.0002
surrogate.augment.flip = false
surrogate.augment.crop_pad = 0
surrogate.augment.standardize = true
surrogate.pgd.norm = inf
surrogate.pgd.epsilon = 8
surrogate.pgd.steps = 7
surrogate.pgd.step_size =
surrogate.warmup = 0.3
autoencoder.latent = 64
autoencoder.classes = pair
autoencoder.corpus = train
autoencoder.steps = 10000
autoencoder.batch = 50
autoencoder.lr = 1.0
autoencoder.momentum = 0.9
autoencoder.weight_decay = 0
attack.method = adversarial
attack.target = 0
attack.budget.mode = class_fraction
attack.budget.value = 0.06
attack.pgd.norm = 2
attack.pgd.epsilon = 300
attack.pgd.steps = 100
attack.pgd.step_size =
attack.tau = 0.2
attack.noise_sigma = 0
attack.donor_class =
attack.invert.steps = 1000
attack.invert.lr = 0.1
attack.invert.init = encoder
trigger.pattern = WBW/BWB/WBW
trigger.amplitude = 255
trigger.corners = four
trigger.margin = 0
eval.full_amplitude = 255
eval.clean_control = false
defense.enabled = true
defense.steps = 1000
defense.batch = 50
defense.lr = 0.03
defense.momentum = 0.9
defense.weight_decay = 0.0002
defense.k_fraction = 0.02
defense.curve_step = 0.01
telemetry.enabled = false
telemetry.interval_fraction = 0.02
output.dir =
output.save_poisoned = false
output.export_top = 0
)";

enum class Corpus { train, heldout, trusted };

inline Corpus parse_corpus(const std::string& key, const std::string& v) {
  if (v == "train") return Corpus::train;
  if (v == "heldout") return Corpus::heldout;
  if (v == "trusted") return Corpus::trusted;
  throw ConfigError("config key '" + key + "': expected train, heldout or trusted, got '" + v + "'");
}

struct SurrogateSpec {
  Arch arch = Arch::cnn;
  bool adversarial = true;
  Corpus corpus = Corpus::train;
  TrainConfig train;
  PgdConfig pgd;
  double warmup = 0.3;
};

struct AutoencoderSpec {
  std::size_t latent = 64;
  bool pair_only = true;
  Corpus corpus = Corpus::train;
  TrainConfig train;
};

struct DefenseSpec {
  bool enabled = true;
  TrainConfig train;
  double k_fraction = 0.02;
  double curve_step = 0.01;
};

struct ExperimentSpec {
  std::uint64_t seed = 1;
  std::string data_source = "synth";
  SynthSpec synth;
  std::string idx_images, idx_labels;
  std::size_t n_train = 0, n_test = 0, n_trusted = 0, n_heldout = 0;
  Arch victim_arch = Arch::cnn;
  TrainConfig victim;
  SurrogateSpec surrogate;
  AutoencoderSpec autoencoder;
  AttackConfig attack;
  double full_amplitude = 255.0;
  bool clean_control = false;
  DefenseSpec defense;
  bool telemetry = false;
  double telemetry_interval = 0.02;
  std::string out_dir;
  bool save_poisoned = false;
  std::size_t export_top = 0;

  Config config;            // resolved: defaults overridden by the user's keys
  std::string source_text;  // exactly what the user supplied

  std::string get(const std::string& key) const { return config.at(key); }
};

namespace detail {

inline TrainConfig read_train(const Config& c, const std::string& prefix, bool with_augment) {
  auto num = [&](const std::string& k) { return parse_double(prefix + k, c.at(prefix + k)); };
  TrainConfig t;
  t.steps = parse_uint(prefix + "steps", c.at(prefix + "steps"));
  t.batch = parse_uint(prefix + "batch", c.at(prefix + "batch"));
  t.momentum = num("momentum");
  t.weight_decay = num("weight_decay");
  t.lr_schedule = default_schedule(t.steps, num("lr"));
  if (with_augment) {
    t.augment.flip = parse_bool(prefix + "augment.flip", c.at(prefix + "augment.flip"));
    t.augment.crop_pad = parse_uint(prefix + "augment.crop_pad", c.at(prefix + "augment.crop_pad"));
    t.augment.standardize = parse_bool(prefix + "augment.standardize", c.at(prefix + "augment.standardize"));
  }
  t.validate();
  return t;
}

inline PgdConfig read_pgd(const Config& c, const std::string& prefix) {
  PgdConfig p;
  p.norm = parse_norm(c.at(prefix + "norm"));
  p.epsilon = parse_double(prefix + "epsilon", c.at(prefix + "epsilon"));
  p.steps = parse_uint(prefix + "steps", c.at(prefix + "steps"));
  if (const auto& s = c.at(prefix + "step_size"); !s.empty()) p.step_size = parse_double(prefix + "step_size", s);
  p.validate();
  return p;
}

inline Corners parse_corners(const std::string& v) {
  if (v == "one") return Corners::one;
  if (v == "four") return Corners::four;
  throw ConfigError("config key 'trigger.corners': expected one or four, got '" + v + "'");
}

}  // namespace detail

// Builds a spec from user keys on top of kDefaultSpec. Unknown keys are rejected so
// a typo cannot silently fall back to a default.
inline ExperimentSpec make_spec(const Config& user, std::string source_text = {}) {
  Config c = Config::parse(kDefaultSpec, "<defaults>");
  for (const auto& [k, v] : user.entries()) {
    if (!c.has(k)) throw ConfigError("unknown config key '" + k + "'");
    c.set(k, v);
  }
  ExperimentSpec s;
  auto u = [&](const std::string& k) { return parse_uint(k, c.at(k)); };
  auto d = [&](const std::string& k) { return parse_double(k, c.at(k)); };
  auto b = [&](const std::string& k) { return parse_bool(k, c.at(k)); };
  s.seed = u("seed");
  s.data_source = c.at("data.source");
  if (s.data_source != "synth" && s.data_source != "idx")
    throw ConfigError("config key 'data.source': expected synth or idx, got '" + s.data_source + "'");
  s.synth.classes = u("data.synth.classes");
  s.synth.per_class = u("data.synth.per_class");
  s.synth.height = u("data.synth.height");
  s.synth.width = u("data.synth.width");
  s.synth.noise_sd = d("data.synth.noise");
  s.synth.contrast_min = d("data.synth.contrast_min");
  s.synth.contrast_max = d("data.synth.contrast_max");
  s.synth.background_min = d("data.synth.background_min");
  s.synth.background_max = d("data.synth.background_max");
  s.synth.seed = derive_seed(s.seed, "data");
  s.idx_images = c.at("data.idx.images");
  s.idx_labels = c.at("data.idx.labels");
  s.n_train = u("split.train");
  s.n_test = u("split.test");
  s.n_trusted = u("split.trusted");
  s.n_heldout = u("split.heldout");

  s.victim_arch = parse_arch(c.at("victim.arch"));
  s.victim = detail::read_train(c, "victim.", true);
  s.victim.seed = derive_seed(s.seed, "victim");

  s.surrogate.arch = parse_arch(c.at("surrogate.arch"));
  s.surrogate.adversarial = b("surrogate.adversarial");
  s.surrogate.corpus = parse_corpus("surrogate.corpus", c.at("surrogate.corpus"));
  s.surrogate.train = detail::read_train(c, "surrogate.", true);
  s.surrogate.train.seed = derive_seed(s.seed, "surrogate");
  s.surrogate.pgd = detail::read_pgd(c, "surrogate.pgd.");
  if (!s.surrogate.pgd.step_size && s.surrogate.pgd.steps)
    s.surrogate.pgd.step_size = 2.5 * s.surrogate.pgd.epsilon / static_cast<double>(s.surrogate.pgd.steps);
  if (s.surrogate.pgd.step_size && *s.surrogate.pgd.step_size == 0.0) s.surrogate.pgd.step_size.reset();
  s.surrogate.warmup = d("surrogate.warmup");

  s.autoencoder.latent = u("autoencoder.latent");
  const std::string aec = c.at("autoencoder.classes");
  if (aec != "pair" && aec != "all")
    throw ConfigError("config key 'autoencoder.classes': expected pair or all, got '" + aec + "'");
  s.autoencoder.pair_only = aec == "pair";
  s.autoencoder.corpus = parse_corpus("autoencoder.corpus", c.at("autoencoder.corpus"));
  s.autoencoder.train = detail::read_train(c, "autoencoder.", false);
  s.autoencoder.train.seed = derive_seed(s.seed, "autoencoder");

  auto& a = s.attack;
  a.method = parse_attack_method(c.at("attack.method"));
  a.target = static_cast<Label>(u("attack.target"));
  a.budget.mode = parse_budget_mode(c.at("attack.budget.mode"));
  a.budget.value = d("attack.budget.value");
  a.pgd = detail::read_pgd(c, "attack.pgd.");
  a.tau = d("attack.tau");
  a.noise_sigma = d("attack.noise_sigma");
  if (const auto& dc = c.at("attack.donor_class"); !dc.empty())
    a.donor_class = static_cast<Label>(parse_uint("attack.donor_class", dc));
  a.invert.steps = u("attack.invert.steps");
  a.invert.step_size = d("attack.invert.lr");
  const std::string init = c.at("attack.invert.init");
  if (init != "encoder" && init != "random")
    throw ConfigError("config key 'attack.invert.init': expected encoder or random, got '" + init + "'");
  a.invert.init = init == "encoder" ? InvertInit::encoder : InvertInit::random;
  a.seed = derive_seed(s.seed, "attack");
  a.invert.seed = derive_seed(s.seed, "invert");
  a.trigger.pattern = parse_pattern(c.at("trigger.pattern"));
  a.trigger.amplitude = d("trigger.amplitude");
  a.trigger.corners = detail::parse_corners(c.at("trigger.corners"));
  a.trigger.margin = u("trigger.margin");

  s.full_amplitude = d("eval.full_amplitude");
  s.clean_control = b("eval.clean_control");
  s.defense.enabled = b("defense.enabled");
  s.defense.train = detail::read_train(c, "defense.", false);
  s.defense.train.seed = derive_seed(s.seed, "defense");
  s.defense.k_fraction = d("defense.k_fraction");
  s.defense.curve_step = d("defense.curve_step");
  s.telemetry = b("telemetry.enabled");
  s.telemetry_interval = d("telemetry.interval_fraction");
  s.out_dir = c.at("output.dir");
  s.save_poisoned = b("output.save_poisoned");
  s.export_top = u("output.export_top");
  s.config = std::move(c);
  s.source_text = source_text.empty() ? user.text() : std::move(source_text);
  return s;
}

inline void validate_spec(const ExperimentSpec& s) {
  auto fail = [](const std::string& m) { throw ConfigError("invalid spec: " + m); };
  if (s.n_train == 0 || s.n_test == 0) fail("split.train and split.test must be positive");
  if (s.attack.target < 0) fail("attack.target must be non-negative");
  if (s.data_source == "synth" && static_cast<std::size_t>(s.attack.target) >= s.synth.classes)
    fail("attack.target must be below data.synth.classes");
  if (s.data_source == "idx" && (s.idx_images.empty() || s.idx_labels.empty()))
    fail("data.source = idx needs data.idx.images and data.idx.labels");
  if (!(s.attack.tau >= 0.0 && s.attack.tau <= 1.0)) fail("attack.tau must be in [0,1]");
  if (!(s.attack.noise_sigma >= 0.0)) fail("attack.noise_sigma must be non-negative");
  if (!(s.attack.budget.value >= 0.0)) fail("attack.budget.value must be non-negative");
  if (s.attack.budget.mode != BudgetMode::count && s.attack.budget.value > 1.0)
    fail("fractional budgets must be in [0,1]");
  s.attack.trigger.validate();
  if (!(s.full_amplitude >= 0.0 && s.full_amplitude <= 255.0)) fail("eval.full_amplitude must be in [0,255]");
  if (s.surrogate.adversarial && !(s.surrogate.pgd.epsilon > 0.0)) fail("adversarial surrogate needs pgd epsilon > 0");
  if ((s.attack.method == AttackMethod::latent_interp || s.attack.method == AttackMethod::pixel_interp) &&
      s.n_heldout == 0)
    fail("interpolation attacks draw donors from the heldout split; split.heldout must be positive");
  if (s.defense.enabled && s.n_trusted == 0) fail("defense needs a trusted split");
  if (!(s.defense.k_fraction > 0.0 && s.defense.k_fraction <= 1.0)) fail("defense.k_fraction must be in (0,1]");
  if (!(s.defense.curve_step > 0.0 && s.defense.curve_step <= 1.0)) fail("defense.curve_step must be in (0,1]");
  if (!(s.telemetry_interval > 0.0 && s.telemetry_interval <= 1.0))
    fail("telemetry.interval_fraction must be in (0,1]");
  // The adversary's surrogate must never see the victim's test images; the test split
  // is not a selectable corpus, and split disjointness is audited at run time.
}

// Models and corpora shared between runs whose relevant keys agree.
struct ExperimentCache {
  std::map<std::string, LabeledDataset> corpora;
  std::map<std::string, ModelParams> models;
};

struct RunResult {
  std::string status = "ok";
  std::string failed_stage;
  std::string error;
  std::vector<std::pair<std::string, double>> metrics;
  EnrichmentCurve curve;
  Telemetry telemetry;

  bool ok() const { return status == "ok"; }

  bool has(const std::string& name) const {
    for (const auto& [k, v] : metrics)
      if (k == name) return true;
    return false;
  }

  double metric(const std::string& name) const {
    for (const auto& [k, v] : metrics)
      if (k == name) return v;
    throw std::out_of_range("run has no metric '" + name + "'");
  }

  void put(const std::string& name, double v) { metrics.emplace_back(name, v); }

  std::string csv() const {
    std::string out = "metric,value\n";
    for (const auto& [k, v] : metrics) out += k + "," + fixed6(v) + "\n";
    return out;
  }
};

class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error("stage " + stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

namespace detail {

// Cache key: the values of every config key under the given prefixes.
inline std::string cache_key(const ExperimentSpec& s, std::initializer_list<const char*> prefixes) {
  std::string key = "seed=" + s.config.at("seed");
  for (const auto& [k, v] : s.config.entries())
    for (const char* p : prefixes)
      if (k.rfind(p, 0) == 0) {
        key += ";" + k + "=" + v;
        break;
      }
  return key;
}

template <class F>
ModelParams cached_model(ExperimentCache* cache, const std::string& key, F&& make) {
  if (cache)
    if (auto it = cache->models.find(key); it != cache->models.end()) return it->second;
  ModelParams m = make();
  if (cache) cache->models.emplace(key, m);
  return m;
}

// Runs f, rethrowing anything but a StageError as one tagged with `stage`.
template <class F>
auto in_stage(const std::string& stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

}  // namespace detail

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error(path + ": cannot open for writing");
  f << text;
  if (!f) throw std::runtime_error(path + ": write failed");
}

struct Splits {
  LabeledDataset train, test, trusted, heldout;
  std::size_t num_classes = 0;

  const LabeledDataset& corpus(Corpus c) const {
    switch (c) {
      case Corpus::train: return train;
      case Corpus::heldout: return heldout;
      case Corpus::trusted: return trusted;
    }
    return train;
  }
};

// Stages "ingest" and "split": the corpus, its four disjoint splits, and the
// disjointness audits.
inline Splits prepare_data(const ExperimentSpec& s, ExperimentCache* cache = nullptr) {
  const LabeledDataset corpus = detail::in_stage("ingest", [&] {
    const std::string key = detail::cache_key(s, {"data."});
    if (cache)
      if (auto it = cache->corpora.find(key); it != cache->corpora.end()) return it->second;
    LabeledDataset c = s.data_source == "synth" ? synth_dataset(s.synth) : load_idx(s.idx_images, s.idx_labels);
    c.validate();
    if (cache) cache->corpora.emplace(key, c);
    return c;
  });
  return detail::in_stage("split", [&] {
    const std::size_t sizes[] = {s.n_train, s.n_test, s.n_trusted, s.n_heldout};
    auto parts = split(corpus, sizes, derive_seed(s.seed, "split"));
    Splits sp{std::move(parts[0]), std::move(parts[1]), std::move(parts[2]), std::move(parts[3]), corpus.num_classes};
    const LabeledDataset* all[] = {&sp.train, &sp.test, &sp.trusted, &sp.heldout};
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = i + 1; j < 4; ++j)
        if (!origins_disjoint(*all[i], *all[j])) throw std::logic_error("splits share an example");
    if (static_cast<std::size_t>(s.attack.target) >= sp.num_classes)
      throw std::invalid_argument("attack.target " + std::to_string(s.attack.target) + " outside the " +
                                  std::to_string(sp.num_classes) + " classes");
    return sp;
  });
}

inline ModelParams train_surrogate(const ExperimentSpec& s, const Splits& sp, ExperimentCache* cache = nullptr) {
  return detail::in_stage("surrogate", [&] {
    const LabeledDataset& sc = sp.corpus(s.surrogate.corpus);
    if (!origins_disjoint(sc, sp.test)) throw std::logic_error("surrogate corpus overlaps the victim test set");
    return detail::cached_model(cache, detail::cache_key(s, {"data.", "split.", "surrogate."}), [&] {
      ModelParams m = init_model(s.surrogate.arch, sc.image_shape(), sp.num_classes, s.surrogate.train.seed);
      return s.surrogate.adversarial
                 ? adv_train(std::move(m), sc, s.surrogate.train, s.surrogate.pgd, {}, s.surrogate.warmup)
                 : train(std::move(m), sc, s.surrogate.train);
    });
  });
}

// With autoencoder.classes = pair the autoencoder only sees the target and donor
// classes, the two ends of every interpolation.
inline ModelParams train_autoencoder_for(const ExperimentSpec& s, const Splits& sp, ExperimentCache* cache = nullptr) {
  return detail::in_stage("autoencoder", [&] {
    const Label donor = donor_class_for(s.attack, sp.num_classes);
    const LabeledDataset& ac = sp.corpus(s.autoencoder.corpus);
    const auto key = detail::cache_key(s, {"data.", "split.", "autoencoder.", "attack.target", "attack.donor_class"});
    return detail::cached_model(cache, key, [&] {
      LabeledDataset aeds = ac;
      if (s.autoencoder.pair_only) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < ac.size(); ++i)
          if (ac.labels[i] == s.attack.target || ac.labels[i] == donor) idx.push_back(i);
        aeds = ac.subset(idx);
      }
      return train_autoencoder(
          init_model(Arch::autoencoder, ac.image_shape(), s.autoencoder.latent, s.autoencoder.train.seed), aeds,
          s.autoencoder.train);
    });
  });
}

struct PoisonStage {
  LabeledDataset poisoned;
  AuditReport audit;
  std::size_t budget = 0;
  std::optional<double> autoencoder_mse;  // heldout reconstruction error, latent method only
};

// Stages "surrogate", "autoencoder" (when the method needs them) and "poison".
// Interpolation donors come from the heldout split.
inline PoisonStage make_poisoned(const ExperimentSpec& s, const Splits& sp, ExperimentCache* cache = nullptr) {
  PoisonStage out;
  AttackResources res;
  ModelParams surrogate, ae;
  if (s.attack.method == AttackMethod::adversarial) {
    surrogate = train_surrogate(s, sp, cache);
    res.surrogate = &surrogate;
  }
  if (s.attack.method == AttackMethod::latent_interp) {
    ae = train_autoencoder_for(s, sp, cache);
    res.autoencoder = &ae;
    out.autoencoder_mse = reconstruction_mse(ae, sp.heldout);
  }
  if (s.attack.method == AttackMethod::latent_interp || s.attack.method == AttackMethod::pixel_interp)
    res.donors = &sp.heldout;
  detail::in_stage("poison", [&] {
    out.poisoned = poison(sp.train, s.attack, res);
    out.poisoned.validate();
    out.audit = audit_poisoned(sp.train, out.poisoned, s.attack);
    out.budget = resolve_budget(sp.train, s.attack);
  });
  return out;
}

inline ModelParams train_victim(const ExperimentSpec& s, const LabeledDataset& ds, std::size_t num_classes,
                                const TelemetryHook& hook = {}) {
  return detail::in_stage("victim", [&] {
    TrainConfig cfg = s.victim;
    cfg.telemetry_interval = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(s.telemetry_interval * static_cast<double>(cfg.steps))));
    return train(init_model(s.victim_arch, ds.image_shape(), num_classes, cfg.seed), ds, cfg, hook);
  });
}

// Filter model trained on the trusted split. It only depends on the data and the
// defense keys, so it is shared between all attacks on the same data.
inline ModelParams filter_model(const ExperimentSpec& s, const Splits& sp, ExperimentCache* cache = nullptr) {
  return detail::in_stage("defense", [&] {
    return detail::cached_model(cache, detail::cache_key(s, {"data.", "split.", "defense."}), [&] {
      return filter_scores(sp.trusted, sp.trusted, s.defense.train).model;
    });
  });
}

struct DefenseStage {
  Tensor scores;
  EnrichmentCurve curve;
  std::size_t k = 0;
  std::size_t poisoned_in_top_k = 0;
  std::optional<double> enrichment;
  std::optional<double> median_poisoned;
  double median_clean = 0.0;
};

// Scores `ds` with the filter. Same checks as filter_scores: the trusted split must
// not share an origin with a poisoned example.
inline DefenseStage run_defense(const ExperimentSpec& s, const ModelParams& filter, const LabeledDataset& trusted,
                                const LabeledDataset& ds) {
  return detail::in_stage("defense", [&] {
    if (ds.empty()) throw std::invalid_argument("defense: empty dataset");
    std::unordered_set<std::uint64_t> poisoned_origins;
    for (std::size_t i : ds.poisoned_indices()) poisoned_origins.insert(ds.provenance[i].origin);
    for (const auto& p : trusted.provenance)
      if (poisoned_origins.count(p.origin)) throw OverlapError("trusted split overlaps a poisoned example");
    DefenseStage d;
    d.scores = per_example_loss(filter, ds);
    const std::size_t n = ds.size();
    auto frac = [n](double f) {
      return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(f * static_cast<double>(n))));
    };
    std::vector<std::size_t> ks;
    for (std::size_t k = frac(s.defense.curve_step); k < n; k += frac(s.defense.curve_step)) ks.push_back(k);
    ks.push_back(n);
    d.curve = enrichment_curve(d.scores, ds.poison_mask, ks);
    d.k = frac(s.defense.k_fraction);
    const std::size_t one[] = {d.k};
    d.poisoned_in_top_k = enrichment_curve(d.scores, ds.poison_mask, one).poisoned_in_top_k[0];
    if (d.curve.total_poisoned > 0) d.enrichment = enrichment_ratio(d.scores, ds.poison_mask, d.k);
    std::vector<double> sp, sc;
    for (std::size_t i = 0; i < n; ++i) (ds.poison_mask[i] ? sp : sc).push_back(d.scores[i]);
    if (!sp.empty()) d.median_poisoned = median(sp);
    if (!sc.empty()) d.median_clean = median(sc);
    return d;
  });
}

// Runs the whole pipeline. Stage failures do not throw: the failing stage and its
// message land in the result and, with an output dir, in status.txt.
inline RunResult run_experiment(const ExperimentSpec& s, ExperimentCache* cache = nullptr) {
  RunResult r;
  const bool write = !s.out_dir.empty();
  try {
    detail::in_stage("validate", [&] {
      if (write) {
        std::filesystem::create_directories(s.out_dir);
        write_text(s.out_dir + "/spec.txt", s.source_text);
        write_text(s.out_dir + "/resolved_spec.txt", s.config.text());
      }
      validate_spec(s);
    });
    const Splits sp = prepare_data(s, cache);
    const PoisonStage ps = make_poisoned(s, sp, cache);
    const LabeledDataset& poisoned = ps.poisoned;
    if (ps.autoencoder_mse) r.put("autoencoder_mse_heldout", *ps.autoencoder_mse);
    r.put("poison_count", static_cast<double>(poisoned.poison_count()));
    r.put("poison_budget", static_cast<double>(ps.budget));
    r.put("audit_label_consistent", ps.audit.label_consistent);
    r.put("audit_untouched_identical", ps.audit.untouched_identical);
    r.put("audit_trigger_last", ps.audit.trigger_last);
    r.put("audit_pixel_range", ps.audit.pixel_range);
    r.put("audit_max_perturbation", ps.audit.max_perturbation);
    if (write && s.save_poisoned)
      detail::in_stage("poison", [&] {
        std::filesystem::create_directories(s.out_dir + "/poisoned");
        write_poisoned(poisoned, s.out_dir + "/poisoned/train");
      });

    TelemetryHook hook;
    if (s.telemetry && poisoned.poison_count() > 0)
      hook = [&](std::size_t step, const ModelParams& m) {
        r.telemetry.rows.push_back(telemetry_record(m, poisoned, s.attack.trigger, step));
      };
    const ModelParams victim = train_victim(s, poisoned, sp.num_classes, hook);

    detail::in_stage("evaluate", [&] {
      r.put("clean_accuracy", clean_accuracy(victim, sp.test));
      r.put("asr_reduced", attack_success_rate(victim, sp.test, s.attack.trigger, s.attack.target));
      r.put("asr_full", attack_success_rate(victim, sp.test, s.attack.trigger.with_amplitude(s.full_amplitude),
                                            s.attack.target));
      if (s.clean_control) {
        const ModelParams control = detail::cached_model(
            cache, detail::cache_key(s, {"data.", "split.", "victim."}),
            [&] { return train_victim(s, sp.train, sp.num_classes); });
        const double acc = clean_accuracy(control, sp.test);
        r.put("control_accuracy", acc);
        r.put("accuracy_drop", acc - r.metric("clean_accuracy"));
        r.put("control_asr", attack_success_rate(control, sp.test, s.attack.trigger, s.attack.target));
      }
    });

    if (s.defense.enabled) {
      const DefenseStage d = run_defense(s, filter_model(s, sp, cache), sp.trusted, poisoned);
      r.curve = d.curve;
      r.put("defense_k", static_cast<double>(d.k));
      r.put("defense_poisoned_in_top_k", static_cast<double>(d.poisoned_in_top_k));
      if (d.enrichment) r.put("defense_enrichment", *d.enrichment);
      if (d.median_poisoned) r.put("defense_median_score_poisoned", *d.median_poisoned);
      r.put("defense_median_score_clean", d.median_clean);
      if (write && s.export_top > 0)
        detail::in_stage("defense", [&] {
          const auto order = rank_by_score(d.scores);
          const std::vector<std::size_t> top(order.begin(), order.begin() + std::min(s.export_top, order.size()));
          export_images(poisoned, top, s.out_dir + "/top_loss");
        });
    }

    if (!r.telemetry.rows.empty()) {
      const auto& last = r.telemetry.rows.back();
      r.put("telemetry_with_trigger_median", last.groups[0].median);
      r.put("telemetry_without_trigger_median", last.groups[1].median);
      r.put("telemetry_train_mean", last.groups[2].mean);
    }

    detail::in_stage("write", [&] {
      if (!write) return;
      write_text(s.out_dir + "/result.csv", r.csv());
      if (s.defense.enabled) write_text(s.out_dir + "/defense_curve.csv", r.curve.csv());
      if (!r.telemetry.rows.empty()) write_text(s.out_dir + "/telemetry.csv", r.telemetry.csv());
      write_text(s.out_dir + "/status.txt", "ok\n");
    });
  } catch (const StageError& e) {
    r.status = "failed";
    r.failed_stage = e.stage();
    r.error = e.what();
    if (write) {
      try {
        std::filesystem::create_directories(s.out_dir);
        write_text(s.out_dir + "/status.txt", "failed stage=" + e.stage() + "\n" + e.what() + "\n");
      } catch (const std::exception&) {
        // the status file is best effort; the result still carries the failure
      }
    }
  }
  return r;
}

// --- sweeps ----------------------------------------------------------------------------

struct SweepCell {
  std::string value;
  std::size_t replicate = 0;
  std::uint64_t seed = 0;
  RunResult result;
};

struct SweepResult {
  std::string axis;
  std::vector<SweepCell> cells;

  // Metric names in first-seen order over all successful cells.
  std::vector<std::string> metric_names() const {
    std::vector<std::string> names;
    for (const auto& c : cells)
      for (const auto& [k, v] : c.result.metrics)
        if (std::find(names.begin(), names.end(), k) == names.end()) names.push_back(k);
    return names;
  }

  std::string summary_csv() const {
    const auto names = metric_names();
    std::string out = "axis,value,replicate,seed,status";
    for (const auto& n : names) out += "," + n;
    out += "\n";
    for (const auto& c : cells) {
      out += axis + "," + c.value + "," + std::to_string(c.replicate) + "," + std::to_string(c.seed) + "," +
             c.result.status;
      for (const auto& n : names) out += "," + (c.result.has(n) ? fixed6(c.result.metric(n)) : std::string());
      out += "\n";
    }
    return out;
  }
};

inline std::uint64_t replicate_seed(std::uint64_t master, std::size_t replicate) {
  return replicate == 0 ? master : derive_seed(master, "replicate", replicate);
}

inline std::string sanitize_path_part(std::string s) {
  for (char& ch : s)
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '.' && ch != '-' && ch != '_') ch = '_';
  return s;
}

// Numeric values are run in ascending order; anything else in the given order.
inline std::vector<std::string> order_sweep_values(std::vector<std::string> values) {
  std::vector<std::pair<double, std::string>> num;
  for (const auto& v : values) {
    try {
      num.emplace_back(parse_double("sweep", v), v);
    } catch (const ConfigError&) {
      return values;
    }
  }
  std::stable_sort(num.begin(), num.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::string> out;
  for (auto& [d, v] : num) out.push_back(std::move(v));
  return out;
}

// One run per (replicate, value). A failing cell is recorded and the sweep goes on.
inline SweepResult sweep(const ExperimentSpec& base, const std::string& axis, std::vector<std::string> values,
                         std::size_t replicates = 1, ExperimentCache* cache = nullptr,
                         const std::function<void(const SweepCell&)>& progress = {}) {
  if (!base.config.has(axis)) throw ConfigError("sweep axis '" + axis + "' is not a spec key");
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  if (replicates == 0) throw ConfigError("sweep needs at least one replicate");
  values = order_sweep_values(std::move(values));
  ExperimentCache local;
  if (!cache) cache = &local;
  SweepResult out;
  out.axis = axis;
  for (std::size_t rep = 0; rep < replicates; ++rep)
    for (const auto& v : values) {
      Config c = base.config;
      const std::uint64_t seed = replicate_seed(base.seed, rep);
      c.set("seed", std::to_string(seed));
      c.set(axis, v);
      if (!base.out_dir.empty())
        c.set("output.dir", base.out_dir + "/" + sanitize_path_part(axis) + "=" + sanitize_path_part(v) + "/rep" +
                                std::to_string(rep));
      SweepCell cell{v, rep, seed, {}};
      try {
        cell.result = run_experiment(make_spec(c, base.source_text + "# sweep cell: seed = " + std::to_string(seed) +
                                                      ", " + axis + " = " + v + "\n"),
                                     cache);
      } catch (const std::exception& e) {
        cell.result.status = "failed";
        cell.result.failed_stage = "spec";
        cell.result.error = e.what();
      }
      if (progress) progress(cell);
      out.cells.push_back(std::move(cell));
    }
  if (!base.out_dir.empty()) {
    std::filesystem::create_directories(base.out_dir);
    write_text(base.out_dir + "/sweep_summary.csv", out.summary_csv());
  }
  return out;
}

// --- reports -----------------------------------------------------------------------------

struct RunRecord {
  std::string label;  // sweep value, or run directory
  std::size_t replicate = 0;
  std::string status = "ok";
  std::vector<std::pair<std::string, double>> metrics;

  std::optional<double> metric(const std::string& n) const {
    for (const auto& [k, v] : metrics)
      if (k == n) return v;
    return std::nullopt;
  }
};

struct Check {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct Report {
  std::string axis;
  std::vector<RunRecord> runs;
  std::vector<Check> checks;
  std::string runs_csv, aggregate_csv, summary;

  bool all_pass() const {
    return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass; });
  }
};

inline std::vector<RunRecord> records_from(const SweepResult& s) {
  std::vector<RunRecord> out;
  for (const auto& c : s.cells) out.push_back({c.value, c.replicate, c.result.status, c.result.metrics});
  return out;
}

// Axes along which the attack is expected to get stronger.
inline bool is_monotone_axis(const std::string& axis) {
  return axis == "attack.pgd.epsilon" || axis == "trigger.amplitude" || axis == "attack.budget.value";
}

// Per-run CSV, per-label aggregate (median and quartiles over replicates) and a
// pass/fail summary of the checks that apply to the runs and the swept axis.
inline Report emit_report(std::vector<RunRecord> runs, const std::string& axis = {}, const std::string& dir = {}) {
  if (runs.empty()) throw std::invalid_argument("emit_report: no runs");
  Report rep;
  rep.axis = axis;
  rep.runs = std::move(runs);

  std::vector<std::string> names, labels;
  for (const auto& r : rep.runs) {
    if (std::find(labels.begin(), labels.end(), r.label) == labels.end()) labels.push_back(r.label);
    for (const auto& [k, v] : r.metrics)
      if (std::find(names.begin(), names.end(), k) == names.end()) names.push_back(k);
  }

  rep.runs_csv = "label,replicate,status";
  for (const auto& n : names) rep.runs_csv += "," + n;
  rep.runs_csv += "\n";
  for (const auto& r : rep.runs) {
    rep.runs_csv += r.label + "," + std::to_string(r.replicate) + "," + r.status;
    for (const auto& n : names) rep.runs_csv += "," + (r.metric(n) ? fixed6(*r.metric(n)) : std::string());
    rep.runs_csv += "\n";
  }

  auto column = [&](const std::string& label, const std::string& name) {
    std::vector<double> v;
    for (const auto& r : rep.runs)
      if (r.label == label && r.status == "ok")
        if (auto m = r.metric(name)) v.push_back(*m);
    return v;
  };
  rep.aggregate_csv = "label,metric,n,median,q25,q75\n";
  for (const auto& l : labels)
    for (const auto& n : names) {
      const auto v = column(l, n);
      if (v.empty()) continue;
      const GroupStats g = group_stats(v);
      rep.aggregate_csv += l + "," + n + "," + std::to_string(v.size()) + "," + fixed6(g.median) + "," + fixed6(g.q25) +
                           "," + fixed6(g.q75) + "\n";
    }

  // Per-run checks.
  for (const auto& r : rep.runs) {
    const std::string id = r.label + "/rep" + std::to_string(r.replicate);
    rep.checks.push_back({"run_ok " + id, r.status == "ok", r.status});
    if (r.status != "ok") continue;
    for (const char* a : {"audit_label_consistent", "audit_untouched_identical", "audit_trigger_last", "audit_pixel_range"})
      if (auto v = r.metric(a)) rep.checks.push_back({std::string(a) + " " + id, *v == 1.0, fixed6(*v)});
    if (auto c = r.metric("poison_count"), b = r.metric("poison_budget"); c && b)
      rep.checks.push_back({"poison_count_matches_budget " + id, *c == *b, fixed6(*c) + " vs " + fixed6(*b)});
    if (auto red = r.metric("asr_reduced"), full = r.metric("asr_full"); red && full)
      rep.checks.push_back({"full_visibility_not_worse " + id, *full >= *red, fixed6(*full) + " >= " + fixed6(*red)});
  }

  // Axis trend checks over medians.
  if (!axis.empty() && labels.size() > 1) {
    std::vector<double> med;
    for (const auto& l : labels) {
      const auto v = column(l, "asr_reduced");
      med.push_back(v.empty() ? std::nan("") : median(v));
    }
    if (is_monotone_axis(axis)) {
      bool ok = true;
      std::string d;
      for (std::size_t i = 0; i < med.size(); ++i) {
        d += (i ? " <= " : "") + labels[i] + ":" + fixed6(med[i]);
        if (i && !(med[i] >= med[i - 1])) ok = false;
      }
      rep.checks.push_back({"median_asr_nondecreasing_in " + axis, ok, d});
    } else if (axis == "attack.noise_sigma") {
      const double best = *std::max_element(med.begin(), med.end());
      rep.checks.push_back({"median_asr_at_largest_sigma_not_above_best", med.back() <= best,
                            labels.back() + ":" + fixed6(med.back()) + " best " + fixed6(best)});
    }
  }

  std::size_t passed = 0;
  for (const auto& c : rep.checks) {
    rep.summary += std::string(c.pass ? "PASS " : "FAIL ") + c.name + " (" + c.detail + ")\n";
    passed += c.pass;
  }
  rep.summary += std::to_string(passed) + "/" + std::to_string(rep.checks.size()) + " checks passed\n";

  if (!dir.empty()) {
    std::filesystem::create_directories(dir);
    write_text(dir + "/runs.csv", rep.runs_csv);
    write_text(dir + "/aggregate.csv", rep.aggregate_csv);
    write_text(dir + "/summary.txt", rep.summary);
  }
  return rep;
}

// Reads result.csv and status.txt from a run directory.
inline RunRecord load_run_record(const std::string& dir) {
  RunRecord r;
  r.label = dir;
  std::ifstream st(dir + "/status.txt");
  if (!st) throw std::runtime_error(dir + ": no status.txt");
  std::getline(st, r.status);
  if (r.status.rfind("ok", 0) == 0) r.status = "ok";
  std::ifstream res(dir + "/result.csv");
  if (res) {
    std::string line;
    std::getline(res, line);  // header
    while (std::getline(res, line)) {
      const auto comma = line.find(',');
      if (comma == std::string::npos) continue;
      r.metrics.emplace_back(line.substr(0, comma), parse_double(line.substr(0, comma), line.substr(comma + 1)));
    }
  }
  return r;
}

// Reads a sweep_summary.csv back into records; returns the axis through `axis`.
inline std::vector<RunRecord> load_sweep_summary(const std::string& path, std::string& axis) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error(path + ": cannot open");
  std::string header;
  std::getline(f, header);
  std::vector<std::string> cols;
  {
    std::stringstream ss(header);
    for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
  }
  if (cols.size() < 5 || cols[0] != "axis") throw std::runtime_error(path + ": not a sweep summary");
  std::vector<RunRecord> out;
  for (std::string line; std::getline(f, line);) {
    std::vector<std::string> v;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) v.push_back(c);
    v.resize(cols.size());
    axis = v[0];
    RunRecord r;
    r.label = v[1];
    r.replicate = parse_uint("replicate", v[2]);
    r.status = v[4];
    for (std::size_t i = 5; i < cols.size(); ++i)
      if (!v[i].empty()) r.metrics.emplace_back(cols[i], parse_double(cols[i], v[i]));
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace bdlab

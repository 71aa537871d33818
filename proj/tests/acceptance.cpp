// Acceptance suite: the twelve criteria, one PASS/FAIL line each. Criteria 1-4 are
// property and oracle checks; 5-12 run the desk pipeline over three seeds. Runs with
// identical resolved specs are executed once and shared between criteria.

#include <bdlab/experiment.hpp>
#include <bdlab/gradcheck.hpp>
#include <bdlab/runtime.hpp>

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <numeric>

using namespace bdlab;

namespace {

constexpr std::size_t kSeeds = 3;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string num(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

// --- criterion 1 ---------------------------------------------------------------------

Tensor flatten_params(const std::vector<Tensor>& ts) {
  std::vector<double> v;
  for (const auto& t : ts) v.insert(v.end(), t.data().begin(), t.data().end());
  const Shape shape{v.size()};
  return Tensor(shape, std::move(v));
}

ModelParams unflatten(ModelParams m, const Tensor& flat) {
  std::size_t at = 0;
  for (auto& p : m.params)
    for (auto& v : p.data()) v = flat[at++];
  return m;
}

double ae_loss(const ModelParams& ae, const Tensor& batch, std::vector<Tensor>* grads) {
  Graph g;
  auto p = bind_params(g, ae, grads != nullptr);
  Var rec = decoder_graph(g, ae, p, encoder_graph(g, ae, p, g.constant(batch)));
  Var loss = g.scale(g.sum_squares(g.scale(g.sub(rec, g.constant(batch)), 1.0 / 255.0)),
                     1.0 / static_cast<double>(batch.size()));
  const double out = g.value(loss)[0];
  if (grads) {
    g.backward(loss);
    for (Var v : p) grads->push_back(g.grad(v));
  }
  return out;
}

Outcome criterion1() {
  const auto t0 = Clock::now();
  const Shape shape{8, 8, 1};
  double worst = 0.0;
  std::size_t coords = 0;
  std::string per_arch;
  for (Arch arch : {Arch::cnn, Arch::mlp, Arch::autoencoder}) {
    double arch_worst = 0.0;
    for (std::uint64_t point = 0; point < 10; ++point) {
      const std::vector<std::size_t> widths =
          arch == Arch::cnn ? std::vector<std::size_t>{4, 6, 12}
                            : (arch == Arch::mlp ? std::vector<std::size_t>{12, 10} : std::vector<std::size_t>{});
      const ModelParams m = init_model(arch, shape, arch == Arch::autoencoder ? 6 : 5, 100 + point, widths);
      Rng rng(derive_seed(7, "gradcheck", point));
      std::uniform_real_distribution<double> px(0.0, 255.0);
      std::vector<Image> imgs(4, Image(shape));
      for (auto& img : imgs)
        for (auto& v : img.data()) v = px(rng);
      const Tensor batch = stack_images(imgs);
      const std::vector<Label> labels{0, 1, 2, 4};
      const Tensor theta = flatten_params(m.params);
      Tensor grad;
      std::function<double(const Tensor&)> f;
      if (arch == Arch::autoencoder) {
        std::vector<Tensor> g;
        ae_loss(m, batch, &g);
        grad = flatten_params(g);
        f = [&](const Tensor& t) { return ae_loss(unflatten(m, t), batch, nullptr); };
      } else {
        grad = flatten_params(loss_and_grad(m, batch, labels).grads);
        f = [&](const Tensor& t) { return loss_and_grad(unflatten(m, t), batch, labels).loss; };
      }
      const auto r = finite_diff_check(f, grad, theta, 1e-6, 100, point);
      arch_worst = std::max(arch_worst, r.max_rel_error);
      coords += r.coords_checked;
      if (arch != Arch::autoencoder) {
        // The input gradient drives PGD; check it on the same points.
        const Tensor gx = input_gradient(m, batch, labels).grad;
        const auto fx = [&](const Tensor& x) { return loss_and_grad(m, x, labels).loss * 4.0; };
        const auto rx = finite_diff_check(fx, gx, batch, 1e-4, 100, point + 50);
        arch_worst = std::max(arch_worst, rx.max_rel_error);
        coords += rx.coords_checked;
      }
    }
    per_arch += to_string(arch) + " " + num(arch_worst, 8) + "; ";
    worst = std::max(worst, arch_worst);
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-3 && secs < 60.0,
          "max relative error " + num(worst, 8) + " over " + std::to_string(coords) + " coordinates (" + per_arch +
              "limit 1e-3), " + num(secs, 1) + " s (limit 60)"};
}

// --- criterion 2 ---------------------------------------------------------------------

Outcome criterion2() {
  const auto m = init_model(Arch::mlp, {8, 8, 1}, 4, 1, {16, 16});
  Rng rng(2);
  std::size_t runs = 0, ok = 0;
  for (int call = 0; call < 50; ++call) {
    const Norm p = call % 2 ? Norm::l2 : Norm::linf;
    const double eps = p == Norm::l2 ? std::uniform_real_distribution<double>(1.0, 2000.0)(rng)
                                     : std::uniform_real_distribution<double>(1.0, 128.0)(rng);
    std::vector<Image> imgs(20, Image(Shape{8, 8, 1}));
    std::uniform_real_distribution<double> px(0.0, 255.0);
    for (auto& img : imgs)
      for (auto& v : img.data()) v = std::round(px(rng));
    std::vector<Label> labels(20);
    for (std::size_t i = 0; i < 20; ++i) labels[i] = static_cast<Label>(i % 4);
    const Tensor clean = stack_images(imgs);
    PgdConfig cfg;
    cfg.norm = p;
    cfg.epsilon = eps;
    cfg.steps = 5;
    const Tensor adv = pgd_perturb_batch(m, clean, labels, cfg);
    for (std::size_t i = 0; i < 20; ++i, ++runs) {
      std::vector<double> d(64);
      bool in_range = true;
      for (std::size_t j = 0; j < 64; ++j) {
        d[j] = adv[i * 64 + j] - clean[i * 64 + j];
        in_range = in_range && adv[i * 64 + j] >= 0.0 && adv[i * 64 + j] <= 255.0;
      }
      ok += in_range && lp_norm(d, p) <= eps * (1.0 + 1e-6);
    }
  }
  std::size_t idem = 0;
  for (int t = 0; t < 1000; ++t) {
    const Norm p = t % 2 ? Norm::l2 : Norm::linf;
    std::normal_distribution<double> nd(0.0, 10.0);
    std::vector<double> v(1 + t % 40);
    for (auto& x : v) x = nd(rng);
    project_lp_inplace(v, p, 5.0);
    auto w = v;
    project_lp_inplace(w, p, 5.0);
    bool same = true;
    for (std::size_t i = 0; i < v.size(); ++i) same = same && std::abs(w[i] - v[i]) <= 1e-12 * (1.0 + std::abs(v[i]));
    idem += same;
  }
  std::vector<double> v(100);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& x : v) x = nd(rng);
  const double n0 = l2_norm(v);
  for (auto& x : v) x *= 600.0 / n0;
  auto half = v;
  project_lp_inplace(half, Norm::l2, 300.0);
  double dev = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) dev = std::max(dev, std::abs(half[i] - 0.5 * v[i]));
  const bool pass = ok == runs && runs == 1000 && idem == 1000 && dev <= 1e-12;
  return {pass, std::to_string(ok) + "/" + std::to_string(runs) + " PGD runs inside ball and [0,255]; " +
                    std::to_string(idem) + "/1000 projections idempotent; norm-600 -> eps 300 max deviation from 0.5x " +
                    num(dev, 15)};
}

// --- criterion 3 ---------------------------------------------------------------------

Outcome criterion3() {
  SynthSpec s;
  s.classes = 10;
  s.per_class = 30;
  s.seed = 3;
  const auto ds = synth_dataset(s);
  const auto m = train(init_model(Arch::cnn, ds.image_shape(), 10, 4), ds, make_train_config(150, 5, 0.03));
  const LabeledDataset fixture = ds.subset(all_indices(20));
  std::size_t checked = 0, exact = 0;
  for (double amp : {32.0, 128.0, 255.0})
    for (Label target = 0; target < 10; ++target) {
      const TriggerSpec t = TriggerSpec{}.with_amplitude(amp);
      std::size_t eligible = 0, hits = 0;
      for (std::size_t i = 0; i < fixture.size(); ++i) {
        if (fixture.labels[i] == target) continue;
        ++eligible;
        const Image one[] = {apply_trigger(fixture.images[i], t)};
        hits += predict(m, one).front() == target;
      }
      ++checked;
      exact += attack_success_rate(m, fixture, t, target) == static_cast<double>(hits) / static_cast<double>(eligible);
    }
  return {exact == checked, std::to_string(exact) + "/" + std::to_string(checked) +
                                " (amplitude, target) cases equal the brute-force count on a 20-example fixture"};
}

// --- criterion 4 ---------------------------------------------------------------------

Outcome criterion4() {
  std::size_t cases = 0, ok = 0;
  Rng rng(4);
  std::uniform_int_distribution<int> px(0, 255);
  for (std::uint64_t f = 0; f < 40; ++f) {
    const std::size_t c = f % 2 ? 3 : 1, h = 8 + f % 5, w = 8 + (f / 2) % 5;
    Image x(Shape{h, w, c});
    for (auto& v : x.data()) v = px(rng);
    TriggerSpec one;
    TriggerSpec four;
    four.corners = Corners::four;
    four.amplitude = f % 3 ? 255.0 : 70.0;
    ok += apply_trigger(x, one.with_amplitude(0.0)) == x;
    ok += apply_trigger(x, four.with_amplitude(0.0)) == x;
    ok += apply_trigger(flip_horizontal(x), four) == flip_horizontal(apply_trigger(x, four));
    ok += apply_trigger(flip_vertical(x), four) == flip_vertical(apply_trigger(x, four));
    cases += 4;
    // Mid-gray plus full amplitude clips to a pure black/white pattern.
    const Image gray(Shape{h, w, c}, 128.0);
    const Image y = apply_trigger(gray, four.with_amplitude(255.0));
    const auto field = trigger_field(h, w, four);
    bool pure = true;
    for (std::size_t i = 0; i < h * w; ++i)
      for (std::size_t ch = 0; ch < c; ++ch)
        pure = pure && y[i * c + ch] == (field[i] > 0 ? 255.0 : field[i] < 0 ? 0.0 : 128.0);
    ok += pure;
    ++cases;
  }
  return {ok == cases, std::to_string(ok) + "/" + std::to_string(cases) +
                           " exact identities (amplitude-0, mid-gray replacement, four-corner flips) on 40 fixtures"};
}

// --- desk runs -------------------------------------------------------------------------

class Desk {
 public:
  explicit Desk(std::string workdir) : workdir_(std::move(workdir)) {}

  // Runs (or recalls) the desk spec with the given overrides for replicate r.
  const RunResult& run(const std::vector<std::string>& overrides, std::size_t r, const std::string& label) {
    Config c;
    for (const auto& kv : overrides) c.set_assignment(kv);
    c.set("seed", std::to_string(replicate_seed(1, r)));
    const std::string key = make_spec(c).config.text();
    if (auto it = memo_.find(key); it != memo_.end()) return it->second;
    const std::string dir = workdir_ + "/runs/" + sanitize_path_part(label) + "/rep" + std::to_string(r);
    c.set("output.dir", dir);
    std::string text = "# acceptance run " + label + "\n";
    for (const auto& [k, v] : c.entries()) text += k + " = " + v + "\n";
    const auto t0 = Clock::now();
    RunResult res = run_experiment(make_spec(c, text), &cache_);
    std::fprintf(stderr, "[acceptance] %-28s rep%zu %s asr=%s (%.0f s)\n", label.c_str(), r, res.status.c_str(),
                 res.has("asr_reduced") ? num(res.metric("asr_reduced")).c_str() : "-", seconds_since(t0));
    if (!res.ok()) std::fprintf(stderr, "[acceptance]   %s\n", res.error.c_str());
    records_.push_back({label, r, res.status, res.metrics});
    dirs_[key] = dir;
    return memo_.emplace(key, std::move(res)).first->second;
  }

  // Metric over the seeds; NaN where a run failed.
  std::vector<double> metric(const std::vector<std::string>& overrides, const std::string& label,
                             const std::string& name) {
    std::vector<double> out;
    for (std::size_t r = 0; r < kSeeds; ++r) {
      const RunResult& res = run(overrides, r, label);
      out.push_back(res.ok() && res.has(name) ? res.metric(name) : std::nan(""));
    }
    return out;
  }

  const std::vector<RunRecord>& records() const { return records_; }
  const std::string& workdir() const { return workdir_; }

 private:
  std::string workdir_;
  ExperimentCache cache_;
  std::map<std::string, RunResult> memo_;
  std::map<std::string, std::string> dirs_;
  std::vector<RunRecord> records_;
};

bool all_finite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

double med(const std::vector<double>& v) { return all_finite(v) ? median(v) : std::nan(""); }

std::string list(const std::vector<double>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + num(v[i], 3);
  return s + "]";
}

// The canonical "large" adversarial setting used wherever the criteria say large eps.
const std::vector<std::string> kAdvLarge = {"attack.method=adversarial", "attack.pgd.norm=2", "attack.pgd.epsilon=600"};

std::vector<std::string> with(std::vector<std::string> base, std::initializer_list<std::string> more) {
  base.insert(base.end(), more);
  return base;
}

Outcome criterion5(Desk& d) {
  const auto t0 = Clock::now();
  const std::vector<std::string> o = {"attack.method=standard", "attack.budget.mode=dataset_fraction",
                                      "attack.budget.value=0.005", "eval.clean_control=true"};
  const auto asr = d.metric(o, "standard-0.5pct", "asr_reduced");
  const auto drop = d.metric(o, "standard-0.5pct", "accuracy_drop");
  const auto count = d.metric(o, "standard-0.5pct", "poison_count");
  double worst = 0.0;
  for (double x : drop) worst = std::max(worst, std::isfinite(x) ? std::abs(x) : 1.0);
  const double secs = seconds_since(t0);
  const bool pass = med(asr) >= 0.80 && worst <= 0.02 && secs <= 900.0;
  return {pass, "median ASR " + num(med(asr)) + " >= 0.80 " + list(asr) + "; poisons " + list(count) +
                    "; max |clean accuracy - control| " + num(worst) + " <= 0.02 " + list(drop) + "; " +
                    num(secs, 0) + " s (limit 900)"};
}

Outcome criterion6(Desk& d) {
  const auto base = d.metric({"attack.method=consistent_baseline"}, "baseline", "asr_reduced");
  const auto adv = d.metric(kAdvLarge, "adv-l2-600", "asr_reduced");
  const auto pixel = d.metric({"attack.method=pixel_interp", "attack.tau=0.2"}, "pixel-0.2", "asr_reduced");
  const auto latent = d.metric({"attack.method=latent_interp", "attack.tau=0.2"}, "latent-0.2", "asr_reduced");
  const double mb = med(base), ma = med(adv), mp = med(pixel), ml = med(latent);
  const bool pass = ma >= 2.0 * mb && mp > mb && ml > mb;
  return {pass, "median ASR baseline " + num(mb) + " " + list(base) + ", adversarial l2 600 " + num(ma) + " " +
                    list(adv) + " (needs >= " + num(2.0 * mb) + "), pixel 0.2 " + num(mp) + " " + list(pixel) +
                    ", latent 0.2 " + num(ml) + " " + list(latent) + " (both need > baseline)"};
}

Outcome criterion7(Desk& d) {
  bool pass = true;
  std::string detail;
  for (const auto& [norm, values] : std::vector<std::pair<std::string, std::vector<std::string>>>{
           {"2", {"150", "300", "600"}}, {"inf", {"16", "32", "64"}}}) {
    detail += "l" + norm + ":";
    double last = -1.0;
    for (const auto& e : values) {
      const auto asr = d.metric({"attack.method=adversarial", "attack.pgd.norm=" + norm, "attack.pgd.epsilon=" + e},
                                "adv-l" + norm + "-" + e, "asr_reduced");
      const double m = med(asr);
      pass = pass && m >= last;
      last = m;
      detail += " eps " + e + " " + num(m) + " " + list(asr) + ";";
    }
    detail += " ";
  }
  return {pass, detail + "(medians must be non-decreasing)"};
}

Outcome criterion8(Desk& d) {
  const auto red = d.metric(with(kAdvLarge, {"trigger.amplitude=16"}), "adv-amp-16", "asr_reduced");
  const auto full = d.metric(with(kAdvLarge, {"trigger.amplitude=16"}), "adv-amp-16", "asr_full");
  bool every = all_finite(red) && all_finite(full);
  for (std::size_t i = 0; i < red.size(); ++i) every = every && full[i] >= red[i];
  std::string detail = "amplitude 16: full " + list(full) + " >= reduced " + list(red) + " in every seed; sweep medians";
  bool mono = true;
  double last = -1.0;
  for (const char* a : {"16", "32", "64", "255"}) {
    const auto asr = std::string(a) == "255" ? d.metric(kAdvLarge, "adv-l2-600", "asr_reduced")
                                             : d.metric(with(kAdvLarge, {std::string("trigger.amplitude=") + a}),
                                                        std::string("adv-amp-") + a, "asr_reduced");
    const double m = med(asr);
    mono = mono && m >= last;
    last = m;
    detail += std::string(" ") + a + ":" + num(m);
  }
  return {every && mono, detail + " (non-decreasing)"};
}

Outcome criterion9(Desk& d) {
  // Desk-calibrated thresholds, recorded here and in the report.
  constexpr double kSuccess = 0.5, kRatio = 5.0;
  std::size_t successful = 0, holding = 0;
  std::string detail;
  for (std::size_t r = 0; r < kSeeds; ++r) {
    const RunResult& res = d.run(with(kAdvLarge, {"telemetry.enabled=true", "telemetry.interval_fraction=0.1"}), r,
                                 "adv-l2-600-telemetry");
    if (!res.ok()) {
      detail += "seed " + std::to_string(r) + " failed; ";
      continue;
    }
    const double asr = res.metric("asr_reduced");
    const double without = res.metric("telemetry_without_trigger_median"),
                 with_t = res.metric("telemetry_with_trigger_median"), mean = res.metric("telemetry_train_mean");
    const bool ok = without >= kRatio * mean && with_t <= mean;
    detail += "seed " + std::to_string(r) + ": ASR " + num(asr) + ", without-trigger median " + num(without, 5) +
              ", with-trigger median " + num(with_t, 6) + ", train mean " + num(mean, 6) + (ok ? " ok" : " VIOLATED") +
              "; ";
    if (asr >= kSuccess) {
      ++successful;
      holding += ok;
    }
  }
  return {successful > 0 && holding == successful,
          detail + std::to_string(holding) + "/" + std::to_string(successful) + " successful runs (ASR >= " +
              num(kSuccess, 2) + ") satisfy without >= " + num(kRatio, 1) + "x mean and with <= mean"};
}

Outcome criterion10(Desk& d) {
  const auto std_e = d.metric({"attack.method=standard"}, "standard-6pct", "defense_enrichment");
  const auto adv_e = d.metric(kAdvLarge, "adv-l2-600", "defense_enrichment");
  const auto std_n = d.metric({"attack.method=standard"}, "standard-6pct", "poison_count");
  const auto adv_n = d.metric(kAdvLarge, "adv-l2-600", "poison_count");
  const double ms = med(std_e), ma = med(adv_e);
  const bool first = ms >= 10.0, second = ma <= 0.5 * ms;
  return {first && second, "k = 2% of n; median enrichment standard " + num(ms, 2) + " " + list(std_e) +
                               " (needs >= 10: " + (first ? "met" : "not met") + "), adversarial l2 600 " + num(ma, 2) +
                               " " + list(adv_e) + " (needs <= " + num(0.5 * ms, 2) + ": " +
                               (second ? "met" : "not met") + "); poisons " + list(std_n) + " vs " + list(adv_n)};
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

Outcome criterion11(const std::string& workdir) {
  // Two fresh runs of the same spec with no shared cache: every CSV must match byte for byte.
  Config c;
  c.set("seed", "5");
  c.set("attack.method", "consistent_baseline");
  c.set("telemetry.enabled", "true");
  c.set("telemetry.interval_fraction", "0.25");
  c.set("victim.steps", "400");
  c.set("defense.steps", "400");
  std::string dirs[2];
  for (int i = 0; i < 2; ++i) {
    dirs[i] = workdir + "/determinism/run" + std::to_string(i);
    std::filesystem::remove_all(dirs[i]);
    Config ci = c;
    ci.set("output.dir", dirs[i]);
    const RunResult r = run_experiment(make_spec(ci, "# determinism check\n"));
    if (!r.ok()) return {false, "run failed: " + r.error};
  }
  std::size_t compared = 0, same = 0;
  for (const auto& e : std::filesystem::directory_iterator(dirs[0])) {
    if (e.path().extension() != ".csv") continue;
    const std::string name = e.path().filename().string();
    ++compared;
    same += read_file(e.path().string()) == read_file(dirs[1] + "/" + name);
  }
  return {compared >= 3 && same == compared,
          std::to_string(same) + "/" + std::to_string(compared) + " CSVs byte-identical across two uncached runs"};
}

Outcome criterion12(Desk& d) {
  std::vector<double> meds;
  std::string detail;
  for (const char* s : {"0", "10", "30", "100"}) {
    const auto asr = std::string(s) == "0" ? d.metric(kAdvLarge, "adv-l2-600", "asr_reduced")
                                           : d.metric(with(kAdvLarge, {std::string("attack.noise_sigma=") + s}),
                                                      std::string("adv-sigma-") + s, "asr_reduced");
    meds.push_back(med(asr));
    detail += std::string("sigma ") + s + " " + num(meds.back()) + " " + list(asr) + "; ";
  }
  const double best = *std::max_element(meds.begin(), meds.end());
  const auto argbest = std::max_element(meds.begin(), meds.end()) - meds.begin();
  const char* names[] = {"0", "10", "30", "100"};
  return {std::isfinite(best) && meds.back() <= best,
          detail + "sigma 100 median " + num(meds.back()) + " <= best " + num(best) + " (at sigma " + names[argbest] +
              ")"};
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  CLI::App app{"acceptance criteria"};
  std::string workdir = "acceptance_runs";
  std::vector<int> only;
  app.add_option("--workdir", workdir, "directory for run outputs and the report");
  app.add_option("--only", only, "run only these criteria (1-12)");
  CLI11_PARSE(app, argc, argv);
  std::filesystem::create_directories(workdir);

  Desk desk(workdir);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"numeric kernel gradients", criterion1},
      {"solver contracts", criterion2},
      {"ASR oracle", criterion3},
      {"trigger algebra", criterion4},
      {"standard attack effectiveness", [&] { return criterion5(desk); }},
      {"baseline vs label-consistent methods", [&] { return criterion6(desk); }},
      {"perturbation-strength monotonicity", [&] { return criterion7(desk); }},
      {"trigger visibility", [&] { return criterion8(desk); }},
      {"telemetry", [&] { return criterion9(desk); }},
      {"detection asymmetry", [&] { return criterion10(desk); }},
      {"determinism", [&] { return criterion11(workdir); }},
      {"gaussian-noise extreme", [&] { return criterion12(desk); }},
  };

  std::string lines;
  std::size_t failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    const std::string line =
        std::string(o.pass ? "PASS" : "FAIL") + " criterion " + std::to_string(id) + " (" + criteria[i].first + "): " +
        o.detail + "\n";
    std::fputs(line.c_str(), stdout);
    std::fflush(stdout);
    lines += line;
  }
  write_text(workdir + "/acceptance.txt", lines);
  if (!desk.records().empty()) emit_report(desk.records(), {}, workdir + "/report");
  return failed == 0 ? 0 : 1;
}

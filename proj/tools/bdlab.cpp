// Command-line front end. Every subcommand takes the same spec keys: --config FILE,
// then one --<key> flag per spec key (e.g. --attack.method adversarial), then
// --set key=value overrides, applied in that order.

#include <bdlab/experiment.hpp>
#include <bdlab/runtime.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

namespace {

using namespace bdlab;

struct SpecFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::map<std::string, std::string> keys;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "spec file (key = value lines)");
    app->add_option("--set", sets, "key=value override, repeatable");
    const Config defaults = Config::parse(kDefaultSpec, "<defaults>");
    for (const auto& [k, v] : defaults.entries())
      app->add_option("--" + k, keys[k], "default: " + (v.empty() ? std::string("(unset)") : v))->group("Spec keys");
  }

  ExperimentSpec resolve(CLI::App* app) const {
    Config user;
    std::string text;
    if (!config_path.empty()) {
      std::ifstream f(config_path);
      if (!f) throw ConfigError(config_path + ": cannot open config");
      std::stringstream ss;
      ss << f.rdbuf();
      text = ss.str();
      user = Config::parse(text, config_path);
    }
    std::string extra;
    for (const auto& [k, v] : keys)
      if (app->count("--" + k)) {
        user.set(k, v);
        extra += k + " = " + v + "\n";
      }
    for (const auto& kv : sets) {
      user.set_assignment(kv);
      extra += kv + "\n";
    }
    if (!extra.empty()) text += "# command-line overrides\n" + extra;
    return make_spec(user, text.empty() ? std::string("# defaults only\n") : text);
  }
};

void print_metrics(const std::vector<std::pair<std::string, double>>& metrics) {
  for (const auto& [k, v] : metrics) std::printf("%s,%s\n", k.c_str(), fixed6(v).c_str());
}

int finish_report(const Report& rep) {
  std::fputs(rep.summary.c_str(), stdout);
  return rep.all_pass() ? 0 : 1;
}

std::vector<std::size_t> read_top_indices(const std::string& scores_csv, std::size_t k) {
  std::ifstream f(scores_csv);
  if (!f) throw std::runtime_error(scores_csv + ": cannot open");
  std::string line;
  std::getline(f, line);
  std::vector<double> scores;
  while (std::getline(f, line)) {
    const auto parts = split_list(line);
    if (parts.size() < 2) throw std::runtime_error(scores_csv + ": malformed line '" + line + "'");
    scores.push_back(parse_double("score", parts[1]));
  }
  Tensor t(Shape{scores.size()});
  for (std::size_t i = 0; i < scores.size(); ++i) t[i] = scores[i];
  auto order = rank_by_score(t);
  order.resize(std::min(k, order.size()));
  return order;
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  CLI::App app{"backdoor poisoning lab"};
  app.require_subcommand(1);

  SpecFlags f_synth, f_train, f_poison, f_run, f_sweep, f_defend;
  std::string out, poisoned_prefix, axis, values, scores_csv, sweep_summary, indices;
  std::size_t replicates = 1, top = 0;
  std::vector<std::string> run_dirs;

  auto* synth = app.add_subcommand("synth-data", "write the configured corpus as an IDX pair");
  f_synth.attach(synth);
  synth->add_option("--out", out, "output prefix; writes <out>-images.idx and <out>-labels.idx")->required();

  auto* trn = app.add_subcommand("train", "train the victim and save a checkpoint");
  f_train.attach(trn);
  trn->add_option("--out", out, "checkpoint path")->required();
  trn->add_option("--poisoned", poisoned_prefix, "train on a poisoned set written by 'poison' instead of the clean split");

  auto* poi = app.add_subcommand("poison", "synthesize the poisoned training set");
  f_poison.attach(poi);
  poi->add_option("--out", out, "output prefix")->required();

  auto* run = app.add_subcommand("run", "run the full pipeline");
  f_run.attach(run);
  run->add_option("--out", out, "output directory (same as --output.dir)");

  auto* swp = app.add_subcommand("sweep", "run the pipeline over values of one spec key");
  f_sweep.attach(swp);
  swp->add_option("--axis", axis, "spec key to sweep")->required();
  swp->add_option("--values", values, "comma-separated values")->required();
  swp->add_option("--replicates", replicates, "seeds per value")->check(CLI::PositiveNumber);
  swp->add_option("--out", out, "output directory (same as --output.dir)");

  auto* dfd = app.add_subcommand("defend", "score a training set with the trusted-split filter");
  f_defend.attach(dfd);
  dfd->add_option("--poisoned", poisoned_prefix, "poisoned set written by 'poison'; default: synthesize it");
  dfd->add_option("--out", out, "output directory")->required();

  auto* exp = app.add_subcommand("export-images", "write PGM/PPM files and a grid for selected examples");
  exp->add_option("--poisoned", poisoned_prefix, "dataset written by 'poison'")->required();
  exp->add_option("--out", out, "output directory")->required();
  auto* o_idx = exp->add_option("--indices", indices, "comma-separated example indices");
  auto* o_top = exp->add_option("--top", top, "highest-scoring k examples (needs --scores)");
  exp->add_option("--scores", scores_csv, "scores.csv written by 'defend'");
  o_idx->excludes(o_top);

  auto* rpt = app.add_subcommand("report", "aggregate runs and evaluate the checks");
  auto* o_sum = rpt->add_option("--sweep-summary", sweep_summary, "sweep_summary.csv of a sweep");
  auto* o_runs = rpt->add_option("--run", run_dirs, "run directory, repeatable");
  o_sum->excludes(o_runs);
  rpt->add_option("--out", out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      const ExperimentSpec s = f_synth.resolve(synth);
      const LabeledDataset corpus = s.data_source == "synth" ? synth_dataset(s.synth) : load_idx(s.idx_images, s.idx_labels);
      write_idx(corpus, out + "-images.idx", out + "-labels.idx");
      std::printf("wrote %zu examples to %s-{images,labels}.idx\n", corpus.size(), out.c_str());
      return 0;
    }
    if (trn->parsed()) {
      const ExperimentSpec s = f_train.resolve(trn);
      validate_spec(s);
      const Splits sp = prepare_data(s);
      const LabeledDataset ds = poisoned_prefix.empty() ? sp.train : read_poisoned(poisoned_prefix);
      const ModelParams m = train_victim(s, ds, sp.num_classes);
      save_checkpoint(m, out);
      std::printf("clean_accuracy,%s\n", fixed6(clean_accuracy(m, sp.test)).c_str());
      if (ds.poison_count() > 0)
        std::printf("asr_reduced,%s\n",
                    fixed6(attack_success_rate(m, sp.test, s.attack.trigger, s.attack.target)).c_str());
      return 0;
    }
    if (poi->parsed()) {
      const ExperimentSpec s = f_poison.resolve(poi);
      validate_spec(s);
      const Splits sp = prepare_data(s);
      const PoisonStage ps = make_poisoned(s, sp);
      write_poisoned(ps.poisoned, out);
      const auto& a = ps.audit;
      std::printf("poison_count,%zu\nbudget,%zu\nlabel_consistent,%d\nuntouched_identical,%d\ntrigger_last,%d\n"
                  "pixel_range,%d\nmax_perturbation,%s\n",
                  ps.poisoned.poison_count(), ps.budget, a.label_consistent, a.untouched_identical, a.trigger_last,
                  a.pixel_range, fixed6(a.max_perturbation).c_str());
      return a.label_consistent && a.untouched_identical && a.trigger_last && a.pixel_range ? 0 : 1;
    }
    if (run->parsed()) {
      ExperimentSpec s = f_run.resolve(run);
      if (!out.empty()) s.out_dir = out;
      const RunResult r = run_experiment(s);
      if (!r.ok()) std::fprintf(stderr, "run failed: %s\n", r.error.c_str());
      print_metrics(r.metrics);
      std::vector<RunRecord> rec{{s.out_dir.empty() ? "run" : s.out_dir, 0, r.status, r.metrics}};
      return finish_report(emit_report(rec, {}, s.out_dir.empty() ? std::string() : s.out_dir + "/report"));
    }
    if (swp->parsed()) {
      ExperimentSpec s = f_sweep.resolve(swp);
      if (!out.empty()) s.out_dir = out;
      const SweepResult res = sweep(s, axis, split_list(values), replicates, nullptr, [&](const SweepCell& c) {
        std::fprintf(stderr, "[sweep] %s=%s rep%zu %s", axis.c_str(), c.value.c_str(), c.replicate,
                     c.result.status.c_str());
        if (c.result.has("asr_reduced")) std::fprintf(stderr, " asr=%s", fixed6(c.result.metric("asr_reduced")).c_str());
        if (!c.result.ok()) std::fprintf(stderr, " (%s)", c.result.error.c_str());
        std::fputc('\n', stderr);
      });
      std::fputs(res.summary_csv().c_str(), stdout);
      return finish_report(emit_report(records_from(res), axis, s.out_dir.empty() ? std::string() : s.out_dir + "/report"));
    }
    if (dfd->parsed()) {
      const ExperimentSpec s = f_defend.resolve(dfd);
      validate_spec(s);
      const Splits sp = prepare_data(s);
      const LabeledDataset ds = poisoned_prefix.empty() ? make_poisoned(s, sp).poisoned : read_poisoned(poisoned_prefix);
      const DefenseStage d = run_defense(s, filter_model(s, sp), sp.trusted, ds);
      std::filesystem::create_directories(out);
      std::string csv = "index,score,poisoned\n";
      for (std::size_t i = 0; i < ds.size(); ++i)
        csv += std::to_string(i) + "," + fixed6(d.scores[i]) + "," + (ds.poison_mask[i] ? "1" : "0") + "\n";
      write_text(out + "/scores.csv", csv);
      write_text(out + "/defense_curve.csv", d.curve.csv());
      std::printf("k,%zu\npoisoned_in_top_k,%zu\n", d.k, d.poisoned_in_top_k);
      if (d.enrichment) std::printf("enrichment,%s\n", fixed6(*d.enrichment).c_str());
      return 0;
    }
    if (exp->parsed()) {
      const LabeledDataset ds = read_poisoned(poisoned_prefix);
      std::vector<std::size_t> idx;
      if (!indices.empty()) {
        for (const auto& v : split_list(indices)) idx.push_back(parse_uint("indices", v));
      } else if (top > 0 && !scores_csv.empty()) {
        idx = read_top_indices(scores_csv, top);
      } else {
        throw std::invalid_argument("export-images needs --indices or --top with --scores");
      }
      const ExportedImages e = export_images(ds, idx, out);
      std::printf("wrote %zu images and %s\n", e.files.size(), e.grid.c_str());
      return 0;
    }
    if (rpt->parsed()) {
      std::vector<RunRecord> rec;
      std::string ax;
      if (!sweep_summary.empty()) {
        rec = load_sweep_summary(sweep_summary, ax);
      } else {
        for (const auto& d : run_dirs) rec.push_back(load_run_record(d));
      }
      if (rec.empty()) throw std::invalid_argument("report needs --sweep-summary or at least one --run");
      return finish_report(emit_report(std::move(rec), ax, out));
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 2;
}

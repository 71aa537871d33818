#include <bdlab/experiment.hpp>

#include "fixtures.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace bdlab;

namespace {

namespace fs = std::filesystem;

// Small enough that a full pipeline run takes well under a second.
const char* kTiny = R"(data.synth.classes = 4
data.synth.per_class = 60
split.train = 120
split.test = 40
split.trusted = 40
split.heldout = 40
victim.steps = 40
surrogate.steps = 20
autoencoder.steps = 50
autoencoder.latent = 8
attack.pgd.steps = 5
attack.budget.value = 0.2
attack.invert.steps = 5
defense.steps = 20
)";

Config tiny_config() { return Config::parse(kTiny, "<tiny>"); }

ExperimentSpec tiny_spec(const std::vector<std::string>& overrides = {}) {
  Config c = tiny_config();
  for (const auto& kv : overrides) c.set_assignment(kv);
  return make_spec(c, kTiny);
}

std::string temp_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "bdlab_test_expcli" / name;
  fs::remove_all(dir);
  return dir.string();
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

}  // namespace

TEST(Config, ParsesCommentsBlanksAndWhitespace) {
  const Config c = Config::parse("# header\n\n  a.b =  3 \nempty =\nc=x=y\n");
  EXPECT_EQ(c.at("a.b"), "3");
  EXPECT_EQ(c.at("empty"), "");
  EXPECT_EQ(c.at("c"), "x=y");
  EXPECT_EQ(c.entries().size(), 3u);
  EXPECT_EQ(c.text(), "a.b = 3\nempty = \nc = x=y\n");
}

TEST(Config, ErrorsNameTheLine) {
  try {
    Config::parse("a = 1\nnot an assignment\n", "spec.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("spec.cfg:2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(Config::parse(" = 3"), ConfigError);
  Config c;
  EXPECT_THROW(c.set_assignment("novalue"), ConfigError);
  EXPECT_THROW(c.at("missing"), ConfigError);
}

TEST(Config, ValueParsers) {
  EXPECT_DOUBLE_EQ(parse_double("k", "2.5e1"), 25.0);
  EXPECT_THROW(parse_double("k", "2.5x"), ConfigError);
  EXPECT_EQ(parse_uint("k", "17"), 17u);
  EXPECT_THROW(parse_uint("k", "-1"), ConfigError);
  EXPECT_TRUE(parse_bool("k", "on"));
  EXPECT_FALSE(parse_bool("k", "false"));
  EXPECT_THROW(parse_bool("k", "maybe"), ConfigError);
  EXPECT_EQ(fixed6(1.0 / 3.0), "0.333333");
}

TEST(Spec, DefaultsResolve) {
  const ExperimentSpec s = make_spec(Config{});
  EXPECT_NO_THROW(validate_spec(s));
  EXPECT_EQ(s.attack.method, AttackMethod::adversarial);
  EXPECT_EQ(s.attack.pgd.norm, Norm::l2);
  EXPECT_DOUBLE_EQ(s.attack.pgd.epsilon, 300.0);
  EXPECT_EQ(s.attack.trigger.pattern, make_canonical_pattern());
  EXPECT_EQ(s.n_train + s.n_test + s.n_trusted + s.n_heldout, 15000u);
  EXPECT_EQ(s.config.text(), make_spec(Config::parse(s.config.text())).config.text());
}

TEST(Spec, UnknownKeysAndBadValuesRejected) {
  Config c;
  c.set("attack.epsilon", "3");
  try {
    make_spec(c);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("unknown config key 'attack.epsilon'"), std::string::npos);
  }
  EXPECT_THROW(tiny_spec({"victim.steps=abc"}), ConfigError);
  EXPECT_THROW(tiny_spec({"attack.method=nope"}), std::invalid_argument);
  EXPECT_THROW(validate_spec(tiny_spec({"attack.tau=2"})), ConfigError);
  EXPECT_THROW(validate_spec(tiny_spec({"attack.target=4"})), ConfigError);
}

TEST(Run, SameSpecGivesByteIdenticalOutputs) {
  const std::string a = temp_dir("twice-a"), b = temp_dir("twice-b");
  const auto ra = run_experiment(tiny_spec({"output.dir=" + a}));
  const auto rb = run_experiment(tiny_spec({"output.dir=" + b}));
  ASSERT_TRUE(ra.ok()) << ra.error;
  ASSERT_TRUE(rb.ok()) << rb.error;
  EXPECT_EQ(ra.metrics, rb.metrics);
  for (const char* f : {"result.csv", "defense_curve.csv", "status.txt", "spec.txt"})
    EXPECT_EQ(read_file(a + "/" + f), read_file(b + "/" + f)) << f;
  EXPECT_EQ(read_file(a + "/status.txt"), "ok\n");
  EXPECT_EQ(read_file(a + "/spec.txt"), kTiny);
}

TEST(Run, ResolvedSpecReproducesTheRun) {
  const std::string a = temp_dir("resolved-a"), b = temp_dir("resolved-b");
  const auto ra = run_experiment(tiny_spec({"output.dir=" + a, "attack.method=pixel_interp"}));
  Config back = Config::parse(read_file(a + "/resolved_spec.txt"));
  back.set("output.dir", b);
  const auto rb = run_experiment(make_spec(back));
  ASSERT_TRUE(ra.ok()) << ra.error;
  EXPECT_EQ(ra.metrics, rb.metrics);
}

TEST(Run, EveryMethodCompletesWithPassingAudits) {
  for (const char* m : {"standard", "consistent_baseline", "adversarial", "latent_interp", "pixel_interp"}) {
    const auto r = run_experiment(tiny_spec({std::string("attack.method=") + m}));
    ASSERT_TRUE(r.ok()) << m << ": " << r.error;
    EXPECT_EQ(r.metric("poison_count"), r.metric("poison_budget")) << m;
    for (const char* a : {"audit_label_consistent", "audit_untouched_identical", "audit_trigger_last", "audit_pixel_range"})
      EXPECT_EQ(r.metric(a), 1.0) << m << " " << a;
    EXPECT_EQ(r.has("autoencoder_mse_heldout"), std::string(m) == "latent_interp");
  }
}

TEST(Run, ZeroBudgetRunsWithoutPoison) {
  const auto r = run_experiment(tiny_spec({"attack.budget.value=0"}));
  ASSERT_TRUE(r.ok()) << r.error;
  EXPECT_EQ(r.metric("poison_count"), 0.0);
  EXPECT_TRUE(r.has("asr_reduced"));
  EXPECT_FALSE(r.has("defense_enrichment"));
  EXPECT_EQ(r.metric("defense_poisoned_in_top_k"), 0.0);
}

TEST(Run, CleanControlAndTelemetryMetrics) {
  const auto r = run_experiment(tiny_spec({"eval.clean_control=true", "telemetry.enabled=true",
                                           "telemetry.interval_fraction=0.25"}));
  ASSERT_TRUE(r.ok()) << r.error;
  EXPECT_NEAR(r.metric("accuracy_drop"), r.metric("control_accuracy") - r.metric("clean_accuracy"), 1e-12);
  ASSERT_EQ(r.telemetry.rows.size(), 5u);
  EXPECT_EQ(r.telemetry.rows.back().step, 40u);
  EXPECT_TRUE(r.has("telemetry_without_trigger_median"));
}

TEST(Run, FailingStageIsReportedNotThrown) {
  const std::string dir = temp_dir("failing");
  const auto r = run_experiment(
      tiny_spec({"output.dir=" + dir, "data.source=idx", "data.idx.images=/nonexistent/i", "data.idx.labels=/nonexistent/l"}));
  EXPECT_FALSE(r.ok());
  EXPECT_EQ(r.failed_stage, "ingest");
  const std::string status = read_file(dir + "/status.txt");
  EXPECT_EQ(status.substr(0, status.find('\n')), "failed stage=ingest");
  const auto bad = run_experiment(tiny_spec({"split.train=1000"}));
  EXPECT_EQ(bad.failed_stage, "split");
  const auto rec = load_run_record(dir);
  EXPECT_EQ(rec.status, "failed stage=ingest");
}

TEST(Run, TopLossExportMatchesTheCurve) {
  const std::string dir = temp_dir("export");
  const auto r = run_experiment(tiny_spec({"output.dir=" + dir, "attack.method=standard", "defense.k_fraction=0.2",
                                           "output.export_top=24", "output.save_poisoned=true"}));
  ASSERT_TRUE(r.ok()) << r.error;
  ASSERT_EQ(r.metric("defense_k"), 24.0);
  std::size_t files = 0, poisoned = 0;
  for (const auto& e : fs::directory_iterator(dir + "/top_loss")) {
    const std::string name = e.path().filename().string();
    if (name.rfind("img-", 0) != 0) continue;
    ++files;
    poisoned += name.find("-p1.") != std::string::npos;
  }
  EXPECT_EQ(files, 24u);
  EXPECT_EQ(static_cast<double>(poisoned), r.metric("defense_poisoned_in_top_k"));
  EXPECT_EQ(read_pnm(dir + "/top_loss/grid.pgm").shape(), (Shape{5 * 16, 5 * 16, 1}));
  const auto saved = read_poisoned(dir + "/poisoned/train");
  EXPECT_EQ(static_cast<double>(saved.poison_count()), r.metric("poison_count"));
}

TEST(Sweep, SingleValueEqualsRun) {
  const auto base = tiny_spec({"attack.pgd.epsilon=150"});
  const auto s = sweep(tiny_spec(), "attack.pgd.epsilon", {"150"});
  ASSERT_EQ(s.cells.size(), 1u);
  EXPECT_EQ(s.cells[0].seed, base.seed);
  EXPECT_EQ(s.cells[0].result.metrics, run_experiment(base).metrics);
}

TEST(Sweep, NumericValuesRunInAscendingOrderWithSummary) {
  const std::string dir = temp_dir("sweep");
  const auto s = sweep(tiny_spec({"output.dir=" + dir}), "attack.pgd.epsilon", {"600", "150", "300"}, 2);
  ASSERT_EQ(s.cells.size(), 6u);
  const char* want[] = {"150", "300", "600"};
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(s.cells[i].value, want[i % 3]);
    EXPECT_EQ(s.cells[i].replicate, i / 3);
    EXPECT_EQ(s.cells[i].seed, replicate_seed(1, i / 3));
  }
  EXPECT_NE(s.cells[0].seed, s.cells[3].seed);
  const std::string csv = read_file(dir + "/sweep_summary.csv");
  EXPECT_EQ(csv, s.summary_csv());
  EXPECT_EQ(csv.rfind("axis,value,replicate,seed,status,", 0), 0u);
  EXPECT_TRUE(fs::exists(dir + "/attack.pgd.epsilon=300/rep1/result.csv"));

  std::string axis;
  const auto rec = load_sweep_summary(dir + "/sweep_summary.csv", axis);
  EXPECT_EQ(axis, "attack.pgd.epsilon");
  ASSERT_EQ(rec.size(), 6u);
  EXPECT_NEAR(*rec[4].metric("asr_reduced"), s.cells[4].result.metric("asr_reduced"), 5e-7);
  EXPECT_THROW(sweep(tiny_spec(), "no.such.key", {"1"}), ConfigError);
}

TEST(Sweep, NonNumericValuesKeepTheirOrder) {
  EXPECT_EQ(order_sweep_values({"pixel_interp", "adversarial"}), (std::vector<std::string>{"pixel_interp", "adversarial"}));
  EXPECT_EQ(order_sweep_values({"10", "2", "1e0"}), (std::vector<std::string>{"1e0", "2", "10"}));
  EXPECT_EQ(sanitize_path_part("WBW/BWB"), "WBW_BWB");
  EXPECT_EQ(replicate_seed(7, 0), 7u);
  EXPECT_NE(replicate_seed(7, 1), replicate_seed(7, 2));
}

TEST(Report, GoldenSchema) {
  std::vector<RunRecord> runs{
      {"150", 0, "ok", {{"poison_count", 3}, {"poison_budget", 3}, {"asr_reduced", 0.1}, {"asr_full", 0.2}}},
      {"150", 1, "ok", {{"poison_count", 3}, {"poison_budget", 3}, {"asr_reduced", 0.3}, {"asr_full", 0.4}}},
      {"300", 0, "ok", {{"poison_count", 3}, {"poison_budget", 3}, {"asr_reduced", 0.5}, {"asr_full", 0.4}}},
      {"300", 1, "failed", {}}};
  const std::string dir = temp_dir("report");
  const Report rep = emit_report(runs, "attack.pgd.epsilon", dir);
  EXPECT_EQ(rep.runs_csv,
            "label,replicate,status,poison_count,poison_budget,asr_reduced,asr_full\n"
            "150,0,ok,3.000000,3.000000,0.100000,0.200000\n"
            "150,1,ok,3.000000,3.000000,0.300000,0.400000\n"
            "300,0,ok,3.000000,3.000000,0.500000,0.400000\n"
            "300,1,failed,,,,\n");
  EXPECT_EQ(rep.aggregate_csv.substr(0, rep.aggregate_csv.find('\n')), "label,metric,n,median,q25,q75");
  EXPECT_NE(rep.aggregate_csv.find("150,asr_reduced,2,0.200000,0.150000,0.250000\n"), std::string::npos);
  EXPECT_NE(rep.aggregate_csv.find("300,asr_reduced,1,0.500000,0.500000,0.500000\n"), std::string::npos);
  EXPECT_EQ(read_file(dir + "/runs.csv"), rep.runs_csv);
  EXPECT_EQ(read_file(dir + "/aggregate.csv"), rep.aggregate_csv);
  EXPECT_EQ(read_file(dir + "/summary.txt"), rep.summary);
  EXPECT_FALSE(rep.all_pass());
  bool saw_full = false, saw_trend = false, saw_failed = false;
  for (const auto& c : rep.checks) {
    if (c.name == "full_visibility_not_worse 300/rep0") saw_full = !c.pass;
    if (c.name == "median_asr_nondecreasing_in attack.pgd.epsilon") saw_trend = c.pass;
    if (c.name == "run_ok 300/rep1") saw_failed = !c.pass;
  }
  EXPECT_TRUE(saw_full);
  EXPECT_TRUE(saw_trend);
  EXPECT_TRUE(saw_failed);
  EXPECT_NE(rep.summary.find("FAIL run_ok 300/rep1"), std::string::npos);
}

TEST(Report, SingleRunAggregateEqualsTheRun) {
  const auto r = run_experiment(tiny_spec());
  ASSERT_TRUE(r.ok()) << r.error;
  const Report rep = emit_report({{"only", 0, r.status, r.metrics}});
  for (const auto& [k, v] : r.metrics) {
    const std::string f = fixed6(v);
    EXPECT_NE(rep.aggregate_csv.find("only," + k + ",1," + f + "," + f + "," + f + "\n"), std::string::npos) << k;
  }
  EXPECT_TRUE(rep.all_pass()) << rep.summary;
}

TEST(Report, NoiseAxisChecksLargestSigma) {
  std::vector<RunRecord> runs{{"0", 0, "ok", {{"asr_reduced", 0.5}}},
                              {"10", 0, "ok", {{"asr_reduced", 0.7}}},
                              {"100", 0, "ok", {{"asr_reduced", 0.2}}}};
  const Report rep = emit_report(runs, "attack.noise_sigma");
  EXPECT_TRUE(rep.all_pass()) << rep.summary;
  EXPECT_THROW(emit_report({}), std::invalid_argument);
}

TEST(Images, PgmAndPpmRoundTrip) {
  const std::string dir = temp_dir("pnm");
  fs::create_directories(dir);
  for (std::size_t c : {1u, 3u}) {
    const Image x = fixtures::random_pixels({3, 4, c}, 5);
    const std::string path = dir + (c == 1 ? "/x.pgm" : "/x.ppm");
    write_pnm(path, x);
    EXPECT_EQ(read_pnm(path), x);
    EXPECT_EQ(read_file(path).substr(0, 11), std::string(c == 1 ? "P5\n4 3\n255\n" : "P6\n4 3\n255\n"));
  }
  EXPECT_THROW(encode_pnm(Image(Shape{2, 2, 2})), ShapeError);
}

TEST(Images, GridDimensions) {
  EXPECT_EQ(grid_side(1), 1u);
  EXPECT_EQ(grid_side(2), 2u);
  EXPECT_EQ(grid_side(4), 2u);
  EXPECT_EQ(grid_side(5), 3u);
  EXPECT_EQ(grid_side(20), 5u);
  EXPECT_EQ(grid_side(25), 5u);
  std::vector<Image> five;
  for (std::uint64_t s = 0; s < 5; ++s) five.push_back(fixtures::random_pixels({4, 4, 1}, s));
  const Image g = tile_grid(five);
  EXPECT_EQ(g.shape(), (Shape{12, 12, 1}));
  EXPECT_EQ(g[(4 * 12 + 4)], five[4][0]);
  EXPECT_EQ(g[(8 * 12 + 0)], 0.0);
}

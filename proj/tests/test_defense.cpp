#include <bdlab/attacks.hpp>
#include <bdlab/defense.hpp>
#include <bdlab/metrics.hpp>
#include <bdlab/synth.hpp>

#include <gtest/gtest.h>

#include <cmath>

using namespace bdlab;

namespace {

Tensor random_scores(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor t(Shape{n});
  for (auto& v : t.data()) v = u(rng);
  return t;
}

std::vector<bool> mask_first(std::size_t n, std::size_t poisoned, std::uint64_t seed) {
  std::vector<std::size_t> idx = all_indices(n);
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<bool> m(n, false);
  for (std::size_t i = 0; i < poisoned; ++i) m[idx[i]] = true;
  return m;
}

// Smallest c with P[X <= c] >= q for X ~ Binomial(k, p).
std::size_t binomial_quantile(std::size_t k, double p, double q) {
  double cdf = 0.0;
  for (std::size_t c = 0; c <= k; ++c) {
    cdf += std::exp(std::lgamma(k + 1.0) - std::lgamma(c + 1.0) - std::lgamma(k - c + 1.0) + c * std::log(p) +
                    (k - c) * std::log1p(-p));
    if (cdf >= q) return c;
  }
  return k;
}

struct Splits {
  LabeledDataset train, trusted, heldout;
};

const Splits& splits() {
  static const Splits s = [] {
    SynthSpec spec;
    spec.classes = 4;
    spec.per_class = 200;
    spec.seed = 51;
    const auto ds = synth_dataset(spec);
    const std::size_t sizes[] = {400, 200, 200};
    auto parts = split(ds, sizes, 52);
    return Splits{std::move(parts[0]), std::move(parts[1]), std::move(parts[2])};
  }();
  return s;
}

TrainConfig filter_config() { return make_train_config(300, 53, 0.03); }

}  // namespace

TEST(Rank, DescendingWithIndexTieBreak) {
  const Tensor s(Shape{6}, std::vector<double>{0.5, 0.9, 0.5, 0.1, 0.9, 0.5});
  EXPECT_EQ(rank_by_score(s), (std::vector<std::size_t>{1, 4, 0, 2, 5, 3}));
  EXPECT_EQ(rank_by_score(Tensor(Shape{4}, 1.0)), (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(Curve, MatchesBruteForceAndIsMonotoneAndBounded) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::size_t n = 50;
    // Coarse scores force ties.
    Tensor s = random_scores(n, seed);
    for (auto& v : s.data()) v = std::floor(v * 10.0);
    const auto mask = mask_first(n, 7, seed + 100);
    std::vector<std::size_t> ks;
    for (std::size_t k = 0; k <= n + 5; ++k) ks.push_back(k);
    const auto c = enrichment_curve(s, mask, ks);
    EXPECT_EQ(c.total_poisoned, 7u);
    for (std::size_t j = 0; j < ks.size(); ++j) {
      const std::size_t k = std::min(ks[j], n);
      // Brute force: element i is in the top k when fewer than k elements precede it.
      std::size_t count = 0;
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t ahead = 0;
        for (std::size_t o = 0; o < n; ++o) ahead += s[o] > s[i] || (s[o] == s[i] && o < i);
        if (ahead < k && mask[i]) ++count;
      }
      EXPECT_EQ(c.poisoned_in_top_k[j], count);
      EXPECT_LE(c.poisoned_in_top_k[j], std::min(k, c.total_poisoned));
      if (j) {
        EXPECT_GE(c.poisoned_in_top_k[j], c.poisoned_in_top_k[j - 1]);
      }
    }
    EXPECT_EQ(c.poisoned_in_top_k.back(), 7u);
  }
}

TEST(Curve, AllPoisonAndNoPoison) {
  const Tensor s = random_scores(30, 1);
  const std::vector<bool> all(30, true), none(30, false);
  for (std::size_t k = 1; k <= 30; ++k) EXPECT_DOUBLE_EQ(enrichment_ratio(s, all, k), 1.0);
  const std::size_t ks[] = {1, 10, 30};
  for (auto v : enrichment_curve(s, none, ks).poisoned_in_top_k) EXPECT_EQ(v, 0u);
  EXPECT_THROW(enrichment_ratio(s, none, 5), std::invalid_argument);
  EXPECT_THROW(enrichment_ratio(s, all, 0), std::invalid_argument);
  EXPECT_THROW(enrichment_curve(s, std::vector<bool>(29, false), ks), std::invalid_argument);
}

TEST(Curve, PerfectScoresGiveMaximalEnrichment) {
  const std::size_t n = 1000, p = 20;
  const auto mask = mask_first(n, p, 3);
  Tensor s(Shape{n});
  for (std::size_t i = 0; i < n; ++i) s[i] = mask[i] ? 2.0 : 1.0;
  EXPECT_DOUBLE_EQ(enrichment_ratio(s, mask, 20), 50.0);
  EXPECT_DOUBLE_EQ(enrichment_ratio(s, mask, 40), 25.0);
}

TEST(Curve, RandomScoresStayInsideBinomialBand) {
  const std::size_t n = 2000, p = 100, k = 200;
  const double rate = static_cast<double>(p) / n;
  const std::size_t lo = binomial_quantile(k, rate, 0.005), hi = binomial_quantile(k, rate, 0.995);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto mask = mask_first(n, p, seed);
    const std::size_t ks[] = {k};
    const std::size_t hit = enrichment_curve(random_scores(n, 1000 + seed), mask, ks).poisoned_in_top_k[0];
    EXPECT_GE(hit, lo) << seed;
    EXPECT_LE(hit, hi) << seed;
  }
}

TEST(Filter, RejectsOverlapWithPoisonedExamples) {
  const auto& sp = splits();
  AttackConfig c;
  c.method = AttackMethod::consistent_baseline;
  c.target = 0;
  c.budget = {BudgetMode::count, 10.0};
  const auto poisoned = poison(sp.train, c);
  LabeledDataset leaky = sp.trusted;
  const std::size_t victim = poisoned.poisoned_indices().front();
  leaky.images.push_back(sp.train.images[victim]);
  leaky.labels.push_back(sp.train.labels[victim]);
  leaky.poison_mask.push_back(false);
  leaky.provenance.push_back(sp.train.provenance[victim]);
  EXPECT_THROW(filter_scores(leaky, poisoned, filter_config()), OverlapError);
  EXPECT_THROW(filter_scores(poisoned, sp.train, filter_config()), OverlapError);
}

TEST(Filter, TrustedExamplesScoreBelowHeldOut) {
  const auto& sp = splits();
  const auto f = filter_scores(sp.trusted, sp.trusted, filter_config());
  std::vector<double> own(f.scores.data().begin(), f.scores.data().end());
  const Tensor held = per_example_loss(f.model, sp.heldout);
  std::vector<double> other(held.data().begin(), held.data().end());
  EXPECT_LT(median(own), median(other));
  EXPECT_EQ(f.scores.size(), sp.trusted.size());
}

TEST(Filter, StandardPoisonsRankNearTheTop) {
  const auto& sp = splits();
  AttackConfig c;
  c.method = AttackMethod::standard;
  c.target = 0;
  c.budget = {BudgetMode::count, 20.0};
  c.trigger.amplitude = 64.0;
  const auto poisoned = poison(sp.train, c);
  const auto f = filter_scores(sp.trusted, poisoned, filter_config());
  // Relabeled examples whose true class is already the target are not mislabeled.
  std::size_t mislabeled = 0;
  for (std::size_t i : poisoned.poisoned_indices()) mislabeled += sp.train.labels[i] != c.target;
  const double ratio = enrichment_ratio(f.scores, poisoned.poison_mask, 20);
  EXPECT_GT(ratio, 5.0) << mislabeled << " mislabeled";
  EXPECT_TRUE(f.model.is_classifier());
}

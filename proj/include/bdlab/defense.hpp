#pragma once

// Loss-ranking sanitization: a filter model trained on trusted clean data scores
// every training example, and the highest-loss examples are inspected first.

#include <bdlab/train.hpp>

#include <fstream>
#include <numeric>
#include <unordered_set>

namespace bdlab {

class OverlapError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct FilterResult {
  ModelParams model;
  Tensor scores;  // per example of the scored dataset
};

// Trains a fresh CNN on clean_subset (augmentation off) and scores full_ds with its
// per-example loss. The trusted subset must not share an origin with any poisoned
// example of full_ds and must itself be unpoisoned.
inline FilterResult filter_scores(const LabeledDataset& clean_subset, const LabeledDataset& full_ds, TrainConfig cfg,
                                  Arch arch = Arch::cnn) {
  if (clean_subset.empty() || full_ds.empty()) throw std::invalid_argument("filter_scores: empty dataset");
  if (clean_subset.poison_count() != 0) throw OverlapError("filter_scores: trusted subset contains poisoned examples");
  std::unordered_set<std::uint64_t> poisoned;
  for (std::size_t i : full_ds.poisoned_indices()) poisoned.insert(full_ds.provenance[i].origin);
  for (const auto& p : clean_subset.provenance)
    if (poisoned.count(p.origin))
      throw OverlapError("filter_scores: trusted subset overlaps poisoned example with origin " +
                         std::to_string(p.origin));
  cfg.augment = AugmentConfig{};
  const std::size_t k = std::max(clean_subset.num_classes, full_ds.num_classes);
  ModelParams m = init_model(arch, clean_subset.image_shape(), k, derive_seed(cfg.seed, "filter-init"));
  m = train(std::move(m), clean_subset, cfg);
  Tensor scores = per_example_loss(m, full_ds);
  return {std::move(m), std::move(scores)};
}

// Indices sorted by descending score; equal scores keep ascending index order.
inline std::vector<std::size_t> rank_by_score(const Tensor& scores) {
  std::vector<std::size_t> order = all_indices(scores.size());
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

struct EnrichmentCurve {
  std::vector<std::size_t> ks;
  std::vector<std::size_t> poisoned_in_top_k;
  std::size_t total_poisoned = 0;
  std::size_t n = 0;

  std::string csv() const {
    std::string out = "k,poisoned_in_top_k,total_poisoned\n";
    for (std::size_t i = 0; i < ks.size(); ++i)
      out += std::to_string(ks[i]) + "," + std::to_string(poisoned_in_top_k[i]) + "," + std::to_string(total_poisoned) +
             "\n";
    return out;
  }
};

// ks larger than n are truncated to n.
inline EnrichmentCurve enrichment_curve(const Tensor& scores, const std::vector<bool>& poison_mask,
                                        std::span<const std::size_t> ks) {
  if (scores.size() != poison_mask.size())
    throw std::invalid_argument("enrichment_curve: " + std::to_string(scores.size()) + " scores for " +
                                std::to_string(poison_mask.size()) + " examples");
  EnrichmentCurve c;
  c.n = scores.size();
  c.total_poisoned = static_cast<std::size_t>(std::count(poison_mask.begin(), poison_mask.end(), true));
  const auto order = rank_by_score(scores);
  // prefix[j] = poisoned among the top j
  std::vector<std::size_t> prefix(order.size() + 1, 0);
  for (std::size_t j = 0; j < order.size(); ++j) prefix[j + 1] = prefix[j] + (poison_mask[order[j]] ? 1 : 0);
  for (std::size_t k : ks) {
    c.ks.push_back(k);
    c.poisoned_in_top_k.push_back(prefix[std::min(k, order.size())]);
  }
  return c;
}

// Fraction of poison in the top k divided by the overall poison rate. 1 means no
// better than random inspection.
inline double enrichment_ratio(const Tensor& scores, const std::vector<bool>& poison_mask, std::size_t k) {
  if (k == 0) throw std::invalid_argument("enrichment_ratio: k must be positive");
  const std::size_t ks[] = {k};
  const auto c = enrichment_curve(scores, poison_mask, ks);
  if (c.total_poisoned == 0) throw std::invalid_argument("enrichment_ratio: no poisoned examples");
  const double kk = static_cast<double>(std::min(k, c.n));
  const double rate = static_cast<double>(c.total_poisoned) / static_cast<double>(c.n);
  return (static_cast<double>(c.poisoned_in_top_k[0]) / kk) / rate;
}

}  // namespace bdlab

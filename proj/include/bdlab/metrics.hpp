#pragma once

#include <bdlab/model.hpp>
#include <bdlab/trigger.hpp>

#include <cstdio>

namespace bdlab {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Pr[f(T(x)) = target | y != target]; target-class examples are left out entirely.
inline double attack_success_rate(const ModelParams& m, const LabeledDataset& test, const TriggerSpec& t, Label target) {
  std::vector<Image> triggered;
  for (std::size_t i = 0; i < test.size(); ++i)
    if (test.labels[i] != target) triggered.push_back(apply_trigger(test.images[i], t));
  if (triggered.empty()) throw MetricError("attack_success_rate: no eligible samples (every label is the target)");
  const auto pred = predict(m, triggered);
  const auto hits = std::count(pred.begin(), pred.end(), target);
  return static_cast<double>(hits) / static_cast<double>(triggered.size());
}

inline double clean_accuracy(const ModelParams& m, const LabeledDataset& test) {
  if (test.empty()) throw MetricError("clean_accuracy: empty test set");
  const auto pred = predict(m, test.images);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == test.labels[i];
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

// Type-7 (linear interpolation) sample quantile, q in [0,1].
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw MetricError("quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double h = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double median(std::vector<double> v) { return quantile(std::move(v), 0.5); }

struct GroupStats {
  double median = 0, q25 = 0, q75 = 0, mean = 0;
};

inline GroupStats group_stats(std::span<const double> v) {
  std::vector<double> xs(v.begin(), v.end());
  GroupStats s;
  s.q25 = quantile(xs, 0.25);
  s.median = quantile(xs, 0.5);
  s.q75 = quantile(xs, 0.75);
  double acc = 0.0;
  for (double x : xs) acc += x;
  s.mean = acc / static_cast<double>(xs.size());
  return s;
}

inline constexpr const char* kTelemetryGroups[3] = {"poisoned_with_trigger", "poisoned_without_trigger",
                                                     "all_training"};

struct TelemetryRow {
  std::size_t step = 0;
  GroupStats groups[3];  // order of kTelemetryGroups
};

// Losses of the poisoned examples as stored, of the same examples with trigger cells
// restored from the pre-trigger copies, and of the whole training set.
inline TelemetryRow telemetry_record(const ModelParams& m, const LabeledDataset& ds, const TriggerSpec& t,
                                     std::size_t step) {
  const auto idx = ds.poisoned_indices();
  if (idx.empty()) throw MetricError("telemetry_record: dataset has no poisoned examples");
  LabeledDataset without;
  without.num_classes = ds.num_classes;
  for (std::size_t i : idx) {
    const auto& pre = ds.provenance[i].pre_trigger;
    if (!pre) throw MetricError("telemetry_record: poisoned example " + std::to_string(i) + " has no pre-trigger copy");
    without.push_back(restore_trigger_cells(ds.images[i], *pre, t), ds.labels[i], ds.provenance[i].origin);
  }
  TelemetryRow row;
  row.step = step;
  row.groups[0] = group_stats(per_example_loss(m, ds, idx).data());
  row.groups[1] = group_stats(per_example_loss(m, without).data());
  row.groups[2] = group_stats(per_example_loss(m, ds).data());
  return row;
}

struct Telemetry {
  std::vector<TelemetryRow> rows;

  std::string csv() const {
    std::string out = "step,group,median,q25,q75,mean\n";
    char buf[256];
    for (const auto& r : rows)
      for (int g = 0; g < 3; ++g) {
        const auto& s = r.groups[g];
        std::snprintf(buf, sizeof buf, "%zu,%s,%.6f,%.6f,%.6f,%.6f\n", r.step, kTelemetryGroups[g], s.median, s.q25,
                      s.q75, s.mean);
        out += buf;
      }
    return out;
  }
};

}  // namespace bdlab

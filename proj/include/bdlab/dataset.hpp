#pragma once

#include <bdlab/autograd.hpp>
#include <bdlab/rng.hpp>
#include <bdlab/tensor.hpp>

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace bdlab {

// H x W x C pixels, values in [0, 255] unless stated otherwise.
using Image = Tensor;

struct Provenance {
  std::string method = "clean";
  // Stable identity of the example in the ingested corpus; split disjointness is
  // audited on these.
  std::uint64_t origin = 0;
  // Image just before the trigger was stamped (poisoned examples only).
  std::optional<Image> pre_trigger;
  std::string params;
};

struct LabeledDataset {
  std::vector<Image> images;
  std::vector<Label> labels;
  std::vector<bool> poison_mask;
  std::vector<Provenance> provenance;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return images.size(); }
  bool empty() const noexcept { return images.empty(); }

  const Shape& image_shape() const {
    if (images.empty()) throw std::logic_error("image_shape on empty dataset");
    return images.front().shape();
  }

  void push_back(Image img, Label y, std::uint64_t origin) {
    images.push_back(std::move(img));
    labels.push_back(y);
    poison_mask.push_back(false);
    provenance.push_back(Provenance{"clean", origin, std::nullopt, {}});
  }

  std::size_t poison_count() const {
    return static_cast<std::size_t>(std::count(poison_mask.begin(), poison_mask.end(), true));
  }

  std::vector<std::size_t> indices_of_class(Label y) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == y) out.push_back(i);
    return out;
  }

  std::vector<std::size_t> poisoned_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < poison_mask.size(); ++i)
      if (poison_mask[i]) out.push_back(i);
    return out;
  }

  // Checks equal lengths and pixel range; throws std::logic_error naming the violation.
  void validate() const {
    const std::size_t n = images.size();
    if (labels.size() != n || poison_mask.size() != n || provenance.size() != n)
      throw std::logic_error("dataset columns have unequal lengths");
    for (std::size_t i = 0; i < n; ++i) {
      for (double v : images[i].data())
        if (!(v >= 0.0 && v <= 255.0))
          throw std::logic_error("pixel outside [0,255] in example " + std::to_string(i));
      if (labels[i] < 0 || (num_classes && static_cast<std::size_t>(labels[i]) >= num_classes))
        throw std::logic_error("label out of range in example " + std::to_string(i));
    }
  }

  LabeledDataset subset(std::span<const std::size_t> idx) const {
    LabeledDataset out;
    out.num_classes = num_classes;
    for (std::size_t i : idx) {
      out.images.push_back(images.at(i));
      out.labels.push_back(labels.at(i));
      out.poison_mask.push_back(poison_mask.at(i));
      out.provenance.push_back(provenance.at(i));
    }
    return out;
  }

  friend bool operator==(const LabeledDataset& a, const LabeledDataset& b) {
    return a.images == b.images && a.labels == b.labels && a.poison_mask == b.poison_mask;
  }
};

// Stacks images into a [batch, H, W, C] tensor.
inline Tensor stack_images(std::span<const Image> images) {
  if (images.empty()) throw std::invalid_argument("stack_images: empty batch");
  Shape shape{images.size()};
  const Shape& s = images.front().shape();
  shape.insert(shape.end(), s.begin(), s.end());
  Tensor out(shape);
  const std::size_t n = images.front().size();
  for (std::size_t i = 0; i < images.size(); ++i) {
    images[i].require_same_shape(images.front(), "stack_images");
    std::copy(images[i].raw(), images[i].raw() + n, out.raw() + i * n);
  }
  return out;
}

inline Tensor stack_images(const LabeledDataset& ds, std::span<const std::size_t> idx) {
  std::vector<Image> imgs;
  imgs.reserve(idx.size());
  for (std::size_t i : idx) imgs.push_back(ds.images.at(i));
  return stack_images(imgs);
}

inline std::vector<Image> unstack_images(const Tensor& batch) {
  Shape s(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t n = shape_size(s);
  std::vector<Image> out;
  out.reserve(batch.dim(0));
  for (std::size_t i = 0; i < batch.dim(0); ++i)
    out.emplace_back(s, std::vector<double>(batch.raw() + i * n, batch.raw() + (i + 1) * n));
  return out;
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

inline void clip_pixels(Image& img) {
  for (auto& v : img.data()) v = std::clamp(v, 0.0, 255.0);
}

// Disjoint seeded-shuffle partition into consecutive chunks of the given sizes.
inline std::vector<LabeledDataset> split(const LabeledDataset& ds, std::span<const std::size_t> sizes,
                                         std::uint64_t seed) {
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (total > ds.size())
    throw std::invalid_argument("split: requested " + std::to_string(total) + " examples from a dataset of " +
                                std::to_string(ds.size()));
  std::vector<std::size_t> perm = all_indices(ds.size());
  Rng rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<LabeledDataset> out;
  std::size_t at = 0;
  for (std::size_t s : sizes) {
    out.push_back(ds.subset(std::span<const std::size_t>(perm).subspan(at, s)));
    at += s;
  }
  return out;
}

inline bool origins_disjoint(const LabeledDataset& a, const LabeledDataset& b) {
  std::vector<std::uint64_t> x, y;
  for (const auto& p : a.provenance) x.push_back(p.origin);
  for (const auto& p : b.provenance) y.push_back(p.origin);
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  std::vector<std::uint64_t> common;
  std::set_intersection(x.begin(), x.end(), y.begin(), y.end(), std::back_inserter(common));
  return common.empty();
}

}  // namespace bdlab

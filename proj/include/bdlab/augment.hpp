#pragma once

#include <bdlab/dataset.hpp>
#include <bdlab/rng.hpp>

#include <cmath>
#include <random>

namespace bdlab {

struct AugmentConfig {
  bool flip = false;
  std::size_t crop_pad = 0;
  bool standardize = false;

  bool any() const noexcept { return flip || crop_pad > 0 || standardize; }
};

inline Image flip_horizontal(const Image& img) {
  const std::size_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  Image out(img.shape());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) out[(y * w + x) * c + ch] = img[(y * w + (w - 1 - x)) * c + ch];
  return out;
}

inline Image flip_vertical(const Image& img) {
  const std::size_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  Image out(img.shape());
  for (std::size_t y = 0; y < h; ++y)
    std::copy(img.raw() + (h - 1 - y) * w * c, img.raw() + (h - y) * w * c, out.raw() + y * w * c);
  return out;
}

// H x W window of the zero-padded image whose top-left corner sits at (oy, ox) in
// padded coordinates; (pad, pad) is the identity.
inline Image pad_crop(const Image& img, std::size_t pad, std::size_t oy, std::size_t ox) {
  const long h = static_cast<long>(img.dim(0)), w = static_cast<long>(img.dim(1));
  const std::size_t c = img.dim(2);
  Image out(img.shape(), 0.0);
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      const long sy = y + static_cast<long>(oy) - static_cast<long>(pad);
      const long sx = x + static_cast<long>(ox) - static_cast<long>(pad);
      if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
      for (std::size_t ch = 0; ch < c; ++ch) out[(y * w + x) * c + ch] = img[(sy * w + sx) * c + ch];
    }
  return out;
}

// (x - mean) / max(std, 1/sqrt(N))
inline Image standardize(const Image& img) {
  const double n = static_cast<double>(img.size());
  double mean = 0.0;
  for (double v : img.data()) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : img.data()) var += (v - mean) * (v - mean);
  const double denom = std::max(std::sqrt(var / n), 1.0 / std::sqrt(n));
  Image out(img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = (img[i] - mean) / denom;
  return out;
}

// Per image: coin-flip horizontal flip, zero-pad + uniform random crop, optional
// standardization. Draw order per image is fixed (coin, row offset, col offset)
// so results depend only on the rng state.
inline std::vector<Image> augment_batch(std::span<const Image> images, const AugmentConfig& cfg, Rng& rng) {
  std::vector<Image> out;
  out.reserve(images.size());
  for (const auto& img : images) {
    if (cfg.crop_pad >= std::min(img.dim(0), img.dim(1)))
      throw std::invalid_argument("augment_batch: crop_pad must be smaller than the image side");
    Image cur = img;
    if (cfg.flip && std::bernoulli_distribution(0.5)(rng)) cur = flip_horizontal(cur);
    if (cfg.crop_pad > 0) {
      std::uniform_int_distribution<std::size_t> off(0, 2 * cfg.crop_pad);
      const std::size_t oy = off(rng), ox = off(rng);
      cur = pad_crop(cur, cfg.crop_pad, oy, ox);
    }
    if (cfg.standardize) cur = standardize(cur);
    out.push_back(std::move(cur));
  }
  return out;
}

}  // namespace bdlab

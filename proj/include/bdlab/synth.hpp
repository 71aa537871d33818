#pragma once

// Offline stand-in corpus: seven-segment glyphs rendered with per-image jitter,
// stroke intensity, background level and pixel noise. Class c uses glyph c of
// 0-9 followed by A-F, so classes differ by one or more strokes, which is enough
// structure for adversarial perturbations and interpolations to mean something.

#include <bdlab/dataset.hpp>
#include <bdlab/rng.hpp>

#include <array>
#include <cmath>
#include <random>

namespace bdlab {

struct SynthSpec {
  std::size_t classes = 10;
  std::size_t per_class = 100;
  std::size_t height = 16;
  std::size_t width = 16;
  std::uint64_t seed = 0;
  double noise_sd = 8.0;
  // Stroke contrast above background and background level, drawn per image.
  double contrast_min = 50.0, contrast_max = 110.0;
  double background_min = 40.0, background_max = 120.0;
};

namespace detail {

// Segment bits: a=top b=upper-right c=lower-right d=bottom e=lower-left f=upper-left g=middle
inline constexpr std::array<std::uint8_t, 16> kGlyphs = {
    0b0111111,  // 0: abcdef
    0b0000110,  // 1: bc
    0b1011011,  // 2: abdeg
    0b1001111,  // 3: abcdg
    0b1100110,  // 4: bcfg
    0b1101101,  // 5: acdfg
    0b1111101,  // 6: acdefg
    0b0000111,  // 7: abc
    0b1111111,  // 8
    0b1101111,  // 9: abcdfg
    0b1110111,  // A: abcefg
    0b1111100,  // b: cdefg
    0b0111001,  // C: adef
    0b1011110,  // d: bcdeg
    0b1111001,  // E: adefg
    0b1110001,  // F: aefg
};

inline void fill_rect(std::vector<double>& mask, std::size_t w, long r0, long r1, long c0, long c1, long h,
                      double v) {
  for (long r = std::max(0L, r0); r <= std::min(h - 1, r1); ++r)
    for (long c = std::max(0L, c0); c <= std::min(static_cast<long>(w) - 1, c1); ++c) {
      auto& m = mask[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c)];
      m = std::max(m, v);
    }
}

}  // namespace detail

inline std::size_t max_synth_classes() { return detail::kGlyphs.size(); }

inline LabeledDataset synth_dataset(const SynthSpec& spec) {
  if (spec.classes < 2 || spec.classes > max_synth_classes())
    throw std::invalid_argument("synth_dataset: classes must be in [2, " + std::to_string(max_synth_classes()) + "]");
  if (spec.height < 8 || spec.width < 8) throw std::invalid_argument("synth_dataset: images must be at least 8x8");
  const long h = static_cast<long>(spec.height), w = static_cast<long>(spec.width);
  const long top = std::lround(0.15 * h), bottom = std::lround(0.82 * h) - 1;
  const long left = std::lround(0.28 * w), right = std::lround(0.70 * w) - 1;
  const long mid = (top + bottom) / 2;
  const long t = std::max(1L, h / 8);

  Rng rng(derive_seed(spec.seed, "synth"));
  std::uniform_int_distribution<int> jitter(-1, 1);
  std::uniform_real_distribution<double> stroke(spec.contrast_min, spec.contrast_max),
      background(spec.background_min, spec.background_max), seg_gain(0.85, 1.15);
  std::normal_distribution<double> noise(0.0, spec.noise_sd);

  LabeledDataset ds;
  ds.num_classes = spec.classes;
  std::uint64_t origin = 0;
  // Interleave classes so any prefix is roughly balanced.
  for (std::size_t i = 0; i < spec.per_class; ++i)
    for (std::size_t c = 0; c < spec.classes; ++c) {
      const long dy = jitter(rng), dx = jitter(rng);
      const double s = stroke(rng), b = background(rng);
      std::vector<double> mask(spec.height * spec.width, 0.0);
      const std::uint8_t bits = detail::kGlyphs[c];
      const long T = top + dy, B = bottom + dy, L = left + dx, R = right + dx, M = mid + dy;
      auto seg = [&](int bit, long r0, long r1, long c0, long c1) {
        const double g = seg_gain(rng);
        if (bits & (1u << bit)) detail::fill_rect(mask, spec.width, r0, r1, c0, c1, h, g);
      };
      seg(0, T, T + t - 1, L, R);          // a
      seg(1, T, M, R - t + 1, R);          // b
      seg(2, M, B, R - t + 1, R);          // c
      seg(3, B - t + 1, B, L, R);          // d
      seg(4, M, B, L, L + t - 1);          // e
      seg(5, T, M, L, L + t - 1);          // f
      seg(6, M - t / 2, M - t / 2 + t - 1, L, R);  // g
      std::vector<double> px(mask.size());
      for (std::size_t j = 0; j < px.size(); ++j)
        px[j] = std::clamp(std::round(b + s * std::min(mask[j], 1.15) + noise(rng)), 0.0, 255.0);
      ds.push_back(Image(Shape{spec.height, spec.width, 1}, std::move(px)), static_cast<Label>(c), origin++);
    }
  return ds;
}

}  // namespace bdlab

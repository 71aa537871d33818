#pragma once

#include <bdlab/dataset.hpp>

#include <sstream>
#include <string>
#include <vector>

namespace bdlab {

enum class Cell : signed char { black = -1, transparent = 0, white = 1 };

// kh x kw grid of cells, row-major.
struct Pattern {
  std::size_t rows = 0, cols = 0;
  std::vector<Cell> cells;

  Cell at(std::size_t r, std::size_t c) const { return cells.at(r * cols + c); }

  Pattern flipped(bool horizontal, bool vertical) const {
    Pattern p = *this;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        p.cells[r * cols + c] = at(vertical ? rows - 1 - r : r, horizontal ? cols - 1 - c : c);
    return p;
  }

  friend bool operator==(const Pattern&, const Pattern&) = default;
};

// 3x3 checkerboard with white corners and center.
inline Pattern make_canonical_pattern() {
  constexpr Cell W = Cell::white, B = Cell::black;
  return Pattern{3, 3, {W, B, W, B, W, B, W, B, W}};
}

// Text grid: rows separated by '/', cells W (white), B (black), '.' (transparent).
inline Pattern parse_pattern(const std::string& text) {
  Pattern p;
  std::vector<std::string> rows;
  std::stringstream ss(text);
  for (std::string row; std::getline(ss, row, '/');) rows.push_back(row);
  if (rows.empty() || rows.front().empty()) throw std::invalid_argument("trigger pattern is empty");
  p.rows = rows.size();
  p.cols = rows.front().size();
  for (const auto& row : rows) {
    if (row.size() != p.cols) throw std::invalid_argument("trigger pattern rows have unequal length: '" + text + "'");
    for (char ch : row) {
      switch (ch) {
        case 'W': case 'w': p.cells.push_back(Cell::white); break;
        case 'B': case 'b': p.cells.push_back(Cell::black); break;
        case '.': p.cells.push_back(Cell::transparent); break;
        default: throw std::invalid_argument(std::string("trigger pattern: unknown cell '") + ch + "'");
      }
    }
  }
  return p;
}

inline std::string format_pattern(const Pattern& p) {
  std::string out;
  for (std::size_t r = 0; r < p.rows; ++r) {
    if (r) out.push_back('/');
    for (std::size_t c = 0; c < p.cols; ++c)
      out.push_back(p.at(r, c) == Cell::white ? 'W' : p.at(r, c) == Cell::black ? 'B' : '.');
  }
  return out;
}

enum class Corners { one, four };

struct TriggerSpec {
  Pattern pattern = make_canonical_pattern();
  double amplitude = 255.0;
  Corners corners = Corners::one;
  std::size_t margin = 0;

  void validate() const {
    if (pattern.rows == 0 || pattern.cols == 0 || pattern.cells.size() != pattern.rows * pattern.cols)
      throw std::invalid_argument("trigger pattern is empty or malformed");
    if (!(amplitude >= 0.0 && amplitude <= 255.0)) throw std::invalid_argument("trigger amplitude must be in [0,255]");
  }

  TriggerSpec with_amplitude(double a) const {
    TriggerSpec t = *this;
    t.amplitude = a;
    return t;
  }
};

// Per-pixel sign field (+1 white, -1 black, 0 untouched) over an H x W image. With
// four corners the bottom-right copy is mirrored into the other corners; overlapping
// copies are summed and clamped so the field stays flip-symmetric.
inline std::vector<int> trigger_field(std::size_t h, std::size_t w, const TriggerSpec& t) {
  t.validate();
  const auto& p = t.pattern;
  if (p.rows + t.margin > h || p.cols + t.margin > w)
    throw std::invalid_argument("trigger pattern " + std::to_string(p.rows) + "x" + std::to_string(p.cols) +
                                " with margin " + std::to_string(t.margin) + " does not fit a " + std::to_string(h) +
                                "x" + std::to_string(w) + " image");
  std::vector<int> field(h * w, 0);
  auto stamp = [&](const Pattern& q, std::size_t r0, std::size_t c0) {
    for (std::size_t r = 0; r < q.rows; ++r)
      for (std::size_t c = 0; c < q.cols; ++c) field[(r0 + r) * w + c0 + c] += static_cast<int>(q.at(r, c));
  };
  const std::size_t bottom = h - t.margin - p.rows, right = w - t.margin - p.cols;
  stamp(p, bottom, right);
  if (t.corners == Corners::four) {
    stamp(p.flipped(true, false), bottom, t.margin);
    stamp(p.flipped(false, true), t.margin, right);
    stamp(p.flipped(true, true), t.margin, t.margin);
  }
  for (auto& v : field) v = std::clamp(v, -1, 1);
  return field;
}

// Adds the amplitude on white cells and subtracts it on black cells in every
// channel, then clips to [0,255]. Pixels outside the pattern are copied unchanged.
inline Image apply_trigger(const Image& x, const TriggerSpec& t) {
  if (x.rank() != 3) throw ShapeError("apply_trigger: image must be H x W x C, got " + shape_str(x.shape()));
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const auto field = trigger_field(h, w, t);
  Image out = x;
  for (std::size_t i = 0; i < h * w; ++i) {
    if (field[i] == 0) continue;
    for (std::size_t ch = 0; ch < c; ++ch) {
      double& v = out[i * c + ch];
      v = std::clamp(v + t.amplitude * field[i], 0.0, 255.0);
    }
  }
  return out;
}

// Copies trigger-cell pixels of `source` into `dst`; everything else is kept.
inline Image restore_trigger_cells(const Image& dst, const Image& source, const TriggerSpec& t) {
  dst.require_same_shape(source, "restore_trigger_cells");
  const std::size_t h = dst.dim(0), w = dst.dim(1), c = dst.dim(2);
  const auto field = trigger_field(h, w, t);
  Image out = dst;
  for (std::size_t i = 0; i < h * w; ++i)
    if (field[i] != 0)
      for (std::size_t ch = 0; ch < c; ++ch) out[i * c + ch] = source[i * c + ch];
  return out;
}

}  // namespace bdlab

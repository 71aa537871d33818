#pragma once

// Tape-based reverse-mode differentiation over Tensor-valued nodes.
//
// A Graph records every operation in creation order, which is also a valid
// topological order, so backward() is a single reverse sweep. A Graph must
// stay on one thread; independent graphs may run concurrently.

#include <bdlab/tensor.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace bdlab {

using Label = int;

struct Var {
  std::size_t id = 0;
};

struct CrossEntropy {
  double mean = 0.0;
  Tensor per_example;
};

// Row-max stabilized softmax cross entropy on a [batch x k] logit matrix.
inline CrossEntropy softmax_cross_entropy(const Tensor& logits, std::span<const Label> labels) {
  if (logits.rank() != 2) throw ShapeError("softmax_cross_entropy: logits must be [batch x k], got " + shape_str(logits.shape()));
  const std::size_t batch = logits.dim(0), k = logits.dim(1);
  if (labels.size() != batch)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(batch));
  CrossEntropy out{0.0, Tensor({batch})};
  for (std::size_t i = 0; i < batch; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(labels[i]) + " outside [0," +
                              std::to_string(k) + ")");
    const double* row = logits.raw() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    out.per_example[i] = std::log(z) - (row[labels[i]] - mx);
    out.mean += out.per_example[i];
  }
  out.mean /= static_cast<double>(batch);
  return out;
}

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  Var leaf(Tensor value, bool requires_grad = false) {
    return push(std::move(value), requires_grad, {}, nullptr);
  }
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var parameter(Tensor value) { return leaf(std::move(value), true); }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  // Gradient of the last backward() root with respect to v. Zero tensor if v did not
  // influence the root.
  const Tensor& grad(Var v) {
    auto& n = nodes_.at(v.id);
    ensure_grad(n);
    return n.grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  // out[i,j] = sum_k x[i,k] w[k,j] + b[j]
  Var affine(Var x, Var w, Var b) {
    const Tensor &xv = value(x), &wv = value(w), &bv = value(b);
    if (xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1 || xv.dim(1) != wv.dim(0) || wv.dim(1) != bv.dim(0))
      throw ShapeError("affine: x " + shape_str(xv.shape()) + ", w " + shape_str(wv.shape()) + ", b " +
                       shape_str(bv.shape()) + " (need [batch x in], [in x out], [out])");
    const std::size_t batch = xv.dim(0), in = xv.dim(1), out = wv.dim(1);
    Tensor y({batch, out});
    for (std::size_t i = 0; i < batch; ++i) std::copy(bv.raw(), bv.raw() + out, y.raw() + i * out);
    kernels::gemm_nn(batch, in, out, xv.raw(), wv.raw(), y.raw());
    return push(std::move(y), any_grad({x, w, b}), {x, w, b}, [=](Graph& g, Node& self) {
      const Tensor& gy = self.grad;
      if (g.node(x).requires_grad) {
        kernels::gemm_nt(batch, out, in, gy.raw(), g.value(w).raw(), g.grad_ref(x).raw());
      }
      if (g.node(w).requires_grad) {
        kernels::gemm_tn(batch, in, out, g.value(x).raw(), gy.raw(), g.grad_ref(w).raw());
      }
      if (g.node(b).requires_grad) {
        double* gb = g.grad_ref(b).raw();
        for (std::size_t i = 0; i < batch; ++i)
          for (std::size_t j = 0; j < out; ++j) gb[j] += gy[i * out + j];
      }
    });
  }

  // Cross-correlation of x[batch,H,W,C] with kernel[kh,kw,C,F] over a zero-padded input.
  Var conv2d(Var x, Var kernel, std::size_t stride, std::size_t pad) {
    const Tensor &xv = value(x), &kv = value(kernel);
    if (xv.rank() != 4 || kv.rank() != 4 || xv.dim(3) != kv.dim(2))
      throw ShapeError("conv2d: input " + shape_str(xv.shape()) + " kernel " + shape_str(kv.shape()) +
                       " (need [batch,H,W,C] and [kh,kw,C,F])");
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    const std::size_t batch = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
    const std::size_t kh = kv.dim(0), kw = kv.dim(1), f = kv.dim(3);
    if (kh > h + 2 * pad || kw > w + 2 * pad)
      throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                       " larger than padded input " + std::to_string(h + 2 * pad) + "x" +
                       std::to_string(w + 2 * pad));
    const std::size_t ho = (h + 2 * pad - kh) / stride + 1, wo = (w + 2 * pad - kw) / stride + 1;
    const std::size_t patch = kh * kw * c, rows = batch * ho * wo;

    // im2col: one row per output position
    auto cols = std::make_shared<std::vector<double>>(rows * patch, 0.0);
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double* dst = cols->data() + ((n * ho + oy) * wo + ox) * patch;
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              const double* src = xv.raw() + ((n * h + iy) * w + ix) * c;
              std::copy(src, src + c, dst + (ky * kw + kx) * c);
            }
          }
        }
    Tensor y({batch, ho, wo, f});
    kernels::gemm_nn(rows, patch, f, cols->data(), kv.raw(), y.raw());

    return push(std::move(y), any_grad({x, kernel}), {x, kernel}, [=](Graph& g, Node& self) {
      const Tensor& gy = self.grad;
      if (g.node(kernel).requires_grad)
        kernels::gemm_tn(rows, patch, f, cols->data(), gy.raw(), g.grad_ref(kernel).raw());
      if (g.node(x).requires_grad) {
        std::vector<double> gcols(rows * patch, 0.0);
        kernels::gemm_nt(rows, f, patch, gy.raw(), g.value(kernel).raw(), gcols.data());
        double* gx = g.grad_ref(x).raw();
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const double* src = gcols.data() + ((n * ho + oy) * wo + ox) * patch;
              for (std::size_t ky = 0; ky < kh; ++ky) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                if (iy < 0 || iy >= static_cast<long>(h)) continue;
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                  if (ix < 0 || ix >= static_cast<long>(w)) continue;
                  double* dst = gx + ((n * h + iy) * w + ix) * c;
                  const double* s = src + (ky * kw + kx) * c;
                  for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += s[ch];
                }
              }
            }
      }
    });
  }

  // Adds b[C] along the last axis.
  Var bias_add(Var x, Var b) {
    const Tensor &xv = value(x), &bv = value(b);
    if (bv.rank() != 1 || xv.shape().back() != bv.dim(0))
      throw ShapeError("bias_add: input " + shape_str(xv.shape()) + " bias " + shape_str(bv.shape()));
    const std::size_t c = bv.dim(0);
    Tensor y = xv;
    for (std::size_t r = 0; r < y.size(); r += c)
      for (std::size_t j = 0; j < c; ++j) y[r + j] += bv[j];
    return push(std::move(y), any_grad({x, b}), {x, b}, [=](Graph& g, Node& self) {
      if (g.node(x).requires_grad) g.grad_ref(x) += self.grad;
      if (g.node(b).requires_grad) {
        double* gb = g.grad_ref(b).raw();
        const double* gy = self.grad.raw();
        for (std::size_t r = 0; r < self.grad.size(); r += c)
          for (std::size_t j = 0; j < c; ++j) gb[j] += gy[r + j];
      }
    });
  }

  // max(0, x); the subgradient at 0 is 0.
  Var relu(Var x) {
    Tensor y = value(x);
    for (auto& v : y.data()) v = v > 0.0 ? v : 0.0;
    return push(std::move(y), any_grad({x}), {x}, [=](Graph& g, Node& self) {
      const Tensor& xv = g.value(x);
      double* gx = g.grad_ref(x).raw();
      const double* gy = self.grad.raw();
      for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += xv[i] > 0.0 ? gy[i] : 0.0;
    });
  }

  Var sigmoid(Var x) {
    Tensor y = value(x);
    for (auto& v : y.data()) v = 1.0 / (1.0 + std::exp(-v));
    return push(std::move(y), any_grad({x}), {x}, [=](Graph& g, Node& self) {
      double* gx = g.grad_ref(x).raw();
      for (std::size_t i = 0; i < self.value.size(); ++i) {
        const double s = self.value[i];
        gx[i] += self.grad[i] * s * (1.0 - s);
      }
    });
  }

  // Non-overlapping size x size max pooling over [batch,H,W,C]; trailing rows/cols dropped.
  Var maxpool2d(Var x, std::size_t size = 2) {
    const Tensor& xv = value(x);
    if (xv.rank() != 4 || size == 0 || xv.dim(1) < size || xv.dim(2) < size)
      throw ShapeError("maxpool2d: input " + shape_str(xv.shape()) + " pool " + std::to_string(size));
    const std::size_t batch = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
    const std::size_t ho = h / size, wo = w / size;
    Tensor y({batch, ho, wo, c});
    auto arg = std::make_shared<std::vector<std::size_t>>(y.size());
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox)
          for (std::size_t ch = 0; ch < c; ++ch) {
            std::size_t best = ((n * h + oy * size) * w + ox * size) * c + ch;
            for (std::size_t py = 0; py < size; ++py)
              for (std::size_t px = 0; px < size; ++px) {
                const std::size_t idx = ((n * h + oy * size + py) * w + ox * size + px) * c + ch;
                if (xv[idx] > xv[best]) best = idx;
              }
            const std::size_t o = ((n * ho + oy) * wo + ox) * c + ch;
            y[o] = xv[best];
            (*arg)[o] = best;
          }
    return push(std::move(y), any_grad({x}), {x}, [=](Graph& g, Node& self) {
      double* gx = g.grad_ref(x).raw();
      for (std::size_t o = 0; o < arg->size(); ++o) gx[(*arg)[o]] += self.grad[o];
    });
  }

  Var reshape(Var x, Shape shape) {
    Tensor y = value(x).reshaped(std::move(shape));
    return push(std::move(y), any_grad({x}), {x}, [=](Graph& g, Node& self) {
      double* gx = g.grad_ref(x).raw();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
    });
  }

  // [batch, ...] -> [batch, rest]
  Var flatten(Var x) {
    const Tensor& xv = value(x);
    return reshape(x, {xv.dim(0), xv.size() / xv.dim(0)});
  }

  // s * x + offset
  Var scale(Var x, double s, double offset = 0.0) {
    Tensor y = value(x);
    for (auto& v : y.data()) v = s * v + offset;
    return push(std::move(y), any_grad({x}), {x}, [=](Graph& g, Node& self) {
      double* gx = g.grad_ref(x).raw();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += s * self.grad[i];
    });
  }

  Var add(Var a, Var b) { return combine(a, b, 1.0); }
  Var sub(Var a, Var b) { return combine(a, b, -1.0); }

  Var mul(Var a, Var b) {
    const Tensor &av = value(a), &bv = value(b);
    av.require_same_shape(bv, "mul");
    Tensor y = av;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
    return push(std::move(y), any_grad({a, b}), {a, b}, [=](Graph& g, Node& self) {
      if (g.node(a).requires_grad) {
        double* ga = g.grad_ref(a).raw();
        const Tensor& o = g.value(b);
        for (std::size_t i = 0; i < o.size(); ++i) ga[i] += self.grad[i] * o[i];
      }
      if (g.node(b).requires_grad) {
        double* gb = g.grad_ref(b).raw();
        const Tensor& o = g.value(a);
        for (std::size_t i = 0; i < o.size(); ++i) gb[i] += self.grad[i] * o[i];
      }
    });
  }

  // Per-example (x - mean) / max(std, 1/sqrt(N)) over all non-batch axes.
  Var standardize(Var x) {
    const Tensor& xv = value(x);
    const std::size_t batch = xv.dim(0), n = xv.size() / batch;
    const double floor = 1.0 / std::sqrt(static_cast<double>(n));
    Tensor y(xv.shape());
    auto denom = std::make_shared<std::vector<double>>(batch);
    auto floored = std::make_shared<std::vector<char>>(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      const double* src = xv.raw() + i * n;
      double mean = 0.0;
      for (std::size_t j = 0; j < n; ++j) mean += src[j];
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t j = 0; j < n; ++j) var += (src[j] - mean) * (src[j] - mean);
      const double sd = std::sqrt(var / static_cast<double>(n));
      (*floored)[i] = sd <= floor;
      (*denom)[i] = std::max(sd, floor);
      for (std::size_t j = 0; j < n; ++j) y[i * n + j] = (src[j] - mean) / (*denom)[i];
    }
    return push(std::move(y), any_grad({x}), {x}, [=](Graph& g, Node& self) {
      double* gx = g.grad_ref(x).raw();
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t i = 0; i < batch; ++i) {
        const double* gy = self.grad.raw() + i * n;
        const double* yv = self.value.raw() + i * n;
        double gmean = 0.0, gdot = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          gmean += gy[j];
          gdot += gy[j] * yv[j];
        }
        gmean *= inv_n;
        gdot *= inv_n;
        const double d = (*denom)[i];
        for (std::size_t j = 0; j < n; ++j) {
          double v = gy[j] - gmean;
          if (!(*floored)[i]) v -= yv[j] * gdot;
          gx[i * n + j] += v / d;
        }
      }
    });
  }

  Var sum(Var x) {
    Tensor y = Tensor::scalar(bdlab::sum(value(x)));
    return push(std::move(y), any_grad({x}), {x}, [=](Graph& g, Node& self) {
      const double s = self.grad[0];
      for (auto& v : g.grad_ref(x).data()) v += s;
    });
  }

  // sum of squares of all entries
  Var sum_squares(Var x) {
    const Tensor& xv = value(x);
    Tensor y = Tensor::scalar(dot(xv.data(), xv.data()));
    return push(std::move(y), any_grad({x}), {x}, [=](Graph& g, Node& self) {
      const double s = 2.0 * self.grad[0];
      const Tensor& v = g.value(x);
      double* gx = g.grad_ref(x).raw();
      for (std::size_t i = 0; i < v.size(); ++i) gx[i] += s * v[i];
    });
  }

  // Mean softmax cross entropy; per-example losses are available via per_example_losses().
  Var softmax_cross_entropy(Var logits, std::span<const Label> labels, double weight = 1.0) {
    CrossEntropy ce = bdlab::softmax_cross_entropy(value(logits), labels);
    const std::size_t batch = value(logits).dim(0), k = value(logits).dim(1);
    std::vector<Label> lab(labels.begin(), labels.end());
    Tensor y = Tensor::scalar(weight * ce.mean);
    last_per_example_ = std::move(ce.per_example);
    return push(std::move(y), any_grad({logits}), {logits}, [=, lab = std::move(lab)](Graph& g, Node& self) {
      const Tensor& lv = g.value(logits);
      double* gl = g.grad_ref(logits).raw();
      const double s = weight * self.grad[0] / static_cast<double>(batch);
      for (std::size_t i = 0; i < batch; ++i) {
        const double* row = lv.raw() + i * k;
        const double mx = *std::max_element(row, row + k);
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
        for (std::size_t j = 0; j < k; ++j) {
          const double p = std::exp(row[j] - mx) / z;
          gl[i * k + j] += s * (p - (static_cast<Label>(j) == lab[i] ? 1.0 : 0.0));
        }
      }
    });
  }

  // Per-example losses of the most recent softmax_cross_entropy node.
  const Tensor& per_example_losses() const { return last_per_example_; }

  // Reverse sweep from a scalar root. Gradients from a previous backward are cleared.
  void backward(Var root) {
    auto& r = nodes_.at(root.id);
    if (r.value.size() != 1)
      throw ShapeError("backward: root must be scalar, got " + shape_str(r.value.shape()));
    for (auto& n : nodes_) n.grad = Tensor();
    ensure_grad(r);
    r.grad[0] = 1.0;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, n);
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Graph&, Node&)> backward;
  };

  Node& node(Var v) { return nodes_.at(v.id); }

  Tensor& grad_ref(Var v) {
    auto& n = nodes_.at(v.id);
    ensure_grad(n);
    return n.grad;
  }

  static void ensure_grad(Node& n) {
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  }

  bool any_grad(std::initializer_list<Var> vs) const {
    for (auto v : vs)
      if (nodes_.at(v.id).requires_grad) return true;
    return false;
  }

  Var combine(Var a, Var b, double sign) {
    const Tensor &av = value(a), &bv = value(b);
    av.require_same_shape(bv, sign > 0 ? "add" : "sub");
    Tensor y = av;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += sign * bv[i];
    return push(std::move(y), any_grad({a, b}), {a, b}, [=](Graph& g, Node& self) {
      if (g.node(a).requires_grad) g.grad_ref(a) += self.grad;
      if (g.node(b).requires_grad) {
        double* gb = g.grad_ref(b).raw();
        for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] += sign * self.grad[i];
      }
    });
  }

  Var push(Tensor value, bool requires_grad, std::vector<Var> parents,
           std::function<void(Graph&, Node&)> backward) {
    nodes_.push_back(Node{std::move(value), Tensor(), requires_grad, std::move(parents), std::move(backward)});
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  Tensor last_per_example_;
};

}  // namespace bdlab

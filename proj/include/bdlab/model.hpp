#pragma once

#include <bdlab/autograd.hpp>
#include <bdlab/dataset.hpp>
#include <bdlab/rng.hpp>

#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

namespace bdlab {

enum class Arch { cnn, mlp, autoencoder };

inline std::string to_string(Arch a) {
  switch (a) {
    case Arch::cnn: return "cnn";
    case Arch::mlp: return "mlp";
    case Arch::autoencoder: return "autoencoder";
  }
  return "?";
}

inline Arch parse_arch(const std::string& s) {
  if (s == "cnn") return Arch::cnn;
  if (s == "mlp") return Arch::mlp;
  if (s == "autoencoder" || s == "ae") return Arch::autoencoder;
  throw std::invalid_argument("unknown architecture '" + s + "' (expected cnn, mlp or autoencoder)");
}

// How raw [0,255] pixels enter a classifier: x/255, or per-image standardization.
enum class InputNorm { scale, standardize };

struct ModelParams {
  Arch arch = Arch::cnn;
  Shape input_shape;  // H, W, C
  std::size_t outputs = 0;  // class count k, or latent size d for the autoencoder
  std::vector<std::size_t> widths;
  InputNorm input_norm = InputNorm::scale;
  std::vector<Tensor> params;

  bool is_classifier() const noexcept { return arch != Arch::autoencoder; }
  std::size_t input_size() const { return shape_size(input_shape); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.size();
    return n;
  }

  bool all_finite() const {
    for (const auto& p : params)
      if (!p.all_finite()) return false;
    return true;
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

inline std::vector<std::size_t> default_widths(Arch arch) {
  switch (arch) {
    case Arch::cnn: return {16, 32, 64};
    case Arch::mlp: return {256, 256};
    case Arch::autoencoder: return {};
  }
  return {};
}

namespace detail {

inline Tensor he_init(Shape shape, std::size_t fan_in, Rng& rng) {
  std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = nd(rng);
  return t;
}

inline Tensor glorot_init(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / static_cast<double>(fan_in + fan_out)));
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = nd(rng);
  return t;
}

}  // namespace detail

// CNN: conv3x3(w0)-relu-pool2-conv3x3(w1)-relu-pool2-affine(w2)-relu-affine(k).
// MLP: affine(w0)-relu-affine(w1)-relu-affine(k).
// Autoencoder: affine encoder to d, affine decoder back, 255 * sigmoid output.
inline ModelParams init_model(Arch arch, Shape input_shape, std::size_t k_or_d, std::uint64_t seed,
                              std::vector<std::size_t> widths = {}) {
  if (input_shape.size() != 3) throw ShapeError("init_model: input shape must be H x W x C");
  if (k_or_d == 0) throw std::invalid_argument("init_model: output size must be positive");
  if (widths.empty()) widths = default_widths(arch);
  ModelParams m;
  m.arch = arch;
  m.input_shape = input_shape;
  m.outputs = k_or_d;
  m.widths = widths;
  Rng rng(derive_seed(seed, "init"));
  const std::size_t h = input_shape[0], w = input_shape[1], c = input_shape[2], n = h * w * c;
  switch (arch) {
    case Arch::cnn: {
      if (widths.size() != 3) throw std::invalid_argument("init_model: cnn needs 3 widths");
      if (h < 4 || w < 4) throw ShapeError("init_model: cnn input must be at least 4x4");
      const std::size_t f0 = widths[0], f1 = widths[1], hid = widths[2];
      const std::size_t flat = (h / 2 / 2) * (w / 2 / 2) * f1;
      m.params.push_back(detail::he_init({3, 3, c, f0}, 9 * c, rng));
      m.params.emplace_back(Shape{f0}, 0.0);
      m.params.push_back(detail::he_init({3, 3, f0, f1}, 9 * f0, rng));
      m.params.emplace_back(Shape{f1}, 0.0);
      m.params.push_back(detail::he_init({flat, hid}, flat, rng));
      m.params.emplace_back(Shape{hid}, 0.0);
      m.params.push_back(detail::glorot_init({hid, k_or_d}, hid, k_or_d, rng));
      m.params.emplace_back(Shape{k_or_d}, 0.0);
      break;
    }
    case Arch::mlp: {
      if (widths.size() != 2) throw std::invalid_argument("init_model: mlp needs 2 widths");
      m.params.push_back(detail::he_init({n, widths[0]}, n, rng));
      m.params.emplace_back(Shape{widths[0]}, 0.0);
      m.params.push_back(detail::he_init({widths[0], widths[1]}, widths[0], rng));
      m.params.emplace_back(Shape{widths[1]}, 0.0);
      m.params.push_back(detail::glorot_init({widths[1], k_or_d}, widths[1], k_or_d, rng));
      m.params.emplace_back(Shape{k_or_d}, 0.0);
      break;
    }
    case Arch::autoencoder: {
      m.params.push_back(detail::glorot_init({n, k_or_d}, n, k_or_d, rng));
      m.params.emplace_back(Shape{k_or_d}, 0.0);
      m.params.push_back(detail::glorot_init({k_or_d, n}, k_or_d, n, rng));
      m.params.emplace_back(Shape{n}, 0.0);
      break;
    }
  }
  return m;
}

// Parameter leaves for one graph evaluation.
inline std::vector<Var> bind_params(Graph& g, const ModelParams& m, bool requires_grad) {
  std::vector<Var> vars;
  vars.reserve(m.params.size());
  for (const auto& p : m.params) vars.push_back(g.leaf(p, requires_grad));
  return vars;
}

inline void require_batch_shape(const ModelParams& m, const Tensor& batch) {
  if (batch.rank() != 4 || Shape(batch.shape().begin() + 1, batch.shape().end()) != m.input_shape)
    throw ShapeError("model expects [batch," + shape_str(m.input_shape).substr(1) + " input, got " +
                     shape_str(batch.shape()));
}

// Logits node for raw-pixel images node [batch,H,W,C].
inline Var classifier_graph(Graph& g, const ModelParams& m, const std::vector<Var>& p, Var images) {
  if (!m.is_classifier()) throw std::invalid_argument("classifier forward called on an autoencoder");
  Var x = m.input_norm == InputNorm::standardize ? g.standardize(images) : g.scale(images, 1.0 / 255.0);
  if (m.arch == Arch::cnn) {
    x = g.maxpool2d(g.relu(g.bias_add(g.conv2d(x, p[0], 1, 1), p[1])), 2);
    x = g.maxpool2d(g.relu(g.bias_add(g.conv2d(x, p[2], 1, 1), p[3])), 2);
    x = g.relu(g.affine(g.flatten(x), p[4], p[5]));
    return g.affine(x, p[6], p[7]);
  }
  x = g.relu(g.affine(g.flatten(x), p[0], p[1]));
  x = g.relu(g.affine(x, p[2], p[3]));
  return g.affine(x, p[4], p[5]);
}

inline void require_autoencoder(const ModelParams& m) {
  if (m.arch != Arch::autoencoder) throw std::invalid_argument("operation requires an autoencoder, got " + to_string(m.arch));
}

// z = W_enc (x / 255) + b_enc
inline Var encoder_graph(Graph& g, const ModelParams& m, const std::vector<Var>& p, Var images) {
  require_autoencoder(m);
  return g.affine(g.flatten(g.scale(images, 1.0 / 255.0)), p[0], p[1]);
}

// 255 * sigmoid(W_dec z + b_dec), reshaped to [batch,H,W,C]
inline Var decoder_graph(Graph& g, const ModelParams& m, const std::vector<Var>& p, Var z) {
  require_autoencoder(m);
  Var y = g.scale(g.sigmoid(g.affine(z, p[2], p[3])), 255.0);
  Shape s{g.value(z).dim(0)};
  s.insert(s.end(), m.input_shape.begin(), m.input_shape.end());
  return g.reshape(y, s);
}

inline Tensor forward_logits(const ModelParams& m, const Tensor& batch) {
  require_batch_shape(m, batch);
  Graph g;
  auto p = bind_params(g, m, false);
  return g.value(classifier_graph(g, m, p, g.constant(batch)));
}

inline std::vector<Label> argmax_rows(const Tensor& logits) {
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  std::vector<Label> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = logits.raw() + i * k;
    out[i] = static_cast<Label>(std::max_element(row, row + k) - row);
  }
  return out;
}

inline constexpr std::size_t kEvalChunk = 256;

inline std::vector<Label> predict(const ModelParams& m, std::span<const Image> images) {
  std::vector<Label> out;
  out.reserve(images.size());
  for (std::size_t at = 0; at < images.size(); at += kEvalChunk) {
    const auto chunk = images.subspan(at, std::min(kEvalChunk, images.size() - at));
    auto pred = argmax_rows(forward_logits(m, stack_images(chunk)));
    out.insert(out.end(), pred.begin(), pred.end());
  }
  return out;
}

// Unaugmented softmax cross entropy of each selected example.
inline Tensor per_example_loss(const ModelParams& m, const LabeledDataset& ds, std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("per_example_loss: no indices");
  Tensor out({indices.size()});
  for (std::size_t at = 0; at < indices.size(); at += kEvalChunk) {
    const auto idx = indices.subspan(at, std::min(kEvalChunk, indices.size() - at));
    std::vector<Label> labels;
    for (std::size_t i : idx) labels.push_back(ds.labels.at(i));
    const auto ce = softmax_cross_entropy(forward_logits(m, stack_images(ds, idx)), labels);
    std::copy(ce.per_example.raw(), ce.per_example.raw() + idx.size(), out.raw() + at);
  }
  return out;
}

inline Tensor per_example_loss(const ModelParams& m, const LabeledDataset& ds) {
  const auto idx = all_indices(ds.size());
  return per_example_loss(m, ds, idx);
}

struct LossAndGrad {
  double loss = 0.0;
  Tensor per_example;
  std::vector<Tensor> grads;
};

// Mean cross entropy of a labeled batch and its gradient for every parameter tensor.
inline LossAndGrad loss_and_grad(const ModelParams& m, const Tensor& batch, std::span<const Label> labels) {
  require_batch_shape(m, batch);
  Graph g;
  auto p = bind_params(g, m, true);
  Var loss = g.softmax_cross_entropy(classifier_graph(g, m, p, g.constant(batch)), labels);
  LossAndGrad out;
  out.loss = g.value(loss)[0];
  out.per_example = g.per_example_losses();
  g.backward(loss);
  for (Var v : p) out.grads.push_back(g.grad(v));
  return out;
}

struct InputGrad {
  Tensor per_example;
  Tensor grad;  // d(loss_i)/d(x_i) stacked like the batch
};

// Gradient of each example's own loss with respect to its pixels.
inline InputGrad input_gradient(const ModelParams& m, const Tensor& batch, std::span<const Label> labels) {
  require_batch_shape(m, batch);
  Graph g;
  auto p = bind_params(g, m, false);
  Var x = g.leaf(batch, true);
  const double n = static_cast<double>(batch.dim(0));
  // The mean is rescaled by n so every example sees the gradient of its own loss.
  Var loss = g.softmax_cross_entropy(classifier_graph(g, m, p, x), labels, n);
  InputGrad out{g.per_example_losses(), Tensor()};
  g.backward(loss);
  out.grad = g.grad(x);
  return out;
}

inline Tensor encode(const ModelParams& ae, const Tensor& batch) {
  require_autoencoder(ae);
  require_batch_shape(ae, batch);
  Graph g;
  auto p = bind_params(g, ae, false);
  return g.value(encoder_graph(g, ae, p, g.constant(batch)));
}

// z is [batch, d] or [d]; output images are [batch,H,W,C] (batch 1 for a single z).
inline Tensor decode_batch(const ModelParams& ae, const Tensor& z) {
  require_autoencoder(ae);
  const Tensor zz = z.rank() == 1 ? z.reshaped({1, z.dim(0)}) : z;
  if (zz.rank() != 2 || zz.dim(1) != ae.outputs)
    throw ShapeError("decode: latent must have " + std::to_string(ae.outputs) + " entries, got " + shape_str(z.shape()));
  Graph g;
  auto p = bind_params(g, ae, false);
  return g.value(decoder_graph(g, ae, p, g.constant(zz)));
}

inline Image decode(const ModelParams& ae, const Tensor& z) {
  return unstack_images(decode_batch(ae, z)).front();
}

// --- checkpoints ---------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'B', 'D', 'L', 'A', 'B', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

struct ByteWriter {
  std::string buf;
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf += s;
  }
};

struct ByteReader {
  const std::string& buf;
  std::size_t at = 0;
  const std::string& path;
  void need(std::size_t n) {
    if (at + n > buf.size()) throw std::runtime_error(path + ": truncated checkpoint");
  }
  std::uint64_t uint(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= std::uint64_t(static_cast<unsigned char>(buf[at++])) << (8 * i);
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::size_t n = u32();
    need(n);
    std::string s = buf.substr(at, n);
    at += n;
    return s;
  }
};

}  // namespace detail

// Layout (little-endian): magic[8], version u32, arch string, input rank u32 + dims u64,
// outputs u64, input_norm u32, widths count u32 + u64 each, tensor count u32, then per
// tensor rank u32, dims u64, values f64.
inline std::string serialize_checkpoint(const ModelParams& m) {
  detail::ByteWriter w;
  w.buf.append(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.str(to_string(m.arch));
  w.u32(static_cast<std::uint32_t>(m.input_shape.size()));
  for (auto d : m.input_shape) w.u64(d);
  w.u64(m.outputs);
  w.u32(m.input_norm == InputNorm::standardize ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(m.widths.size()));
  for (auto d : m.widths) w.u64(d);
  w.u32(static_cast<std::uint32_t>(m.params.size()));
  for (const auto& t : m.params) {
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u64(d);
    for (double v : t.data()) w.f64(v);
  }
  return w.buf;
}

inline ModelParams deserialize_checkpoint(const std::string& bytes, const std::string& path = "<memory>") {
  if (bytes.size() < 8 || !std::equal(kCheckpointMagic, kCheckpointMagic + 8, bytes.begin()))
    throw std::runtime_error(path + ": not a model checkpoint");
  detail::ByteReader r{bytes, 8, path};
  if (const auto v = r.u32(); v != kCheckpointVersion)
    throw std::runtime_error(path + ": unsupported checkpoint version " + std::to_string(v));
  ModelParams m;
  m.arch = parse_arch(r.str());
  m.input_shape.resize(r.u32());
  for (auto& d : m.input_shape) d = r.u64();
  m.outputs = r.u64();
  m.input_norm = r.u32() ? InputNorm::standardize : InputNorm::scale;
  m.widths.resize(r.u32());
  for (auto& d : m.widths) d = r.u64();
  const std::size_t count = r.u32();
  for (std::size_t i = 0; i < count; ++i) {
    Shape s(r.u32());
    for (auto& d : s) d = r.u64();
    std::vector<double> data(shape_size(s));
    r.need(data.size() * 8);
    for (auto& v : data) v = r.f64();
    m.params.emplace_back(std::move(s), std::move(data));
  }
  if (r.at != bytes.size()) throw std::runtime_error(path + ": trailing bytes in checkpoint");
  const auto ref = init_model(m.arch, m.input_shape, m.outputs, 0, m.widths);
  if (ref.params.size() != m.params.size())
    throw std::runtime_error(path + ": tensor count does not match architecture");
  for (std::size_t i = 0; i < m.params.size(); ++i)
    if (ref.params[i].shape() != m.params[i].shape())
      throw std::runtime_error(path + ": parameter " + std::to_string(i) + " has shape " +
                               shape_str(m.params[i].shape()) + ", expected " + shape_str(ref.params[i].shape()));
  return m;
}

inline void save_checkpoint(const ModelParams& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  const auto bytes = serialize_checkpoint(m);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open checkpoint");
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return deserialize_checkpoint(bytes, path);
}

}  // namespace bdlab

#pragma once

// IDX (MNIST container) reading and writing.
//
// Images are stored as unsigned bytes (magic 0x00000803) when every pixel is an
// integer in [0,255]; otherwise as big-endian float64 (magic 0x00000E03) so that
// perturbed images survive a round trip bit for bit. Labels are always
// unsigned bytes (magic 0x00000801).

#include <bdlab/dataset.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

namespace bdlab {

enum class IdxErrorKind { io, bad_magic, truncated, count_mismatch };

class IdxError : public std::runtime_error {
 public:
  IdxError(IdxErrorKind kind, std::string path, const std::string& what)
      : std::runtime_error(path + ": " + what), kind_(kind), path_(std::move(path)) {}
  IdxErrorKind kind() const noexcept { return kind_; }
  const std::string& path() const noexcept { return path_; }

 private:
  IdxErrorKind kind_;
  std::string path_;
};

inline constexpr std::uint32_t kIdxImagesU8 = 0x00000803;
inline constexpr std::uint32_t kIdxImagesF64 = 0x00000E03;
inline constexpr std::uint32_t kIdxLabelsU8 = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxErrorKind::io, path, "cannot open file");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at) {
  return (std::uint32_t(b[at]) << 24) | (std::uint32_t(b[at + 1]) << 16) | (std::uint32_t(b[at + 2]) << 8) |
         std::uint32_t(b[at + 3]);
}

inline void put32(std::string& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xff));
}

inline void put64(std::string& out, std::uint64_t v) {
  for (int s = 56; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xff));
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IdxError(IdxErrorKind::io, path, "cannot open file for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IdxError(IdxErrorKind::io, path, "write failed");
}

}  // namespace detail

// Parses an images file into H x W x 1 images.
inline std::vector<Image> read_idx_images(const std::string& path) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() < 16) throw IdxError(IdxErrorKind::truncated, path, "truncated header");
  const std::uint32_t magic = detail::be32(bytes, 0);
  if (magic != kIdxImagesU8 && magic != kIdxImagesF64)
    throw IdxError(IdxErrorKind::bad_magic, path, "wrong magic for an images file");
  const std::size_t n = detail::be32(bytes, 4), rows = detail::be32(bytes, 8), cols = detail::be32(bytes, 12);
  const std::size_t elem = magic == kIdxImagesU8 ? 1 : 8;
  const std::size_t px = rows * cols;
  if (bytes.size() < 16 + n * px * elem) throw IdxError(IdxErrorKind::truncated, path, "truncated pixel payload");
  if (n > 0 && px == 0) throw IdxError(IdxErrorKind::truncated, path, "zero-sized images");
  std::vector<Image> out;
  out.reserve(n);
  std::size_t at = 16;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> data(px);
    for (std::size_t j = 0; j < px; ++j) {
      if (elem == 1) {
        data[j] = bytes[at++];
      } else {
        std::uint64_t bits = 0;
        for (int k = 0; k < 8; ++k) bits = (bits << 8) | bytes[at++];
        data[j] = std::bit_cast<double>(bits);
      }
    }
    out.emplace_back(Shape{rows, cols, 1}, std::move(data));
  }
  return out;
}

inline std::vector<Label> read_idx_labels(const std::string& path) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() < 8) throw IdxError(IdxErrorKind::truncated, path, "truncated header");
  if (detail::be32(bytes, 0) != kIdxLabelsU8) throw IdxError(IdxErrorKind::bad_magic, path, "wrong magic for a labels file");
  const std::size_t n = detail::be32(bytes, 4);
  if (bytes.size() < 8 + n) throw IdxError(IdxErrorKind::truncated, path, "truncated label payload");
  return std::vector<Label>(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n));
}

inline LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path,
                               std::uint64_t origin_base = 0) {
  auto images = read_idx_images(images_path);
  auto labels = read_idx_labels(labels_path);
  if (images.size() != labels.size())
    throw IdxError(IdxErrorKind::count_mismatch, labels_path,
                   "label count " + std::to_string(labels.size()) + " does not match image count " +
                       std::to_string(images.size()) + " in " + images_path);
  LabeledDataset ds;
  Label max_label = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    max_label = std::max(max_label, labels[i]);
    ds.push_back(std::move(images[i]), labels[i], origin_base + i);
  }
  ds.num_classes = images.empty() ? 0 : static_cast<std::size_t>(max_label) + 1;
  return ds;
}

inline bool all_integral_pixels(std::span<const Image> images) {
  for (const auto& img : images)
    for (double v : img.data())
      if (!(v >= 0.0 && v <= 255.0) || v != std::floor(v)) return false;
  return true;
}

// Writes single-channel images; the element type is picked per the header comment.
inline void write_idx_images(const std::string& path, std::span<const Image> images) {
  std::size_t rows = 0, cols = 0;
  if (!images.empty()) {
    const Shape& s = images.front().shape();
    if (s.size() != 3 || s[2] != 1) throw std::invalid_argument("IDX export supports H x W x 1 images only");
    rows = s[0];
    cols = s[1];
  }
  const bool bytes8 = all_integral_pixels(images);
  std::string out;
  detail::put32(out, bytes8 ? kIdxImagesU8 : kIdxImagesF64);
  detail::put32(out, static_cast<std::uint32_t>(images.size()));
  detail::put32(out, static_cast<std::uint32_t>(rows));
  detail::put32(out, static_cast<std::uint32_t>(cols));
  for (const auto& img : images) {
    if (img.shape() != images.front().shape()) throw std::invalid_argument("IDX export needs uniform image shape");
    for (double v : img.data()) {
      if (bytes8)
        out.push_back(static_cast<char>(static_cast<unsigned char>(v)));
      else
        detail::put64(out, std::bit_cast<std::uint64_t>(v));
    }
  }
  detail::write_file(path, out);
}

inline void write_idx_labels(const std::string& path, std::span<const Label> labels) {
  std::string out;
  detail::put32(out, kIdxLabelsU8);
  detail::put32(out, static_cast<std::uint32_t>(labels.size()));
  for (Label y : labels) {
    if (y < 0 || y > 255) throw std::invalid_argument("IDX labels must fit in a byte");
    out.push_back(static_cast<char>(static_cast<unsigned char>(y)));
  }
  detail::write_file(path, out);
}

inline void write_idx(const LabeledDataset& ds, const std::string& images_path, const std::string& labels_path) {
  write_idx_images(images_path, ds.images);
  write_idx_labels(labels_path, ds.labels);
}

}  // namespace bdlab

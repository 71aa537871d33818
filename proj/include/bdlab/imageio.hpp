#pragma once

// Binary PGM (P5, one channel) and PPM (P6, three channels) with an ASCII header.
// Pixels are rounded and clamped to 0..255 on write.

#include <bdlab/dataset.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace bdlab {

inline std::string encode_pnm(const Image& img) {
  if (img.rank() != 3 || (img.dim(2) != 1 && img.dim(2) != 3))
    throw ShapeError("encode_pnm: need H x W x 1 or H x W x 3, got " + shape_str(img.shape()));
  std::string out = (img.dim(2) == 1 ? "P5\n" : "P6\n") + std::to_string(img.dim(1)) + " " + std::to_string(img.dim(0)) +
                    "\n255\n";
  out.reserve(out.size() + img.size());
  for (double v : img.data()) out.push_back(static_cast<char>(static_cast<unsigned char>(std::clamp(std::lround(v), 0L, 255L))));
  return out;
}

inline void write_pnm(const std::string& path, const Image& img) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error(path + ": cannot open for writing");
  const std::string bytes = encode_pnm(img);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error(path + ": write failed");
}

inline Image read_pnm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error(path + ": cannot open");
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if ((magic != "P5" && magic != "P6") || maxval != 255 || w == 0 || h == 0)
    throw std::runtime_error(path + ": unsupported PNM header");
  f.get();  // single whitespace before the raster
  const std::size_t c = magic == "P5" ? 1 : 3;
  std::string raster(h * w * c, '\0');
  f.read(raster.data(), static_cast<std::streamsize>(raster.size()));
  if (static_cast<std::size_t>(f.gcount()) != raster.size()) throw std::runtime_error(path + ": truncated raster");
  Image img(Shape{h, w, c});
  for (std::size_t i = 0; i < raster.size(); ++i) img[i] = static_cast<unsigned char>(raster[i]);
  return img;
}

inline std::size_t grid_side(std::size_t count) {
  auto s = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(count))));
  while (s * s < count) ++s;
  while (s > 0 && (s - 1) * (s - 1) >= count) --s;
  return s;
}

// Tiles images row-major into a side x side grid (side = ceil(sqrt(count))); unused
// cells stay black.
inline Image tile_grid(std::span<const Image> images) {
  if (images.empty()) throw std::invalid_argument("tile_grid: no images");
  const Shape& s = images.front().shape();
  const std::size_t h = s.at(0), w = s.at(1), c = s.at(2), side = grid_side(images.size());
  Image grid(Shape{side * h, side * w, c});
  for (std::size_t k = 0; k < images.size(); ++k) {
    images[k].require_same_shape(images.front(), "tile_grid");
    const std::size_t r0 = (k / side) * h, c0 = (k % side) * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < c; ++ch)
          grid[((r0 + y) * side * w + c0 + x) * c + ch] = images[k][(y * w + x) * c + ch];
  }
  return grid;
}

struct ExportedImages {
  std::vector<std::string> files;
  std::string grid;
};

// One file per selected example named img-<index>-y<label>-p<0|1>, plus grid.pgm/ppm.
inline ExportedImages export_images(const LabeledDataset& ds, std::span<const std::size_t> indices,
                                    const std::string& dir) {
  if (indices.empty()) throw std::invalid_argument("export_images: no indices");
  for (std::size_t i : indices)
    if (i >= ds.size()) throw std::out_of_range("export_images: index " + std::to_string(i) + " out of range");
  std::filesystem::create_directories(dir);
  const std::string ext = ds.image_shape().at(2) == 1 ? ".pgm" : ".ppm";
  ExportedImages out;
  std::vector<Image> picked;
  for (std::size_t i : indices) {
    const std::string name = dir + "/img-" + std::to_string(i) + "-y" + std::to_string(ds.labels[i]) + "-p" +
                             (ds.poison_mask[i] ? "1" : "0") + ext;
    write_pnm(name, ds.images[i]);
    out.files.push_back(name);
    picked.push_back(ds.images[i]);
  }
  out.grid = dir + "/grid" + ext;
  write_pnm(out.grid, tile_grid(picked));
  return out;
}

}  // namespace bdlab

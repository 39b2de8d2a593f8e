#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mixssm/tensor.hpp"

namespace mixssm {

/// Interleaved RGB, row-major, values in [0, 1].
struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }
};

/// Binary PPM (P6). Comments are allowed in the header; maxval above 255
/// means two bytes per sample, most significant first. `name` only labels errors.
RgbImage decode_ppm(const std::string& bytes, const std::string& name = "<memory>");
RgbImage read_ppm(const std::string& path);
/// 8-bit P6, samples rounded to the nearest of 0..255.
std::string encode_ppm(const RgbImage& image);
void write_ppm(const RgbImage& image, const std::string& path);

/// Half-pixel-centred bilinear resampling with edge clamping.
RgbImage resize_bilinear(const RgbImage& image, std::size_t height, std::size_t width);

/// Labeled images, each stored normalized as (x - 0.5) / 0.5.
struct Dataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> images;  // N * H * W * 3
  std::vector<std::size_t> labels;
  std::vector<std::string> class_names;
  std::vector<std::string> files;

  std::size_t size() const { return labels.size(); }
  std::size_t num_classes() const { return class_names.size(); }
  /// (B, H, W, 3) batch of the given sample indices.
  Tensor<float> batch(const std::vector<std::size_t>& indices) const;
  void add(const RgbImage& image, std::size_t label, const std::string& file);
};

/// One subdirectory per class, labels by sorted directory name, files in
/// sorted order. Hidden entries are skipped. Throws DataError naming the path
/// for a missing root, an empty class directory, or an undecodable file.
Dataset load_image_folder(const std::string& root, std::size_t height, std::size_t width);

/// Names of the shape families, one per synthetic class.
const std::vector<std::string>& synthetic_families();

/// Writes `classes` directories named "<index>_<family>", each holding
/// `per_class` size x size PPM files: a family shape at a seeded position and
/// scale, drawn with low contrast over a seeded noise texture. Output bytes
/// depend only on the arguments. Throws DataError for fewer than 2 or more
/// than synthetic_families().size() classes, per_class == 0, or size < 8.
void generate_synthetic(const std::string& root, std::size_t classes, std::size_t per_class, std::size_t size,
                        std::uint64_t seed);

}  // namespace mixssm

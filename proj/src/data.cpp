#include "mixssm/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "mixssm/errors.hpp"
#include "mixssm/random.hpp"

namespace mixssm {
namespace fs = std::filesystem;

namespace {

class HeaderReader {
 public:
  HeaderReader(const std::string& bytes, const std::string& name) : bytes_(bytes), name_(name) {}

  std::size_t number(const char* field) {
    skip_space_and_comments();
    if (pos_ >= bytes_.size() || !std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      throw DataError(name_ + ": malformed PPM header, expected " + field);
    }
    std::size_t v = 0;
    while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      v = v * 10 + std::size_t(bytes_[pos_++] - '0');
      if (v > (std::size_t(1) << 32)) throw DataError(name_ + ": PPM " + field + " is too large");
    }
    return v;
  }

  // Exactly one whitespace byte separates maxval from the raster.
  std::size_t raster_start() {
    if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
      throw DataError(name_ + ": malformed PPM header, no separator before pixel data");
    }
    return pos_ + 1;
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  const std::string& bytes_;
  const std::string& name_;
  std::size_t pos_ = 2;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool hidden(const fs::path& p) { return !p.filename().empty() && p.filename().string()[0] == '.'; }

}  // namespace

RgbImage decode_ppm(const std::string& bytes, const std::string& name) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw DataError(name + ": not a binary PPM (P6) file");
  HeaderReader header(bytes, name);
  RgbImage img;
  img.width = header.number("width");
  img.height = header.number("height");
  const std::size_t maxval = header.number("maxval");
  if (img.width == 0 || img.height == 0) throw DataError(name + ": PPM has zero size");
  if (maxval == 0 || maxval > 65535) throw DataError(name + ": PPM maxval " + std::to_string(maxval) + " out of range");
  const std::size_t start = header.raster_start();
  const std::size_t bps = maxval > 255 ? 2 : 1;
  const std::size_t count = img.width * img.height * 3;
  if (bytes.size() - start < count * bps) {
    throw DataError(name + ": PPM pixel data truncated (" + std::to_string(bytes.size() - start) + " of " +
                    std::to_string(count * bps) + " bytes)");
  }
  img.pixels.resize(count);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + start;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t v = bps == 1 ? p[i] : (std::size_t(p[2 * i]) << 8) | p[2 * i + 1];
    if (v > maxval) throw DataError(name + ": PPM sample exceeds maxval");
    img.pixels[i] = static_cast<float>(double(v) / double(maxval));
  }
  return img;
}

RgbImage read_ppm(const std::string& path) { return decode_ppm(slurp(path), path); }

std::string encode_ppm(const RgbImage& image) {
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.reserve(out.size() + image.pixels.size());
  for (float v : image.pixels) {
    const double q = std::round(std::clamp(double(v), 0.0, 1.0) * 255.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(q)));
  }
  return out;
}

void write_ppm(const RgbImage& image, const std::string& path) {
  const auto bytes = encode_ppm(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write to '" + path + "' failed");
}

RgbImage resize_bilinear(const RgbImage& image, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw DataError("resize_bilinear: target size must be positive");
  if (image.height == height && image.width == width) return image;
  RgbImage out;
  out.height = height;
  out.width = width;
  out.pixels.resize(height * width * 3);
  auto coord = [](std::size_t i, std::size_t out_n, std::size_t in_n, std::size_t& lo, std::size_t& hi, double& frac) {
    double s = (double(i) + 0.5) * double(in_n) / double(out_n) - 0.5;
    s = std::clamp(s, 0.0, double(in_n - 1));
    lo = static_cast<std::size_t>(std::floor(s));
    hi = std::min(lo + 1, in_n - 1);
    frac = s - double(lo);
  };
  for (std::size_t y = 0; y < height; ++y) {
    std::size_t y0, y1;
    double fy;
    coord(y, height, image.height, y0, y1, fy);
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t x0, x1;
      double fx;
      coord(x, width, image.width, x0, x1, fx);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = (1 - fx) * image.at(y0, x0, c) + fx * image.at(y0, x1, c);
        const double bottom = (1 - fx) * image.at(y1, x0, c) + fx * image.at(y1, x1, c);
        out.pixels[(y * width + x) * 3 + c] = static_cast<float>((1 - fy) * top + fy * bottom);
      }
    }
  }
  return out;
}

Tensor<float> Dataset::batch(const std::vector<std::size_t>& indices) const {
  const std::size_t per = height * width * 3;
  std::vector<float> v(indices.size() * per);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw DataError("dataset index " + std::to_string(indices[i]) + " out of range");
    std::copy_n(images.begin() + static_cast<std::ptrdiff_t>(indices[i] * per), per,
                v.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return Tensor<float>({indices.size(), height, width, 3}, std::move(v));
}

void Dataset::add(const RgbImage& image, std::size_t label, const std::string& file) {
  const auto sized = resize_bilinear(image, height, width);
  for (float v : sized.pixels) images.push_back((v - 0.5f) / 0.5f);
  labels.push_back(label);
  files.push_back(file);
}

Dataset load_image_folder(const std::string& root, std::size_t height, std::size_t width) {
  if (!fs::is_directory(root)) throw DataError("data directory '" + root + "' does not exist");
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory() && !hidden(e.path())) class_dirs.push_back(e.path());
  }
  if (class_dirs.empty()) throw DataError("data directory '" + root + "' has no class subdirectories");
  std::sort(class_dirs.begin(), class_dirs.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });

  Dataset ds;
  ds.height = height;
  ds.width = width;
  for (std::size_t label = 0; label < class_dirs.size(); ++label) {
    ds.class_names.push_back(class_dirs[label].filename().string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(class_dirs[label])) {
      if (e.is_regular_file() && !hidden(e.path())) files.push_back(e.path());
    }
    if (files.empty()) throw DataError("class directory '" + class_dirs[label].string() + "' has no images");
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
    for (const auto& f : files) ds.add(read_ppm(f.string()), label, f.string());
  }
  return ds;
}

const std::vector<std::string>& synthetic_families() {
  static const std::vector<std::string> names{"disk", "bar", "cross", "ring", "triangle", "square", "diamond", "xmark"};
  return names;
}

namespace {

// dx, dy are offsets from the shape centre in units of its radius.
bool inside(std::size_t family, double dx, double dy) {
  const double ax = std::abs(dx), ay = std::abs(dy), d = std::hypot(dx, dy);
  switch (family) {
    case 0:
      return d < 1.0;
    case 1:
      return ay < 0.3 && ax < 1.0;
    case 2:
      return (ax < 0.3 && ay < 1.0) || (ay < 0.3 && ax < 1.0);
    case 3:
      return d < 1.0 && d > 0.6;
    case 4:
      return dy > -1.0 && dy < 1.0 && ax < (dy + 1.0) / 2.0;
    case 5:
      return ax < 0.8 && ay < 0.8;
    case 6:
      return ax + ay < 1.0;
    case 7:
      return std::abs(ax - ay) < 0.3 && std::max(ax, ay) < 1.0;
  }
  return false;
}

RgbImage synthetic_image(std::size_t family, std::size_t size, Rng& rng) {
  RgbImage img;
  img.height = img.width = size;
  img.pixels.resize(size * size * 3);
  double base[3], tint[3];
  for (int c = 0; c < 3; ++c) base[c] = rng.uniform(0.3, 0.7);
  // Low-contrast shape: a small shift from the background colour.
  const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
  for (int c = 0; c < 3; ++c) tint[c] = sign * rng.uniform(0.15, 0.25);
  const double fx = rng.uniform(0.5, 2.0), fy = rng.uniform(0.5, 2.0), phase = rng.uniform(0.0, 6.283185307179586);
  const double n = double(size);
  const double radius = rng.uniform(0.22, 0.32) * n;
  const double cx = rng.uniform(radius, n - radius), cy = rng.uniform(radius, n - radius);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double texture = 0.06 * std::sin(6.283185307179586 * (fx * x + fy * y) / n + phase);
      const bool on = inside(family, (double(x) + 0.5 - cx) / radius, (double(y) + 0.5 - cy) / radius);
      for (int c = 0; c < 3; ++c) {
        double v = base[c] + texture + rng.uniform(-0.06, 0.06);
        if (on) v += tint[c];
        img.pixels[(y * size + x) * 3 + c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

}  // namespace

void generate_synthetic(const std::string& root, std::size_t classes, std::size_t per_class, std::size_t size,
                        std::uint64_t seed) {
  const auto& families = synthetic_families();
  if (classes < 2 || classes > families.size()) {
    throw DataError("synthetic data supports 2.." + std::to_string(families.size()) + " classes, got " +
                    std::to_string(classes));
  }
  if (per_class == 0) throw DataError("synthetic data needs at least one image per class");
  if (size < 8) throw DataError("synthetic images must be at least 8 pixels wide, got " + std::to_string(size));
  Rng root_rng(seed);
  for (std::size_t k = 0; k < classes; ++k) {
    const fs::path dir = fs::path(root) / (std::to_string(k) + "_" + families[k]);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create '" + dir.string() + "': " + ec.message());
    Rng rng = root_rng.fork(k);
    for (std::size_t i = 0; i < per_class; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "img_%04zu.ppm", i);
      write_ppm(synthetic_image(k, size, rng), (dir / name).string());
    }
  }
}

}  // namespace mixssm

#pragma once

// 8-bit grayscale images: resizing, histogram equalization and PNG I/O.

#include <png.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "cxrgen/tensor.hpp"

namespace cxrgen {

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  GrayImage() = default;
  GrayImage(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), pixels(w * h, fill) {}
  GrayImage(std::size_t w, std::size_t h, std::vector<std::uint8_t> px) : width(w), height(h), pixels(std::move(px)) {
    if (pixels.size() != w * h) throw std::invalid_argument("GrayImage: pixel count does not match dimensions");
  }

  std::uint8_t at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
  std::uint8_t& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  bool empty() const { return pixels.empty(); }

  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

// Round half away from zero, clamped to the 8-bit range.
inline std::uint8_t to_u8(double v) {
  const double r = std::round(v);
  return static_cast<std::uint8_t>(r < 0.0 ? 0.0 : (r > 255.0 ? 255.0 : r));
}

namespace detail {

struct Tap {
  std::size_t index;
  double weight;
};

// Per-output-sample source weights along one axis: area coverage when
// shrinking, linear interpolation between pixel centers when enlarging.
inline std::vector<std::vector<Tap>> resample_taps(std::size_t in, std::size_t out) {
  std::vector<std::vector<Tap>> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  if (out <= in) {
    for (std::size_t o = 0; o < out; ++o) {
      const double lo = static_cast<double>(o) * ratio, hi = static_cast<double>(o + 1) * ratio;
      for (auto i = static_cast<std::size_t>(std::floor(lo)); i < in && static_cast<double>(i) < hi; ++i) {
        const double overlap = std::min(hi, static_cast<double>(i + 1)) - std::max(lo, static_cast<double>(i));
        if (overlap > 0.0) taps[o].push_back({i, overlap / ratio});
      }
    }
  } else {
    for (std::size_t o = 0; o < out; ++o) {
      double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(src));
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      const double t = src - static_cast<double>(i0);
      taps[o].push_back({i0, 1.0 - t});
      if (t > 0.0) taps[o].push_back({i1, t});
    }
  }
  return taps;
}

// Separable resampling of a float plane.
inline std::vector<double> resample_plane(const std::vector<double>& src, std::size_t w, std::size_t h,
                                          std::size_t out_w, std::size_t out_h) {
  const auto xt = resample_taps(w, out_w);
  const auto yt = resample_taps(h, out_h);
  std::vector<double> rows(out_w * h, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < out_w; ++x) {
      double acc = 0.0;
      for (const auto& t : xt[x]) acc += t.weight * src[y * w + t.index];
      rows[y * out_w + x] = acc;
    }
  std::vector<double> out(out_w * out_h, 0.0);
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x) {
      double acc = 0.0;
      for (const auto& t : yt[y]) acc += t.weight * rows[t.index * out_w + x];
      out[y * out_w + x] = acc;
    }
  return out;
}

}  // namespace detail

// Box (area-average) downsampling and bilinear upsampling, per axis.
inline GrayImage resize(const GrayImage& img, std::size_t out_w, std::size_t out_h) {
  if (out_w == 0 || out_h == 0) throw std::invalid_argument("resize: target size must be at least 1x1");
  if (img.empty()) throw std::invalid_argument("resize: empty source image");
  if (out_w == img.width && out_h == img.height) return img;
  std::vector<double> src(img.pixels.begin(), img.pixels.end());
  auto plane = detail::resample_plane(src, img.width, img.height, out_w, out_h);
  GrayImage out(out_w, out_h);
  for (std::size_t i = 0; i < plane.size(); ++i) out.pixels[i] = to_u8(plane[i]);
  return out;
}

// Bilinear upsampling of a real-valued grid (rows x cols, row-major).
inline std::vector<double> upsample_grid(std::span<const double> grid, std::size_t rows, std::size_t cols,
                                         std::size_t out_w, std::size_t out_h) {
  if (grid.size() != rows * cols) throw std::invalid_argument("upsample_grid: grid size mismatch");
  std::vector<double> src(grid.begin(), grid.end());
  return detail::resample_plane(src, cols, rows, out_w, out_h);
}

// out(v) = round(255 * (cdf(v) - cdf_min) / (N - cdf_min)). Images with a
// single intensity level are returned unchanged.
inline GrayImage hist_equalize(const GrayImage& img) {
  if (img.empty()) throw std::invalid_argument("hist_equalize: empty image");
  std::array<std::size_t, 256> hist{};
  for (auto p : img.pixels) ++hist[p];
  std::array<std::size_t, 256> cdf{};
  std::size_t running = 0, cdf_min = 0;
  for (std::size_t v = 0; v < 256; ++v) {
    running += hist[v];
    cdf[v] = running;
    if (cdf_min == 0 && running > 0) cdf_min = running;
  }
  const std::size_t n = img.pixels.size();
  if (n == cdf_min) return img;
  std::array<std::uint8_t, 256> lut{};
  for (std::size_t v = 0; v < 256; ++v) {
    if (hist[v] == 0) continue;
    lut[v] = to_u8(255.0 * static_cast<double>(cdf[v] - cdf_min) / static_cast<double>(n - cdf_min));
  }
  GrayImage out = img;
  for (auto& p : out.pixels) p = lut[p];
  return out;
}

// Resize to the network input size, equalize, and scale to [0, 1] as a
// [1 x size x size] tensor.
inline GrayImage preprocess(const GrayImage& img, std::size_t size) { return hist_equalize(resize(img, size, size)); }

inline Tensor image_to_tensor(const GrayImage& img) {
  std::vector<double> v(img.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(img.pixels[i]) / 255.0;
  return Tensor(Shape{1, img.height, img.width}, std::move(v));
}

inline double mean_intensity(const GrayImage& img) {
  double s = 0.0;
  for (auto p : img.pixels) s += p;
  return s / static_cast<double>(img.pixels.size());
}

// ---------------------------------------------------------------------------
// PNG I/O (8-bit gray and 8-bit RGB)
// ---------------------------------------------------------------------------

struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, 3 bytes per pixel
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline void write_png(const std::filesystem::path& path, std::size_t width, std::size_t height, int color_type,
                      std::size_t channels, const std::uint8_t* data) {
  FilePtr file(std::fopen(path.string().c_str(), "wb"));
  if (!file) throw std::runtime_error("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng: cannot allocate write structures");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng: failed writing " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(data + y * width * channels));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

inline void write_png(const std::filesystem::path& path, const GrayImage& img) {
  detail::write_png(path, img.width, img.height, PNG_COLOR_TYPE_GRAY, 1, img.pixels.data());
}

inline void write_png(const std::filesystem::path& path, const RgbImage& img) {
  detail::write_png(path, img.width, img.height, PNG_COLOR_TYPE_RGB, 3, img.pixels.data());
}

// Reads any PNG and converts it to 8-bit grayscale.
inline GrayImage read_png(const std::filesystem::path& path) {
  detail::FilePtr file(std::fopen(path.string().c_str(), "rb"));
  if (!file) throw std::runtime_error("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng: cannot allocate read structures");
  }
  GrayImage img;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng: failed reading " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA || color == PNG_COLOR_TYPE_PALETTE) {
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  }
  png_read_update_info(png, info);
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.pixels.resize(img.width * img.height);
  for (std::size_t y = 0; y < img.height; ++y) png_read_row(png, img.pixels.data() + y * img.width, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

}  // namespace cxrgen

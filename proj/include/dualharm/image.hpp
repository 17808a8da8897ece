#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dualharm/tensor.hpp"

namespace dualharm {

/// Raised when an image file cannot be read or written.
class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

inline std::unique_ptr<std::FILE, FileCloser> open_file(const std::filesystem::path& path, const char* mode) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), mode));
  if (!f) throw ImageIoError("cannot open " + path.string());
  return f;
}

[[noreturn]] inline void png_error_fn(png_structp png, png_const_charp msg) {
  auto* what = static_cast<std::string*>(png_get_error_ptr(png));
  if (what) *what = msg;
  png_longjmp(png, 1);
}

inline void png_warning_fn(png_structp, png_const_charp) {}

// Decodes into 8-bit samples with `channels` = 1 (gray) or 3 (RGB).
inline std::vector<std::uint8_t> read_png_raw(const std::filesystem::path& path, int channels, int& h, int& w) {
  auto file = open_file(path, "rb");
  std::uint8_t sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8))
    throw ImageIoError(path.string() + " is not a PNG file");
  std::string message;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &message, png_error_fn, png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("libpng initialisation failed");
  }
  // Locals touched after setjmp live on the heap so a longjmp cannot leave
  // them in an indeterminate state.
  auto storage = std::make_unique<std::pair<std::vector<std::uint8_t>, std::vector<png_bytep>>>();
  auto& [pixels, rows] = *storage;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("failed to decode " + path.string() + ": " + message);
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  w = static_cast<int>(png_get_image_width(png, info));
  h = static_cast<int>(png_get_image_height(png, info));
  const int color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  const bool gray_src = color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA;
  if (channels == 3 && gray_src) png_set_gray_to_rgb(png);
  if (channels == 1 && !gray_src) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  if (stride != static_cast<std::size_t>(w) * channels) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("unexpected PNG layout in " + path.string());
  }
  pixels.resize(stride * h);
  rows.resize(h);
  for (int y = 0; y < h; ++y) rows[y] = pixels.data() + stride * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return std::move(pixels);
}

inline void write_png_raw(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels, int h, int w,
                          int channels) {
  auto file = open_file(path, "wb");
  std::string message;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &message, png_error_fn, png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("libpng initialisation failed");
  }
  auto rows_storage = std::make_unique<std::vector<png_bytep>>(h);
  auto& rows = *rows_storage;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("failed to encode " + path.string() + ": " + message);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, w, h, 8, channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < h; ++y)
    rows[y] = const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(y) * w * channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace detail

/// Reads a PNG as a (1, 3, H, W) image in [0, 1].
template <typename T = float>
Tensor<T> read_image(const std::filesystem::path& path) {
  int h = 0, w = 0;
  auto raw = detail::read_png_raw(path, 3, h, w);
  Tensor<T> out(1, 3, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        out(0, c, y, x) = static_cast<T>(raw[(static_cast<std::size_t>(y) * w + x) * 3 + c]) / T(255);
  return out;
}

/// Reads an 8-bit mask PNG as a (1, 1, H, W) binary tensor (>= 128 -> 1).
template <typename T = float>
Tensor<T> read_mask(const std::filesystem::path& path) {
  int h = 0, w = 0;
  auto raw = detail::read_png_raw(path, 1, h, w);
  Tensor<T> out(1, 1, h, w);
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = raw[i] >= 128 ? T(1) : T(0);
  return out;
}

/// Writes sample 0 of a 3-channel (RGB) or 1-channel (gray) tensor, clamping to [0, 1].
template <typename T>
void write_png(const std::filesystem::path& path, const Tensor<T>& image) {
  const int ch = image.c();
  if (ch != 1 && ch != 3) throw ImageIoError("write_png: expected 1 or 3 channels, got " + image.shape().str());
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(image.h()) * image.w() * ch);
  for (int y = 0; y < image.h(); ++y)
    for (int x = 0; x < image.w(); ++x)
      for (int c = 0; c < ch; ++c)
        raw[(static_cast<std::size_t>(y) * image.w() + x) * ch + c] = detail::to_byte(static_cast<double>(image(0, c, y, x)));
  detail::write_png_raw(path, raw, image.h(), image.w(), ch);
}

/// Bilinear resize with half-pixel centres (no antialiasing).
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& src, int out_h, int out_w) {
  const Shape s = src.shape();
  if (s.h == out_h && s.w == out_w) return src;
  Tensor<T> out(s.n, s.c, out_h, out_w);
  const double sy = static_cast<double>(s.h) / out_h;
  const double sx = static_cast<double>(s.w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(s.h - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, s.h - 1);
    const double ay = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(s.w - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, s.w - 1);
      const double ax = fx - x0;
      for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
          const double v = (1 - ay) * ((1 - ax) * src(n, c, y0, x0) + ax * src(n, c, y0, x1)) +
                           ay * ((1 - ax) * src(n, c, y1, x0) + ax * src(n, c, y1, x1));
          out(n, c, y, x) = static_cast<T>(v);
        }
    }
  }
  return out;
}

/// Mirror padding (edge pixel not repeated) on the bottom and right.
template <typename T>
Tensor<T> reflect_pad(const Tensor<T>& src, int pad_bottom, int pad_right) {
  const Shape s = src.shape();
  if (pad_bottom >= s.h || pad_right >= s.w)
    throw ShapeError("reflect_pad: padding exceeds image extent " + s.str());
  Tensor<T> out(s.n, s.c, s.h + pad_bottom, s.w + pad_right);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < out.h(); ++y)
        for (int x = 0; x < out.w(); ++x) {
          const int sy = y < s.h ? y : 2 * (s.h - 1) - y;
          const int sx = x < s.w ? x : 2 * (s.w - 1) - x;
          out(n, c, y, x) = src(n, c, sy, sx);
        }
  return out;
}

template <typename T>
Tensor<T> crop(const Tensor<T>& src, int top, int left, int h, int w) {
  const Shape s = src.shape();
  if (top < 0 || left < 0 || top + h > s.h || left + w > s.w) throw ShapeError("crop outside " + s.str());
  Tensor<T> out(s.n, s.c, h, w);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out(n, c, y, x) = src(n, c, top + y, left + x);
  return out;
}

/// Min-max normalizes a single-channel map to [0, 1] (all zeros when flat).
template <typename T>
Tensor<T> normalize_min_max(const Tensor<T>& map) {
  const auto [lo, hi] = std::minmax_element(map.begin(), map.end());
  Tensor<T> out(map.shape());
  if (lo == map.end() || *hi - *lo <= T(0)) return out;
  const T range = *hi - *lo;
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = (map[i] - *lo) / range;
  return out;
}

}  // namespace dualharm

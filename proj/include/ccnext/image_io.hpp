#pragma once

// PNG (8-bit RGB, 16-bit grayscale) through libpng and single-channel PFM.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "ccnext/tensor.hpp"

namespace ccnext {

struct Gray16Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint16_t> pixels;  // row-major
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::string& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open '" + path + "'");
  return f;
}

// libpng expects the error callback not to return; unwinding through it is
// fine on the platforms we build for (unwind tables are on by default).
[[noreturn]] inline void png_fail(png_structp, png_const_charp msg) { throw IoError(std::string("png: ") + msg); }

inline void png_warn(png_structp, png_const_charp) {}

// Decodes to 8-bit RGB (depth 8) or 16-bit gray (depth 16), expanding
// palettes, stripping alpha.
inline std::vector<std::uint8_t> png_read_raw(const std::string& path, bool gray16, int& w, int& h) {
  auto f = open_file(path, "rb");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8))
    throw IoError("'" + path + "' is not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  if (!png) throw IoError("png: cannot allocate read struct");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_read_struct(p, i, nullptr); }
  } guard{&png, &info};
  std::vector<std::uint8_t> data;
  try {
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    w = static_cast<int>(png_get_image_width(png, info));
    h = static_cast<int>(png_get_image_height(png, info));
    const int ct = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (ct == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (ct & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (gray16) {
      if (ct != PNG_COLOR_TYPE_GRAY || depth != 16)
        throw IoError("'" + path + "' is not a 16-bit grayscale PNG");
      png_set_swap(png);  // host order on little-endian
    } else {
      if (depth == 16) png_set_strip_16(png);
      if (depth < 8) png_set_packing(png);
      if (ct == PNG_COLOR_TYPE_GRAY || ct == PNG_COLOR_TYPE_GRAY_ALPHA) {
        if (depth < 8) png_set_expand_gray_1_2_4_to_8(png);
        png_set_gray_to_rgb(png);
      }
    }
    png_read_update_info(png, info);
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    data.resize(rowbytes * static_cast<std::size_t>(h));
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y) rows[y] = data.data() + rowbytes * y;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
  } catch (const IoError& e) {
    throw IoError("reading '" + path + "': " + e.what());
  }
  return data;
}

inline void png_write_raw(const std::string& path, const std::uint8_t* data, int w, int h, bool gray16) {
  auto f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  if (!png) throw IoError("png: cannot allocate write struct");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_write_struct(p, i); }
  } guard{&png, &info};
  try {
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), gray16 ? 16 : 8,
                 gray16 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    if (gray16) png_set_swap(png);
    const std::size_t rowbytes = static_cast<std::size_t>(w) * (gray16 ? 2 : 3);
    for (int y = 0; y < h; ++y) png_write_row(png, const_cast<png_bytep>(data + rowbytes * y));
    png_write_end(png, nullptr);
  } catch (const IoError& e) {
    throw IoError("writing '" + path + "': " + e.what());
  }
}

}  // namespace detail

/// 8-bit image as (1,3,H,W) in [0,1].
template <class T>
Tensor<T> read_png_rgb(const std::string& path) {
  int w = 0, h = 0;
  const auto raw = detail::png_read_raw(path, false, w, h);
  const std::size_t P = static_cast<std::size_t>(w) * h;
  std::vector<T> v(3 * P);
  for (std::size_t i = 0; i < P; ++i)
    for (int c = 0; c < 3; ++c) v[c * P + i] = static_cast<T>(raw[3 * i + c] / 255.0);
  return Tensor<T>({1, 3, h, w}, std::move(v));
}

/// Writes a (1,3,H,W) image, rounding [0,1] values to 8 bits.
template <class T>
void write_png_rgb(const std::string& path, const Tensor<T>& image) {
  if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 3)
    throw ShapeError("write_png_rgb: expected (1,3,H,W), got " + to_string(image.shape()));
  const int h = image.dim(2), w = image.dim(3);
  const std::size_t P = static_cast<std::size_t>(w) * h;
  std::vector<std::uint8_t> raw(3 * P);
  for (std::size_t i = 0; i < P; ++i)
    for (int c = 0; c < 3; ++c)
      raw[3 * i + c] = static_cast<std::uint8_t>(std::lround(std::clamp<double>(image.vec()[c * P + i], 0, 1) * 255));
  detail::png_write_raw(path, raw.data(), w, h, false);
}

inline Gray16Image read_png_gray16(const std::string& path) {
  Gray16Image img;
  const auto raw = detail::png_read_raw(path, true, img.width, img.height);
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  std::memcpy(img.pixels.data(), raw.data(), img.pixels.size() * 2);
  return img;
}

inline void write_png_gray16(const std::string& path, const Gray16Image& img) {
  if (img.pixels.size() != static_cast<std::size_t>(img.width) * img.height)
    throw ShapeError("write_png_gray16: pixel count does not match extents");
  detail::png_write_raw(path, reinterpret_cast<const std::uint8_t*>(img.pixels.data()), img.width, img.height, true);
}

/// Disparity in pixels stored as round(d * 256); 0 marks invalid, values
/// outside the 16-bit range saturate.
template <class T>
Gray16Image encode_disparity16(const Tensor<T>& disp) {
  if (disp.rank() != 4 || disp.dim(0) != 1 || disp.dim(1) != 1)
    throw ShapeError("encode_disparity16: expected (1,1,H,W), got " + to_string(disp.shape()));
  Gray16Image img{disp.dim(3), disp.dim(2), {}};
  for (T d : disp.vec())
    img.pixels.push_back(static_cast<std::uint16_t>(std::clamp<long>(std::lround(static_cast<double>(d) * 256), 0, 65535)));
  return img;
}

template <class T>
Tensor<T> decode_disparity16(const Gray16Image& img) {
  std::vector<T> v(img.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(img.pixels[i] / 256.0);
  return Tensor<T>({1, 1, img.height, img.width}, std::move(v));
}

/// Single-channel PFM, little-endian, rows stored bottom to top.
template <class T>
void write_pfm(const std::string& path, const Tensor<T>& map) {
  if (map.rank() != 4 || map.dim(0) != 1 || map.dim(1) != 1)
    throw ShapeError("write_pfm: expected (1,1,H,W), got " + to_string(map.shape()));
  const int h = map.dim(2), w = map.dim(3);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os << "Pf\n" << w << ' ' << h << "\n-1\n";
  std::vector<float> row(w);
  for (int y = h - 1; y >= 0; --y) {
    for (int x = 0; x < w; ++x) row[x] = static_cast<float>(map.vec()[static_cast<std::size_t>(y) * w + x]);
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(w * sizeof(float)));
  }
  if (!os) throw IoError("write failed for '" + path + "'");
}

template <class T>
Tensor<T> read_pfm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "'");
  std::string magic;
  int w = 0, h = 0;
  double scale = 0;
  is >> magic >> w >> h >> scale;
  if (magic != "Pf") throw IoError("'" + path + "' is not a single-channel PFM");
  if (w <= 0 || h <= 0) throw IoError("'" + path + "' has invalid extents");
  if (scale >= 0) throw IoError("'" + path + "' is big-endian; only little-endian PFM is supported");
  is.get();
  std::vector<float> raw(static_cast<std::size_t>(w) * h);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(float))))
    throw IoError("'" + path + "' is truncated");
  std::vector<T> v(raw.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      v[static_cast<std::size_t>(y) * w + x] = static_cast<T>(raw[static_cast<std::size_t>(h - 1 - y) * w + x]);
  return Tensor<T>({1, 1, h, w}, std::move(v));
}

}  // namespace ccnext

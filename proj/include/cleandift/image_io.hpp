// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <png.h>

#include <cstdio>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace cleandift {

/// 8-bit interleaved raster.
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 (gray) or 3 (rgb)
  std::vector<unsigned char> pixels;

  unsigned char& at(int x, int y, int c) {
    return pixels[(std::size_t(y) * width + x) * channels + c];
  }
  unsigned char at(int x, int y, int c) const {
    return pixels[(std::size_t(y) * width + x) * channels + c];
  }
};

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] inline void png_error_fn(png_structp png, png_const_charp msg) {
  auto* err = static_cast<std::string*>(png_get_error_ptr(png));
  if (err) *err = msg;
  png_longjmp(png, 1);
}
inline void png_warning_fn(png_structp, png_const_charp) {}
}  // namespace detail

inline void write_png(const std::filesystem::path& path, const Raster& r) {
  if (r.channels != 1 && r.channels != 3) throw ImageError("write_png: 1 or 3 channels");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  detail::FilePtr f(std::fopen(path.string().c_str(), "wb"));
  if (!f) throw ImageError("cannot write " + path.string());
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn,
                                            detail::png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw ImageError("libpng init failed");
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(r.height));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageError("png write failed for " + path.string() + ": " + err);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, png_uint_32(r.width), png_uint_32(r.height), 8,
               r.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // Fixed settings keep the encoded bytes reproducible.
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  for (int y = 0; y < r.height; ++y)
    rows[std::size_t(y)] =
        const_cast<png_bytep>(r.pixels.data() + std::size_t(y) * r.width * r.channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Decodes any 8/16-bit gray, gray+alpha, rgb, rgba or palette PNG into
/// 8-bit gray (want_channels 1) or rgb (want_channels 3).
inline Raster read_png(const std::filesystem::path& path, int want_channels = 3) {
  detail::FilePtr f(std::fopen(path.string().c_str(), "rb"));
  if (!f) throw ImageError("cannot open " + path.string());
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8))
    throw ImageError(path.string() + " is not a PNG file");
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn,
                                           detail::png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("libpng init failed");
  }
  Raster r;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("png decode failed for " + path.string() + ": " + err);
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int ct = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (ct == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (ct == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  if (ct & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  const bool is_gray = !(ct & PNG_COLOR_MASK_COLOR) && ct != PNG_COLOR_TYPE_PALETTE;
  if (want_channels == 3 && is_gray) png_set_gray_to_rgb(png);
  if (want_channels == 1 && !is_gray) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);
  r.width = int(png_get_image_width(png, info));
  r.height = int(png_get_image_height(png, info));
  r.channels = int(png_get_channels(png, info));
  r.pixels.resize(std::size_t(r.width) * r.height * r.channels);
  rows.resize(std::size_t(r.height));
  for (int y = 0; y < r.height; ++y)
    rows[std::size_t(y)] = r.pixels.data() + std::size_t(y) * r.width * r.channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  if (r.channels != want_channels)
    throw ImageError(path.string() + ": unexpected channel layout");
  return r;
}

}  // namespace cleandift

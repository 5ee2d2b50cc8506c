#ifndef FUNDUSAM_IMAGE_IO_HPP
#define FUNDUSAM_IMAGE_IO_HPP

// PNG reading / writing through libpng. Values map linearly to [0,1].

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "fundusam/raster.hpp"

namespace fundusam {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

/// Reads an 8- or 16-bit PNG (gray, gray+alpha, RGB, RGBA). Alpha is dropped;
/// palette images are expanded to RGB.
template <typename Domain = CartesianDomain>
Raster<Domain> read_png(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IngestionError("cannot open PNG: " + path);
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) throw IngestionError("not a PNG: " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IngestionError("libpng initialisation failed");
  }
  std::vector<png_bytep> rows;
  std::vector<png_byte> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IngestionError("corrupt PNG: " + path);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (depth == 16) png_set_swap(png);  // native little-endian 16-bit samples
  png_read_update_info(png, info);

  const auto width = static_cast<int>(png_get_image_width(png, info));
  const auto height = static_cast<int>(png_get_image_height(png, info));
  const int channels = png_get_channels(png, info);
  const int out_depth = png_get_bit_depth(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  buffer.resize(stride * static_cast<std::size_t>(height));
  rows.resize(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) rows[static_cast<std::size_t>(y)] = buffer.data() + stride * static_cast<std::size_t>(y);
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Raster<Domain> out(height, width, channels);
  const double scale = out_depth == 16 ? 65535.0 : 255.0;
  for (int y = 0; y < height; ++y) {
    const png_byte* row = rows[static_cast<std::size_t>(y)];
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < channels; ++c) {
        const std::size_t k = static_cast<std::size_t>(x) * channels + c;
        double v = 0.0;
        if (out_depth == 16) {
          std::uint16_t s = 0;
          std::memcpy(&s, row + 2 * k, 2);
          v = s;
        } else {
          v = row[k];
        }
        out.at(y, x, c) = v / scale;
      }
    }
  }
  return out;
}

/// Writes a 1- or 3-channel raster as 8- or 16-bit PNG (values clamped to [0,1]).
template <typename Domain>
void write_png(const std::string& path, const Raster<Domain>& img, int bit_depth = 8) {
  if (img.channels() != 1 && img.channels() != 3) throw InvalidArgument("write_png: need 1 or 3 channels");
  if (bit_depth != 8 && bit_depth != 16) throw InvalidArgument("write_png: bit depth must be 8 or 16");
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IngestionError("cannot open for writing: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IngestionError("libpng initialisation failed");
  }
  const int bytes = bit_depth / 8;
  const std::size_t stride = static_cast<std::size_t>(img.width()) * img.channels() * bytes;
  std::vector<png_byte> buffer(stride * static_cast<std::size_t>(img.height()));
  const double scale = bit_depth == 16 ? 65535.0 : 255.0;
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      for (int c = 0; c < img.channels(); ++c) {
        const double v = std::clamp(img.at(y, x, c), 0.0, 1.0);
        const auto q = static_cast<unsigned>(std::lround(v * scale));
        const std::size_t k = static_cast<std::size_t>(y) * stride + (static_cast<std::size_t>(x) * img.channels() + c) * bytes;
        if (bit_depth == 16) {
          buffer[k] = static_cast<png_byte>(q >> 8);  // PNG stores big-endian
          buffer[k + 1] = static_cast<png_byte>(q & 0xFF);
        } else {
          buffer[k] = static_cast<png_byte>(q);
        }
      }
    }
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height()));
  for (int y = 0; y < img.height(); ++y) rows[static_cast<std::size_t>(y)] = buffer.data() + stride * static_cast<std::size_t>(y);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IngestionError("PNG write failed: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width()), static_cast<png_uint_32>(img.height()), bit_depth,
               img.channels() == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Binary mask as 0/255 8-bit PNG.
template <typename Domain>
void write_mask_png(const std::string& path, const BasicMask<Domain>& m) {
  write_png(path, mask_to_raster(m), 8);
}

}  // namespace fundusam

#endif  // FUNDUSAM_IMAGE_IO_HPP

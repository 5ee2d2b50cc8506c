#ifndef FUNDUSAM_RASTER_HPP
#define FUNDUSAM_RASTER_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "fundusam/error.hpp"

namespace fundusam {

struct CartesianDomain {};
struct PolarDomain {};

/// Channels-last image grid with real values. The domain tag keeps Cartesian
/// and polar images from being mixed up at compile time. For polar rasters
/// rows index radius (row 0 is r = 0) and columns index angle.
template <typename Domain>
class Raster {
 public:
  Raster() = default;
  Raster(int height, int width, int channels = 1, double fill = 0.0)
      : height_(height), width_(width), channels_(channels) {
    detail::require(height >= 1 && width >= 1 && channels >= 1, "Raster: dimensions must be positive");
    values_.assign(static_cast<std::size_t>(height) * width * channels, fill);
  }

  [[nodiscard]] int height() const { return height_; }
  [[nodiscard]] int width() const { return width_; }
  [[nodiscard]] int channels() const { return channels_; }
  [[nodiscard]] std::size_t size() const { return values_.size(); }
  [[nodiscard]] bool empty() const { return values_.empty(); }

  double& at(int y, int x, int c = 0) { return values_[index(y, x, c)]; }
  [[nodiscard]] double at(int y, int x, int c = 0) const { return values_[index(y, x, c)]; }

  std::span<double> values() { return values_; }
  [[nodiscard]] std::span<const double> values() const { return values_; }

  [[nodiscard]] bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Raster&, const Raster&) = default;

 private:
  [[nodiscard]] std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<double> values_;
};

using CartesianRaster = Raster<CartesianDomain>;
using PolarRaster = Raster<PolarDomain>;

/// Binary mask (0 / 1 bytes), row-major.
template <typename Domain>
class BasicMask {
 public:
  BasicMask() = default;
  BasicMask(int height, int width, std::uint8_t fill = 0) : height_(height), width_(width) {
    detail::require(height >= 1 && width >= 1, "Mask: dimensions must be positive");
    bits_.assign(static_cast<std::size_t>(height) * width, fill ? 1 : 0);
  }

  [[nodiscard]] int height() const { return height_; }
  [[nodiscard]] int width() const { return width_; }
  [[nodiscard]] std::size_t size() const { return bits_.size(); }

  [[nodiscard]] bool at(int y, int x) const { return bits_[static_cast<std::size_t>(y) * width_ + x] != 0; }
  void set(int y, int x, bool on) { bits_[static_cast<std::size_t>(y) * width_ + x] = on ? 1 : 0; }

  [[nodiscard]] std::span<const std::uint8_t> bits() const { return bits_; }
  std::span<std::uint8_t> bits() { return bits_; }

  [[nodiscard]] std::size_t count() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
  }
  [[nodiscard]] bool any() const { return count() > 0; }
  [[nodiscard]] bool same_shape(const BasicMask& o) const { return height_ == o.height_ && width_ == o.width_; }

  friend bool operator==(const BasicMask&, const BasicMask&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> bits_;
};

using Mask = BasicMask<CartesianDomain>;
using PolarMask = BasicMask<PolarDomain>;

template <typename Domain>
Raster<Domain> mask_to_raster(const BasicMask<Domain>& m) {
  Raster<Domain> r(m.height(), m.width(), 1);
  for (std::size_t i = 0; i < m.size(); ++i) r.values()[i] = m.bits()[i] ? 1.0 : 0.0;
  return r;
}

/// value > threshold -> 1, channel `channel` only.
template <typename Domain>
BasicMask<Domain> threshold(const Raster<Domain>& r, double thresh = 0.5, int channel = 0) {
  BasicMask<Domain> m(r.height(), r.width());
  for (int y = 0; y < r.height(); ++y) {
    for (int x = 0; x < r.width(); ++x) m.set(y, x, r.at(y, x, channel) > thresh);
  }
  return m;
}

template <typename Domain>
BasicMask<Domain> mask_and(const BasicMask<Domain>& a, const BasicMask<Domain>& b) {
  detail::require(a.same_shape(b), "mask_and: shape mismatch");
  BasicMask<Domain> out(a.height(), a.width());
  for (std::size_t i = 0; i < a.size(); ++i) out.bits()[i] = a.bits()[i] & b.bits()[i];
  return out;
}

/// Bilinear resize with half-pixel centres, edge-clamped.
template <typename Domain>
Raster<Domain> resize_bilinear(const Raster<Domain>& src, int out_h, int out_w) {
  detail::require(out_h >= 1 && out_w >= 1, "resize_bilinear: output size must be positive");
  Raster<Domain> out(out_h, out_w, src.channels());
  const double sy = static_cast<double>(src.height()) / out_h;
  const double sx = static_cast<double>(src.width()) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height() - 1));
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, src.height() - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width() - 1));
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, src.width() - 1);
      const double wx = fx - x0;
      for (int c = 0; c < src.channels(); ++c) {
        out.at(y, x, c) = (1 - wy) * ((1 - wx) * src.at(y0, x0, c) + wx * src.at(y0, x1, c)) +
                          wy * ((1 - wx) * src.at(y1, x0, c) + wx * src.at(y1, x1, c));
      }
    }
  }
  return out;
}

/// Nearest-neighbour resize (pixel-centre mapping); keeps masks binary.
template <typename Domain>
BasicMask<Domain> resize_nearest(const BasicMask<Domain>& src, int out_h, int out_w) {
  detail::require(out_h >= 1 && out_w >= 1, "resize_nearest: output size must be positive");
  BasicMask<Domain> out(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    const int sy = std::min(src.height() - 1, static_cast<int>((y + 0.5) * src.height() / out_h));
    for (int x = 0; x < out_w; ++x) {
      const int sx = std::min(src.width() - 1, static_cast<int>((x + 0.5) * src.width() / out_w));
      out.set(y, x, src.at(sy, sx));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary raster container
//
//   bytes 0..7   magic "FSRAST01"
//   uint32 LE    height, width, channels
//   uint8        domain (0 = cartesian, 1 = polar)
//   float64 LE   height*width*channels values, row-major, channels-last

namespace detail {

inline constexpr char kRasterMagic[8] = {'F', 'S', 'R', 'A', 'S', 'T', '0', '1'};

template <typename Domain>
constexpr std::uint8_t domain_code() {
  return std::is_same_v<Domain, PolarDomain> ? 1 : 0;
}

template <typename U>
void write_le(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
  U v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!is) throw IngestionError("unexpected end of file");
  return v;
}

}  // namespace detail

template <typename Domain>
void write_raster(const std::string& path, const Raster<Domain>& r) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IngestionError("cannot open for writing: " + path);
  os.write(detail::kRasterMagic, 8);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(r.height()));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(r.width()));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(r.channels()));
  detail::write_le<std::uint8_t>(os, detail::domain_code<Domain>());
  os.write(reinterpret_cast<const char*>(r.values().data()), static_cast<std::streamsize>(r.size() * sizeof(double)));
  if (!os) throw IngestionError("write failed: " + path);
}

template <typename Domain>
Raster<Domain> read_raster(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestionError("cannot open: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kRasterMagic, 8) != 0) throw IngestionError("not a raster container: " + path);
  const auto h = detail::read_le<std::uint32_t>(is);
  const auto w = detail::read_le<std::uint32_t>(is);
  const auto c = detail::read_le<std::uint32_t>(is);
  const auto domain = detail::read_le<std::uint8_t>(is);
  if (domain != detail::domain_code<Domain>()) throw IngestionError("raster domain mismatch: " + path);
  Raster<Domain> r(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c));
  is.read(reinterpret_cast<char*>(r.values().data()), static_cast<std::streamsize>(r.size() * sizeof(double)));
  if (!is) throw IngestionError("truncated raster: " + path);
  return r;
}

}  // namespace fundusam

#endif  // FUNDUSAM_RASTER_HPP

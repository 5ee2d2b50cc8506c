#ifndef FUNDUSAM_POLAR_HPP
#define FUNDUSAM_POLAR_HPP

// Cartesian <-> polar resampling about an ROI centre.
//
// Continuous pixel coordinates put the centre of pixel (row i, col j) at
// (x, y) = (j + 0.5, i + 0.5). Angles grow from +x towards +y (image rows
// grow downwards) and live in [0, 2*pi).

#include <cmath>
#include <numbers>

#include "fundusam/error.hpp"
#include "fundusam/raster.hpp"

namespace fundusam {

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct RoiSpec {
  double center_x = 0.0;
  double center_y = 0.0;
  double radius = 1.0;

  void validate() const {
    if (!std::isfinite(center_x) || !std::isfinite(center_y) || !std::isfinite(radius) || radius <= 0.0) {
      throw InvalidArgument("RoiSpec: radius must be positive and all fields finite");
    }
  }
};

enum class Interpolation { Bilinear, Nearest };

struct PolarGrid {
  int num_radii = 512;
  int num_angles = 512;
  Interpolation interpolation = Interpolation::Bilinear;

  void validate() const {
    if (num_radii < 2 || num_angles < 2) throw InvalidArgument("PolarGrid: need at least 2 radii and 2 angles");
  }
  /// Radius step for an ROI: rows span [0, radius] inclusive.
  [[nodiscard]] double radius_step(const RoiSpec& roi) const { return roi.radius / (num_radii - 1); }
  /// Angle step: columns span [0, 2*pi) uniformly.
  [[nodiscard]] double angle_step() const { return kTwoPi / num_angles; }
};

struct PolarPoint {
  double r;
  double theta;
};

struct CartesianPoint {
  double x;
  double y;
};

inline PolarPoint cart_to_polar_point(double x, double y, const RoiSpec& roi) {
  if (!std::isfinite(x) || !std::isfinite(y)) throw InvalidArgument("cart_to_polar_point: non-finite input");
  const double dx = x - roi.center_x;
  const double dy = y - roi.center_y;
  double theta = std::atan2(dy, dx);
  if (theta < 0.0) theta += kTwoPi;
  if (theta >= kTwoPi) theta = 0.0;
  return {std::hypot(dx, dy), theta};
}

inline CartesianPoint polar_to_cart_point(double r, double theta, const RoiSpec& roi) {
  if (!std::isfinite(r) || !std::isfinite(theta)) throw InvalidArgument("polar_to_cart_point: non-finite input");
  if (r < 0.0) throw InvalidArgument("polar_to_cart_point: negative radius");
  return {roi.center_x + r * std::cos(theta), roi.center_y + r * std::sin(theta)};
}

namespace detail {

/// Samples a Cartesian raster at continuous (x, y), edge-clamped.
inline double sample_cartesian(const CartesianRaster& img, double x, double y, int c, Interpolation mode) {
  const double fx = x - 0.5;
  const double fy = y - 0.5;
  if (mode == Interpolation::Nearest) {
    const int ix = std::clamp(static_cast<int>(std::floor(fx + 0.5)), 0, img.width() - 1);
    const int iy = std::clamp(static_cast<int>(std::floor(fy + 0.5)), 0, img.height() - 1);
    return img.at(iy, ix, c);
  }
  const double cx = std::clamp(fx, 0.0, static_cast<double>(img.width() - 1));
  const double cy = std::clamp(fy, 0.0, static_cast<double>(img.height() - 1));
  const int x0 = static_cast<int>(std::floor(cx));
  const int y0 = static_cast<int>(std::floor(cy));
  const int x1 = std::min(x0 + 1, img.width() - 1);
  const int y1 = std::min(y0 + 1, img.height() - 1);
  const double wx = cx - x0;
  const double wy = cy - y0;
  return (1 - wy) * ((1 - wx) * img.at(y0, x0, c) + wx * img.at(y0, x1, c)) +
         wy * ((1 - wx) * img.at(y1, x0, c) + wx * img.at(y1, x1, c));
}

/// Samples a polar raster at fractional (row, col); rows clamp, columns wrap.
inline double sample_polar(const PolarRaster& img, double row, double col, int c, Interpolation mode) {
  const int n_cols = img.width();
  auto wrap = [n_cols](int v) { return ((v % n_cols) + n_cols) % n_cols; };
  if (mode == Interpolation::Nearest) {
    const int ir = std::clamp(static_cast<int>(std::floor(row + 0.5)), 0, img.height() - 1);
    const int ic = wrap(static_cast<int>(std::floor(col + 0.5)));
    return img.at(ir, ic, c);
  }
  const double cr = std::clamp(row, 0.0, static_cast<double>(img.height() - 1));
  const int r0 = static_cast<int>(std::floor(cr));
  const int r1 = std::min(r0 + 1, img.height() - 1);
  const double wr = cr - r0;
  const double fc = std::floor(col);
  const int c0 = wrap(static_cast<int>(fc));
  const int c1 = wrap(static_cast<int>(fc) + 1);
  const double wc = col - fc;
  return (1 - wr) * ((1 - wc) * img.at(r0, c0, c) + wc * img.at(r0, c1, c)) +
         wr * ((1 - wc) * img.at(r1, c0, c) + wc * img.at(r1, c1, c));
}

}  // namespace detail

/// Resamples `img` onto a polar grid centred on the ROI.
/// Output row i is radius i * radius_step, column j is angle j * angle_step.
inline PolarRaster warp_to_polar(const CartesianRaster& img, const RoiSpec& roi, const PolarGrid& grid) {
  roi.validate();
  grid.validate();
  PolarRaster out(grid.num_radii, grid.num_angles, img.channels());
  const double dr = grid.radius_step(roi);
  const double dt = grid.angle_step();
  for (int ti = 0; ti < grid.num_angles; ++ti) {
    const double theta = ti * dt;
    const double ct = std::cos(theta);
    const double st = std::sin(theta);
    for (int ri = 0; ri < grid.num_radii; ++ri) {
      const double r = ri * dr;
      const double x = roi.center_x + r * ct;
      const double y = roi.center_y + r * st;
      for (int c = 0; c < img.channels(); ++c) {
        out.at(ri, ti, c) = detail::sample_cartesian(img, x, y, c, grid.interpolation);
      }
    }
  }
  return out;
}

/// Inverse warp. Pixels whose centre lies outside the ROI circle are 0.
inline CartesianRaster warp_to_cartesian(const PolarRaster& pimg, const RoiSpec& roi, int out_h, int out_w,
                                         Interpolation mode = Interpolation::Bilinear) {
  roi.validate();
  if (out_h < 1 || out_w < 1) throw InvalidArgument("warp_to_cartesian: output size must be at least 1x1");
  if (pimg.height() < 2 || pimg.width() < 2) throw InvalidArgument("warp_to_cartesian: polar raster too small");
  CartesianRaster out(out_h, out_w, pimg.channels());
  const double dr = roi.radius / (pimg.height() - 1);
  const double dt = kTwoPi / pimg.width();
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      const auto p = cart_to_polar_point(x + 0.5, y + 0.5, roi);
      if (p.r > roi.radius) continue;
      for (int c = 0; c < pimg.channels(); ++c) {
        out.at(y, x, c) = detail::sample_polar(pimg, p.r / dr, p.theta / dt, c, mode);
      }
    }
  }
  return out;
}

/// Mask convenience wrappers: nearest forward, bilinear + 0.5 threshold back.
inline PolarMask warp_mask_to_polar(const Mask& m, const RoiSpec& roi, int num_radii, int num_angles) {
  PolarGrid g{num_radii, num_angles, Interpolation::Nearest};
  return threshold(warp_to_polar(mask_to_raster(m), roi, g), 0.5);
}

inline Mask warp_mask_to_cartesian(const PolarMask& m, const RoiSpec& roi, int out_h, int out_w) {
  return threshold(warp_to_cartesian(mask_to_raster(m), roi, out_h, out_w, Interpolation::Bilinear), 0.5);
}

// ---------------------------------------------------------------------------
// ROI cropping

/// Square crop around the disc; `roi` is expressed in crop coordinates and
/// `origin_x/origin_y` locate the crop's (0,0) pixel in the source image.
struct RoiCrop {
  CartesianRaster image;
  RoiSpec roi;
  int origin_x = 0;
  int origin_y = 0;

  [[nodiscard]] RoiSpec source_roi() const { return {roi.center_x + origin_x, roi.center_y + origin_y, roi.radius}; }
};

/// ROI from a disc mask: centre = centroid of foreground pixel centres,
/// radius = margin * half the larger bounding-box side (in pixels).
inline RoiSpec roi_from_mask(const Mask& disc_mask, double margin) {
  if (!(margin > 0.0) || !std::isfinite(margin)) throw InvalidArgument("roi_from_mask: margin must be positive");
  double sx = 0.0;
  double sy = 0.0;
  std::size_t n = 0;
  int min_x = disc_mask.width();
  int max_x = -1;
  int min_y = disc_mask.height();
  int max_y = -1;
  for (int y = 0; y < disc_mask.height(); ++y) {
    for (int x = 0; x < disc_mask.width(); ++x) {
      if (!disc_mask.at(y, x)) continue;
      sx += x + 0.5;
      sy += y + 0.5;
      ++n;
      min_x = std::min(min_x, x);
      max_x = std::max(max_x, x);
      min_y = std::min(min_y, y);
      max_y = std::max(max_y, y);
    }
  }
  if (n == 0) throw EmptyMaskError("crop_roi: disc mask is empty");
  const double side = std::max(max_x - min_x + 1, max_y - min_y + 1);
  const RoiSpec roi{sx / static_cast<double>(n), sy / static_cast<double>(n), margin * side / 2.0};
  if (roi.radius < 1.0) throw EmptyMaskError("crop_roi: degenerate ROI (radius below one pixel)");
  return roi;
}

namespace detail {

struct CropWindow {
  int x0;
  int y0;
  int side;
};

inline CropWindow crop_window(const RoiSpec& roi) {
  const int x0 = static_cast<int>(std::floor(roi.center_x - roi.radius));
  const int y0 = static_cast<int>(std::floor(roi.center_y - roi.radius));
  const int x1 = static_cast<int>(std::ceil(roi.center_x + roi.radius));
  const int y1 = static_cast<int>(std::ceil(roi.center_y + roi.radius));
  return {x0, y0, std::max(x1 - x0, y1 - y0)};
}

}  // namespace detail

inline RoiCrop crop_roi(const CartesianRaster& img, const Mask& disc_mask, double margin = 1.5) {
  if (img.height() != disc_mask.height() || img.width() != disc_mask.width()) {
    throw InvalidArgument("crop_roi: image and mask sizes differ");
  }
  const RoiSpec src = roi_from_mask(disc_mask, margin);
  const auto win = detail::crop_window(src);
  RoiCrop out{CartesianRaster(win.side, win.side, img.channels()),
              {src.center_x - win.x0, src.center_y - win.y0, src.radius},
              win.x0,
              win.y0};
  for (int y = 0; y < win.side; ++y) {
    const int sy = y + win.y0;
    if (sy < 0 || sy >= img.height()) continue;
    for (int x = 0; x < win.side; ++x) {
      const int sx = x + win.x0;
      if (sx < 0 || sx >= img.width()) continue;
      for (int c = 0; c < img.channels(); ++c) out.image.at(y, x, c) = img.at(sy, sx, c);
    }
  }
  return out;
}

/// Applies the crop geometry of `crop` to another mask of the source size.
inline Mask crop_like(const Mask& m, const RoiCrop& crop) {
  const int side = crop.image.height();
  Mask out(side, crop.image.width());
  for (int y = 0; y < side; ++y) {
    const int sy = y + crop.origin_y;
    if (sy < 0 || sy >= m.height()) continue;
    for (int x = 0; x < crop.image.width(); ++x) {
      const int sx = x + crop.origin_x;
      if (sx < 0 || sx >= m.width()) continue;
      out.set(y, x, m.at(sy, sx));
    }
  }
  return out;
}

}  // namespace fundusam

#endif  // FUNDUSAM_POLAR_HPP

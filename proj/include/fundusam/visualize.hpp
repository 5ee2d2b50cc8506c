#ifndef FUNDUSAM_VISUALIZE_HPP
#define FUNDUSAM_VISUALIZE_HPP

#include <array>

#include "fundusam/data.hpp"
#include "fundusam/losses.hpp"
#include "fundusam/raster.hpp"

namespace fundusam {

using Rgb = std::array<double, 3>;

inline constexpr Rgb kDiscColour = {0.1, 1.0, 0.2};
inline constexpr Rgb kCupColour = {0.1, 0.4, 1.0};

/// Foreground pixels with at least one 4-neighbour outside the mask (or on the border).
template <typename Domain>
BasicMask<Domain> boundary(const BasicMask<Domain>& m) {
  BasicMask<Domain> out(m.height(), m.width());
  for (int y = 0; y < m.height(); ++y) {
    for (int x = 0; x < m.width(); ++x) {
      if (!m.at(y, x)) continue;
      const bool edge = y == 0 || x == 0 || y == m.height() - 1 || x == m.width() - 1 || !m.at(y - 1, x) ||
                        !m.at(y + 1, x) || !m.at(y, x - 1) || !m.at(y, x + 1);
      out.set(y, x, edge);
    }
  }
  return out;
}

template <typename Domain>
void paint(Raster<Domain>& img, const BasicMask<Domain>& where, const Rgb& colour) {
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      if (!where.at(y, x)) continue;
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = colour[static_cast<std::size_t>(c)];
    }
  }
}

/// Gray to three channels; three-channel input is copied.
template <typename Domain>
Raster<Domain> to_rgb(const Raster<Domain>& img) {
  if (img.channels() == 3) return img;
  Raster<Domain> out(img.height(), img.width(), 3);
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, x, 0);
    }
  }
  return out;
}

/// Disc as mid gray, cup as white.
template <typename Domain>
Raster<Domain> label_image(const BasicMaskPair<Domain>& m) {
  Raster<Domain> out(m.disc.height(), m.disc.width(), 3);
  for (int y = 0; y < out.height(); ++y) {
    for (int x = 0; x < out.width(); ++x) {
      const double v = m.cup.at(y, x) ? 1.0 : (m.disc.at(y, x) ? 0.5 : 0.0);
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = v;
    }
  }
  return out;
}

/// Four side-by-side panels of `side` pixels: source image, polar input, polar
/// prediction, and source image with predicted disc and cup contours.
inline CartesianRaster compose_panel(const CartesianRaster& source, const PolarRaster& polar_input,
                                     const PolarMaskPair& polar_pred, const MaskPair& source_pred, int side) {
  detail::require(side >= 8, "compose_panel: panel side too small");
  detail::require(source_pred.disc.height() == source.height() && source_pred.disc.width() == source.width(),
                  "compose_panel: prediction does not match the source image");
  const auto original = to_rgb(resize_bilinear(source, side, side));
  const auto polar = to_rgb(resize_bilinear(polar_input, side, side));
  const auto pred = label_image(PolarMaskPair{resize_nearest(polar_pred.disc, side, side),
                                              resize_nearest(polar_pred.cup, side, side)});
  auto overlay = original;
  paint(overlay, boundary(resize_nearest(source_pred.disc, side, side)), kDiscColour);
  paint(overlay, boundary(resize_nearest(source_pred.cup, side, side)), kCupColour);

  CartesianRaster panel(side, 4 * side, 3);
  auto blit = [&](const auto& img, int slot) {
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        for (int c = 0; c < 3; ++c) panel.at(y, slot * side + x, c) = img.at(y, x, c);
      }
    }
  };
  blit(original, 0);
  blit(polar, 1);
  blit(pred, 2);
  blit(overlay, 3);
  return panel;
}

}  // namespace fundusam

#endif  // FUNDUSAM_VISUALIZE_HPP

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "test_support.hpp"

using namespace fundusam;
using fundusam::test::ellipse_mask;

namespace {

const RoiSpec kOrigin{0.0, 0.0, 10.0};

}  // namespace

TEST(PolarPoint, AxisPoints) {
  auto p = cart_to_polar_point(1.0, 0.0, kOrigin);
  EXPECT_DOUBLE_EQ(p.r, 1.0);
  EXPECT_DOUBLE_EQ(p.theta, 0.0);
  p = cart_to_polar_point(0.0, 1.0, kOrigin);
  EXPECT_DOUBLE_EQ(p.r, 1.0);
  EXPECT_NEAR(p.theta, std::numbers::pi / 2, 1e-15);
}

TEST(PolarPoint, ThreeFourFive) {
  const auto p = cart_to_polar_point(3.0, 4.0, kOrigin);
  EXPECT_NEAR(p.r, 5.0, 1e-12);
  // acos(3/5) computed independently of atan2
  EXPECT_NEAR(p.theta, std::acos(0.6), 1e-12);
  EXPECT_NEAR(p.theta, 0.92730, 1e-5);
}

TEST(PolarPoint, NegativeAnglesAreWrapped) {
  const auto p = cart_to_polar_point(0.0, -1.0, kOrigin);
  EXPECT_NEAR(p.theta, 1.5 * std::numbers::pi, 1e-15);
  const auto q = cart_to_polar_point(1.0, -1e-300, kOrigin);
  EXPECT_GE(q.theta, 0.0);
  EXPECT_LT(q.theta, kTwoPi);
}

TEST(PolarPoint, InverseExamples) {
  auto c = polar_to_cart_point(1.0, 0.0, kOrigin);
  EXPECT_DOUBLE_EQ(c.x, 1.0);
  EXPECT_DOUBLE_EQ(c.y, 0.0);
  c = polar_to_cart_point(0.0, 2.7, RoiSpec{5.0, 7.0, 3.0});
  EXPECT_DOUBLE_EQ(c.x, 5.0);
  EXPECT_DOUBLE_EQ(c.y, 7.0);
  const auto p = cart_to_polar_point(3.0, 4.0, kOrigin);
  c = polar_to_cart_point(p.r, p.theta, kOrigin);
  EXPECT_NEAR(c.x, 3.0, 1e-9);
  EXPECT_NEAR(c.y, 4.0, 1e-9);
}

TEST(PolarPoint, Errors) {
  EXPECT_THROW(cart_to_polar_point(std::nan(""), 0.0, kOrigin), InvalidArgument);
  EXPECT_THROW(cart_to_polar_point(0.0, INFINITY, kOrigin), InvalidArgument);
  EXPECT_THROW(polar_to_cart_point(-1e-3, 0.0, kOrigin), InvalidArgument);
}

TEST(PolarPoint, RandomRoundTripProperty) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> coord(-500.0, 500.0);
  for (int i = 0; i < 20000; ++i) {
    const RoiSpec roi{coord(rng), coord(rng), 10.0};
    const double x = coord(rng);
    const double y = coord(rng);
    const auto p = cart_to_polar_point(x, y, roi);
    ASSERT_GE(p.r, 0.0);
    ASSERT_GE(p.theta, 0.0);
    ASSERT_LT(p.theta, kTwoPi);
    const auto c = polar_to_cart_point(p.r, p.theta, roi);
    ASSERT_NEAR(c.x, x, 1e-9);
    ASSERT_NEAR(c.y, y, 1e-9);
  }
}

TEST(PolarGridTest, Validation) {
  EXPECT_THROW((PolarGrid{1, 8}).validate(), InvalidArgument);
  EXPECT_THROW((PolarGrid{8, 1}).validate(), InvalidArgument);
  EXPECT_NO_THROW((PolarGrid{2, 2}).validate());
  const PolarGrid g{5, 8};
  EXPECT_DOUBLE_EQ(g.radius_step(RoiSpec{0, 0, 2.0}), 0.5);
  EXPECT_DOUBLE_EQ(g.angle_step(), kTwoPi / 8);
}

TEST(WarpToPolar, ConstantImageStaysConstant) {
  CartesianRaster img(40, 30, 2, 0.37);
  const auto p = warp_to_polar(img, RoiSpec{15.0, 20.0, 12.0}, PolarGrid{16, 24});
  ASSERT_EQ(p.height(), 16);
  ASSERT_EQ(p.width(), 24);
  ASSERT_EQ(p.channels(), 2);
  for (double v : p.values()) EXPECT_NEAR(v, 0.37, 1e-15);
}

TEST(WarpToPolar, CentredCircleBecomesBand) {
  const int n = 128;
  const double rho = 20.0;
  const RoiSpec roi{64.0, 64.0, 40.0};
  const auto disc = ellipse_mask(n, n, 64.0, 64.0, rho, rho);
  const PolarGrid g{81, 64, Interpolation::Nearest};
  const auto p = warp_to_polar(mask_to_raster(disc), roi, g);
  for (int ri = 0; ri < g.num_radii; ++ri) {
    const double r = ri * g.radius_step(roi);
    if (std::abs(r - rho) < 1.0) continue;  // boundary ring depends on the pixel grid
    for (int ti = 0; ti < g.num_angles; ++ti) ASSERT_EQ(p.at(ri, ti), r < rho ? 1.0 : 0.0) << ri << "," << ti;
  }
}

TEST(WarpToPolar, ValuesStayInUnitRange) {
  std::mt19937_64 rng(5);
  const auto img = test::random_image(32, 32, 3, rng);
  const auto p = warp_to_polar(img, RoiSpec{16, 16, 30.0}, PolarGrid{32, 32});
  for (double v : p.values()) {
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
  }
  EXPECT_TRUE(p.all_finite());
}

TEST(WarpToPolar, DegenerateRoi) {
  CartesianRaster img(8, 8);
  EXPECT_THROW(warp_to_polar(img, RoiSpec{4, 4, 0.0}, PolarGrid{8, 8}), InvalidArgument);
  EXPECT_THROW(warp_to_polar(img, RoiSpec{4, 4, -1.0}, PolarGrid{8, 8}), InvalidArgument);
}

TEST(WarpToPolar, RotationShiftsColumnsExactly) {
  // A quarter turn about a pixel corner maps the pixel grid onto itself.
  const int n = 64;
  const double c = 32.0;
  CartesianRaster img(n, n);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double a = std::atan2(y + 0.5 - c, x + 0.5 - c);
      img.at(y, x) = (a > 0.2 && a < 1.1) ? 1.0 : 0.0;
    }
  }
  CartesianRaster rot(n, n);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) rot.at(x, n - 1 - y) = img.at(y, x);
  }
  const PolarGrid g{32, 128};
  const RoiSpec roi{c, c, 28.0};
  const auto a = warp_to_polar(img, roi, g);
  const auto b = warp_to_polar(rot, roi, g);
  const int shift = g.num_angles / 4;
  for (int ri = 0; ri < g.num_radii; ++ri) {
    for (int ti = 0; ti < g.num_angles; ++ti) {
      ASSERT_NEAR(b.at(ri, (ti + shift) % g.num_angles), a.at(ri, ti), 1e-9);
    }
  }
}

TEST(WarpToPolar, SectorRotationEquivariance) {
  const int n = 256;
  const double c = 128.0;
  const PolarGrid g{64, 180};
  const int k = 37;
  const double delta = k * g.angle_step();
  auto sector = [&](double start) {
    CartesianRaster img(n, n);
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        double a = std::atan2(y + 0.5 - c, x + 0.5 - c);
        a = std::fmod(a - start + 2 * kTwoPi, kTwoPi);
        img.at(y, x) = a < 1.3 ? 1.0 : 0.0;
      }
    }
    return img;
  };
  const RoiSpec roi{c, c, 120.0};
  const auto a = warp_to_polar(sector(0.4), roi, g);
  const auto b = warp_to_polar(sector(0.4 + delta), roi, g);
  double err = 0.0;
  for (int ri = 8; ri < g.num_radii; ++ri) {  // near the centre the pixel grid dominates
    for (int ti = 0; ti < g.num_angles; ++ti) err += std::abs(b.at(ri, (ti + k) % g.num_angles) - a.at(ri, ti));
  }
  EXPECT_LT(err / ((g.num_radii - 8) * g.num_angles), 0.02);
}

TEST(WarpToCartesian, ConstantPolarGivesDisc) {
  PolarRaster p(16, 32, 1, 0.8);
  const RoiSpec roi{20.0, 20.0, 10.0};
  const auto img = warp_to_cartesian(p, roi, 40, 40);
  for (int y = 0; y < 40; ++y) {
    for (int x = 0; x < 40; ++x) {
      const double r = std::hypot(x + 0.5 - 20.0, y + 0.5 - 20.0);
      ASSERT_DOUBLE_EQ(img.at(y, x), r <= 10.0 ? 0.8 : 0.0);
    }
  }
}

TEST(WarpToCartesian, HalfBandGivesHalfRadiusCircle) {
  const int rows = 201;
  PolarRaster p(rows, 64);
  for (int r = 0; r < rows; ++r) {
    for (int t = 0; t < 64; ++t) p.at(r, t) = r < 100 ? 1.0 : 0.0;  // rows [0, R/2)
  }
  const RoiSpec roi{50.0, 50.0, 40.0};
  const auto m = threshold(warp_to_cartesian(p, roi, 100, 100, Interpolation::Nearest), 0.5);
  for (int y = 0; y < 100; ++y) {
    for (int x = 0; x < 100; ++x) {
      const double r = std::hypot(x + 0.5 - 50.0, y + 0.5 - 50.0);
      if (std::abs(r - 20.0) < 0.5) continue;
      ASSERT_EQ(m.at(y, x), r < 20.0) << x << "," << y;
    }
  }
}

TEST(WarpToCartesian, OutputSizeErrors) {
  PolarRaster p(4, 4);
  EXPECT_THROW(warp_to_cartesian(p, RoiSpec{1, 1, 1}, 0, 4), InvalidArgument);
  EXPECT_THROW(warp_to_cartesian(p, RoiSpec{1, 1, 1}, 4, 0), InvalidArgument);
}

TEST(WarpToCartesian, SmoothImageNearIdentity) {
  const int n = 200;
  const RoiSpec roi{100.0, 100.0, 90.0};
  CartesianRaster img(n, n);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double r = std::hypot(x + 0.5 - 100.0, y + 0.5 - 100.0);
      img.at(y, x) = 0.5 + 0.4 * std::cos(r / 15.0) * (0.5 + 0.5 * std::sin((x + 0.5) / 40.0));
    }
  }
  const auto back = warp_to_cartesian(warp_to_polar(img, roi, PolarGrid{512, 512}), roi, n, n);
  double worst = 0.0;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      if (std::hypot(x + 0.5 - 100.0, y + 0.5 - 100.0) > 0.9 * roi.radius) continue;
      worst = std::max(worst, std::abs(back.at(y, x) - img.at(y, x)));
    }
  }
  EXPECT_LE(worst, 0.05);
}

TEST(MaskWarp, PolarMasksStayBinaryAndNested) {
  const auto disc = ellipse_mask(300, 300, 150.3, 140.8, 70, 55);
  const auto cup = ellipse_mask(300, 300, 150.3, 140.8, 30, 28);
  const auto roi = roi_from_mask(disc, 1.5);
  const auto pd = warp_mask_to_polar(disc, roi, 128, 128);
  const auto pc = warp_mask_to_polar(cup, roi, 128, 128);
  for (auto b : pd.bits()) ASSERT_TRUE(b == 0 || b == 1);
  EXPECT_EQ(containment_loss(pc, pd, ContainmentMode::Count), 0.0);
  // The disc contains the ROI centre, so the band starts at row 0 in every column.
  for (int t = 0; t < 128; ++t) EXPECT_TRUE(pd.at(0, t));
}

TEST(MaskWarp, RoundTripDice) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 4; ++i) {
    const double ax = 60 + 60 * u(rng);
    const double ay = 60 + 60 * u(rng);
    const double cx = 256 + 40 * (u(rng) - 0.5);
    const double cy = 256 + 40 * (u(rng) - 0.5);
    const auto disc = ellipse_mask(512, 512, cx, cy, ax, ay);
    const auto cup = ellipse_mask(512, 512, cx, cy, ax * (0.3 + 0.4 * u(rng)), ay * (0.3 + 0.4 * u(rng)));
    const auto roi = roi_from_mask(disc, 1.5);
    for (const auto* m : {&disc, &cup}) {
      const auto back = warp_mask_to_cartesian(warp_mask_to_polar(*m, roi, 512, 512), roi, 512, 512);
      EXPECT_GE(dice(*m, back), 0.98);
    }
  }
}

TEST(MaskWarp, AreaRebalancing) {
  const RoiSpec roi{100.0, 100.0, 100.0};
  const auto disc = ellipse_mask(200, 200, 100.0, 100.0, 30.0, 30.0);
  const double cart_fraction = static_cast<double>(disc.count()) / disc.size();
  const auto polar = warp_mask_to_polar(disc, roi, 256, 256);
  const double polar_fraction = static_cast<double>(polar.count()) / polar.size();
  EXPECT_NEAR(cart_fraction, 0.09 * std::numbers::pi / 4, 0.005);
  EXPECT_NEAR(polar_fraction, 0.3, 0.01);
  EXPECT_GT(polar_fraction / cart_fraction, 2.0);
}

TEST(CropRoi, FullFrameMask) {
  Mask m(40, 60, 1);
  const auto roi = roi_from_mask(m, 1.0);
  EXPECT_DOUBLE_EQ(roi.center_x, 30.0);
  EXPECT_DOUBLE_EQ(roi.center_y, 20.0);
  EXPECT_DOUBLE_EQ(roi.radius, 30.0);
}

TEST(CropRoi, SinglePixelIsDegenerate) {
  Mask m(32, 32);
  m.set(10, 10, true);
  EXPECT_THROW(roi_from_mask(m, 1.5), EmptyMaskError);
  EXPECT_THROW(crop_roi(CartesianRaster(32, 32, 3), m, 1.5), EmptyMaskError);
}

TEST(CropRoi, EmptyMask) { EXPECT_THROW(roi_from_mask(Mask(8, 8), 1.5), EmptyMaskError); }

TEST(CropRoi, EllipseMatchesBruteForce) {
  const auto m = ellipse_mask(240, 240, 100.0, 120.0, 30.0, 20.0);  // 60 x 40 axes
  double sx = 0;
  double sy = 0;
  int n = 0;
  int x0 = 1 << 30;
  int x1 = -1;
  int y0 = 1 << 30;
  int y1 = -1;
  for (int y = 0; y < 240; ++y) {
    for (int x = 0; x < 240; ++x) {
      if (!m.at(y, x)) continue;
      sx += x + 0.5;
      sy += y + 0.5;
      ++n;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  const auto roi = roi_from_mask(m, 1.5);
  EXPECT_NEAR(roi.center_x, sx / n, 1e-12);
  EXPECT_NEAR(roi.center_y, sy / n, 1e-12);
  EXPECT_NEAR(roi.center_x, 100.0, 1e-9);
  EXPECT_NEAR(roi.center_y, 120.0, 1e-9);
  EXPECT_DOUBLE_EQ(roi.radius, 1.5 * std::max(x1 - x0 + 1, y1 - y0 + 1) / 2.0);
  EXPECT_NEAR(roi.radius, 45.0, 1.0);
}

TEST(CropRoi, CropIsZeroPaddedSquare) {
  CartesianRaster img(50, 50, 3, 1.0);
  const auto m = ellipse_mask(50, 50, 8.0, 25.0, 6.0, 6.0);  // near the left border
  const auto crop = crop_roi(img, m, 1.5);
  EXPECT_EQ(crop.image.height(), crop.image.width());
  EXPECT_GE(crop.image.height(), static_cast<int>(2 * crop.roi.radius));
  EXPECT_LT(crop.origin_x, 0);
  EXPECT_EQ(crop.image.at(crop.image.height() / 2, 0, 0), 0.0);  // padding
  const auto src = crop.source_roi();
  const auto direct = roi_from_mask(m, 1.5);
  EXPECT_DOUBLE_EQ(src.center_x, direct.center_x);
  EXPECT_DOUBLE_EQ(src.center_y, direct.center_y);
  // Mask crop uses the same geometry and keeps every foreground pixel.
  EXPECT_EQ(crop_like(m, crop).count(), m.count());
}

TEST(RasterIo, ContainerRoundTrip) {
  test::TempDir dir("raster");
  std::mt19937_64 rng(1);
  const auto p = test::random_polar(7, 9, 3, rng);
  const auto path = (dir.path() / "p.fsr").string();
  write_raster(path, p);
  EXPECT_EQ(read_raster<PolarDomain>(path), p);
  EXPECT_THROW(read_raster<CartesianDomain>(path), IngestionError);
}

TEST(RasterIo, PngRoundTrip) {
  test::TempDir dir("png");
  CartesianRaster img(5, 6, 3);
  for (int y = 0; y < 5; ++y) {
    for (int x = 0; x < 6; ++x) {
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = ((y * 6 + x) * 3 + c) / 255.0;
    }
  }
  const auto p8 = (dir.path() / "a.png").string();
  write_png(p8, img, 8);
  EXPECT_EQ(read_png(p8), img);
  CartesianRaster g(3, 3, 1);
  g.at(1, 1) = 12345.0 / 65535.0;
  const auto p16 = (dir.path() / "b.png").string();
  write_png(p16, g, 16);
  EXPECT_NEAR(read_png(p16).at(1, 1), 12345.0 / 65535.0, 1e-12);
}

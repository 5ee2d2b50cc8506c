#ifndef FUNDUSAM_DATA_HPP
#define FUNDUSAM_DATA_HPP

// Dataset records, synthetic fundus generation, the on-disk dataset layout,
// splitting and the crop -> polar warp -> resize -> normalise chain.
//
// Dataset layout (shared by real and synthetic data):
//   <root>/images/<stem>.png     RGB (or gray) fundus image
//   <root>/masks/<stem>.png      gray label map: 0 = cup, <=128 = disc, 255 = background
// or, alternatively, two binary masks per stem:
//   <root>/masks/<stem>_disc.png, <root>/masks/<stem>_cup.png

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fundusam/image_io.hpp"
#include "fundusam/losses.hpp"
#include "fundusam/polar.hpp"
#include "fundusam/raster.hpp"

namespace fundusam {

struct SampleRecord {
  std::string id;
  CartesianRaster image;  // 3 channels in [0,1]
  Mask disc;
  Mask cup;

  void validate() const {
    if (image.empty() || image.channels() != 3) throw IngestionError(id + ": image must have 3 channels");
    if (disc.height() != image.height() || disc.width() != image.width() || !disc.same_shape(cup)) {
      throw IngestionError(id + ": masks must match the image size");
    }
  }
};

/// splitmix64 finaliser over (seed, stream, index): independent seeds per use.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::uint64_t z = seed ^ (stream * 0x9E3779B97F4A7C15ULL) ^ (index * 0xBF58476D1CE4E5B9ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

enum SeedStream : std::uint64_t {
  kShuffleStream = 1,
  kTrainPromptStream = 2,
  kEvalPromptStream = 3,
  kSynthStream = 4,
};

// ---------------------------------------------------------------------------
// Synthetic fundus generator

enum class Contrast { High, Low };

struct SyntheticConfig {
  int image_size = 256;
  double disc_axis_min = 34.0;  // semi-axes, pixels
  double disc_axis_max = 46.0;
  double cdr_min = 0.3;  // per-axis cup/disc ratio
  double cdr_max = 0.6;
  Contrast contrast = Contrast::High;
  double noise_sigma = 0.02;
  int vessels = 6;
  std::uint64_t seed = 7;

  void validate() const {
    if (image_size < 16) throw InvalidArgument("SyntheticConfig: image too small");
    if (!(disc_axis_min > 0.0) || disc_axis_max < disc_axis_min) throw InvalidArgument("SyntheticConfig: disc axis range");
    if (2.0 * disc_axis_max >= 0.8 * image_size) throw InvalidArgument("SyntheticConfig: disc does not fit the image");
    if (!(cdr_min > 0.0) || !(cdr_max < 1.0) || cdr_max < cdr_min) {
      throw InvalidArgument("SyntheticConfig: cup/disc ratio range must lie in (0,1)");
    }
    if (noise_sigma < 0.0 || vessels < 0) throw InvalidArgument("SyntheticConfig: negative noise or vessel count");
  }
};

/// Generating parameters, kept so tests can compare measured and intended geometry.
struct SyntheticTruth {
  double center_x;
  double center_y;
  double disc_ax;
  double disc_ay;
  double cup_ratio_x;
  double cup_ratio_y;
  [[nodiscard]] double cup_ax() const { return disc_ax * cup_ratio_x; }
  [[nodiscard]] double cup_ay() const { return disc_ay * cup_ratio_y; }
};

struct SyntheticSample {
  SampleRecord record;
  SyntheticTruth truth;
};

namespace detail {

inline double ellipse_level(double x, double y, double cx, double cy, double ax, double ay) {
  const double u = (x - cx) / ax;
  const double v = (y - cy) / ay;
  return u * u + v * v;
}

/// 1 inside, 0 outside, linear ramp `soft` pixels wide across the boundary.
inline double soft_inside(double level, double axis, double soft) {
  const double dist = (std::sqrt(level) - 1.0) * axis;  // approx. signed distance in pixels
  return std::clamp(0.5 - dist / soft, 0.0, 1.0);
}

}  // namespace detail

/// Nested axis-aligned ellipses (cup inside disc) on a reddish background with
/// noise and dark vessel strokes. Masks are exact: pixel centres inside the
/// generating ellipses.
template <typename Rng>
SyntheticSample synthesize_sample(const SyntheticConfig& cfg, Rng& rng, const std::string& id = "synthetic") {
  cfg.validate();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  const int n = cfg.image_size;
  SyntheticTruth t{};
  t.disc_ax = uniform(cfg.disc_axis_min, cfg.disc_axis_max);
  t.disc_ay = uniform(cfg.disc_axis_min, cfg.disc_axis_max);
  const double jitter = 0.08 * n;
  t.center_x = 0.5 * n + uniform(-jitter, jitter);
  t.center_y = 0.5 * n + uniform(-jitter, jitter);
  t.cup_ratio_x = uniform(cfg.cdr_min, cfg.cdr_max);
  t.cup_ratio_y = uniform(cfg.cdr_min, cfg.cdr_max);

  const bool high = cfg.contrast == Contrast::High;
  const double disc_gap = high ? 0.22 : 0.05;
  const double cup_gap = high ? 0.18 : 0.04;
  const double vessel_depth = high ? 0.25 : 0.06;
  const double base[3] = {0.55 + uniform(-0.05, 0.05), 0.24 + uniform(-0.03, 0.03), 0.10 + uniform(-0.02, 0.02)};
  const double tint[3] = {1.0, 0.9, 0.6};

  struct Stroke {
    double angle;
    double curvature;
    double width;
  };
  std::vector<Stroke> strokes;
  for (int v = 0; v < cfg.vessels; ++v) strokes.push_back({uniform(0.0, kTwoPi), uniform(-0.004, 0.004), uniform(1.2, 2.5)});

  std::normal_distribution<double> noise(0.0, cfg.noise_sigma > 0.0 ? cfg.noise_sigma : 1.0);
  SampleRecord rec{id, CartesianRaster(n, n, 3), Mask(n, n), Mask(n, n)};
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double px = x + 0.5;
      const double py = y + 0.5;
      const double ld = detail::ellipse_level(px, py, t.center_x, t.center_y, t.disc_ax, t.disc_ay);
      const double lc = detail::ellipse_level(px, py, t.center_x, t.center_y, t.cup_ax(), t.cup_ay());
      rec.disc.set(y, x, ld <= 1.0);
      rec.cup.set(y, x, lc <= 1.0);
      const double in_disc = detail::soft_inside(ld, std::min(t.disc_ax, t.disc_ay), 3.0);
      const double in_cup = detail::soft_inside(lc, std::min(t.cup_ax(), t.cup_ay()), 3.0);

      // Vessel darkening: distance to curved rays leaving the disc centre.
      const double dx = px - t.center_x;
      const double dy = py - t.center_y;
      const double r = std::hypot(dx, dy);
      double vessel = 0.0;
      if (r > 0.35 * std::min(t.disc_ax, t.disc_ay)) {
        const double theta = std::atan2(dy, dx);
        for (const auto& s : strokes) {
          double d_ang = std::remainder(theta - (s.angle + s.curvature * r), kTwoPi);
          const double dist = std::abs(d_ang) * r;
          if (dist < s.width) vessel = std::max(vessel, 1.0 - dist / s.width);
        }
      }
      const double vignette = 0.08 * (r / n);
      for (int c = 0; c < 3; ++c) {
        double v = base[c] - vignette + tint[c] * (disc_gap * in_disc + cup_gap * in_cup);
        v *= 1.0 - vessel_depth * vessel;
        if (cfg.noise_sigma > 0.0) v += noise(rng);
        rec.image.at(y, x, c) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return {std::move(rec), t};
}

/// `count` samples named synth_0000, synth_0001, ...; sample i draws from its own
/// generator seeded by (cfg.seed, i), so any prefix of a dataset is reproducible.
inline std::vector<SyntheticSample> synthesize_dataset(const SyntheticConfig& cfg, int count) {
  if (count < 0) throw InvalidArgument("synthesize_dataset: negative count");
  std::vector<SyntheticSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    std::mt19937_64 rng(derive_seed(cfg.seed, kSynthStream, static_cast<std::uint64_t>(i)));
    char id[32];
    std::snprintf(id, sizeof(id), "synth_%04d", i);
    out.push_back(synthesize_sample(cfg, rng, id));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset I/O

namespace detail {

inline Mask channel_mask(const CartesianRaster& r, const std::function<bool(int)>& pred) {
  Mask m(r.height(), r.width());
  for (int y = 0; y < r.height(); ++y) {
    for (int x = 0; x < r.width(); ++x) m.set(y, x, pred(static_cast<int>(std::lround(r.at(y, x, 0) * 255.0))));
  }
  return m;
}

inline CartesianRaster as_rgb(const CartesianRaster& img) {
  if (img.channels() == 3) return img;
  CartesianRaster out(img.height(), img.width(), 3);
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, x, 0);
    }
  }
  return out;
}

}  // namespace detail

/// Loads every images/<stem>.png with its label map. Records are sorted by stem.
/// Cup pixels outside the disc are removed (with a warning) to restore cup <= disc.
inline std::vector<SampleRecord> load_refuge_format(const std::filesystem::path& root,
                                                    std::vector<std::string>* warnings = nullptr) {
  namespace fs = std::filesystem;
  const fs::path images = root / "images";
  const fs::path masks = root / "masks";
  std::vector<std::string> stems;
  if (fs::is_directory(images)) {
    for (const auto& e : fs::directory_iterator(images)) {
      if (e.is_regular_file() && e.path().extension() == ".png") stems.push_back(e.path().stem().string());
    }
  }
  std::sort(stems.begin(), stems.end());

  std::vector<std::string> missing;
  for (const auto& s : stems) {
    const bool combined = fs::exists(masks / (s + ".png"));
    const bool split = fs::exists(masks / (s + "_disc.png")) && fs::exists(masks / (s + "_cup.png"));
    if (!combined && !split) missing.push_back(s);
  }
  if (!missing.empty()) {
    std::string msg = "missing mask for image(s):";
    for (const auto& s : missing) msg += " " + s;
    throw IngestionError(msg);
  }

  std::vector<SampleRecord> out;
  out.reserve(stems.size());
  for (const auto& s : stems) {
    SampleRecord rec;
    rec.id = s;
    rec.image = detail::as_rgb(read_png((images / (s + ".png")).string()));
    if (fs::exists(masks / (s + ".png"))) {
      const auto label = read_png((masks / (s + ".png")).string());
      rec.disc = detail::channel_mask(label, [](int v) { return v <= 128; });
      rec.cup = detail::channel_mask(label, [](int v) { return v == 0; });
    } else {
      rec.disc = detail::channel_mask(read_png((masks / (s + "_disc.png")).string()), [](int v) { return v > 127; });
      rec.cup = detail::channel_mask(read_png((masks / (s + "_cup.png")).string()), [](int v) { return v > 127; });
    }
    rec.validate();
    const auto violations = static_cast<std::size_t>(containment_loss(rec.cup, rec.disc, ContainmentMode::Count));
    if (violations > 0) {
      if (warnings) warnings->push_back(s + ": " + std::to_string(violations) + " cup pixel(s) outside disc, clipped");
      rec.cup = mask_and(rec.cup, rec.disc);
    }
    out.push_back(std::move(rec));
  }
  return out;
}

/// Writes records in the combined label-map layout (0 cup, 128 rim, 255 background).
inline void write_refuge_format(const std::filesystem::path& root, const std::vector<SampleRecord>& records) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  for (const auto& rec : records) {
    rec.validate();
    write_png((root / "images" / (rec.id + ".png")).string(), rec.image, 8);
    CartesianRaster label(rec.image.height(), rec.image.width(), 1, 1.0);
    for (int y = 0; y < label.height(); ++y) {
      for (int x = 0; x < label.width(); ++x) {
        if (rec.cup.at(y, x)) {
          label.at(y, x) = 0.0;
        } else if (rec.disc.at(y, x)) {
          label.at(y, x) = 128.0 / 255.0;
        }
      }
    }
    write_png((root / "masks" / (rec.id + ".png")).string(), label, 8);
  }
}

// ---------------------------------------------------------------------------
// Splitting

/// Deterministic shuffled split: first floor(n * ratio) go to train.
template <typename Item>
std::pair<std::vector<Item>, std::vector<Item>> split(const std::vector<Item>& items, double ratio,
                                                      std::uint64_t seed) {
  if (items.empty()) throw InvalidArgument("split: empty input");
  if (!(ratio > 0.0 && ratio < 1.0)) throw InvalidArgument("split: ratio must lie in (0,1)");
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(items.size()) * ratio));
  std::pair<std::vector<Item>, std::vector<Item>> out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_train ? out.first : out.second).push_back(items[order[i]]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Preprocessing

struct PreprocessConfig {
  PolarGrid grid;
  double margin = 1.5;
  int image_size = 256;
  bool use_polar = true;  // false: resize the Cartesian crop instead (ablation)
};

/// Model-ready sample plus the geometry needed to map predictions back.
struct PreparedSample {
  std::string id;
  PolarRaster image;  // image_size^2, normalised once stats are applied
  PolarMaskPair masks;
  RoiSpec source_roi;
  int crop_origin_x = 0;
  int crop_origin_y = 0;
  int crop_side = 0;
  int source_height = 0;
  int source_width = 0;
  bool polar = true;
  PolarGrid grid;
};

namespace detail {

/// Reinterprets a Cartesian crop as model input (no-polar ablation path).
template <typename To, typename From>
Raster<To> retag(const Raster<From>& r) {
  Raster<To> out(r.height(), r.width(), r.channels());
  std::copy(r.values().begin(), r.values().end(), out.values().begin());
  return out;
}

template <typename To, typename From>
BasicMask<To> retag(const BasicMask<From>& m) {
  BasicMask<To> out(m.height(), m.width());
  std::copy(m.bits().begin(), m.bits().end(), out.bits().begin());
  return out;
}

}  // namespace detail

inline PreparedSample preprocess(const SampleRecord& rec, const PreprocessConfig& cfg) {
  rec.validate();
  const RoiCrop crop = crop_roi(rec.image, rec.disc, cfg.margin);
  const Mask disc = crop_like(rec.disc, crop);
  const Mask cup = crop_like(rec.cup, crop);

  PreparedSample s;
  s.id = rec.id;
  s.source_roi = crop.source_roi();
  s.crop_origin_x = crop.origin_x;
  s.crop_origin_y = crop.origin_y;
  s.crop_side = crop.image.height();
  s.source_height = rec.image.height();
  s.source_width = rec.image.width();
  s.polar = cfg.use_polar;
  s.grid = cfg.grid;

  const int n = cfg.image_size;
  if (cfg.use_polar) {
    PolarGrid g = cfg.grid;
    g.interpolation = Interpolation::Bilinear;
    PolarRaster pimg = warp_to_polar(crop.image, crop.roi, g);
    PolarMask pd = warp_mask_to_polar(disc, crop.roi, g.num_radii, g.num_angles);
    PolarMask pc = warp_mask_to_polar(cup, crop.roi, g.num_radii, g.num_angles);
    const bool same = g.num_radii == n && g.num_angles == n;
    s.image = same ? std::move(pimg) : resize_bilinear(pimg, n, n);
    s.masks.disc = same ? std::move(pd) : resize_nearest(pd, n, n);
    s.masks.cup = same ? std::move(pc) : resize_nearest(pc, n, n);
  } else {
    s.image = resize_bilinear(detail::retag<PolarDomain>(crop.image), n, n);
    s.masks.disc = resize_nearest(detail::retag<PolarDomain>(disc), n, n);
    s.masks.cup = resize_nearest(detail::retag<PolarDomain>(cup), n, n);
  }
  return s;
}

/// Maps a model-resolution mask back into the full source frame.
inline Mask to_source_frame(const PolarMask& pred, const PreparedSample& s) {
  if (s.polar) {
    const PolarMask at_grid = resize_nearest(pred, s.grid.num_radii, s.grid.num_angles);
    return warp_mask_to_cartesian(at_grid, s.source_roi, s.source_height, s.source_width);
  }
  const PolarMask at_crop = resize_nearest(pred, s.crop_side, s.crop_side);
  Mask out(s.source_height, s.source_width);
  for (int y = 0; y < s.crop_side; ++y) {
    const int sy = y + s.crop_origin_y;
    if (sy < 0 || sy >= s.source_height) continue;
    for (int x = 0; x < s.crop_side; ++x) {
      const int sx = x + s.crop_origin_x;
      if (sx < 0 || sx >= s.source_width) continue;
      out.set(sy, sx, at_crop.at(y, x));
    }
  }
  return out;
}

/// Per-channel mean / standard deviation of model inputs.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> stddev;

  static NormStats compute(const std::vector<PreparedSample>& train) {
    if (train.empty()) throw InvalidArgument("NormStats: empty training split");
    const int c = train.front().image.channels();
    std::vector<double> s1(static_cast<std::size_t>(c), 0.0);
    std::vector<double> s2(static_cast<std::size_t>(c), 0.0);
    double count = 0.0;
    for (const auto& s : train) {
      const auto v = s.image.values();
      for (std::size_t i = 0; i < v.size(); ++i) {
        s1[i % static_cast<std::size_t>(c)] += v[i];
        s2[i % static_cast<std::size_t>(c)] += v[i] * v[i];
      }
      count += static_cast<double>(v.size()) / c;
    }
    NormStats ns;
    for (int k = 0; k < c; ++k) {
      const double m = s1[static_cast<std::size_t>(k)] / count;
      const double var = std::max(0.0, s2[static_cast<std::size_t>(k)] / count - m * m);
      ns.mean.push_back(m);
      ns.stddev.push_back(std::max(1e-6, std::sqrt(var)));
    }
    return ns;
  }

  void apply(PolarRaster& img) const {
    const auto c = static_cast<std::size_t>(img.channels());
    if (c != mean.size()) throw InvalidArgument("NormStats: channel count mismatch");
    auto v = img.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = (v[i] - mean[i % c]) / stddev[i % c];
  }
};

/// Worker count from FUNDUSAM_WORKERS (default 1).
inline int worker_count() {
  if (const char* env = std::getenv("FUNDUSAM_WORKERS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return 1;
}

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Results must be
/// written to slot i so output order never depends on scheduling.
inline void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = static_cast<std::size_t>(w); i < n; i += static_cast<std::size_t>(workers)) fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline std::vector<PreparedSample> preprocess_all(const std::vector<SampleRecord>& records, const PreprocessConfig& cfg,
                                                  int workers = worker_count()) {
  std::vector<PreparedSample> out(records.size());
  parallel_for(records.size(), workers, [&](std::size_t i) { out[i] = preprocess(records[i], cfg); });
  return out;
}

}  // namespace fundusam

#endif  // FUNDUSAM_DATA_HPP

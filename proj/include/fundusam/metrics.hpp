#ifndef FUNDUSAM_METRICS_HPP
#define FUNDUSAM_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "fundusam/raster.hpp"

namespace fundusam {

namespace detail {

template <typename Domain>
std::pair<std::size_t, std::size_t> overlap_counts(const BasicMask<Domain>& a, const BasicMask<Domain>& b) {
  if (!a.same_shape(b)) throw InvalidArgument("mask metrics: shape mismatch");
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a.bits()[i] != 0;
    const bool y = b.bits()[i] != 0;
    inter += (x && y) ? 1 : 0;
    uni += (x || y) ? 1 : 0;
  }
  return {inter, uni};
}

}  // namespace detail

/// 2|a & b| / (|a| + |b|); 1 when both are empty.
template <typename Domain>
double dice(const BasicMask<Domain>& a, const BasicMask<Domain>& b) {
  const auto [inter, uni] = detail::overlap_counts(a, b);
  const double denom = static_cast<double>(a.count() + b.count());
  if (denom == 0.0) return 1.0;
  return 2.0 * static_cast<double>(inter) / denom;
}

/// |a & b| / |a | b|; 1 when both are empty.
template <typename Domain>
double iou(const BasicMask<Domain>& a, const BasicMask<Domain>& b) {
  const auto [inter, uni] = detail::overlap_counts(a, b);
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

/// Longest vertical foreground extent over all columns (first..last row, inclusive).
template <typename Domain>
int vertical_diameter(const BasicMask<Domain>& m) {
  int best = 0;
  for (int x = 0; x < m.width(); ++x) {
    int first = -1;
    int last = -1;
    for (int y = 0; y < m.height(); ++y) {
      if (!m.at(y, x)) continue;
      if (first < 0) first = y;
      last = y;
    }
    if (first >= 0) best = std::max(best, last - first + 1);
  }
  return best;
}

/// Vertical cup diameter over vertical disc diameter.
template <typename Domain>
double cdr(const BasicMask<Domain>& disc, const BasicMask<Domain>& cup) {
  const int vdd = vertical_diameter(disc);
  if (vdd == 0) throw EmptyMaskError("cdr: disc mask is empty");
  return static_cast<double>(vertical_diameter(cup)) / static_cast<double>(vdd);
}

struct SampleMetrics {
  std::string id;
  double disc_dice = 0.0;
  double disc_iou = 0.0;
  double cup_dice = 0.0;
  double cup_iou = 0.0;
  std::optional<double> cdr_error;  // |predicted CDR - true CDR|, absent if prediction has no disc
};

struct MetricReport {
  std::vector<SampleMetrics> samples;
  double disc_dice = 0.0;
  double disc_iou = 0.0;
  double cup_dice = 0.0;
  double cup_iou = 0.0;
  std::optional<double> mean_cdr_error;
  std::size_t cdr_count = 0;

  [[nodiscard]] std::size_t count() const { return samples.size(); }

  /// Recomputes the means from the per-sample rows.
  void aggregate() {
    if (samples.empty()) throw InvalidArgument("MetricReport: no samples");
    double dd = 0;
    double di = 0;
    double cd = 0;
    double ci = 0;
    double ce = 0;
    cdr_count = 0;
    for (const auto& s : samples) {
      dd += s.disc_dice;
      di += s.disc_iou;
      cd += s.cup_dice;
      ci += s.cup_iou;
      if (s.cdr_error) {
        ce += *s.cdr_error;
        ++cdr_count;
      }
    }
    const auto n = static_cast<double>(samples.size());
    disc_dice = dd / n;
    disc_iou = di / n;
    cup_dice = cd / n;
    cup_iou = ci / n;
    mean_cdr_error = cdr_count ? std::optional<double>(ce / static_cast<double>(cdr_count)) : std::nullopt;
  }
};

}  // namespace fundusam

#endif  // FUNDUSAM_METRICS_HPP

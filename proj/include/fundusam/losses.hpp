#ifndef FUNDUSAM_LOSSES_HPP
#define FUNDUSAM_LOSSES_HPP

// Joint disc/cup objective:
//   total = w_disc * BCE(disc) + w_cup * BCE(cup) + w_contain * containment
// with containment = sum_i cup_i * (1 - disc_i). The training form uses
// predicted probabilities divided by N; the count form uses binary masks.

#include <algorithm>
#include <cmath>
#include <span>
#include <utility>

#include "fundusam/autograd.hpp"
#include "fundusam/raster.hpp"

namespace fundusam {

inline constexpr double kProbEpsilon = 1e-7;

struct LossWeights {
  double disc = 0.5;
  double cup = 0.5;
  double contain = 0.1;

  void validate() const {
    for (double w : {disc, cup, contain}) {
      if (!(w >= 0.0 && w <= 1.0)) throw InvalidArgument("LossWeights: each weight must lie in [0,1]");
    }
  }
};

struct LossBreakdown {
  double l_disk = 0.0;
  double l_cup = 0.0;
  double l_contain = 0.0;
  double total = 0.0;

  LossBreakdown& operator+=(const LossBreakdown& o) {
    l_disk += o.l_disk;
    l_cup += o.l_cup;
    l_contain += o.l_contain;
    total += o.total;
    return *this;
  }
  LossBreakdown& operator/=(double n) {
    l_disk /= n;
    l_cup /= n;
    l_contain /= n;
    total /= n;
    return *this;
  }
};

template <typename Domain>
struct BasicMaskPair {
  BasicMask<Domain> disc;
  BasicMask<Domain> cup;
};

using MaskPair = BasicMaskPair<CartesianDomain>;
using PolarMaskPair = BasicMaskPair<PolarDomain>;

enum class ContainmentMode { Normalized, Count };

/// Mean binary cross-entropy, probabilities clamped to [eps, 1-eps].
inline double bce_loss(std::span<const double> probs, std::span<const double> target) {
  if (probs.size() != target.size() || probs.empty()) throw InvalidArgument("bce_loss: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(probs[i], kProbEpsilon, 1.0 - kProbEpsilon);
    acc += target[i] * std::log(p) + (1.0 - target[i]) * std::log(1.0 - p);
  }
  return -acc / static_cast<double>(probs.size());
}

template <typename Domain>
double bce_loss(const Raster<Domain>& probs, const BasicMask<Domain>& target) {
  if (probs.height() != target.height() || probs.width() != target.width() || probs.channels() != 1) {
    throw InvalidArgument("bce_loss: shape mismatch");
  }
  const auto t = mask_to_raster(target);
  return bce_loss(probs.values(), t.values());
}

/// sum cup * (1 - disc), optionally divided by N.
inline double containment_loss(std::span<const double> cup, std::span<const double> disc, ContainmentMode mode) {
  if (cup.size() != disc.size() || cup.empty()) throw InvalidArgument("containment_loss: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < cup.size(); ++i) acc += cup[i] * (1.0 - disc[i]);
  return mode == ContainmentMode::Count ? acc : acc / static_cast<double>(cup.size());
}

template <typename Domain>
double containment_loss(const Raster<Domain>& cup, const Raster<Domain>& disc, ContainmentMode mode) {
  if (cup.height() != disc.height() || cup.width() != disc.width() || cup.channels() != disc.channels()) {
    throw InvalidArgument("containment_loss: shape mismatch");
  }
  return containment_loss(cup.values(), disc.values(), mode);
}

/// Binary form: number of cup pixels outside the disc (Count) or that number / N.
template <typename Domain>
double containment_loss(const BasicMask<Domain>& cup, const BasicMask<Domain>& disc,
                        ContainmentMode mode = ContainmentMode::Count) {
  if (!cup.same_shape(disc)) throw InvalidArgument("containment_loss: shape mismatch");
  std::size_t violations = 0;
  for (std::size_t i = 0; i < cup.size(); ++i) violations += (cup.bits()[i] && !disc.bits()[i]) ? 1 : 0;
  const auto count = static_cast<double>(violations);
  return mode == ContainmentMode::Count ? count : count / static_cast<double>(cup.size());
}

/// Joint loss on N x 2 logits (column 0 disc, column 1 cup) against binary
/// targets of length N. Returns the differentiable total and the breakdown.
template <typename T>
std::pair<ag::Var<T>, LossBreakdown> joint_loss(const ag::Var<T>& logits, std::span<const std::uint8_t> disc_target,
                                                std::span<const std::uint8_t> cup_target, const LossWeights& w) {
  w.validate();
  const ag::Index n = logits.rows();
  if (logits.cols() != 2 || static_cast<ag::Index>(disc_target.size()) != n ||
      static_cast<ag::Index>(cup_target.size()) != n || n == 0) {
    throw InvalidArgument("joint_loss: logits must be N x 2 and match target length");
  }
  auto grad = std::make_shared<ag::Matrix<T>>(n, 2);
  LossBreakdown b;
  const double inv_n = 1.0 / static_cast<double>(n);
  double sd = 0.0;
  double sc = 0.0;
  double sk = 0.0;
  for (ag::Index i = 0; i < n; ++i) {
    const double pd = ag::sigmoid_scalar(static_cast<double>(logits.value()(i, 0)));
    const double pc = ag::sigmoid_scalar(static_cast<double>(logits.value()(i, 1)));
    const double x = disc_target[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    const double y = cup_target[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    const double pdc = std::clamp(pd, kProbEpsilon, 1.0 - kProbEpsilon);
    const double pcc = std::clamp(pc, kProbEpsilon, 1.0 - kProbEpsilon);
    sd += x * std::log(pdc) + (1.0 - x) * std::log(1.0 - pdc);
    sc += y * std::log(pcc) + (1.0 - y) * std::log(1.0 - pcc);
    sk += pc * (1.0 - pd);
    const bool disc_free = pd > kProbEpsilon && pd < 1.0 - kProbEpsilon;
    const bool cup_free = pc > kProbEpsilon && pc < 1.0 - kProbEpsilon;
    double gd = disc_free ? w.disc * (pd - x) : 0.0;
    double gc = cup_free ? w.cup * (pc - y) : 0.0;
    gd -= w.contain * pc * pd * (1.0 - pd);
    gc += w.contain * (1.0 - pd) * pc * (1.0 - pc);
    (*grad)(i, 0) = static_cast<T>(gd * inv_n);
    (*grad)(i, 1) = static_cast<T>(gc * inv_n);
  }
  b.l_disk = -sd * inv_n;
  b.l_cup = -sc * inv_n;
  b.l_contain = sk * inv_n;
  b.total = w.disc * b.l_disk + w.cup * b.l_cup + w.contain * b.l_contain;

  ag::Matrix<T> out(1, 1);
  out(0, 0) = static_cast<T>(b.total);
  auto ln = logits.node();
  auto total = ag::detail::record<T>(std::move(out), {logits}, [ln, grad](const ag::Matrix<T>& g) {
    ln->accumulate(*grad * g(0, 0));
  });
  return {total, b};
}

}  // namespace fundusam

#endif  // FUNDUSAM_LOSSES_HPP

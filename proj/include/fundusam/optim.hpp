#ifndef FUNDUSAM_OPTIM_HPP
#define FUNDUSAM_OPTIM_HPP

#include <cmath>
#include <cstdint>
#include <vector>

#include "fundusam/peft.hpp"

namespace fundusam {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over the trainable subset of a parameter store. Frozen parameters are
/// never registered, so they carry no optimizer state and are never written.
template <typename T>
class Adam {
 public:
  Adam(ParameterStore<T>& store, const ParameterPartition& partition, const AdamConfig& cfg)
      : store_(&store), cfg_(cfg) {
    if (partition.entries.size() != store.size()) throw InvalidArgument("Adam: partition does not match the model");
    for (std::size_t i = 0; i < store.size(); ++i) {
      if (!partition.entries[i].trainable) continue;
      const auto& p = store.all()[i];
      indices_.push_back(i);
      m_.push_back(ag::Matrix<T>::Zero(p.rows, p.cols));
      v_.push_back(ag::Matrix<T>::Zero(p.rows, p.cols));
    }
  }

  /// Applies one update using the gradients currently held by the parameters.
  void step() {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    const T b1 = static_cast<T>(cfg_.beta1);
    const T b2 = static_cast<T>(cfg_.beta2);
    const T step_size = static_cast<T>(cfg_.lr / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    const T eps = static_cast<T>(cfg_.eps);
    for (std::size_t k = 0; k < indices_.size(); ++k) {
      auto& p = store_->all()[indices_[k]];
      const auto& g = p.var.grad();
      if (g.size() == 0) continue;  // no gradient reached this parameter
      m_[k] = b1 * m_[k] + (T(1) - b1) * g;
      v_[k] = b2 * v_[k] + (T(1) - b2) * g.cwiseAbs2();
      auto& w = p.var.mutable_value();
      w.array() -= step_size * m_[k].array() / ((v_[k].array() * inv_bc2).sqrt() + eps);
    }
  }

  [[nodiscard]] std::uint64_t steps() const { return step_; }
  [[nodiscard]] const std::vector<std::size_t>& indices() const { return indices_; }
  [[nodiscard]] const std::vector<ag::Matrix<T>>& first_moments() const { return m_; }
  [[nodiscard]] const std::vector<ag::Matrix<T>>& second_moments() const { return v_; }
  [[nodiscard]] const AdamConfig& config() const { return cfg_; }

  void restore(std::uint64_t steps, std::vector<ag::Matrix<T>> m, std::vector<ag::Matrix<T>> v) {
    if (m.size() != m_.size() || v.size() != v_.size()) throw ConfigError("optimizer state does not match the model");
    for (std::size_t k = 0; k < m.size(); ++k) {
      if (m[k].rows() != m_[k].rows() || m[k].cols() != m_[k].cols() || v[k].rows() != v_[k].rows() ||
          v[k].cols() != v_[k].cols()) {
        throw ConfigError("optimizer state shape mismatch");
      }
    }
    step_ = steps;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  ParameterStore<T>* store_;
  AdamConfig cfg_;
  std::uint64_t step_ = 0;
  std::vector<std::size_t> indices_;
  std::vector<ag::Matrix<T>> m_;
  std::vector<ag::Matrix<T>> v_;
};

}  // namespace fundusam

#endif  // FUNDUSAM_OPTIM_HPP

#ifndef FUNDUSAM_CBAM_HPP
#define FUNDUSAM_CBAM_HPP

// Split convolutional block attention: a spatial gate (front of the encoder)
// and a channel gate (back of the encoder). Both follow the usual CBAM
// layout: spatial = sigmoid(conv_k([max_c; mean_c])), channel =
// sigmoid(MLP(avgpool) + MLP(maxpool)) with a shared two-layer MLP.

#include <string>

#include "fundusam/parameters.hpp"

namespace fundusam {

struct SpatialAttnConfig {
  int kernel = 7;

  void validate() const {
    if (kernel < 3 || kernel % 2 == 0) throw InvalidArgument("SpatialAttnConfig: kernel must be odd and >= 3");
  }
};

struct ChannelAttnConfig {
  int reduction_ratio = 16;

  void validate() const {
    if (reduction_ratio < 1) throw InvalidArgument("ChannelAttnConfig: reduction ratio must be >= 1");
  }
  [[nodiscard]] int hidden_dim(int channels) const { return std::max(1, channels / reduction_ratio); }
};

template <typename T>
class SpatialAttention {
 public:
  SpatialAttention() = default;
  SpatialAttention(ParameterStore<T>& store, const std::string& name, const SpatialAttnConfig& cfg)
      : kernel_(cfg.kernel) {
    cfg.validate();
    const auto k2 = static_cast<ag::Index>(cfg.kernel) * cfg.kernel;
    conv_w_ = store.add(name + ".conv.weight", ParamTag::Cbam, k2 * 2, 1, Init::Uniform, fan_in_bound(k2 * 2));
    conv_b_ = store.add(name + ".conv.bias", ParamTag::Cbam, 1, 1, Init::Zeros);
  }

  /// Per-position gate in (0,1), shape (h*w) x 1.
  ag::Var<T> gate(const ag::Var<T>& f, ag::Index height, ag::Index width) const {
    auto pooled = ag::concat_cols<T>({ag::row_max(f), ag::row_mean(f)});
    return ag::sigmoid(ag::conv2d(pooled, height, width, conv_w_, conv_b_, kernel_));
  }

  /// f .* gate; with `force_open` the gate is exactly 1.
  ag::Var<T> operator()(const ag::Var<T>& f, ag::Index height, ag::Index width, bool force_open = false) const {
    if (force_open) return ag::mul_col(f, ag::constant<T>(ag::Matrix<T>::Ones(f.rows(), 1)));
    return ag::mul_col(f, gate(f, height, width));
  }

  [[nodiscard]] int kernel() const { return kernel_; }
  [[nodiscard]] const ag::Var<T>& weight() const { return conv_w_; }
  [[nodiscard]] const ag::Var<T>& bias() const { return conv_b_; }

 private:
  int kernel_ = 7;
  ag::Var<T> conv_w_;
  ag::Var<T> conv_b_;
};

template <typename T>
class ChannelAttention {
 public:
  ChannelAttention() = default;
  ChannelAttention(ParameterStore<T>& store, const std::string& name, ag::Index channels,
                   const ChannelAttnConfig& cfg) {
    cfg.validate();
    const ag::Index hidden = cfg.hidden_dim(static_cast<int>(channels));
    fc1_ = Linear<T>(store, name + ".mlp.fc1", ParamTag::Cbam, channels, hidden);
    fc2_ = Linear<T>(store, name + ".mlp.fc2", ParamTag::Cbam, hidden, channels);
  }

  ag::Var<T> mlp(const ag::Var<T>& v) const { return fc2_(ag::relu(fc1_(v))); }

  /// Per-channel weights in (0,1), shape 1 x C.
  ag::Var<T> weights(const ag::Var<T>& f) const {
    return ag::sigmoid(ag::add(mlp(ag::col_mean(f)), mlp(ag::col_max(f))));
  }

  ag::Var<T> operator()(const ag::Var<T>& f, bool force_open = false) const {
    if (force_open) return ag::mul_row(f, ag::constant<T>(ag::Matrix<T>::Ones(1, f.cols())));
    return ag::mul_row(f, weights(f));
  }

  [[nodiscard]] const Linear<T>& fc1() const { return fc1_; }
  [[nodiscard]] const Linear<T>& fc2() const { return fc2_; }

 private:
  Linear<T> fc1_;
  Linear<T> fc2_;
};

}  // namespace fundusam

#endif  // FUNDUSAM_CBAM_HPP

#ifndef FUNDUSAM_PARAMETERS_HPP
#define FUNDUSAM_PARAMETERS_HPP

#include <array>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "fundusam/autograd.hpp"

namespace fundusam {

/// Ownership tag used by the PEFT partition. Every parameter carries exactly one.
enum class ParamTag : std::uint8_t { BaseEncoder = 0, Adapter = 1, Cbam = 2, PromptEncoder = 3, MaskDecoder = 4 };

inline constexpr std::array<ParamTag, 5> kAllTags = {ParamTag::BaseEncoder, ParamTag::Adapter, ParamTag::Cbam,
                                                     ParamTag::PromptEncoder, ParamTag::MaskDecoder};

inline std::string_view tag_name(ParamTag t) {
  switch (t) {
    case ParamTag::BaseEncoder: return "base_encoder";
    case ParamTag::Adapter: return "adapter";
    case ParamTag::Cbam: return "cbam";
    case ParamTag::PromptEncoder: return "prompt_encoder";
    case ParamTag::MaskDecoder: return "mask_decoder";
  }
  return "unknown";
}

inline ParamTag parse_tag(std::string_view s) {
  for (auto t : kAllTags) {
    if (tag_name(t) == s) return t;
  }
  throw InvalidArgument("unknown parameter tag: " + std::string(s));
}

enum class Init { Zeros, Ones, Normal, Uniform };

/// A named, tagged, learnable matrix. In shape-only mode the value is left
/// unallocated so large configurations can be censused cheaply.
template <typename T>
struct Parameter {
  std::string name;
  ParamTag tag = ParamTag::BaseEncoder;
  ag::Index rows = 0;
  ag::Index cols = 0;
  ag::Var<T> var;

  [[nodiscard]] std::size_t numel() const { return static_cast<std::size_t>(rows * cols); }
  [[nodiscard]] bool materialized() const { return var.defined(); }
};

/// Ordered parameter registry. Registration order is the canonical order for
/// checkpoints and optimizer state.
template <typename T>
class ParameterStore {
 public:
  ParameterStore(std::uint64_t seed, bool shape_only) : rng_(seed), shape_only_(shape_only) {}

  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  ag::Var<T> add(const std::string& name, ParamTag tag, ag::Index rows, ag::Index cols, Init init, double scale = 0.0) {
    if (index_.count(name)) throw InvalidState("duplicate parameter name: " + name);
    Parameter<T> p{name, tag, rows, cols, {}};
    if (!shape_only_) {
      ag::Matrix<T> v(rows, cols);
      switch (init) {
        case Init::Zeros: v.setZero(); break;
        case Init::Ones: v.setOnes(); break;
        case Init::Normal: {
          std::normal_distribution<double> dist(0.0, scale);
          for (ag::Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<T>(dist(rng_));
          break;
        }
        case Init::Uniform: {
          std::uniform_real_distribution<double> dist(-scale, scale);
          for (ag::Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<T>(dist(rng_));
          break;
        }
      }
      p.var = ag::Var<T>(std::move(v), true);
    }
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return params_.back().var;
  }

  [[nodiscard]] bool shape_only() const { return shape_only_; }
  [[nodiscard]] const std::vector<Parameter<T>>& all() const { return params_; }
  std::vector<Parameter<T>>& all() { return params_; }
  [[nodiscard]] std::size_t size() const { return params_.size(); }

  [[nodiscard]] const Parameter<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("no such parameter: " + name);
    return params_[it->second];
  }
  [[nodiscard]] bool contains(const std::string& name) const { return index_.count(name) != 0; }

  [[nodiscard]] std::size_t total_numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) {
      if (p.materialized()) p.var.zero_grad();
    }
  }

 private:
  std::mt19937_64 rng_;
  bool shape_only_;
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Fan-in scaled initialisation (uniform, +-1/sqrt(fan_in)).
inline double fan_in_bound(ag::Index fan_in) { return 1.0 / std::sqrt(static_cast<double>(std::max<ag::Index>(1, fan_in))); }

/// Dense layer: y = x W + b.
template <typename T>
struct Linear {
  ag::Var<T> weight;
  ag::Var<T> bias;

  Linear() = default;
  Linear(ParameterStore<T>& store, const std::string& name, ParamTag tag, ag::Index in, ag::Index out,
         bool with_bias = true, Init weight_init = Init::Uniform) {
    weight = store.add(name + ".weight", tag, in, out, weight_init, fan_in_bound(in));
    if (with_bias) bias = store.add(name + ".bias", tag, 1, out, Init::Zeros);
  }

  ag::Var<T> operator()(const ag::Var<T>& x) const { return ag::linear(x, weight, bias); }
};

template <typename T>
struct LayerNorm {
  ag::Var<T> gamma;
  ag::Var<T> beta;

  LayerNorm() = default;
  LayerNorm(ParameterStore<T>& store, const std::string& name, ParamTag tag, ag::Index dim) {
    gamma = store.add(name + ".gamma", tag, 1, dim, Init::Ones);
    beta = store.add(name + ".beta", tag, 1, dim, Init::Zeros);
  }

  ag::Var<T> operator()(const ag::Var<T>& x) const { return ag::layer_norm(x, gamma, beta); }
};

}  // namespace fundusam

#endif  // FUNDUSAM_PARAMETERS_HPP

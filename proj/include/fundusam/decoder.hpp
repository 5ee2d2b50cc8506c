#ifndef FUNDUSAM_DECODER_HPP
#define FUNDUSAM_DECODER_HPP

// Point prompt encoder and a two-way-attention mask decoder with two output
// tokens (channel 0 = disc, channel 1 = cup).

#include <random>
#include <string>
#include <vector>

#include "fundusam/encoder.hpp"
#include "fundusam/parameters.hpp"
#include "fundusam/raster.hpp"

namespace fundusam {

enum class PromptLabel : int { Background = 0, Foreground = 1 };

/// A click in polar-image pixel coordinates (px = column, py = row).
struct PointPrompt {
  int px = 0;
  int py = 0;
  PromptLabel label = PromptLabel::Foreground;

  friend bool operator==(const PointPrompt&, const PointPrompt&) = default;
};

/// Uniformly random foreground pixel of `disc`; deterministic for a given rng state.
template <typename Domain, typename Rng>
PointPrompt sample_point_prompt(const BasicMask<Domain>& disc, Rng& rng) {
  std::vector<std::size_t> fg;
  const auto bits = disc.bits();
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i]) fg.push_back(i);
  }
  if (fg.empty()) throw EmptyMaskError("sample_point_prompt: disc mask is empty");
  std::uniform_int_distribution<std::size_t> pick(0, fg.size() - 1);
  const std::size_t idx = fg[pick(rng)];
  return {static_cast<int>(idx % static_cast<std::size_t>(disc.width())),
          static_cast<int>(idx / static_cast<std::size_t>(disc.width())), PromptLabel::Foreground};
}

/// Random Fourier positional features plus a learned per-label embedding.
template <typename T>
class PromptEncoder {
 public:
  PromptEncoder() = default;
  PromptEncoder(ParameterStore<T>& store, int dim) : dim_(dim) {
    if (dim < 2 || dim % 2 != 0) throw InvalidArgument("PromptEncoder: decoder dim must be even");
    gaussian_ = store.add("prompt.pe_gaussian", ParamTag::PromptEncoder, 2, dim / 2, Init::Normal, 1.0);
    label_embed_ = store.add("prompt.label_embed", ParamTag::PromptEncoder, 2, dim, Init::Normal, 1.0);
    no_mask_embed_ = store.add("prompt.no_mask_embed", ParamTag::PromptEncoder, 1, dim, Init::Normal, 1.0);
  }

  /// Features of normalised coordinates in [0,1]^2, one row per point.
  ag::Var<T> positional(const ag::Matrix<T>& unit_coords) const {
    ag::Matrix<T> c = (unit_coords.array() * T(2) - T(1)).matrix();
    auto proj = ag::scale(ag::matmul(ag::constant<T>(std::move(c)), gaussian_), static_cast<T>(2.0 * std::numbers::pi));
    return ag::concat_cols<T>({ag::sin(proj), ag::cos(proj)});
  }

  /// 1 x dim embedding for a point inside an image of the given size.
  ag::Var<T> encode(const PointPrompt& p, int image_h, int image_w) const {
    if (p.px < 0 || p.py < 0 || p.px >= image_w || p.py >= image_h) {
      throw InvalidArgument("encode_prompt: point outside the image");
    }
    ag::Matrix<T> c(1, 2);
    c(0, 0) = static_cast<T>((p.px + 0.5) / image_w);
    c(0, 1) = static_cast<T>((p.py + 0.5) / image_h);
    const auto label_row = static_cast<ag::Index>(p.label);
    return ag::add(positional(c), ag::slice_rows(label_embed_, label_row, 1));
  }

  /// (h*w) x dim dense positional encoding of a token grid.
  ag::Var<T> dense_pe(int h, int w) const {
    ag::Matrix<T> c(static_cast<ag::Index>(h) * w, 2);
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        c(i * w + j, 0) = static_cast<T>((j + 0.5) / w);
        c(i * w + j, 1) = static_cast<T>((i + 0.5) / h);
      }
    }
    return positional(c);
  }

  [[nodiscard]] const ag::Var<T>& no_mask_embed() const { return no_mask_embed_; }
  [[nodiscard]] const ag::Var<T>& label_embed() const { return label_embed_; }
  [[nodiscard]] int dim() const { return dim_; }

 private:
  int dim_ = 0;
  ag::Var<T> gaussian_;
  ag::Var<T> label_embed_;
  ag::Var<T> no_mask_embed_;
};

/// Multi-head attention with separate q/k/v inputs and an optional internal
/// width reduction (downsample rate).
template <typename T>
class CrossAttention {
 public:
  CrossAttention() = default;
  CrossAttention(ParameterStore<T>& store, const std::string& name, int dim, int heads, int downsample)
      : heads_(heads) {
    const int inner = dim / downsample;
    if (inner % heads != 0) throw InvalidArgument("CrossAttention: inner width not divisible by heads");
    q_ = Linear<T>(store, name + ".q_proj", ParamTag::MaskDecoder, dim, inner);
    k_ = Linear<T>(store, name + ".k_proj", ParamTag::MaskDecoder, dim, inner);
    v_ = Linear<T>(store, name + ".v_proj", ParamTag::MaskDecoder, dim, inner);
    out_ = Linear<T>(store, name + ".out_proj", ParamTag::MaskDecoder, inner, dim);
  }

  ag::Var<T> operator()(const ag::Var<T>& q, const ag::Var<T>& k, const ag::Var<T>& v) const {
    return out_(ag::attention(q_(q), k_(k), v_(v), heads_, q.rows(), k.rows()));
  }

  [[nodiscard]] const Linear<T>& q_proj() const { return q_; }

 private:
  int heads_ = 1;
  Linear<T> q_;
  Linear<T> k_;
  Linear<T> v_;
  Linear<T> out_;
};

struct DecoderConfig {
  int dim = 128;
  int heads = 8;
  int mlp_dim = 512;
  int depth = 2;
  int num_outputs = 2;

  void validate() const {
    if (dim < 8 || dim % 8 != 0) throw InvalidArgument("DecoderConfig: dim must be a positive multiple of 8");
    if (heads < 1 || (dim / 2) % heads != 0) throw InvalidArgument("DecoderConfig: dim/2 must be divisible by heads");
    if (mlp_dim < 1 || depth < 1 || num_outputs < 1) throw InvalidArgument("DecoderConfig: sizes must be positive");
  }
};

template <typename T>
class MaskDecoder {
 public:
  MaskDecoder() = default;
  MaskDecoder(ParameterStore<T>& store, const DecoderConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const int d = cfg.dim;
    const auto tag = ParamTag::MaskDecoder;
    output_tokens_ = store.add("decoder.output_tokens", tag, cfg.num_outputs, d, Init::Normal, 1.0);
    for (int i = 0; i < cfg.depth; ++i) {
      const std::string n = "decoder.layers." + std::to_string(i);
      Layer l;
      l.self_attn = CrossAttention<T>(store, n + ".self_attn", d, cfg.heads, 1);
      l.norm1 = LayerNorm<T>(store, n + ".norm1", tag, d);
      l.cross_t2i = CrossAttention<T>(store, n + ".cross_token_to_image", d, cfg.heads, 2);
      l.norm2 = LayerNorm<T>(store, n + ".norm2", tag, d);
      l.mlp1 = Linear<T>(store, n + ".mlp.fc1", tag, d, cfg.mlp_dim);
      l.mlp2 = Linear<T>(store, n + ".mlp.fc2", tag, cfg.mlp_dim, d);
      l.norm3 = LayerNorm<T>(store, n + ".norm3", tag, d);
      l.cross_i2t = CrossAttention<T>(store, n + ".cross_image_to_token", d, cfg.heads, 2);
      l.norm4 = LayerNorm<T>(store, n + ".norm4", tag, d);
      layers_.push_back(std::move(l));
    }
    final_attn_ = CrossAttention<T>(store, "decoder.final_attn", d, cfg.heads, 2);
    final_norm_ = LayerNorm<T>(store, "decoder.final_norm", tag, d);
    up1_ = Linear<T>(store, "decoder.upscale1", tag, d, d);  // 2x2 stride-2 transposed conv, d -> d/4
    up_norm_ = LayerNorm<T>(store, "decoder.upscale_norm", tag, d / 4);
    up2_ = Linear<T>(store, "decoder.upscale2", tag, d / 4, d / 2);  // d/4 -> d/8
    for (int m = 0; m < cfg.num_outputs; ++m) {
      const std::string n = "decoder.hypernet." + std::to_string(m);
      Hyper h;
      h.l1 = Linear<T>(store, n + ".l1", tag, d, d);
      h.l2 = Linear<T>(store, n + ".l2", tag, d, d);
      h.l3 = Linear<T>(store, n + ".l3", tag, d, d / 8);
      hyper_.push_back(std::move(h));
    }
  }

  [[nodiscard]] const DecoderConfig& config() const { return cfg_; }
  [[nodiscard]] const Linear<T>& upscale1() const { return up1_; }

  /// Returns (out_h*out_w) x num_outputs logits.
  ag::Var<T> operator()(const TokenGrid<T>& image, const ag::Var<T>& prompt, const ag::Var<T>& image_pe,
                        const ag::Var<T>& no_mask, int out_h, int out_w) const {
    if (image.dim() != cfg_.dim || prompt.cols() != cfg_.dim) throw InvalidArgument("decode_masks: width mismatch");
    auto tokens = ag::concat_rows<T>({output_tokens_, prompt});
    auto queries = tokens;
    auto keys = ag::add_row(image.tokens, no_mask);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const Layer& l = layers_[i];
      if (i == 0) {
        queries = l.norm1(l.self_attn(queries, queries, queries));
      } else {
        auto q = ag::add(queries, tokens);
        queries = l.norm1(ag::add(queries, l.self_attn(q, q, queries)));
      }
      auto q = ag::add(queries, tokens);
      auto k = ag::add(keys, image_pe);
      queries = l.norm2(ag::add(queries, l.cross_t2i(q, k, keys)));
      queries = l.norm3(ag::add(queries, l.mlp2(ag::relu(l.mlp1(queries)))));
      q = ag::add(queries, tokens);
      keys = l.norm4(ag::add(keys, l.cross_i2t(k, q, queries)));
    }
    {
      auto q = ag::add(queries, tokens);
      auto k = ag::add(keys, image_pe);
      queries = final_norm_(ag::add(queries, final_attn_(q, k, keys)));
    }

    const int h = image.height;
    const int w = image.width;
    auto up = ag::depth_to_space2(up1_(keys), h, w);
    up = ag::gelu(up_norm_(up));
    up = ag::gelu(ag::depth_to_space2(up2_(up), 2 * h, 2 * w));

    std::vector<ag::Var<T>> hyper_rows;
    for (int m = 0; m < cfg_.num_outputs; ++m) {
      const Hyper& hn = hyper_[static_cast<std::size_t>(m)];
      auto t = ag::slice_rows(queries, m, 1);
      hyper_rows.push_back(hn.l3(ag::relu(hn.l2(ag::relu(hn.l1(t))))));
    }
    auto logits = ag::matmul_nt(up, ag::concat_rows(hyper_rows));
    return ag::resize_bilinear(logits, 4 * h, 4 * w, out_h, out_w);
  }

 private:
  struct Layer {
    CrossAttention<T> self_attn;
    LayerNorm<T> norm1;
    CrossAttention<T> cross_t2i;
    LayerNorm<T> norm2;
    Linear<T> mlp1;
    Linear<T> mlp2;
    LayerNorm<T> norm3;
    CrossAttention<T> cross_i2t;
    LayerNorm<T> norm4;
  };
  struct Hyper {
    Linear<T> l1;
    Linear<T> l2;
    Linear<T> l3;
  };

  DecoderConfig cfg_;
  ag::Var<T> output_tokens_;
  std::vector<Layer> layers_;
  CrossAttention<T> final_attn_;
  LayerNorm<T> final_norm_;
  Linear<T> up1_;
  LayerNorm<T> up_norm_;
  Linear<T> up2_;
  std::vector<Hyper> hyper_;
};

}  // namespace fundusam

#endif  // FUNDUSAM_DECODER_HPP

#ifndef FUNDUSAM_ENCODER_HPP
#define FUNDUSAM_ENCODER_HPP

// ViT image encoder: patch embedding, a stack of pre-norm transformer blocks
// (windowed or global attention), two bottleneck adapters per block, and a
// neck projecting to the decoder width. The split CBAM hooks sit before the
// first block and after the last one.

#include <algorithm>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fundusam/cbam.hpp"
#include "fundusam/parameters.hpp"
#include "fundusam/raster.hpp"

namespace fundusam {

enum class Activation { Gelu, Relu, Identity };

inline std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::Gelu: return "gelu";
    case Activation::Relu: return "relu";
    case Activation::Identity: return "identity";
  }
  return "gelu";
}

inline Activation parse_activation(std::string_view s) {
  if (s == "gelu") return Activation::Gelu;
  if (s == "relu") return Activation::Relu;
  if (s == "identity" || s == "linear") return Activation::Identity;
  throw InvalidArgument("unknown activation: " + std::string(s));
}

template <typename T>
ag::Var<T> activate(const ag::Var<T>& x, Activation a) {
  switch (a) {
    case Activation::Gelu: return ag::gelu(x);
    case Activation::Relu: return ag::relu(x);
    case Activation::Identity: return x;
  }
  return x;
}

struct EncoderConfig {
  int image_size = 256;
  int patch_size = 16;
  int in_channels = 3;
  int embed_dim = 192;
  int depth = 16;
  int num_heads = 6;
  int window_size = 8;
  std::set<int> global_blocks = {3, 7, 11, 15};
  double mlp_ratio = 4.0;
  int neck_dim = 128;

  [[nodiscard]] int grid_side() const { return image_size / patch_size; }
  [[nodiscard]] int mlp_dim() const { return static_cast<int>(embed_dim * mlp_ratio); }

  void validate() const {
    if (image_size < 1 || patch_size < 1 || image_size % patch_size != 0) {
      throw InvalidArgument("EncoderConfig: image_size must be divisible by patch_size");
    }
    if (embed_dim < 1 || num_heads < 1 || embed_dim % num_heads != 0) {
      throw InvalidArgument("EncoderConfig: embed_dim must be divisible by num_heads");
    }
    if (depth < 1 || window_size < 1 || in_channels < 1 || neck_dim < 1 || mlp_ratio <= 0.0) {
      throw InvalidArgument("EncoderConfig: depth, window size, channels and widths must be positive");
    }
    for (int b : global_blocks) {
      if (b < 0 || b >= depth) throw InvalidArgument("EncoderConfig: global block index out of range");
    }
  }
};

enum class UpInit { Zero, SmallRandom };

struct AdapterConfig {
  int bottleneck_dim = 0;  // 0 -> use bottleneck_ratio
  double bottleneck_ratio = 0.25;
  Activation activation = Activation::Gelu;
  double residual_scale = 1.0;
  UpInit up_init = UpInit::Zero;

  [[nodiscard]] int resolved_dim(int embed_dim) const {
    if (bottleneck_dim > 0) return bottleneck_dim;
    return std::max(1, static_cast<int>(std::lround(bottleneck_ratio * embed_dim)));
  }

  void validate() const {
    if (bottleneck_dim < 0 || (bottleneck_dim == 0 && !(bottleneck_ratio > 0.0))) {
      throw InvalidArgument("AdapterConfig: bottleneck must be at least 1");
    }
    if (!std::isfinite(residual_scale)) throw InvalidArgument("AdapterConfig: residual scale must be finite");
  }
};

/// Token grid: rows are tokens in row-major (h, w) order, columns are channels.
template <typename T>
struct TokenGrid {
  int height = 0;
  int width = 0;
  ag::Var<T> tokens;

  [[nodiscard]] ag::Index dim() const { return tokens.cols(); }
};

// ---------------------------------------------------------------------------

/// x + s * Up(act(Down(x)))
template <typename T>
class Adapter {
 public:
  Adapter() = default;
  Adapter(ParameterStore<T>& store, const std::string& name, int embed_dim, const AdapterConfig& cfg)
      : activation_(cfg.activation), scale_(static_cast<T>(cfg.residual_scale)) {
    cfg.validate();
    const int b = cfg.resolved_dim(embed_dim);
    down_ = Linear<T>(store, name + ".down", ParamTag::Adapter, embed_dim, b);
    if (cfg.up_init == UpInit::Zero) {
      up_.weight = store.add(name + ".up.weight", ParamTag::Adapter, b, embed_dim, Init::Zeros);
    } else {
      up_.weight = store.add(name + ".up.weight", ParamTag::Adapter, b, embed_dim, Init::Normal, 1e-2);
    }
    up_.bias = store.add(name + ".up.bias", ParamTag::Adapter, 1, embed_dim, Init::Zeros);
  }

  ag::Var<T> operator()(const ag::Var<T>& x) const {
    return ag::add(x, ag::scale(up_(activate(down_(x), activation_)), scale_));
  }

  [[nodiscard]] const Linear<T>& down() const { return down_; }
  [[nodiscard]] const Linear<T>& up() const { return up_; }

 private:
  Activation activation_ = Activation::Gelu;
  T scale_ = T(1);
  Linear<T> down_;
  Linear<T> up_;
};

/// Gather indices for splitting an h x w grid into ws x ws windows. The grid is
/// padded symmetrically (extra row/col at the bottom/right when odd) to a
/// multiple of ws. Padded slots gather zeros and are masked as keys.
struct WindowPartition {
  int height = 0;
  int width = 0;
  int window = 0;
  int pad_top = 0;
  int pad_left = 0;
  int padded_height = 0;
  int padded_width = 0;
  std::shared_ptr<const std::vector<ag::Index>> to_windows;
  std::shared_ptr<const std::vector<ag::Index>> from_windows;
  std::shared_ptr<const std::vector<std::uint8_t>> valid;

  [[nodiscard]] ag::Index tokens_per_window() const { return static_cast<ag::Index>(window) * window; }
  [[nodiscard]] ag::Index num_windows() const {
    return static_cast<ag::Index>(padded_height / window) * (padded_width / window);
  }

  static WindowPartition make(int height, int width, int window) {
    detail::require(height >= 1 && width >= 1 && window >= 1, "WindowPartition: sizes must be positive");
    WindowPartition p;
    p.height = height;
    p.width = width;
    p.window = window;
    const int pad_h = (window - height % window) % window;
    const int pad_w = (window - width % window) % window;
    p.pad_top = pad_h / 2;
    p.pad_left = pad_w / 2;
    p.padded_height = height + pad_h;
    p.padded_width = width + pad_w;
    const int wh = p.padded_height / window;
    const int ww = p.padded_width / window;
    std::vector<ag::Index> to(static_cast<std::size_t>(wh) * ww * window * window);
    std::vector<ag::Index> from(static_cast<std::size_t>(height) * width);
    std::vector<std::uint8_t> valid(to.size());
    std::size_t slot = 0;
    for (int a = 0; a < wh; ++a) {
      for (int b = 0; b < ww; ++b) {
        for (int u = 0; u < window; ++u) {
          for (int v = 0; v < window; ++v, ++slot) {
            const int i = a * window + u - p.pad_top;
            const int j = b * window + v - p.pad_left;
            if (i >= 0 && i < height && j >= 0 && j < width) {
              const auto src = static_cast<ag::Index>(i) * width + j;
              to[slot] = src;
              valid[slot] = 1;
              from[static_cast<std::size_t>(src)] = static_cast<ag::Index>(slot);
            } else {
              to[slot] = -1;
              valid[slot] = 0;
            }
          }
        }
      }
    }
    p.to_windows = std::make_shared<const std::vector<ag::Index>>(std::move(to));
    p.from_windows = std::make_shared<const std::vector<ag::Index>>(std::move(from));
    p.valid = std::make_shared<const std::vector<std::uint8_t>>(std::move(valid));
    return p;
  }

  template <typename T>
  ag::Var<T> partition(const ag::Var<T>& x) const {
    return ag::gather_rows(x, to_windows);
  }
  template <typename T>
  ag::Var<T> reverse(const ag::Var<T>& xw) const {
    return ag::gather_rows(xw, from_windows);
  }
};

template <typename T>
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(ParameterStore<T>& store, const std::string& name, const EncoderConfig& cfg, bool global,
                   const std::optional<AdapterConfig>& adapter_cfg)
      : dim_(cfg.embed_dim), heads_(cfg.num_heads), window_(cfg.window_size), global_(global) {
    norm1_ = LayerNorm<T>(store, name + ".norm1", ParamTag::BaseEncoder, dim_);
    qkv_ = Linear<T>(store, name + ".attn.qkv", ParamTag::BaseEncoder, dim_, 3 * dim_);
    proj_ = Linear<T>(store, name + ".attn.proj", ParamTag::BaseEncoder, dim_, dim_);
    norm2_ = LayerNorm<T>(store, name + ".norm2", ParamTag::BaseEncoder, dim_);
    fc1_ = Linear<T>(store, name + ".mlp.fc1", ParamTag::BaseEncoder, dim_, cfg.mlp_dim());
    fc2_ = Linear<T>(store, name + ".mlp.fc2", ParamTag::BaseEncoder, cfg.mlp_dim(), dim_);
    if (adapter_cfg) {
      adapter_attn_ = Adapter<T>(store, name + ".adapter_attn", dim_, *adapter_cfg);
      adapter_mlp_ = Adapter<T>(store, name + ".adapter_mlp", dim_, *adapter_cfg);
      has_adapters_ = true;
    }
  }

  [[nodiscard]] bool is_global() const { return global_; }
  [[nodiscard]] bool has_adapters() const { return has_adapters_; }
  [[nodiscard]] const Adapter<T>& adapter_attn() const { return adapter_attn_; }
  [[nodiscard]] const Adapter<T>& adapter_mlp() const { return adapter_mlp_; }

  /// Attention sub-layer on already-normalised tokens.
  ag::Var<T> attend(const ag::Var<T>& xn, int height, int width, bool force_global = false) const {
    const ag::Index n = xn.rows();
    if (global_ || force_global) {
      auto qkv = qkv_(xn);
      auto q = ag::slice_cols(qkv, 0, dim_);
      auto k = ag::slice_cols(qkv, dim_, dim_);
      auto v = ag::slice_cols(qkv, 2 * dim_, dim_);
      return proj_(ag::attention(q, k, v, heads_, n, n));
    }
    const auto part = WindowPartition::make(height, width, window_);
    auto xw = part.partition(xn);
    auto qkv = qkv_(xw);
    auto q = ag::slice_cols(qkv, 0, dim_);
    auto k = ag::slice_cols(qkv, dim_, dim_);
    auto v = ag::slice_cols(qkv, 2 * dim_, dim_);
    auto o = ag::attention(q, k, v, heads_, part.tokens_per_window(), part.tokens_per_window(), part.valid);
    return proj_(part.reverse(o));
  }

  /// y1 = x + Attn(LN(x)); y2 = A1(y1); y3 = y2 + MLP(LN(y2)); out = A2(y3)
  TokenGrid<T> operator()(const TokenGrid<T>& in, bool use_adapters = true, bool force_global = false) const {
    auto x = in.tokens;
    auto y = ag::add(x, attend(norm1_(x), in.height, in.width, force_global));
    if (has_adapters_ && use_adapters) y = adapter_attn_(y);
    y = ag::add(y, fc2_(ag::gelu(fc1_(norm2_(y)))));
    if (has_adapters_ && use_adapters) y = adapter_mlp_(y);
    return {in.height, in.width, y};
  }

 private:
  ag::Index dim_ = 0;
  int heads_ = 1;
  int window_ = 1;
  bool global_ = false;
  bool has_adapters_ = false;
  LayerNorm<T> norm1_;
  Linear<T> qkv_;
  Linear<T> proj_;
  LayerNorm<T> norm2_;
  Linear<T> fc1_;
  Linear<T> fc2_;
  Adapter<T> adapter_attn_;
  Adapter<T> adapter_mlp_;
};

/// Rearranges a channels-last square image into non-overlapping patch rows:
/// row (pi*g + pj), column (py*p + px)*C + c.
template <typename Domain, typename T>
ag::Matrix<T> image_to_patches(const Raster<Domain>& img, int patch) {
  const int g_h = img.height() / patch;
  const int g_w = img.width() / patch;
  const int c = img.channels();
  ag::Matrix<T> out(static_cast<ag::Index>(g_h) * g_w, static_cast<ag::Index>(patch) * patch * c);
  for (int pi = 0; pi < g_h; ++pi) {
    for (int pj = 0; pj < g_w; ++pj) {
      const auto row = static_cast<ag::Index>(pi) * g_w + pj;
      for (int py = 0; py < patch; ++py) {
        for (int px = 0; px < patch; ++px) {
          for (int ch = 0; ch < c; ++ch) {
            out(row, (py * patch + px) * c + ch) = static_cast<T>(img.at(pi * patch + py, pj * patch + px, ch));
          }
        }
      }
    }
  }
  return out;
}

/// Channels-last raster to an (H*W) x C matrix.
template <typename Domain, typename T>
ag::Matrix<T> raster_to_matrix(const Raster<Domain>& img) {
  ag::Matrix<T> out(static_cast<ag::Index>(img.height()) * img.width(), img.channels());
  for (std::size_t i = 0; i < img.size(); ++i) out.data()[i] = static_cast<T>(img.values()[i]);
  return out;
}

struct CbamConfig {
  SpatialAttnConfig spatial;
  ChannelAttnConfig channel;
  bool spatial_on_pixels = false;  // apply the spatial gate to the raw image instead of tokens
  bool force_open_gates = false;   // test mode: both gates fixed at 1
};

/// Per-call switches for encode(); defaults run everything that is installed.
struct EncodeOptions {
  bool use_adapters = true;
  bool use_cbam = true;
};

template <typename T>
class ImageEncoder {
 public:
  ImageEncoder(ParameterStore<T>& store, const EncoderConfig& cfg, const std::optional<AdapterConfig>& adapter_cfg)
      : cfg_(cfg), store_(&store) {
    cfg.validate();
    const int d = cfg.embed_dim;
    const int p = cfg.patch_size;
    const auto patch_in = static_cast<ag::Index>(p) * p * cfg.in_channels;
    const int g = cfg.grid_side();
    patch_w_ = store.add("encoder.patch_embed.weight", ParamTag::BaseEncoder, patch_in, d, Init::Uniform,
                         fan_in_bound(patch_in));
    patch_b_ = store.add("encoder.patch_embed.bias", ParamTag::BaseEncoder, 1, d, Init::Zeros);
    pos_embed_ = store.add("encoder.pos_embed", ParamTag::BaseEncoder, static_cast<ag::Index>(g) * g, d, Init::Normal,
                           0.02);
    blocks_.reserve(static_cast<std::size_t>(cfg.depth));
    for (int i = 0; i < cfg.depth; ++i) {
      blocks_.emplace_back(store, "encoder.blocks." + std::to_string(i), cfg, cfg.global_blocks.count(i) != 0,
                           adapter_cfg);
    }
    neck_proj_ = Linear<T>(store, "encoder.neck.proj", ParamTag::BaseEncoder, d, cfg.neck_dim, false);
    neck_norm1_ = LayerNorm<T>(store, "encoder.neck.norm1", ParamTag::BaseEncoder, cfg.neck_dim);
    const auto conv_in = static_cast<ag::Index>(9) * cfg.neck_dim;
    neck_conv_ = store.add("encoder.neck.conv.weight", ParamTag::BaseEncoder, conv_in, cfg.neck_dim, Init::Uniform,
                           fan_in_bound(conv_in));
    neck_norm2_ = LayerNorm<T>(store, "encoder.neck.norm2", ParamTag::BaseEncoder, cfg.neck_dim);
  }

  /// Adds the front spatial gate and the back channel gate.
  void install_hooks(const CbamConfig& cbam) {
    if (hooks_installed_) throw InvalidState("install_hooks: CBAM hooks already installed");
    cbam_ = cbam;
    spatial_ = SpatialAttention<T>(*store_, "cbam.spatial", cbam.spatial);
    channel_ = ChannelAttention<T>(*store_, "cbam.channel", cfg_.embed_dim, cbam.channel);
    hooks_installed_ = true;
  }

  [[nodiscard]] bool hooks_installed() const { return hooks_installed_; }
  [[nodiscard]] const EncoderConfig& config() const { return cfg_; }
  [[nodiscard]] const std::vector<TransformerBlock<T>>& blocks() const { return blocks_; }
  [[nodiscard]] const SpatialAttention<T>& spatial_attention() const { return spatial_; }
  [[nodiscard]] const ChannelAttention<T>& channel_attention() const { return channel_; }
  CbamConfig& cbam_config() { return cbam_; }

  TokenGrid<T> patch_embed(const PolarRaster& img) const {
    if (img.height() != cfg_.image_size || img.width() != cfg_.image_size || img.channels() != cfg_.in_channels) {
      throw InvalidArgument("patch_embed: input must be image_size x image_size with in_channels channels");
    }
    return embed_patches(ag::constant<T>(image_to_patches<PolarDomain, T>(img, cfg_.patch_size)));
  }

  TokenGrid<T> embed_patches(const ag::Var<T>& patches) const {
    const int g = cfg_.grid_side();
    auto tokens = ag::add(ag::linear(patches, patch_w_, patch_b_), pos_embed_);
    return {g, g, tokens};
  }

  /// Token grid after blocks and back hook, before the neck.
  TokenGrid<T> trunk(const PolarRaster& img, const EncodeOptions& opt = {}) const {
    const bool cbam_on = hooks_installed_ && opt.use_cbam;
    TokenGrid<T> x;
    if (cbam_on && cbam_.spatial_on_pixels) {
      if (img.height() != cfg_.image_size || img.width() != cfg_.image_size || img.channels() != cfg_.in_channels) {
        throw InvalidArgument("encode: input must be image_size x image_size with in_channels channels");
      }
      auto pix = ag::constant<T>(raster_to_matrix<PolarDomain, T>(img));
      auto gated = spatial_(pix, img.height(), img.width(), cbam_.force_open_gates);
      x = embed_patches(pixels_to_patches(gated, img.height(), img.width()));
    } else {
      x = patch_embed(img);
      if (cbam_on) x.tokens = spatial_(x.tokens, x.height, x.width, cbam_.force_open_gates);
    }
    for (const auto& blk : blocks_) x = blk(x, opt.use_adapters);
    if (cbam_on) x.tokens = channel_(x.tokens, cbam_.force_open_gates);
    return x;
  }

  TokenGrid<T> neck(const TokenGrid<T>& x) const {
    auto y = neck_norm1_(neck_proj_(x.tokens));
    y = neck_norm2_(ag::conv2d(y, x.height, x.width, neck_conv_, ag::Var<T>(), 3));
    return {x.height, x.width, y};
  }

  TokenGrid<T> encode(const PolarRaster& img, const EncodeOptions& opt = {}) const { return neck(trunk(img, opt)); }

 private:
  /// Differentiable pixel -> patch rearrangement (used when the spatial gate
  /// runs on raw pixels).
  ag::Var<T> pixels_to_patches(const ag::Var<T>& pix, int height, int width) const {
    const int p = cfg_.patch_size;
    const int gw = width / p;
    const int gh = height / p;
    // Gather pixel rows into patch order, then view as (tokens) x (p*p*c).
    auto index = std::make_shared<std::vector<ag::Index>>(static_cast<std::size_t>(height) * width);
    std::size_t k = 0;
    for (int pi = 0; pi < gh; ++pi) {
      for (int pj = 0; pj < gw; ++pj) {
        for (int py = 0; py < p; ++py) {
          for (int px = 0; px < p; ++px) {
            (*index)[k++] = static_cast<ag::Index>(pi * p + py) * width + (pj * p + px);
          }
        }
      }
    }
    auto ordered = ag::gather_rows(pix, std::shared_ptr<const std::vector<ag::Index>>(index));
    const ag::Index pp = static_cast<ag::Index>(p) * p;
    std::vector<ag::Var<T>> cols;
    cols.reserve(static_cast<std::size_t>(pp));
    // Patch row t takes pixel rows t*pp .. t*pp+pp-1 laid side by side.
    for (ag::Index s = 0; s < pp; ++s) {
      auto sel = std::make_shared<std::vector<ag::Index>>(static_cast<std::size_t>(gh) * gw);
      for (ag::Index t = 0; t < static_cast<ag::Index>(sel->size()); ++t) (*sel)[static_cast<std::size_t>(t)] = t * pp + s;
      cols.push_back(ag::gather_rows(ordered, std::shared_ptr<const std::vector<ag::Index>>(sel)));
    }
    return ag::concat_cols(cols);
  }

  EncoderConfig cfg_;
  ParameterStore<T>* store_;
  ag::Var<T> patch_w_;
  ag::Var<T> patch_b_;
  ag::Var<T> pos_embed_;
  std::vector<TransformerBlock<T>> blocks_;
  Linear<T> neck_proj_;
  LayerNorm<T> neck_norm1_;
  ag::Var<T> neck_conv_;
  LayerNorm<T> neck_norm2_;
  bool hooks_installed_ = false;
  CbamConfig cbam_;
  SpatialAttention<T> spatial_;
  ChannelAttention<T> channel_;
};

}  // namespace fundusam

#endif  // FUNDUSAM_ENCODER_HPP

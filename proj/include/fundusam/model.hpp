#ifndef FUNDUSAM_MODEL_HPP
#define FUNDUSAM_MODEL_HPP

#include <cstdint>
#include <memory>
#include <optional>

#include "fundusam/decoder.hpp"
#include "fundusam/encoder.hpp"
#include "fundusam/parameters.hpp"

namespace fundusam {

struct ModelConfig {
  EncoderConfig encoder;
  AdapterConfig adapter;
  CbamConfig cbam;
  DecoderConfig decoder;
  bool use_adapter = true;
  bool use_cbam = true;
  std::uint64_t init_seed = 0;

  void validate() const {
    encoder.validate();
    adapter.validate();
    cbam.spatial.validate();
    cbam.channel.validate();
    decoder.validate();
    if (decoder.dim != encoder.neck_dim) throw InvalidArgument("ModelConfig: decoder dim must equal encoder neck dim");
    if (decoder.num_outputs != 2) throw InvalidArgument("ModelConfig: the decoder emits exactly two channels");
  }

  /// Desk-scale default: 16 blocks, 4 of them global.
  static ModelConfig desk() { return {}; }

  /// ViT-B-like accounting configuration (parameter census only).
  static ModelConfig sam_vit_b_like() {
    ModelConfig c;
    c.encoder.image_size = 1024;
    c.encoder.patch_size = 16;
    c.encoder.embed_dim = 768;
    c.encoder.depth = 12;
    c.encoder.num_heads = 12;
    c.encoder.window_size = 14;
    c.encoder.global_blocks = {2, 5, 8, 11};
    c.encoder.neck_dim = 256;
    c.adapter.bottleneck_ratio = 0.0625;
    c.decoder.dim = 256;
    c.decoder.heads = 8;
    c.decoder.mlp_dim = 2048;
    return c;
  }
};

/// Complete segmentation network. Parameters live in a heap-allocated store so
/// the model can be moved without invalidating the encoder's back-reference.
template <typename T>
class FunduSam {
 public:
  explicit FunduSam(const ModelConfig& cfg, bool shape_only = false)
      : cfg_(cfg), store_(std::make_unique<ParameterStore<T>>(cfg.init_seed, shape_only)) {
    cfg.validate();
    encoder_ = std::make_unique<ImageEncoder<T>>(*store_, cfg.encoder,
                                                 cfg.use_adapter ? std::optional<AdapterConfig>(cfg.adapter)
                                                                 : std::nullopt);
    if (cfg.use_cbam) encoder_->install_hooks(cfg.cbam);
    prompt_ = PromptEncoder<T>(*store_, cfg.decoder.dim);
    decoder_ = MaskDecoder<T>(*store_, cfg.decoder);
  }

  [[nodiscard]] const ModelConfig& config() const { return cfg_; }
  ParameterStore<T>& parameters() { return *store_; }
  [[nodiscard]] const ParameterStore<T>& parameters() const { return *store_; }
  ImageEncoder<T>& encoder() { return *encoder_; }
  [[nodiscard]] const ImageEncoder<T>& encoder() const { return *encoder_; }
  [[nodiscard]] const PromptEncoder<T>& prompt_encoder() const { return prompt_; }
  [[nodiscard]] const MaskDecoder<T>& decoder() const { return decoder_; }

  /// (image_size^2) x 2 mask logits, channel 0 disc, channel 1 cup.
  ag::Var<T> forward(const PolarRaster& img, const PointPrompt& prompt, const EncodeOptions& opt = {}) const {
    const auto emb = encoder_->encode(img, opt);
    return decode(emb, prompt, img.height(), img.width());
  }

  ag::Var<T> decode(const TokenGrid<T>& emb, const PointPrompt& prompt, int out_h, int out_w) const {
    auto p = prompt_.encode(prompt, out_h, out_w);
    auto pe = prompt_.dense_pe(emb.height, emb.width);
    return decoder_(emb, p, pe, prompt_.no_mask_embed(), out_h, out_w);
  }

 private:
  ModelConfig cfg_;
  std::unique_ptr<ParameterStore<T>> store_;
  std::unique_ptr<ImageEncoder<T>> encoder_;
  PromptEncoder<T> prompt_;
  MaskDecoder<T> decoder_;
};

}  // namespace fundusam

#endif  // FUNDUSAM_MODEL_HPP

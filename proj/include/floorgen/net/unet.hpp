#pragma once

#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "floorgen/net/layers.hpp"
#include "floorgen/net/text.hpp"

namespace floorgen::net {

struct UNetConfig {
  int in_channels = 4;
  int base_channels = 64;
  std::vector<int> channel_mults{1, 2, 4};
  /// Downsample factors (1 = full latent resolution) that get a spatial
  /// transformer.
  std::vector<int> attention_resolutions{4, 2, 1};
  int transformer_depth = 1;
  int time_embed_dim = 256;
  int context_dim = 128;
  int groups = 8;
  int num_res_blocks = 1;

  void validate() const;
  /// Channel count of each encoder skip, in push order.
  std::vector<int> skip_channels() const;
  int mid_channels() const { return base_channels * channel_mults.back(); }
  bool attention_at(int level) const;

  nlohmann::json to_json() const;
  static UNetConfig from_json(const nlohmann::json& j);
};

/// Encoder activations consumed by the decoder.
struct EncoderFeatures {
  std::vector<Tensor> skips;
  Tensor mid;
};

/// Sinusoidal timestep features followed by a two-layer MLP.
struct TimeEmbed {
  Linear fc1, fc2;
  int base_dim = 0;

  TimeEmbed() = default;
  TimeEmbed(int base_dim, int embed_dim, Rng& rng);
  Tensor operator()(std::span<const int> t) const;
  void collect(NamedParams& out, const std::string& prefix) const;
};

/// Input convolution, down path and middle block.
class UNetEncoder {
 public:
  UNetEncoder() = default;
  UNetEncoder(const UNetConfig& cfg, Rng& rng);

  /// `input_residual` (same shape as z, may be undefined) is added to z
  /// before the first convolution.
  EncoderFeatures operator()(const Tensor& z, const Tensor& temb, const TextBatch& text,
                             const Tensor& input_residual = {}) const;
  void collect(NamedParams& out, const std::string& prefix) const;

 private:
  struct Level {
    std::vector<ResBlock> res;
    std::vector<SpatialTransformer> attn;
    std::optional<Conv2d> down;
  };
  Conv2d conv_in_;
  std::vector<Level> levels_;
  ResBlock mid1_, mid2_;
  SpatialTransformer mid_attn_;
};

class UNetDecoder {
 public:
  UNetDecoder() = default;
  UNetDecoder(const UNetConfig& cfg, Rng& rng);
  Tensor operator()(EncoderFeatures feats, const Tensor& temb, const TextBatch& text) const;
  void collect(NamedParams& out, const std::string& prefix) const;

 private:
  struct Level {
    std::vector<ResBlock> res;
    std::vector<SpatialTransformer> attn;
    std::optional<Conv2d> up;
  };
  std::vector<Level> levels_;  // deepest first
  GroupNorm norm_out_;
  Conv2d conv_out_;
};

/// Additive corrections to the encoder features, produced by a control branch.
struct ControlResiduals {
  std::vector<Tensor> skips;
  Tensor mid;
};

/// epsilon-predictor: latent U-Net with cross-attention on a text context.
class UNet {
 public:
  explicit UNet(UNetConfig cfg, std::uint64_t seed = 2);

  const UNetConfig& config() const { return cfg_; }

  /// z_t [N, c, h, w], one timestep per sample, text batch of N. When
  /// `mid_features` is given it receives the spatially pooled middle-block
  /// activation [N, mid_channels].
  Tensor operator()(const Tensor& z_t, std::span<const int> t, const TextBatch& text,
                    const ControlResiduals* control = nullptr, Tensor* mid_features = nullptr) const;

  const TimeEmbed& time_embed() const { return time_; }
  const UNetEncoder& encoder() const { return encoder_; }

  NamedParams params() const;
  /// Parameters of the time embedding, encoder and middle block only.
  NamedParams encoder_params() const;

 private:
  UNetConfig cfg_;
  TimeEmbed time_;
  UNetEncoder encoder_;
  UNetDecoder decoder_;
};

}  // namespace floorgen::net

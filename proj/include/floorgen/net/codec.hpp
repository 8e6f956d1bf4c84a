#pragma once

#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "floorgen/image.hpp"
#include "floorgen/net/layers.hpp"

namespace floorgen::net {

struct CodecConfig {
  int image_channels = 3;
  int base_channels = 32;
  /// One entry per resolution; the downsample factor is 2^(size-1).
  std::vector<int> channel_mults{1, 2, 2};
  int z_channels = 4;
  int groups = 8;
  double kl_weight = 1e-6;

  int downsample_factor() const { return 1 << (static_cast<int>(channel_mults.size()) - 1); }
  void validate() const;
  nlohmann::json to_json() const;
  static CodecConfig from_json(const nlohmann::json& j);
};

/// Gaussian posterior q(z|x) = N(mu(x), diag(sigma^2(x))), all [N, z, h, w].
struct Posterior {
  Tensor mu;
  Tensor logvar;
};

struct Encoding {
  Tensor mu;
  Tensor sigma2;
  Tensor z;
};

class LatentCodec {
 public:
  explicit LatentCodec(CodecConfig cfg, std::uint64_t seed = 1);

  const CodecConfig& config() const { return cfg_; }

  /// Differentiable posterior for training. x: [N, C, H, W] in [-1, 1].
  Posterior posterior(const Tensor& x) const;
  /// z = mu + sigma * eps when rng is given, else z = mu.
  Encoding encode(const Tensor& x, Rng* rng = nullptr) const;
  /// Unclamped reconstruction, differentiable.
  Tensor decode_raw(const Tensor& z) const;
  /// Reconstruction clamped to [-1, 1].
  Tensor decode(const Tensor& z) const;

  /// Latent shape (N, z, H/f, W/f) for a given image shape; rejects sizes
  /// not divisible by the downsample factor.
  ag::Shape latent_shape(const ag::Shape& image_shape) const;

  /// Reconstruction L1 plus kl_weight times the mean KL to N(0, I).
  Tensor loss(const Tensor& x, Rng& rng) const;

  NamedParams params() const;

 private:
  CodecConfig cfg_;
  Conv2d enc_in_;
  std::vector<ResBlock> enc_blocks_;
  std::vector<Conv2d> enc_down_;
  GroupNorm enc_norm_;
  Conv2d enc_out_;

  Conv2d dec_in_;
  std::vector<ResBlock> dec_blocks_;
  std::vector<Conv2d> dec_up_;
  GroupNorm dec_norm_;
  Conv2d dec_out_;
};

}  // namespace floorgen::net

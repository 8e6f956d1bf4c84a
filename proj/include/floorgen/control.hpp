#pragma once

#include <array>
#include <memory>
#include <vector>

#include "floorgen/diffusion.hpp"
#include "floorgen/image.hpp"
#include "floorgen/net/unet.hpp"

namespace floorgen::control {

using ag::Tensor;

/// Binary footprint on the image grid (values 0/1, single channel).
struct FootprintMask {
  ImageGrid pixels;

  int height() const { return pixels.height; }
  int width() const { return pixels.width; }
  std::size_t foreground() const;
  bool is_binary() const;
  std::vector<unsigned char> bits() const;
  /// [1, 1, H, W]
  Tensor to_tensor() const;
  static FootprintMask from_bits(int height, int width, std::span<const unsigned char> bits);
  /// Thresholds a storage-space image (any channel count) at mid-gray.
  static FootprintMask from_storage(const ImageGrid& storage, double threshold = 127.5);
  ImageGrid to_storage() const;
};

using Mat2 = std::array<std::array<double, 2>, 2>;
using Vec2 = std::array<double, 2>;

/// Resamples the mask under x' = A x + t (pixel-centre coordinates, x = column,
/// y = row) with nearest-neighbour inverse mapping. Pixels mapping outside the
/// source are background. Identity parameters return the input unchanged.
FootprintMask affine_condition_transform(const FootprintMask& mask, const Mat2& A, const Vec2& t);
/// Same mapping for any image; uncovered pixels take `background`.
ImageGrid affine_resample(const ImageGrid& image, const Mat2& A, const Vec2& t, double background);

struct HintConfig {
  std::array<int, 2> channels{16, 32};
};

/// Maps the H x W footprint to the latent grid with three strided convolutions.
class HintEncoder {
 public:
  HintEncoder() = default;
  HintEncoder(int downsample_factor, int z_channels, const HintConfig& cfg, Rng& rng);
  /// mask [N, 1, H, W] -> [N, z, H/f, W/f]
  Tensor operator()(const Tensor& mask) const;
  void collect(NamedParams& out, const std::string& prefix) const;

 private:
  std::array<net::Conv2d, 3> convs_;
};

/// Frozen base F(.; Theta) plus a trainable copy of its encoder Theta_c, joined
/// by zero-initialized 1x1 convolutions:
///   out = F(x; Theta) + Z(F_c(x + Z(hint(y2); Theta_z1); Theta_c); Theta_z2)
/// The outer Z produces one residual per encoder skip and one for the middle
/// block; those are added inside the frozen decoder.
class ControlledModel final : public diffusion::EpsModel {
 public:
  /// Copies the base encoder into the trainable branch and freezes the base.
  static ControlledModel clone_and_freeze(std::shared_ptr<net::UNet> base, int downsample_factor,
                                          const HintConfig& hint = {}, std::uint64_t seed = 3);

  Tensor predict_eps(const Tensor& z_t, std::span<const int> t, const diffusion::Conditioning& cond) const override;

  /// mask: [N, 1, H, W] footprint on the image grid.
  Tensor controlled_forward(const Tensor& z_t, std::span<const int> t, const net::TextBatch& text, const Tensor& mask,
                            Tensor* mid_features = nullptr) const;
  /// F(x; Theta) alone.
  Tensor frozen_forward(const Tensor& z_t, std::span<const int> t, const net::TextBatch& text) const;

  const net::UNet& base() const { return *base_; }
  int downsample_factor() const { return factor_; }

  /// Theta
  NamedParams frozen_params() const;
  /// Theta_c, the encoder-subset copy (names match UNet::encoder_params()).
  NamedParams clone_params() const;
  NamedParams zero_conv_params() const;
  NamedParams hint_params() const;
  /// Everything updated in stage 2.
  NamedParams trainable_params() const;
  /// Every tensor, canonically named, for checkpoints.
  NamedParams all_params() const;

 private:
  ControlledModel() = default;
  net::ControlResiduals residuals(const Tensor& z_t, std::span<const int> t, const net::TextBatch& text,
                                  const Tensor& mask) const;

  std::shared_ptr<net::UNet> base_;
  std::shared_ptr<net::UNet> clone_;  // only time_embed and encoder are used
  HintEncoder hint_;
  net::Conv2d zero_in_;
  std::vector<net::Conv2d> zero_out_;
  net::Conv2d zero_mid_;
  int factor_ = 1;
};

/// Adapter so a plain UNet can be used wherever an EpsModel is expected.
class TextOnlyModel final : public diffusion::EpsModel {
 public:
  explicit TextOnlyModel(std::shared_ptr<const net::UNet> unet) : unet_(std::move(unet)) {}
  Tensor predict_eps(const Tensor& z_t, std::span<const int> t, const diffusion::Conditioning& cond) const override {
    return (*unet_)(z_t, t, cond.text);
  }

 private:
  std::shared_ptr<const net::UNet> unet_;
};

}  // namespace floorgen::control

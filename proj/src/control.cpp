#include "floorgen/control.hpp"

#include <cmath>

namespace floorgen::control {

std::size_t FootprintMask::foreground() const {
  std::size_t n = 0;
  for (double v : pixels.pixels) n += v > 0.5 ? 1 : 0;
  return n;
}

bool FootprintMask::is_binary() const {
  for (double v : pixels.pixels)
    if (v != 0.0 && v != 1.0) return false;
  return pixels.channels == 1;
}

std::vector<unsigned char> FootprintMask::bits() const {
  std::vector<unsigned char> b(pixels.pixels.size());
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = pixels.pixels[i] > 0.5 ? 1 : 0;
  return b;
}

Tensor FootprintMask::to_tensor() const { return floorgen::to_tensor(pixels); }

FootprintMask FootprintMask::from_bits(int height, int width, std::span<const unsigned char> bits) {
  if (bits.size() != static_cast<std::size_t>(height) * width) throw ValidationError("mask: bit count does not match size");
  FootprintMask m{ImageGrid(height, width, 1)};
  for (std::size_t i = 0; i < bits.size(); ++i) m.pixels.pixels[i] = bits[i] ? 1.0 : 0.0;
  return m;
}

FootprintMask FootprintMask::from_storage(const ImageGrid& storage, double threshold) {
  const ImageGrid lum = luminance(storage);
  FootprintMask m{ImageGrid(lum.height, lum.width, 1)};
  for (std::size_t i = 0; i < lum.pixels.size(); ++i) m.pixels.pixels[i] = lum.pixels[i] > threshold ? 1.0 : 0.0;
  return m;
}

ImageGrid FootprintMask::to_storage() const {
  ImageGrid out = pixels;
  for (double& v : out.pixels) v = v > 0.5 ? 255.0 : 0.0;
  return out;
}

ImageGrid affine_resample(const ImageGrid& image, const Mat2& A, const Vec2& t, double background) {
  const double det = A[0][0] * A[1][1] - A[0][1] * A[1][0];
  if (std::abs(det) < 1e-12) throw ValidationError("affine_condition_transform: matrix A is singular");
  const double inv[2][2] = {{A[1][1] / det, -A[0][1] / det}, {-A[1][0] / det, A[0][0] / det}};
  const int h = image.height, w = image.width, c = image.channels;
  // Coordinates are taken about the image centre so scaling keeps the
  // footprint in place.
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  ImageGrid out(h, w, c, background);
  for (int row = 0; row < h; ++row)
    for (int col = 0; col < w; ++col) {
      const double dx = (col - cx) - t[0];
      const double dy = (row - cy) - t[1];
      const double sx = inv[0][0] * dx + inv[0][1] * dy + cx;
      const double sy = inv[1][0] * dx + inv[1][1] * dy + cy;
      const long ix = std::lround(sx), iy = std::lround(sy);
      if (ix < 0 || ix >= w || iy < 0 || iy >= h) continue;
      for (int k = 0; k < c; ++k) out.at(row, col, k) = image.at(static_cast<int>(iy), static_cast<int>(ix), k);
    }
  return out;
}

FootprintMask affine_condition_transform(const FootprintMask& mask, const Mat2& A, const Vec2& t) {
  return FootprintMask{affine_resample(mask.pixels, A, t, 0.0)};
}

HintEncoder::HintEncoder(int downsample_factor, int z_channels, const HintConfig& cfg, Rng& rng) {
  int halvings = 0;
  while ((1 << halvings) < downsample_factor) ++halvings;
  if ((1 << halvings) != downsample_factor || halvings > 3)
    throw ValidationError("hint encoder: downsample factor must be 1, 2, 4 or 8");
  // The last `halvings` layers stride by 2.
  const int ch[4] = {1, cfg.channels[0], cfg.channels[1], z_channels};
  for (int i = 0; i < 3; ++i) {
    const int stride = i >= 3 - halvings ? 2 : 1;
    convs_[static_cast<std::size_t>(i)] = net::Conv2d(ch[i], ch[i + 1], 3, stride, 1, rng);
  }
}

Tensor HintEncoder::operator()(const Tensor& mask) const {
  Tensor h = ag::silu(convs_[0](mask));
  h = ag::silu(convs_[1](h));
  return convs_[2](h);
}

void HintEncoder::collect(NamedParams& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(out, prefix + ".conv" + std::to_string(i));
}

ControlledModel ControlledModel::clone_and_freeze(std::shared_ptr<net::UNet> base, int downsample_factor, const HintConfig& hint,
                                                  std::uint64_t seed) {
  if (!base) throw ValidationError("clone_and_freeze: no base model");
  ControlledModel cm;
  cm.factor_ = downsample_factor;
  cm.base_ = std::move(base);
  cm.base_->params().set_requires_grad(false);

  cm.clone_ = std::make_shared<net::UNet>(cm.base_->config(), seed);
  NamedParams dst = cm.clone_->encoder_params();
  copy_values(cm.base_->encoder_params(), dst);
  cm.clone_->params().set_requires_grad(false);
  dst.set_requires_grad(true);

  Rng rng(Rng::derive(seed, 1));
  const int zc = cm.base_->config().in_channels;
  cm.hint_ = HintEncoder(downsample_factor, zc, hint, rng);
  cm.zero_in_ = net::Conv2d::zero(zc, zc);
  for (int c : cm.base_->config().skip_channels()) cm.zero_out_.push_back(net::Conv2d::zero(c, c));
  cm.zero_mid_ = net::Conv2d::zero(cm.base_->config().mid_channels(), cm.base_->config().mid_channels());
  return cm;
}

net::ControlResiduals ControlledModel::residuals(const Tensor& z_t, std::span<const int> t, const net::TextBatch& text,
                                                 const Tensor& mask) const {
  if (!mask.defined() || mask.shape().size() != 4 || mask.dim(1) != 1 || mask.dim(0) != z_t.dim(0))
    throw ValidationError("controlled_forward: mask must be [N,1,H,W] matching the latent batch");
  const Tensor hint = hint_(mask);
  if (hint.dim(2) != z_t.dim(2) || hint.dim(3) != z_t.dim(3))
    throw ValidationError("controlled_forward: hint grid " + std::to_string(hint.dim(2)) + "x" + std::to_string(hint.dim(3)) +
                          " does not match latent " + std::to_string(z_t.dim(2)) + "x" + std::to_string(z_t.dim(3)));
  const Tensor temb = clone_->time_embed()(t);
  const net::EncoderFeatures f = clone_->encoder()(z_t, temb, text, zero_in_(hint));
  net::ControlResiduals r;
  for (std::size_t i = 0; i < f.skips.size(); ++i) r.skips.push_back(zero_out_[i](f.skips[i]));
  r.mid = zero_mid_(f.mid);
  return r;
}

Tensor ControlledModel::controlled_forward(const Tensor& z_t, std::span<const int> t, const net::TextBatch& text,
                                           const Tensor& mask, Tensor* mid_features) const {
  const net::ControlResiduals r = residuals(z_t, t, text, mask);
  return (*base_)(z_t, t, text, &r, mid_features);
}

Tensor ControlledModel::frozen_forward(const Tensor& z_t, std::span<const int> t, const net::TextBatch& text) const {
  return (*base_)(z_t, t, text);
}

Tensor ControlledModel::predict_eps(const Tensor& z_t, std::span<const int> t, const diffusion::Conditioning& cond) const {
  return controlled_forward(z_t, t, cond.text, cond.mask);
}

NamedParams ControlledModel::frozen_params() const { return base_->params(); }

NamedParams ControlledModel::clone_params() const { return clone_->encoder_params(); }

NamedParams ControlledModel::zero_conv_params() const {
  NamedParams p;
  zero_in_.collect(p, "zero_in");
  for (std::size_t i = 0; i < zero_out_.size(); ++i) zero_out_[i].collect(p, "zero_out." + std::to_string(i));
  zero_mid_.collect(p, "zero_mid");
  return p;
}

NamedParams ControlledModel::hint_params() const {
  NamedParams p;
  hint_.collect(p, "hint");
  return p;
}

NamedParams ControlledModel::trainable_params() const {
  NamedParams p = clone_params().prefixed("clone");
  p.append(zero_conv_params());
  p.append(hint_params());
  return p;
}

NamedParams ControlledModel::all_params() const {
  NamedParams p = frozen_params().prefixed("base");
  p.append(trainable_params().prefixed("control"));
  return p;
}

}  // namespace floorgen::control

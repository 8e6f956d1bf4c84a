#include "floorgen/net/codec.hpp"

#include <cmath>

namespace floorgen::net {

void CodecConfig::validate() const {
  if (image_channels < 1 || base_channels < 1 || z_channels < 1)
    throw ValidationError("codec: channel counts must be positive");
  if (channel_mults.empty()) throw ValidationError("codec: channel_mults must not be empty");
  for (int m : channel_mults)
    if (m < 1) throw ValidationError("codec: channel multipliers must be >= 1");
  if (kl_weight < 0) throw ValidationError("codec: kl_weight must be >= 0");
}

nlohmann::json CodecConfig::to_json() const {
  return {{"image_channels", image_channels}, {"base_channels", base_channels}, {"channel_mults", channel_mults},
          {"z_channels", z_channels},         {"groups", groups},               {"kl_weight", kl_weight}};
}

CodecConfig CodecConfig::from_json(const nlohmann::json& j) {
  CodecConfig c;
  c.image_channels = j.value("image_channels", c.image_channels);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.channel_mults = j.value("channel_mults", c.channel_mults);
  c.z_channels = j.value("z_channels", c.z_channels);
  c.groups = j.value("groups", c.groups);
  c.kl_weight = j.value("kl_weight", c.kl_weight);
  return c;
}

LatentCodec::LatentCodec(CodecConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  const auto& m = cfg_.channel_mults;
  const int levels = static_cast<int>(m.size());
  const int c0 = cfg_.base_channels * m[0];
  const int clast = cfg_.base_channels * m.back();

  enc_in_ = Conv2d(cfg_.image_channels, c0, 3, 1, 1, rng);
  for (int i = 0; i < levels; ++i) {
    const int c = cfg_.base_channels * m[i];
    enc_blocks_.emplace_back(c, c, 0, cfg_.groups, rng);
    if (i + 1 < levels) enc_down_.emplace_back(c, cfg_.base_channels * m[i + 1], 3, 2, 1, rng);
  }
  enc_norm_ = GroupNorm(clast, norm_groups(clast, cfg_.groups));
  enc_out_ = Conv2d(clast, 2 * cfg_.z_channels, 1, 1, 0, rng);

  dec_in_ = Conv2d(cfg_.z_channels, clast, 3, 1, 1, rng);
  for (int i = levels - 1; i >= 0; --i) {
    const int c = cfg_.base_channels * m[i];
    dec_blocks_.emplace_back(c, c, 0, cfg_.groups, rng);
    if (i > 0) dec_up_.emplace_back(c, cfg_.base_channels * m[i - 1], 3, 1, 1, rng);
  }
  dec_norm_ = GroupNorm(c0, norm_groups(c0, cfg_.groups));
  dec_out_ = Conv2d(c0, cfg_.image_channels, 3, 1, 1, rng);
}

ag::Shape LatentCodec::latent_shape(const ag::Shape& s) const {
  const int f = cfg_.downsample_factor();
  if (s.size() != 4 || s[1] != cfg_.image_channels)
    throw ValidationError("codec: expected [N," + std::to_string(cfg_.image_channels) + ",H,W], got " + ag::to_string(s));
  if (s[2] % f != 0 || s[3] % f != 0)
    throw ValidationError("codec: image " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                          " not divisible by downsample factor " + std::to_string(f));
  return {s[0], cfg_.z_channels, s[2] / f, s[3] / f};
}

Posterior LatentCodec::posterior(const Tensor& x) const {
  latent_shape(x.shape());
  const Tensor none;
  Tensor h = enc_in_(x);
  for (std::size_t i = 0; i < enc_blocks_.size(); ++i) {
    h = enc_blocks_[i](h, none);
    if (i < enc_down_.size()) h = enc_down_[i](h);
  }
  h = enc_out_(ag::silu(enc_norm_(h)));
  Posterior p;
  p.mu = ag::slice_channels(h, 0, cfg_.z_channels);
  p.logvar = ag::clamp(ag::slice_channels(h, cfg_.z_channels, cfg_.z_channels), -30.0, 20.0);
  return p;
}

Encoding LatentCodec::encode(const Tensor& x, Rng* rng) const {
  const Posterior p = posterior(x);
  Encoding e;
  e.mu = p.mu;
  e.sigma2 = ag::exp(p.logvar);
  if (rng) {
    const Tensor eps = Tensor::from(p.mu.shape(), rng->normal_vector(p.mu.size()));
    e.z = ag::add(p.mu, ag::mul(ag::exp(ag::scale(p.logvar, 0.5)), eps));
  } else {
    e.z = p.mu;
  }
  return e;
}

Tensor LatentCodec::decode_raw(const Tensor& z) const {
  if (z.shape().size() != 4 || z.dim(1) != cfg_.z_channels)
    throw ValidationError("codec: latent must be [N," + std::to_string(cfg_.z_channels) + ",h,w], got " + ag::to_string(z.shape()));
  const Tensor none;
  Tensor h = dec_in_(z);
  for (std::size_t i = 0; i < dec_blocks_.size(); ++i) {
    h = dec_blocks_[i](h, none);
    if (i < dec_up_.size()) h = dec_up_[i](ag::upsample_nearest2x(h));
  }
  return dec_out_(ag::silu(dec_norm_(h)));
}

Tensor LatentCodec::decode(const Tensor& z) const { return ag::clamp(decode_raw(z), -1.0, 1.0); }

Tensor LatentCodec::loss(const Tensor& x, Rng& rng) const {
  const Posterior p = posterior(x);
  const Tensor eps = Tensor::from(p.mu.shape(), rng.normal_vector(p.mu.size()));
  const Tensor z = ag::add(p.mu, ag::mul(ag::exp(ag::scale(p.logvar, 0.5)), eps));
  const Tensor rec = ag::mean(ag::abs(ag::sub(decode_raw(z), x)));
  // KL(N(mu, s^2) || N(0, 1)) = 0.5 * (mu^2 + s^2 - 1 - log s^2)
  const Tensor kl = ag::scale(
      ag::mean(ag::sub(ag::add(ag::mul(p.mu, p.mu), ag::exp(p.logvar)), ag::add_scalar(p.logvar, 1.0))), 0.5);
  return ag::add(rec, ag::scale(kl, cfg_.kl_weight));
}

NamedParams LatentCodec::params() const {
  NamedParams p;
  enc_in_.collect(p, "encoder.conv_in");
  for (std::size_t i = 0; i < enc_blocks_.size(); ++i) enc_blocks_[i].collect(p, "encoder.block" + std::to_string(i));
  for (std::size_t i = 0; i < enc_down_.size(); ++i) enc_down_[i].collect(p, "encoder.down" + std::to_string(i));
  enc_norm_.collect(p, "encoder.norm_out");
  enc_out_.collect(p, "encoder.conv_out");
  dec_in_.collect(p, "decoder.conv_in");
  for (std::size_t i = 0; i < dec_blocks_.size(); ++i) dec_blocks_[i].collect(p, "decoder.block" + std::to_string(i));
  for (std::size_t i = 0; i < dec_up_.size(); ++i) dec_up_[i].collect(p, "decoder.up" + std::to_string(i));
  dec_norm_.collect(p, "decoder.norm_out");
  dec_out_.collect(p, "decoder.conv_out");
  return p;
}

}  // namespace floorgen::net

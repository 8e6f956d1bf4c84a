#include "floorgen/net/unet.hpp"

#include <algorithm>

namespace floorgen::net {

void UNetConfig::validate() const {
  if (in_channels < 1 || base_channels < 1 || time_embed_dim < 2 || context_dim < 1)
    throw ValidationError("unet: channel counts must be positive");
  if (channel_mults.empty()) throw ValidationError("unet: channel_mults must not be empty");
  if (transformer_depth < 1) throw ValidationError("unet: transformer_depth must be >= 1");
  if (num_res_blocks < 1) throw ValidationError("unet: num_res_blocks must be >= 1");
  if (base_channels % 2 != 0) throw ValidationError("unet: base_channels must be even");
  const int max_factor = 1 << (static_cast<int>(channel_mults.size()) - 1);
  for (int f : attention_resolutions) {
    const bool pow2 = f >= 1 && (f & (f - 1)) == 0;
    if (!pow2 || f > max_factor)
      throw ValidationError("unet: attention resolution " + std::to_string(f) + " is not an achievable downsample factor (max " +
                            std::to_string(max_factor) + ")");
  }
}

bool UNetConfig::attention_at(int level) const {
  return std::find(attention_resolutions.begin(), attention_resolutions.end(), 1 << level) != attention_resolutions.end();
}

std::vector<int> UNetConfig::skip_channels() const {
  std::vector<int> out{base_channels * channel_mults[0]};
  for (std::size_t i = 0; i < channel_mults.size(); ++i) {
    for (int r = 0; r < num_res_blocks; ++r) out.push_back(base_channels * channel_mults[i]);
    if (i + 1 < channel_mults.size()) out.push_back(base_channels * channel_mults[i]);
  }
  return out;
}

nlohmann::json UNetConfig::to_json() const {
  return {{"in_channels", in_channels},
          {"base_channels", base_channels},
          {"channel_mults", channel_mults},
          {"attention_resolutions", attention_resolutions},
          {"transformer_depth", transformer_depth},
          {"time_embed_dim", time_embed_dim},
          {"context_dim", context_dim},
          {"groups", groups},
          {"num_res_blocks", num_res_blocks}};
}

UNetConfig UNetConfig::from_json(const nlohmann::json& j) {
  UNetConfig c;
  c.in_channels = j.value("in_channels", c.in_channels);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.channel_mults = j.value("channel_mults", c.channel_mults);
  c.attention_resolutions = j.value("attention_resolutions", c.attention_resolutions);
  c.transformer_depth = j.value("transformer_depth", c.transformer_depth);
  c.time_embed_dim = j.value("time_embed_dim", c.time_embed_dim);
  c.context_dim = j.value("context_dim", c.context_dim);
  c.groups = j.value("groups", c.groups);
  c.num_res_blocks = j.value("num_res_blocks", c.num_res_blocks);
  return c;
}

TimeEmbed::TimeEmbed(int base, int embed_dim, Rng& rng) : fc1(base, embed_dim, rng), fc2(embed_dim, embed_dim, rng), base_dim(base) {}

Tensor TimeEmbed::operator()(std::span<const int> t) const {
  std::vector<double> tv(t.begin(), t.end());
  return fc2(ag::silu(fc1(timestep_embedding(tv, base_dim))));
}

void TimeEmbed::collect(NamedParams& out, const std::string& prefix) const {
  fc1.collect(out, prefix + ".fc1");
  fc2.collect(out, prefix + ".fc2");
}

UNetEncoder::UNetEncoder(const UNetConfig& cfg, Rng& rng) {
  const int c0 = cfg.base_channels * cfg.channel_mults[0];
  conv_in_ = Conv2d(cfg.in_channels, c0, 3, 1, 1, rng);
  int ch = c0;
  for (std::size_t i = 0; i < cfg.channel_mults.size(); ++i) {
    Level lv;
    const int out = cfg.base_channels * cfg.channel_mults[i];
    for (int r = 0; r < cfg.num_res_blocks; ++r) {
      lv.res.emplace_back(ch, out, cfg.time_embed_dim, cfg.groups, rng);
      ch = out;
      if (cfg.attention_at(static_cast<int>(i)))
        lv.attn.emplace_back(ch, cfg.context_dim, cfg.transformer_depth, cfg.groups, rng);
    }
    if (i + 1 < cfg.channel_mults.size()) lv.down.emplace(ch, ch, 3, 2, 1, rng);
    levels_.push_back(std::move(lv));
  }
  mid1_ = ResBlock(ch, ch, cfg.time_embed_dim, cfg.groups, rng);
  mid_attn_ = SpatialTransformer(ch, cfg.context_dim, cfg.transformer_depth, cfg.groups, rng);
  mid2_ = ResBlock(ch, ch, cfg.time_embed_dim, cfg.groups, rng);
}

EncoderFeatures UNetEncoder::operator()(const Tensor& z, const Tensor& temb, const TextBatch& text,
                                        const Tensor& input_residual) const {
  EncoderFeatures f;
  const Tensor& ctx = text.context;
  Tensor h = conv_in_(input_residual.defined() ? ag::add(z, input_residual) : z);
  f.skips.push_back(h);
  for (const Level& lv : levels_) {
    for (std::size_t r = 0; r < lv.res.size(); ++r) {
      h = lv.res[r](h, temb);
      if (!lv.attn.empty()) h = lv.attn[r](h, ctx, text.key_mask);
      f.skips.push_back(h);
    }
    if (lv.down) {
      h = (*lv.down)(h);
      f.skips.push_back(h);
    }
  }
  h = mid1_(h, temb);
  h = mid_attn_(h, ctx, text.key_mask);
  f.mid = mid2_(h, temb);
  return f;
}

void UNetEncoder::collect(NamedParams& out, const std::string& prefix) const {
  conv_in_.collect(out, prefix + ".conv_in");
  for (std::size_t i = 0; i < levels_.size(); ++i) {
    const std::string p = prefix + ".down" + std::to_string(i);
    for (std::size_t r = 0; r < levels_[i].res.size(); ++r) levels_[i].res[r].collect(out, p + ".res" + std::to_string(r));
    for (std::size_t r = 0; r < levels_[i].attn.size(); ++r) levels_[i].attn[r].collect(out, p + ".attn" + std::to_string(r));
    if (levels_[i].down) levels_[i].down->collect(out, p + ".downsample");
  }
  mid1_.collect(out, prefix + ".mid.res0");
  mid_attn_.collect(out, prefix + ".mid.attn");
  mid2_.collect(out, prefix + ".mid.res1");
}

UNetDecoder::UNetDecoder(const UNetConfig& cfg, Rng& rng) {
  std::vector<int> skips = cfg.skip_channels();
  int ch = cfg.mid_channels();
  const int levels = static_cast<int>(cfg.channel_mults.size());
  for (int i = levels - 1; i >= 0; --i) {
    Level lv;
    const int out = cfg.base_channels * cfg.channel_mults[i];
    for (int r = 0; r < cfg.num_res_blocks + 1; ++r) {
      const int skip_ch = skips.back();
      skips.pop_back();
      lv.res.emplace_back(ch + skip_ch, out, cfg.time_embed_dim, cfg.groups, rng);
      ch = out;
      if (cfg.attention_at(i)) lv.attn.emplace_back(ch, cfg.context_dim, cfg.transformer_depth, cfg.groups, rng);
    }
    if (i > 0) lv.up.emplace(ch, ch, 3, 1, 1, rng);
    levels_.push_back(std::move(lv));
  }
  norm_out_ = GroupNorm(ch, norm_groups(ch, cfg.groups));
  conv_out_ = Conv2d(ch, cfg.in_channels, 3, 1, 1, rng);
}

Tensor UNetDecoder::operator()(EncoderFeatures feats, const Tensor& temb, const TextBatch& text) const {
  Tensor h = feats.mid;
  for (const Level& lv : levels_) {
    for (std::size_t r = 0; r < lv.res.size(); ++r) {
      h = lv.res[r](ag::concat_channels(h, feats.skips.back()), temb);
      feats.skips.pop_back();
      if (!lv.attn.empty()) h = lv.attn[r](h, text.context, text.key_mask);
    }
    if (lv.up) h = (*lv.up)(ag::upsample_nearest2x(h));
  }
  return conv_out_(ag::silu(norm_out_(h)));
}

void UNetDecoder::collect(NamedParams& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < levels_.size(); ++i) {
    const std::string p = prefix + ".up" + std::to_string(i);
    for (std::size_t r = 0; r < levels_[i].res.size(); ++r) levels_[i].res[r].collect(out, p + ".res" + std::to_string(r));
    for (std::size_t r = 0; r < levels_[i].attn.size(); ++r) levels_[i].attn[r].collect(out, p + ".attn" + std::to_string(r));
    if (levels_[i].up) levels_[i].up->collect(out, p + ".upsample");
  }
  norm_out_.collect(out, prefix + ".norm_out");
  conv_out_.collect(out, prefix + ".conv_out");
}

UNet::UNet(UNetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  time_ = TimeEmbed(cfg_.base_channels, cfg_.time_embed_dim, rng);
  encoder_ = UNetEncoder(cfg_, rng);
  decoder_ = UNetDecoder(cfg_, rng);
}

Tensor UNet::operator()(const Tensor& z_t, std::span<const int> t, const TextBatch& text, const ControlResiduals* control,
                        Tensor* mid_features) const {
  if (z_t.shape().size() != 4 || z_t.dim(1) != cfg_.in_channels)
    throw ValidationError("unet: expected latent [N," + std::to_string(cfg_.in_channels) + ",h,w], got " + ag::to_string(z_t.shape()));
  if (static_cast<int>(t.size()) != z_t.dim(0) || text.batch() != z_t.dim(0))
    throw ValidationError("unet: batch size mismatch between latent, timesteps and text");
  const int f = 1 << (static_cast<int>(cfg_.channel_mults.size()) - 1);
  if (z_t.dim(2) % f != 0 || z_t.dim(3) % f != 0)
    throw ValidationError("unet: latent size not divisible by " + std::to_string(f));
  if (text.context.dim(2) != cfg_.context_dim)
    throw ValidationError("unet: text context width " + std::to_string(text.context.dim(2)) + " != " + std::to_string(cfg_.context_dim));

  const Tensor temb = time_(t);
  EncoderFeatures feats = encoder_(z_t, temb, text);
  if (control) {
    if (control->skips.size() != feats.skips.size()) throw ValidationError("unet: control residual count mismatch");
    for (std::size_t i = 0; i < feats.skips.size(); ++i) feats.skips[i] = ag::add(feats.skips[i], control->skips[i]);
    feats.mid = ag::add(feats.mid, control->mid);
  }
  if (mid_features) *mid_features = ag::spatial_mean(feats.mid);
  return decoder_(std::move(feats), temb, text);
}

NamedParams UNet::params() const {
  NamedParams p = encoder_params();
  decoder_.collect(p, "decoder");
  return p;
}

NamedParams UNet::encoder_params() const {
  NamedParams p;
  time_.collect(p, "time_embed");
  encoder_.collect(p, "encoder");
  return p;
}

}  // namespace floorgen::net

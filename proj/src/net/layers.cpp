#include "floorgen/net/layers.hpp"

#include <cmath>

namespace floorgen::net {

Conv2d::Conv2d(int in_ch, int out_ch, int kernel, int stride_, int pad_, Rng& rng) : stride(stride_), pad(pad_) {
  const int fan = in_ch * kernel * kernel;
  weight = init::fan_in({out_ch, in_ch, kernel, kernel}, fan, rng);
  bias = init::fan_in({out_ch}, fan, rng);
}

Conv2d Conv2d::zero(int in_ch, int out_ch) {
  Conv2d c;
  c.weight = init::zeros({out_ch, in_ch, 1, 1});
  c.bias = init::zeros({out_ch});
  return c;
}

void Conv2d::collect(NamedParams& out, const std::string& prefix) const {
  out.add(prefix + ".weight", weight);
  out.add(prefix + ".bias", bias);
}

Linear::Linear(int in_f, int out_f, Rng& rng, bool with_bias) {
  weight = init::fan_in({out_f, in_f}, in_f, rng);
  if (with_bias) bias = init::fan_in({out_f}, in_f, rng);
}

void Linear::collect(NamedParams& out, const std::string& prefix) const {
  out.add(prefix + ".weight", weight);
  if (bias.defined()) out.add(prefix + ".bias", bias);
}

GroupNorm::GroupNorm(int channels, int groups_) : gamma(init::ones({channels})), beta(init::zeros({channels})), groups(groups_) {
  if (channels % groups != 0) throw ValidationError("GroupNorm: channels not divisible by groups");
}

void GroupNorm::collect(NamedParams& out, const std::string& prefix) const {
  out.add(prefix + ".gamma", gamma);
  out.add(prefix + ".beta", beta);
}

LayerNorm::LayerNorm(int dim) : gamma(init::ones({dim})), beta(init::zeros({dim})) {}

void LayerNorm::collect(NamedParams& out, const std::string& prefix) const {
  out.add(prefix + ".gamma", gamma);
  out.add(prefix + ".beta", beta);
}

int norm_groups(int channels, int preferred) {
  for (int g = std::min(preferred, channels); g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

ResBlock::ResBlock(int in_ch, int out_ch, int time_dim, int groups, Rng& rng)
    : norm1(in_ch, norm_groups(in_ch, groups)),
      norm2(out_ch, norm_groups(out_ch, groups)),
      conv1(in_ch, out_ch, 3, 1, 1, rng),
      conv2(out_ch, out_ch, 3, 1, 1, rng) {
  if (time_dim > 0) time_proj.emplace(time_dim, out_ch, rng);
  if (in_ch != out_ch) skip.emplace(in_ch, out_ch, 1, 1, 0, rng);
}

Tensor ResBlock::operator()(const Tensor& x, const Tensor& temb) const {
  Tensor h = conv1(ag::silu(norm1(x)));
  if (time_proj) h = ag::add_channel_bias(h, (*time_proj)(ag::silu(temb)));
  h = conv2(ag::silu(norm2(h)));
  return ag::add(skip ? (*skip)(x) : x, h);
}

void ResBlock::collect(NamedParams& out, const std::string& prefix) const {
  norm1.collect(out, prefix + ".norm1");
  conv1.collect(out, prefix + ".conv1");
  if (time_proj) time_proj->collect(out, prefix + ".time_proj");
  norm2.collect(out, prefix + ".norm2");
  conv2.collect(out, prefix + ".conv2");
  if (skip) skip->collect(out, prefix + ".skip");
}

Tensor cross_attention(const Tensor& x, const Tensor& ctx, const AttentionWeights& w,
                       std::span<const unsigned char> key_mask, Tensor* weights_out) {
  if (x.shape().size() != 3 || ctx.shape().size() != 3 || x.dim(0) != ctx.dim(0))
    throw ValidationError("cross_attention: expected x [N,Lq,dq] and ctx [N,Lk,dc], got " + ag::to_string(x.shape()) +
                          " and " + ag::to_string(ctx.shape()));
  const int d_query = x.dim(2), d_ctx = ctx.dim(2);
  if (w.w_q.shape().size() != 2 || w.w_q.dim(1) != d_query)
    throw ValidationError("cross_attention: W_Q " + ag::to_string(w.w_q.shape()) + " does not match query dim " +
                          std::to_string(d_query));
  const int d = w.w_q.dim(0);
  if (w.w_k.shape() != ag::Shape{d, d_ctx} || w.w_v.shape() != ag::Shape{d, d_ctx})
    throw ValidationError("cross_attention: W_K/W_V must be " + ag::to_string({d, d_ctx}));
  if (w.w_o.shape() != ag::Shape{d_query, d})
    throw ValidationError("cross_attention: W_O must be " + ag::to_string({d_query, d}));

  const Tensor q = ag::linear(x, w.w_q, {});
  const Tensor k = ag::linear(ctx, w.w_k, {});
  const Tensor v = ag::linear(ctx, w.w_v, {});
  const Tensor logits = ag::scale(ag::bmm(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(d)));
  const Tensor attn = ag::softmax_last(logits, key_mask);
  if (weights_out) *weights_out = attn;
  return ag::linear(ag::bmm(attn, v), w.w_o, w.b_o);
}

Attention::Attention(int query_dim, int context_dim, Rng& rng) {
  const int d = query_dim;
  w.w_q = init::fan_in({d, query_dim}, query_dim, rng);
  w.w_k = init::fan_in({d, context_dim}, context_dim, rng);
  w.w_v = init::fan_in({d, context_dim}, context_dim, rng);
  w.w_o = init::fan_in({query_dim, d}, d, rng);
  w.b_o = init::zeros({query_dim});
}

void Attention::collect(NamedParams& out, const std::string& prefix) const {
  out.add(prefix + ".w_q", w.w_q);
  out.add(prefix + ".w_k", w.w_k);
  out.add(prefix + ".w_v", w.w_v);
  out.add(prefix + ".w_o", w.w_o);
  out.add(prefix + ".b_o", w.b_o);
}

TransformerBlock::TransformerBlock(int dim, int context_dim, Rng& rng)
    : norm1(dim),
      norm2(dim),
      norm3(dim),
      self_attn(dim, dim, rng),
      cross_attn(dim, context_dim, rng),
      ff_in(dim, 4 * dim, rng),
      ff_out(4 * dim, dim, rng) {}

Tensor TransformerBlock::operator()(const Tensor& x, const Tensor& ctx, std::span<const unsigned char> key_mask) const {
  const Tensor n1 = norm1(x);
  Tensor h = ag::add(x, self_attn(n1, n1));
  h = ag::add(h, cross_attn(norm2(h), ctx, key_mask));
  return ag::add(h, ff_out(ag::gelu(ff_in(norm3(h)))));
}

void TransformerBlock::collect(NamedParams& out, const std::string& prefix) const {
  norm1.collect(out, prefix + ".norm1");
  self_attn.collect(out, prefix + ".self_attn");
  norm2.collect(out, prefix + ".norm2");
  cross_attn.collect(out, prefix + ".cross_attn");
  norm3.collect(out, prefix + ".norm3");
  ff_in.collect(out, prefix + ".ff_in");
  ff_out.collect(out, prefix + ".ff_out");
}

SpatialTransformer::SpatialTransformer(int channels, int context_dim, int depth, int groups, Rng& rng)
    : norm(channels, norm_groups(channels, groups)),
      proj_in(channels, channels, 1, 1, 0, rng),
      proj_out(channels, channels, 1, 1, 0, rng) {
  if (depth < 1) throw ValidationError("SpatialTransformer: depth must be >= 1");
  for (int i = 0; i < depth; ++i) blocks.emplace_back(channels, context_dim, rng);
}

Tensor SpatialTransformer::operator()(const Tensor& x, const Tensor& ctx, std::span<const unsigned char> key_mask) const {
  const int h = x.dim(2), w = x.dim(3);
  Tensor t = ag::nchw_to_nlc(proj_in(norm(x)));
  for (const auto& b : blocks) t = b(t, ctx, key_mask);
  return ag::add(x, proj_out(ag::nlc_to_nchw(t, h, w)));
}

void SpatialTransformer::collect(NamedParams& out, const std::string& prefix) const {
  norm.collect(out, prefix + ".norm");
  proj_in.collect(out, prefix + ".proj_in");
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(out, prefix + ".blocks." + std::to_string(i));
  proj_out.collect(out, prefix + ".proj_out");
}

Tensor timestep_embedding(std::span<const double> t, int dim) {
  if (dim % 2 != 0) throw ValidationError("timestep_embedding: dim must be even");
  const int half = dim / 2;
  std::vector<double> v(t.size() * static_cast<std::size_t>(dim));
  for (std::size_t n = 0; n < t.size(); ++n)
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      v[n * dim + i] = std::cos(t[n] * freq);
      v[n * dim + half + i] = std::sin(t[n] * freq);
    }
  return Tensor::from({static_cast<int>(t.size()), dim}, std::move(v));
}

}  // namespace floorgen::net

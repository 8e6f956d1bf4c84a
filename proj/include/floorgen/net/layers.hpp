#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "floorgen/params.hpp"
#include "floorgen/rng.hpp"
#include "floorgen/tensor.hpp"

namespace floorgen::net {

using ag::Tensor;

struct Conv2d {
  Tensor weight, bias;
  int stride = 1;
  int pad = 0;

  Conv2d() = default;
  Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, Rng& rng);
  /// 1x1 convolution with every weight and bias exactly zero.
  static Conv2d zero(int in_ch, int out_ch);

  Tensor operator()(const Tensor& x) const { return ag::conv2d(x, weight, bias, stride, pad); }
  void collect(NamedParams& out, const std::string& prefix) const;
};

struct Linear {
  Tensor weight, bias;

  Linear() = default;
  Linear(int in_f, int out_f, Rng& rng, bool with_bias = true);

  Tensor operator()(const Tensor& x) const { return ag::linear(x, weight, bias); }
  void collect(NamedParams& out, const std::string& prefix) const;
};

struct GroupNorm {
  Tensor gamma, beta;
  int groups = 1;

  GroupNorm() = default;
  GroupNorm(int channels, int groups);
  Tensor operator()(const Tensor& x) const { return ag::group_norm(x, groups, gamma, beta); }
  void collect(NamedParams& out, const std::string& prefix) const;
};

struct LayerNorm {
  Tensor gamma, beta;

  LayerNorm() = default;
  explicit LayerNorm(int dim);
  Tensor operator()(const Tensor& x) const { return ag::layer_norm(x, gamma, beta); }
  void collect(NamedParams& out, const std::string& prefix) const;
};

/// Largest group count <= preferred that divides channels.
int norm_groups(int channels, int preferred);

/// GN-SiLU-conv twice with an additive skip; optionally injects a per-channel
/// timestep projection between the two convolutions.
struct ResBlock {
  GroupNorm norm1, norm2;
  Conv2d conv1, conv2;
  std::optional<Linear> time_proj;
  std::optional<Conv2d> skip;

  ResBlock() = default;
  ResBlock(int in_ch, int out_ch, int time_dim, int groups, Rng& rng);

  Tensor operator()(const Tensor& x, const Tensor& temb) const;
  void collect(NamedParams& out, const std::string& prefix) const;
};

/// Projections for single-head scaled dot-product attention.
///   Q = W_Q x, K = W_K ctx, V = W_V ctx, out = W_O softmax(QK^T/sqrt(d)) V + b_O
/// W_Q: d x d_query, W_K and W_V: d x d_ctx, W_O: d_query x d.
struct AttentionWeights {
  Tensor w_q, w_k, w_v, w_o, b_o;
};

/// x [N, L_q, d_query], ctx [N, L_k, d_ctx]. key_mask (N*L_k bytes, may be
/// empty) marks which context rows are real tokens. When `weights_out` is
/// given, the attention matrix [N, L_q, L_k] is stored there.
Tensor cross_attention(const Tensor& x, const Tensor& ctx, const AttentionWeights& w,
                       std::span<const unsigned char> key_mask = {}, Tensor* weights_out = nullptr);

struct Attention {
  AttentionWeights w;

  Attention() = default;
  Attention(int query_dim, int context_dim, Rng& rng);
  Tensor operator()(const Tensor& x, const Tensor& ctx, std::span<const unsigned char> key_mask = {}) const {
    return cross_attention(x, ctx, w, key_mask);
  }
  void collect(NamedParams& out, const std::string& prefix) const;
};

/// Pre-norm block: self-attention, cross-attention on the text context, GELU
/// feed-forward; each with a residual connection.
struct TransformerBlock {
  LayerNorm norm1, norm2, norm3;
  Attention self_attn, cross_attn;
  Linear ff_in, ff_out;

  TransformerBlock() = default;
  TransformerBlock(int dim, int context_dim, Rng& rng);
  Tensor operator()(const Tensor& x, const Tensor& ctx, std::span<const unsigned char> key_mask) const;
  void collect(NamedParams& out, const std::string& prefix) const;
};

/// Flattens a feature map to tokens, runs `depth` transformer blocks and
/// projects back with a residual around the whole stack.
struct SpatialTransformer {
  GroupNorm norm;
  Conv2d proj_in, proj_out;
  std::vector<TransformerBlock> blocks;

  SpatialTransformer() = default;
  SpatialTransformer(int channels, int context_dim, int depth, int groups, Rng& rng);
  Tensor operator()(const Tensor& x, const Tensor& ctx, std::span<const unsigned char> key_mask) const;
  void collect(NamedParams& out, const std::string& prefix) const;
};

/// Sinusoidal embedding of (possibly fractional) timesteps, [N, dim].
Tensor timestep_embedding(std::span<const double> t, int dim);

}  // namespace floorgen::net

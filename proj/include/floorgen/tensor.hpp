#pragma once

// Minimal reverse-mode autodiff over dense double tensors.
//
// Values are stored in 64-bit. A thread-local precision mode can round every
// op result to binary32 to emulate 32-bit storage.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "floorgen/errors.hpp"

namespace floorgen {

namespace ag {

using Shape = std::vector<int>;

std::size_t numel(const Shape& s);
std::string to_string(const Shape& s);

enum class Precision { f64, f32 };

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape.at(static_cast<std::size_t>(i < 0 ? static_cast<int>(n_->shape.size()) + i : i)); }
  std::size_t size() const { return n_->value.size(); }

  std::span<const double> data() const { return n_->value; }
  std::span<double> mutable_data() { return n_->value; }
  std::span<const double> grad() const { return n_->grad; }
  std::span<double> mutable_grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  double item() const;

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool r) { n_->requires_grad = r; }
  void zero_grad() { n_->grad.assign(n_->value.size(), 0.0); }

  /// Detached deep copy of the value.
  Tensor clone() const;
  /// Shares nothing with the graph; same storage copy, no grad.
  Tensor detach() const { return clone(); }

  /// Back-propagates d(this)/d(leaf) into every reachable leaf's grad.
  /// Requires a single-element tensor.
  void backward() const;

  Node* node() const { return n_.get(); }
  const std::shared_ptr<Node>& ptr() const { return n_; }

 private:
  std::shared_ptr<Node> n_;
};

bool grad_enabled();
Precision precision();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class PrecisionGuard {
 public:
  explicit PrecisionGuard(Precision p);
  ~PrecisionGuard();
  PrecisionGuard(const PrecisionGuard&) = delete;
  PrecisionGuard& operator=(const PrecisionGuard&) = delete;

 private:
  Precision prev_;
};

// Elementwise.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor silu(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

// Shape.
Tensor reshape(const Tensor& a, Shape shape);
/// [N,C,H,W] -> [N,H*W,C]
Tensor nchw_to_nlc(const Tensor& a);
/// [N,L,C] -> [N,C,h,w] with L = h*w
Tensor nlc_to_nchw(const Tensor& a, int h, int w);
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_channels(const Tensor& a, int start, int count);
/// Stack single-sample tensors [1,...] along the batch axis.
Tensor concat_batch(const std::vector<Tensor>& parts);
Tensor slice_batch(const Tensor& a, int start, int count);

// Reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Mean of (a - b)^2 over all elements.
Tensor mse(const Tensor& a, const Tensor& b);
/// [N,C,H,W] -> [N,C]
Tensor spatial_mean(const Tensor& a);

// Layers.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor upsample_nearest2x(const Tensor& x);
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// Normalizes over the last axis.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// x [..., K] times w[Out, K]^T plus b[Out] (b may be undefined).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
/// Batched matmul over [B,M,K]x[B,K,N]; transposes apply to the last two axes.
Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
/// Softmax over the last axis of [B,M,L]. key_mask (length B*L, may be empty)
/// zeroes the probability of masked keys.
Tensor softmax_last(const Tensor& x, std::span<const unsigned char> key_mask = {});
/// Adds v[N,C] to every spatial position of x[N,C,H,W].
Tensor add_channel_bias(const Tensor& x, const Tensor& v);

}  // namespace ag
}  // namespace floorgen

#include "floorgen/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace floorgen::ag {
namespace {

thread_local bool g_grad_enabled = true;
thread_local Precision g_precision = Precision::f64;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void round_if_f32(std::vector<double>& v) {
  if (g_precision != Precision::f32) return;
  for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ValidationError(msg);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ValidationError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

// Builds the output node. Parents and the backward closure are only recorded
// when gradients are enabled and some input needs them.
Tensor make_result(Shape shape, std::vector<double> value, std::initializer_list<Tensor> inputs,
                   std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  round_if_f32(n->value);
  if (g_grad_enabled) {
    bool any = false;
    for (const Tensor& t : inputs)
      if (t.defined() && t.requires_grad()) any = true;
    if (any) {
      n->requires_grad = true;
      for (const Tensor& t : inputs) n->parents.push_back(t.defined() ? t.ptr() : nullptr);
      n->backward_fn = std::move(fn);
    }
  }
  return Tensor(std::move(n));
}

// Parent i if it participates in backprop, else nullptr.
Node* grad_target(Node& self, std::size_t i) {
  Node* p = self.parents[i].get();
  if (p == nullptr || !p->requires_grad) return nullptr;
  p->ensure_grad();
  return p;
}

template <typename F, typename G>
Tensor unary(const Tensor& a, F f, G df) {
  std::vector<double> out(a.size());
  const auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_result(a.shape(), std::move(out), {a}, [df](Node& self) {
    Node* pa = grad_target(self, 0);
    if (!pa) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      pa->grad[i] += self.grad[i] * df(pa->value[i], self.value[i]);
  });
}

}  // namespace

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }
Precision precision() { return g_precision; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

PrecisionGuard::PrecisionGuard(Precision p) : prev_(g_precision) { g_precision = p; }
PrecisionGuard::~PrecisionGuard() { g_precision = prev_; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value.assign(numel(shape), v);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel(shape) != values.size())
    throw ValidationError("Tensor::from: " + std::to_string(values.size()) + " values for shape " + to_string(shape));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

double Tensor::item() const {
  if (size() != 1) throw ValidationError("item() on tensor of shape " + to_string(shape()));
  return n_->value[0];
}

Tensor Tensor::clone() const { return from(shape(), n_->value, false); }

void Tensor::backward() const {
  if (size() != 1) throw ValidationError("backward() needs a scalar, got " + to_string(shape()));
  if (!n_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{n_.get(), 0}};
  seen.insert(n_.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (p && p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // Intermediate grads start from zero on every call; leaves accumulate.
  for (Node* node : order)
    if (node->backward_fn) node->grad.assign(node->value.size(), 0.0);
  n_->ensure_grad();
  n_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn) node->backward_fn(*node);
  }
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (Node* p = grad_target(self, k))
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (Node* p = grad_target(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    if (Node* p = grad_target(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    Node* pa = self.parents[0].get();
    Node* pb = self.parents[1].get();
    if (Node* p = grad_target(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * pb->value[i];
    if (Node* p = grad_target(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * pa->value[i];
  });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor silu(const Tensor& a) {
  return unary(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor relu(const Tensor& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  // tanh approximation
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x))); },
      [](double x, double) {
        const double u = k * (x + 0.044715 * x * x * x);
        const double th = std::tanh(u);
        const double du = k * (1.0 + 3.0 * 0.044715 * x * x);
        return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
      });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor abs(const Tensor& a) {
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------- shape

Tensor reshape(const Tensor& a, Shape shape) {
  require(numel(shape) == a.size(), "reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), {a}, [](Node& self) {
    if (Node* p = grad_target(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
  });
}

Tensor nchw_to_nlc(const Tensor& a) {
  require(a.shape().size() == 4, "nchw_to_nlc: expected 4-D input");
  const int n = a.dim(0), c = a.dim(1), l = a.dim(2) * a.dim(3);
  std::vector<double> out(a.size());
  const auto in = a.data();
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int p = 0; p < l; ++p) out[(static_cast<std::size_t>(b) * l + p) * c + ch] = in[(static_cast<std::size_t>(b) * c + ch) * l + p];
  return make_result({n, l, c}, std::move(out), {a}, [n, c, l](Node& self) {
    Node* pa = grad_target(self, 0);
    if (!pa) return;
    for (int b = 0; b < n; ++b)
      for (int ch = 0; ch < c; ++ch)
        for (int p = 0; p < l; ++p)
          pa->grad[(static_cast<std::size_t>(b) * c + ch) * l + p] += self.grad[(static_cast<std::size_t>(b) * l + p) * c + ch];
  });
}

Tensor nlc_to_nchw(const Tensor& a, int h, int w) {
  require(a.shape().size() == 3 && a.dim(1) == h * w, "nlc_to_nchw: bad shape " + to_string(a.shape()));
  const int n = a.dim(0), l = a.dim(1), c = a.dim(2);
  std::vector<double> out(a.size());
  const auto in = a.data();
  for (int b = 0; b < n; ++b)
    for (int p = 0; p < l; ++p)
      for (int ch = 0; ch < c; ++ch) out[(static_cast<std::size_t>(b) * c + ch) * l + p] = in[(static_cast<std::size_t>(b) * l + p) * c + ch];
  return make_result({n, c, h, w}, std::move(out), {a}, [n, c, l](Node& self) {
    Node* pa = grad_target(self, 0);
    if (!pa) return;
    for (int b = 0; b < n; ++b)
      for (int p = 0; p < l; ++p)
        for (int ch = 0; ch < c; ++ch)
          pa->grad[(static_cast<std::size_t>(b) * l + p) * c + ch] += self.grad[(static_cast<std::size_t>(b) * c + ch) * l + p];
  });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require(a.shape().size() == 4 && b.shape().size() == 4 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) &&
              a.dim(3) == b.dim(3),
          "concat_channels: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::size_t hw = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
  std::vector<double> out(a.size() + b.size());
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.data().begin() + i * ca * hw, ca * hw, out.begin() + i * (ca + cb) * hw);
    std::copy_n(b.data().begin() + i * cb * hw, cb * hw, out.begin() + (i * (ca + cb) + ca) * hw);
  }
  return make_result({n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {a, b}, [n, ca, cb, hw](Node& self) {
    if (Node* p = grad_target(self, 0))
      for (int i = 0; i < n; ++i)
        for (std::size_t k = 0; k < ca * hw; ++k) p->grad[i * ca * hw + k] += self.grad[i * (ca + cb) * hw + k];
    if (Node* p = grad_target(self, 1))
      for (int i = 0; i < n; ++i)
        for (std::size_t k = 0; k < cb * hw; ++k) p->grad[i * cb * hw + k] += self.grad[(i * (ca + cb) + ca) * hw + k];
  });
}

Tensor slice_channels(const Tensor& a, int start, int count) {
  require(a.shape().size() == 4 && start >= 0 && count > 0 && start + count <= a.dim(1), "slice_channels: out of range");
  const int n = a.dim(0), c = a.dim(1);
  const std::size_t hw = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
  std::vector<double> out(static_cast<std::size_t>(n) * count * hw);
  for (int i = 0; i < n; ++i)
    std::copy_n(a.data().begin() + (i * c + start) * hw, count * hw, out.begin() + i * count * hw);
  return make_result({n, count, a.dim(2), a.dim(3)}, std::move(out), {a}, [n, c, start, count, hw](Node& self) {
    if (Node* p = grad_target(self, 0))
      for (int i = 0; i < n; ++i)
        for (std::size_t k = 0; k < count * hw; ++k) p->grad[(i * c + start) * hw + k] += self.grad[i * count * hw + k];
  });
}

Tensor concat_batch(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_batch: empty");
  Shape s = parts[0].shape();
  int total = 0;
  for (const Tensor& p : parts) {
    Shape ps = p.shape();
    require(ps.size() == s.size() && std::equal(ps.begin() + 1, ps.end(), s.begin() + 1), "concat_batch: shape mismatch");
    total += ps[0];
  }
  std::vector<double> out;
  out.reserve(numel(s) / s[0] * total);
  for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  s[0] = total;
  auto n = std::make_shared<Node>();
  n->shape = s;
  n->value = std::move(out);
  round_if_f32(n->value);
  bool any = false;
  for (const Tensor& p : parts) any = any || p.requires_grad();
  if (g_grad_enabled && any) {
    n->requires_grad = true;
    for (const Tensor& p : parts) n->parents.push_back(p.ptr());
    n->backward_fn = [](Node& self) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < self.parents.size(); ++k) {
        const std::size_t len = self.parents[k]->value.size();
        if (Node* p = grad_target(self, k))
          for (std::size_t i = 0; i < len; ++i) p->grad[i] += self.grad[off + i];
        off += len;
      }
    };
  }
  return Tensor(std::move(n));
}

Tensor slice_batch(const Tensor& a, int start, int count) {
  require(!a.shape().empty() && start >= 0 && count > 0 && start + count <= a.dim(0), "slice_batch: out of range");
  const std::size_t per = a.size() / static_cast<std::size_t>(a.dim(0));
  Shape s = a.shape();
  s[0] = count;
  std::vector<double> out(a.data().begin() + start * per, a.data().begin() + (start + count) * per);
  return make_result(s, std::move(out), {a}, [start, per](Node& self) {
    if (Node* p = grad_target(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[start * per + i] += self.grad[i];
  });
}

// ----------------------------------------------------------------- reductions

Tensor sum(const Tensor& a) {
  const double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
  return make_result({1}, {s}, {a}, [](Node& self) {
    if (Node* p = grad_target(self, 0))
      for (double& g : p->grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.size());
  const double s = std::accumulate(a.data().begin(), a.data().end(), 0.0) * inv;
  return make_result({1}, {s}, {a}, [inv](Node& self) {
    if (Node* p = grad_target(self, 0))
      for (double& g : p->grad) g += self.grad[0] * inv;
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  const double inv = 1.0 / static_cast<double>(a.size());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    s += d * d;
  }
  return make_result({1}, {s * inv}, {a, b}, [inv](Node& self) {
    Node* pa = self.parents[0].get();
    Node* pb = self.parents[1].get();
    const double g = 2.0 * inv * self.grad[0];
    if (Node* p = grad_target(self, 0))
      for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += g * (pa->value[i] - pb->value[i]);
    if (Node* p = grad_target(self, 1))
      for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] -= g * (pa->value[i] - pb->value[i]);
  });
}

Tensor spatial_mean(const Tensor& a) {
  require(a.shape().size() == 4, "spatial_mean: expected 4-D input");
  const int n = a.dim(0), c = a.dim(1);
  const std::size_t hw = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
  std::vector<double> out(static_cast<std::size_t>(n) * c);
  for (std::size_t k = 0; k < out.size(); ++k)
    out[k] = std::accumulate(a.data().begin() + k * hw, a.data().begin() + (k + 1) * hw, 0.0) / static_cast<double>(hw);
  return make_result({n, c}, std::move(out), {a}, [hw](Node& self) {
    if (Node* p = grad_target(self, 0))
      for (std::size_t k = 0; k < self.grad.size(); ++k)
        for (std::size_t i = 0; i < hw; ++i) p->grad[k * hw + i] += self.grad[k] / static_cast<double>(hw);
  });
}

// --------------------------------------------------------------------- layers

namespace {

struct ConvGeom {
  int n, ci, h, w, co, k, stride, pad, ho, wo;
};

void im2col(const double* x, const ConvGeom& g, double* col) {
  const int cols = g.ho * g.wo;
  for (int c = 0; c < g.ci; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        double* row = col + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * cols;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            row[oy * g.wo + ox] =
                (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w) ? x[(static_cast<std::size_t>(c) * g.h + iy) * g.w + ix] : 0.0;
          }
        }
      }
}

void col2im(const double* col, const ConvGeom& g, double* dx) {
  const int cols = g.ho * g.wo;
  for (int c = 0; c < g.ci; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        const double* row = col + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * cols;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) dx[(static_cast<std::size_t>(c) * g.h + iy) * g.w + ix] += row[oy * g.wo + ox];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  require(x.shape().size() == 4 && w.shape().size() == 4, "conv2d: expected 4-D input and weight");
  require(w.dim(1) == x.dim(1) && w.dim(2) == w.dim(3),
          "conv2d: weight " + to_string(w.shape()) + " incompatible with input " + to_string(x.shape()));
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), stride, pad, 0, 0};
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;
  require(g.ho > 0 && g.wo > 0, "conv2d: output would be empty");
  if (b.defined()) require(b.size() == static_cast<std::size_t>(g.co), "conv2d: bias size");

  const int krows = g.ci * g.k * g.k, cols = g.ho * g.wo;
  const bool pointwise = g.k == 1 && stride == 1 && pad == 0;
  std::vector<double> out(static_cast<std::size_t>(g.n) * g.co * cols);
  std::vector<double> col(pointwise ? 0 : static_cast<std::size_t>(krows) * cols);
  CMapMat W(w.data().data(), g.co, krows);
  for (int i = 0; i < g.n; ++i) {
    const double* xi = x.data().data() + static_cast<std::size_t>(i) * g.ci * g.h * g.w;
    const double* src = xi;
    if (!pointwise) {
      im2col(xi, g, col.data());
      src = col.data();
    }
    MapMat O(out.data() + static_cast<std::size_t>(i) * g.co * cols, g.co, cols);
    O.noalias() = W * CMapMat(src, krows, cols);
    if (b.defined())
      for (int c = 0; c < g.co; ++c) O.row(c).array() += b.data()[c];
  }

  return make_result({g.n, g.co, g.ho, g.wo}, std::move(out), {x, w, b}, [g, krows, cols, pointwise](Node& self) {
    Node* px = self.parents[0].get();
    Node* pw = self.parents[1].get();
    Node* dx = grad_target(self, 0);
    Node* dw = grad_target(self, 1);
    Node* db = self.parents[2] ? grad_target(self, 2) : nullptr;
    CMapMat W(pw->value.data(), g.co, krows);
    std::vector<double> col(pointwise ? 0 : static_cast<std::size_t>(krows) * cols);
    std::vector<double> dcol(pointwise ? 0 : static_cast<std::size_t>(krows) * cols);
    for (int i = 0; i < g.n; ++i) {
      CMapMat dO(self.grad.data() + static_cast<std::size_t>(i) * g.co * cols, g.co, cols);
      const std::size_t xoff = static_cast<std::size_t>(i) * g.ci * g.h * g.w;
      if (dw) {
        const double* src = px->value.data() + xoff;
        if (!pointwise) {
          im2col(src, g, col.data());
          src = col.data();
        }
        MapMat(dw->grad.data(), g.co, krows).noalias() += dO * CMapMat(src, krows, cols).transpose();
      }
      if (db)
        for (int c = 0; c < g.co; ++c) db->grad[c] += dO.row(c).sum();
      if (dx) {
        if (pointwise) {
          MapMat(dx->grad.data() + xoff, krows, cols).noalias() += W.transpose() * dO;
        } else {
          MapMat(dcol.data(), krows, cols).noalias() = W.transpose() * dO;
          col2im(dcol.data(), g, dx->grad.data() + xoff);
        }
      }
    }
  });
}

Tensor upsample_nearest2x(const Tensor& x) {
  require(x.shape().size() == 4, "upsample_nearest2x: expected 4-D input");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int H = 2 * h, W = 2 * w;
  std::vector<double> out(static_cast<std::size_t>(n) * c * H * W);
  for (int p = 0; p < n * c; ++p)
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx)
        out[(static_cast<std::size_t>(p) * H + y) * W + xx] = x.data()[(static_cast<std::size_t>(p) * h + y / 2) * w + xx / 2];
  return make_result({n, c, H, W}, std::move(out), {x}, [n, c, h, w, H, W](Node& self) {
    Node* px = grad_target(self, 0);
    if (!px) return;
    for (int p = 0; p < n * c; ++p)
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx)
          px->grad[(static_cast<std::size_t>(p) * h + y / 2) * w + xx / 2] += self.grad[(static_cast<std::size_t>(p) * H + y) * W + xx];
  });
}

namespace {

// Normalizes `rows` contiguous segments of length `len`; the affine parameter
// index for element j of row r is param_index(r, j).
template <typename ParamIndex>
Tensor normalize_rows(const Tensor& x, int rows, std::size_t len, const Tensor& gamma, const Tensor& beta, double eps,
                      ParamIndex param_index) {
  std::vector<double> xhat(x.size()), invstd(static_cast<std::size_t>(rows)), out(x.size());
  for (int r = 0; r < rows; ++r) {
    const double* src = x.data().data() + r * len;
    double m = 0.0;
    for (std::size_t j = 0; j < len; ++j) m += src[j];
    m /= static_cast<double>(len);
    double v = 0.0;
    for (std::size_t j = 0; j < len; ++j) v += (src[j] - m) * (src[j] - m);
    v /= static_cast<double>(len);
    const double is = 1.0 / std::sqrt(v + eps);
    invstd[r] = is;
    for (std::size_t j = 0; j < len; ++j) {
      const std::size_t k = r * len + j;
      xhat[k] = (src[j] - m) * is;
      const std::size_t pi = param_index(r, j);
      out[k] = xhat[k] * gamma.data()[pi] + beta.data()[pi];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [rows, len, xhat = std::move(xhat), invstd = std::move(invstd), param_index](Node& self) {
                       Node* dx = grad_target(self, 0);
                       Node* dg = grad_target(self, 1);
                       Node* dbeta = grad_target(self, 2);
                       const std::vector<double>& g = self.parents[1]->value;
                       std::vector<double> dxhat(len);
                       for (int r = 0; r < rows; ++r) {
                         double s1 = 0.0, s2 = 0.0;
                         for (std::size_t j = 0; j < len; ++j) {
                           const std::size_t k = r * len + j;
                           const std::size_t pi = param_index(r, j);
                           const double dy = self.grad[k];
                           if (dg) dg->grad[pi] += dy * xhat[k];
                           if (dbeta) dbeta->grad[pi] += dy;
                           dxhat[j] = dy * g[pi];
                           s1 += dxhat[j];
                           s2 += dxhat[j] * xhat[k];
                         }
                         if (!dx) continue;
                         const double inv_len = 1.0 / static_cast<double>(len);
                         for (std::size_t j = 0; j < len; ++j) {
                           const std::size_t k = r * len + j;
                           dx->grad[k] += invstd[r] * (dxhat[j] - inv_len * s1 - xhat[k] * inv_len * s2);
                         }
                       }
                     });
}

}  // namespace

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, double eps) {
  require(x.shape().size() == 4, "group_norm: expected 4-D input");
  const int n = x.dim(0), c = x.dim(1);
  require(groups > 0 && c % groups == 0, "group_norm: channels not divisible by groups");
  require(gamma.size() == static_cast<std::size_t>(c) && beta.size() == static_cast<std::size_t>(c), "group_norm: affine size");
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const int cpg = c / groups;
  const std::size_t len = cpg * hw;
  return normalize_rows(x, n * groups, len, gamma, beta, eps, [groups, cpg, hw](int r, std::size_t j) {
    return static_cast<std::size_t>((r % groups) * cpg) + j / hw;
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const int d = x.dim(-1);
  require(gamma.size() == static_cast<std::size_t>(d) && beta.size() == static_cast<std::size_t>(d), "layer_norm: affine size");
  const int rows = static_cast<int>(x.size() / d);
  return normalize_rows(x, rows, static_cast<std::size_t>(d), gamma, beta, eps, [](int, std::size_t j) { return j; });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(w.shape().size() == 2, "linear: weight must be 2-D");
  const int k = x.dim(-1), out_f = w.dim(0);
  require(w.dim(1) == k, "linear: weight " + to_string(w.shape()) + " vs input " + to_string(x.shape()));
  if (b.defined()) require(b.size() == static_cast<std::size_t>(out_f), "linear: bias size");
  const int m = static_cast<int>(x.size() / k);
  Shape s = x.shape();
  s.back() = out_f;
  std::vector<double> out(static_cast<std::size_t>(m) * out_f);
  MapMat Y(out.data(), m, out_f);
  Y.noalias() = CMapMat(x.data().data(), m, k) * CMapMat(w.data().data(), out_f, k).transpose();
  if (b.defined())
    for (int r = 0; r < m; ++r)
      for (int c = 0; c < out_f; ++c) Y(r, c) += b.data()[c];
  return make_result(std::move(s), std::move(out), {x, w, b}, [m, k, out_f](Node& self) {
    CMapMat dY(self.grad.data(), m, out_f);
    if (Node* dx = grad_target(self, 0))
      MapMat(dx->grad.data(), m, k).noalias() += dY * CMapMat(self.parents[1]->value.data(), out_f, k);
    if (Node* dw = grad_target(self, 1))
      MapMat(dw->grad.data(), out_f, k).noalias() += dY.transpose() * CMapMat(self.parents[0]->value.data(), m, k);
    if (self.parents[2])
      if (Node* db = grad_target(self, 2))
        for (int c = 0; c < out_f; ++c) db->grad[c] += dY.col(c).sum();
  });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  require(a.shape().size() == 3 && b.shape().size() == 3 && a.dim(0) == b.dim(0), "bmm: expected matching 3-D inputs");
  const int B = a.dim(0);
  const int ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bc = b.dim(2);
  const int m = trans_a ? ac : ar, k = trans_a ? ar : ac;
  const int kb = trans_b ? bc : br, n = trans_b ? br : bc;
  require(k == kb, "bmm: inner dimensions " + to_string(a.shape()) + " x " + to_string(b.shape()));
  std::vector<double> out(static_cast<std::size_t>(B) * m * n);
  for (int i = 0; i < B; ++i) {
    CMapMat A(a.data().data() + static_cast<std::size_t>(i) * ar * ac, ar, ac);
    CMapMat Bm(b.data().data() + static_cast<std::size_t>(i) * br * bc, br, bc);
    MapMat C(out.data() + static_cast<std::size_t>(i) * m * n, m, n);
    if (!trans_a && !trans_b) C.noalias() = A * Bm;
    else if (!trans_a && trans_b) C.noalias() = A * Bm.transpose();
    else if (trans_a && !trans_b) C.noalias() = A.transpose() * Bm;
    else C.noalias() = A.transpose() * Bm.transpose();
  }
  return make_result({B, m, n}, std::move(out), {a, b}, [=](Node& self) {
    const double* av = self.parents[0]->value.data();
    const double* bv = self.parents[1]->value.data();
    Node* da = grad_target(self, 0);
    Node* db = grad_target(self, 1);
    for (int i = 0; i < B; ++i) {
      CMapMat dC(self.grad.data() + static_cast<std::size_t>(i) * m * n, m, n);
      CMapMat A(av + static_cast<std::size_t>(i) * ar * ac, ar, ac);
      CMapMat Bm(bv + static_cast<std::size_t>(i) * br * bc, br, bc);
      // op(A) = A or A^T with shape m x k; op(B) likewise k x n.
      if (da) {
        MapMat dA(da->grad.data() + static_cast<std::size_t>(i) * ar * ac, ar, ac);
        // d op(A) = dC * op(B)^T
        if (!trans_a) {
          if (!trans_b) dA.noalias() += dC * Bm.transpose();
          else dA.noalias() += dC * Bm;
        } else {
          if (!trans_b) dA.noalias() += Bm * dC.transpose();
          else dA.noalias() += Bm.transpose() * dC.transpose();
        }
      }
      if (db) {
        MapMat dB(db->grad.data() + static_cast<std::size_t>(i) * br * bc, br, bc);
        // d op(B) = op(A)^T * dC
        if (!trans_b) {
          if (!trans_a) dB.noalias() += A.transpose() * dC;
          else dB.noalias() += A * dC;
        } else {
          if (!trans_a) dB.noalias() += dC.transpose() * A;
          else dB.noalias() += dC.transpose() * A.transpose();
        }
      }
    }
  });
}

Tensor softmax_last(const Tensor& x, std::span<const unsigned char> key_mask) {
  require(x.shape().size() == 3, "softmax_last: expected [B,M,L]");
  const int B = x.dim(0), M = x.dim(1), L = x.dim(2);
  require(key_mask.empty() || key_mask.size() == static_cast<std::size_t>(B) * L, "softmax_last: key mask size");
  std::vector<double> out(x.size());
  for (int b = 0; b < B; ++b)
    for (int r = 0; r < M; ++r) {
      const std::size_t off = (static_cast<std::size_t>(b) * M + r) * L;
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < L; ++j)
        if (key_mask.empty() || key_mask[b * L + j]) mx = std::max(mx, x.data()[off + j]);
      require(std::isfinite(mx), "softmax_last: every key masked");
      double s = 0.0;
      for (int j = 0; j < L; ++j) {
        const bool on = key_mask.empty() || key_mask[b * L + j];
        out[off + j] = on ? std::exp(x.data()[off + j] - mx) : 0.0;
        s += out[off + j];
      }
      for (int j = 0; j < L; ++j) out[off + j] /= s;
    }
  return make_result(x.shape(), std::move(out), {x}, [L](Node& self) {
    Node* px = grad_target(self, 0);
    if (!px) return;
    const std::size_t rows = self.value.size() / L;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * L;
      const double* dy = self.grad.data() + r * L;
      double dot = 0.0;
      for (int j = 0; j < L; ++j) dot += y[j] * dy[j];
      for (int j = 0; j < L; ++j) px->grad[r * L + j] += y[j] * (dy[j] - dot);
    }
  });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& v) {
  require(x.shape().size() == 4 && v.shape().size() == 2 && v.dim(0) == x.dim(0) && v.dim(1) == x.dim(1),
          "add_channel_bias: " + to_string(x.shape()) + " + " + to_string(v.shape()));
  const std::size_t nc = static_cast<std::size_t>(x.dim(0)) * x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  std::vector<double> out(x.size());
  for (std::size_t k = 0; k < nc; ++k)
    for (std::size_t i = 0; i < hw; ++i) out[k * hw + i] = x.data()[k * hw + i] + v.data()[k];
  return make_result(x.shape(), std::move(out), {x, v}, [nc, hw](Node& self) {
    if (Node* p = grad_target(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    if (Node* p = grad_target(self, 1))
      for (std::size_t k = 0; k < nc; ++k)
        for (std::size_t i = 0; i < hw; ++i) p->grad[k] += self.grad[k * hw + i];
  });
}

}  // namespace floorgen::ag

#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "floorgen/rng.hpp"
#include "floorgen/tensor.hpp"

namespace floorgen {

/// Named view over a module's parameters, in registration order.
struct NamedParams {
  std::vector<std::pair<std::string, ag::Tensor>> items;

  void add(const std::string& name, const ag::Tensor& t) { items.emplace_back(name, t); }
  std::vector<ag::Tensor> tensors() const;
  std::size_t count() const;
  void set_requires_grad(bool r);
  void zero_grad();
  /// Prefixes every name with `prefix.`
  NamedParams prefixed(const std::string& prefix) const;
  void append(const NamedParams& other);
};

/// Copies values by name. Every name in `dst` must exist in `src` with the
/// same shape.
void copy_values(const NamedParams& src, NamedParams& dst);

/// SHA-256 hex digest over sorted (name, shape, raw little-endian values).
std::string params_checksum(const NamedParams& p);

/// Largest |a - b| across matching names.
double max_abs_diff(const NamedParams& a, const NamedParams& b);

namespace init {
ag::Tensor param(ag::Shape shape, Rng& rng, double std_dev);
/// Kaiming-uniform style fan-in scaling.
ag::Tensor fan_in(ag::Shape shape, int fan_in, Rng& rng);
ag::Tensor zeros(ag::Shape shape);
ag::Tensor ones(ag::Shape shape);
}  // namespace init

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global grad-norm clip; 0 disables.
  double clip_norm = 1.0;
};

class Adam {
 public:
  Adam(std::vector<ag::Tensor> params, AdamConfig cfg);

  /// Applies one update from the accumulated grads, then zeroes them.
  void step();
  void zero_grad();
  long steps() const { return t_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<ag::Tensor> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace floorgen

#include "floorgen/params.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

#include "floorgen/hash.hpp"

namespace floorgen {

std::vector<ag::Tensor> NamedParams::tensors() const {
  std::vector<ag::Tensor> out;
  out.reserve(items.size());
  for (const auto& [_, t] : items) out.push_back(t);
  return out;
}

std::size_t NamedParams::count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : items) n += t.size();
  return n;
}

void NamedParams::set_requires_grad(bool r) {
  for (auto& [_, t] : items) t.set_requires_grad(r);
}

void NamedParams::zero_grad() {
  for (auto& [_, t] : items) t.zero_grad();
}

NamedParams NamedParams::prefixed(const std::string& prefix) const {
  NamedParams out;
  for (const auto& [name, t] : items) out.add(prefix + "." + name, t);
  return out;
}

void NamedParams::append(const NamedParams& other) {
  items.insert(items.end(), other.items.begin(), other.items.end());
}

void copy_values(const NamedParams& src, NamedParams& dst) {
  std::map<std::string, ag::Tensor> by_name(src.items.begin(), src.items.end());
  for (auto& [name, t] : dst.items) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ValidationError("missing parameter '" + name + "'");
    if (it->second.shape() != t.shape())
      throw ValidationError("parameter '" + name + "' has shape " + ag::to_string(it->second.shape()) + ", expected " +
                            ag::to_string(t.shape()));
    std::copy(it->second.data().begin(), it->second.data().end(), t.mutable_data().begin());
  }
}

std::string params_checksum(const NamedParams& p) {
  std::vector<const std::pair<std::string, ag::Tensor>*> sorted;
  for (const auto& item : p.items) sorted.push_back(&item);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->first < b->first; });
  Sha256 h;
  for (const auto* item : sorted) {
    h.update(item->first);
    h.update(ag::to_string(item->second.shape()));
    static_assert(std::endian::native == std::endian::little, "checksum assumes little-endian doubles");
    const auto d = item->second.data();
    h.update(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(d.data()), d.size_bytes()));
  }
  return h.hex();
}

double max_abs_diff(const NamedParams& a, const NamedParams& b) {
  std::map<std::string, ag::Tensor> by_name(b.items.begin(), b.items.end());
  double m = 0.0;
  for (const auto& [name, t] : a.items) {
    auto it = by_name.find(name);
    if (it == by_name.end() || it->second.shape() != t.shape())
      throw ValidationError("max_abs_diff: parameter '" + name + "' missing or reshaped");
    for (std::size_t i = 0; i < t.size(); ++i) m = std::max(m, std::abs(t.data()[i] - it->second.data()[i]));
  }
  return m;
}

namespace init {

ag::Tensor param(ag::Shape shape, Rng& rng, double std_dev) {
  std::vector<double> v(ag::numel(shape));
  for (double& x : v) x = std_dev * rng.normal();
  return ag::Tensor::from(std::move(shape), std::move(v), true);
}

ag::Tensor fan_in(ag::Shape shape, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(ag::numel(shape));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return ag::Tensor::from(std::move(shape), std::move(v), true);
}

ag::Tensor zeros(ag::Shape shape) { return ag::Tensor::zeros(std::move(shape), true); }
ag::Tensor ones(ag::Shape shape) { return ag::Tensor::full(std::move(shape), 1.0, true); }

}  // namespace init

Adam::Adam(std::vector<ag::Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Adam::step() {
  ++t_;
  double scale = 1.0;
  if (cfg_.clip_norm > 0) {
    double sq = 0.0;
    for (auto& p : params_)
      for (double g : p.mutable_grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
  }
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto w = params_[k].mutable_data();
    auto g = params_[k].mutable_grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] * scale;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      w[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
    }
    std::fill(g.begin(), g.end(), 0.0);
  }
}

}  // namespace floorgen

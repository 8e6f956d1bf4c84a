#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "floorgen/net/text.hpp"
#include "floorgen/rng.hpp"
#include "floorgen/tensor.hpp"

namespace floorgen::diffusion {

using ag::Tensor;

/// Variance schedule. Timesteps are 1-based: t in {1..T}; index t-1 in the
/// tables. alpha_bar(0) is defined as 1.
struct NoiseSchedule {
  int T = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  double abar(int t) const;
  nlohmann::json to_json() const;
  static NoiseSchedule from_json(const nlohmann::json& j);
};

/// Linear beta from beta_start to beta_end over T steps.
NoiseSchedule make_noise_schedule(int T, double beta_start, double beta_end);

struct LatentState {
  Tensor z;
  std::vector<int> t;
};

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, one timestep per sample.
/// t = 0 returns z0.
LatentState forward_diffuse(const Tensor& z0, std::span<const int> t, const Tensor& eps, const NoiseSchedule& schedule);
LatentState forward_diffuse(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& schedule);

/// Conditions of p(x | y1, y2). `mask` is the footprint [N, 1, H, W] in
/// {0, 1}; undefined for text-only models.
struct Conditioning {
  net::TextBatch text;
  Tensor mask;
};

/// Anything that predicts the added noise.
class EpsModel {
 public:
  virtual ~EpsModel() = default;
  virtual Tensor predict_eps(const Tensor& z_t, std::span<const int> t, const Conditioning& cond) const = 0;
};

struct LossReport {
  double value = 0.0;
  int stage = 1;
  int batch_size = 0;
};

struct LossResult {
  /// Scalar graph node for backprop.
  Tensor loss;
  LossReport report;
};

/// Mean over batch and elements of (eps - eps_theta(z_t, t, y1))^2 with
/// t ~ U{1..T} and eps ~ N(0, I) drawn from rng.
LossResult stage1_loss(const EpsModel& model, const Tensor& z0, const net::TextBatch& y1, const NoiseSchedule& schedule,
                       Rng& rng);
/// As stage1_loss with the footprint condition y2 passed to the model.
LossResult stage2_loss(const EpsModel& controlled, const Tensor& z0, const net::TextBatch& y1, const Tensor& y2,
                       const NoiseSchedule& schedule, Rng& rng);

/// Strided, descending timesteps used by the sampler; always starts at T.
std::vector<int> sampling_timesteps(int T, int steps);

/// Deterministic DDIM recursion (eta = 0) from z_T ~ N(0, I) seeded by
/// `seed`. Returns the final z0 estimate in latent space.
Tensor sample(const EpsModel& model, const ag::Shape& latent_shape, const Conditioning& cond, const NoiseSchedule& schedule,
              int steps, std::uint64_t seed);

/// Same recursion from a caller-provided z_T.
Tensor sample_from(const EpsModel& model, Tensor z_T, const Conditioning& cond, const NoiseSchedule& schedule, int steps);

}  // namespace floorgen::diffusion

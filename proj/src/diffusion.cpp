#include "floorgen/diffusion.hpp"

#include <cmath>
#include <string>

namespace floorgen::diffusion {

double NoiseSchedule::abar(int t) const {
  if (t == 0) return 1.0;
  if (t < 1 || t > T) throw ValidationError("timestep " + std::to_string(t) + " outside 1.." + std::to_string(T));
  return alpha_bar[static_cast<std::size_t>(t - 1)];
}

nlohmann::json NoiseSchedule::to_json() const { return {{"T", T}, {"beta_start", beta_start}, {"beta_end", beta_end}}; }

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
  return make_noise_schedule(j.at("T").get<int>(), j.at("beta_start").get<double>(), j.at("beta_end").get<double>());
}

NoiseSchedule make_noise_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw ValidationError("noise schedule: T must be >= 1, got " + std::to_string(T));
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ValidationError("noise schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.beta.resize(static_cast<std::size_t>(T));
  s.alpha.resize(static_cast<std::size_t>(T));
  s.alpha_bar.resize(static_cast<std::size_t>(T));
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
    s.beta[i] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[i] = 1.0 - s.beta[i];
    prod *= s.alpha[i];
    s.alpha_bar[i] = prod;
  }
  return s;
}

LatentState forward_diffuse(const Tensor& z0, std::span<const int> t, const Tensor& eps, const NoiseSchedule& schedule) {
  if (z0.shape() != eps.shape())
    throw ValidationError("forward_diffuse: eps " + ag::to_string(eps.shape()) + " does not match z0 " + ag::to_string(z0.shape()));
  if (z0.shape().empty() || static_cast<int>(t.size()) != z0.dim(0))
    throw ValidationError("forward_diffuse: need one timestep per sample");
  const std::size_t per = z0.size() / t.size();
  std::vector<double> a(z0.size()), b(z0.size());
  for (std::size_t n = 0; n < t.size(); ++n) {
    const double ab = schedule.abar(t[n]);
    std::fill_n(a.begin() + n * per, per, std::sqrt(ab));
    std::fill_n(b.begin() + n * per, per, std::sqrt(1.0 - ab));
  }
  LatentState s;
  s.t.assign(t.begin(), t.end());
  s.z = ag::add(ag::mul(Tensor::from(z0.shape(), std::move(a)), z0), ag::mul(Tensor::from(z0.shape(), std::move(b)), eps));
  return s;
}

LatentState forward_diffuse(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
  std::vector<int> ts(static_cast<std::size_t>(z0.shape().empty() ? 1 : z0.dim(0)), t);
  return forward_diffuse(z0, ts, eps, schedule);
}

namespace {

LossResult denoising_loss(const EpsModel& model, const Tensor& z0, const Conditioning& cond, const NoiseSchedule& schedule,
                          Rng& rng, int stage) {
  if (z0.shape().size() != 4) throw ValidationError("loss: z0 must be [N,c,h,w]");
  const int n = z0.dim(0);
  if (cond.text.batch() != n) throw ValidationError("loss: text batch does not match z0 batch");
  std::vector<int> t(static_cast<std::size_t>(n));
  for (int& ti : t) ti = static_cast<int>(rng.uniform_int(1, schedule.T));
  const Tensor eps = Tensor::from(z0.shape(), rng.normal_vector(z0.size()));
  const LatentState zt = forward_diffuse(z0, t, eps, schedule);
  const Tensor pred = model.predict_eps(zt.z, zt.t, cond);
  if (pred.shape() != z0.shape())
    throw ValidationError("loss: model output " + ag::to_string(pred.shape()) + " does not match latent " + ag::to_string(z0.shape()));
  LossResult r;
  r.loss = ag::mse(pred, eps);
  r.report = LossReport{r.loss.item(), stage, n};
  return r;
}

}  // namespace

LossResult stage1_loss(const EpsModel& model, const Tensor& z0, const net::TextBatch& y1, const NoiseSchedule& schedule, Rng& rng) {
  return denoising_loss(model, z0, Conditioning{y1, {}}, schedule, rng, 1);
}

LossResult stage2_loss(const EpsModel& controlled, const Tensor& z0, const net::TextBatch& y1, const Tensor& y2,
                       const NoiseSchedule& schedule, Rng& rng) {
  if (!y2.defined()) throw ValidationError("stage2_loss: footprint condition is required");
  if (y2.shape().size() != 4 || y2.dim(0) != z0.dim(0)) throw ValidationError("stage2_loss: mask must be [N,1,H,W]");
  return denoising_loss(controlled, z0, Conditioning{y1, y2}, schedule, rng, 2);
}

std::vector<int> sampling_timesteps(int T, int steps) {
  if (steps < 1 || steps > T)
    throw ValidationError("sample: steps must be in [1, " + std::to_string(T) + "], got " + std::to_string(steps));
  std::vector<int> ts;
  ts.reserve(static_cast<std::size_t>(steps));
  for (int k = 0; k < steps; ++k) ts.push_back(T - static_cast<int>((static_cast<long long>(k) * T) / steps));
  return ts;
}

Tensor sample_from(const EpsModel& model, Tensor z, const Conditioning& cond, const NoiseSchedule& schedule, int steps) {
  const std::vector<int> ts = sampling_timesteps(schedule.T, steps);
  ag::NoGradGuard no_grad;
  const int n = z.dim(0);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    const int t_prev = k + 1 < ts.size() ? ts[k + 1] : 0;
    const double ab = schedule.abar(t), ab_prev = schedule.abar(t_prev);
    const std::vector<int> tv(static_cast<std::size_t>(n), t);
    const Tensor eps = model.predict_eps(z, tv, cond);
    const auto zv = z.data();
    const auto ev = eps.data();
    std::vector<double> next(z.size());
    const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    const double sa_prev = std::sqrt(ab_prev), sb_prev = std::sqrt(1.0 - ab_prev);
    for (std::size_t i = 0; i < next.size(); ++i) {
      const double x0 = (zv[i] - sb * ev[i]) / sa;
      next[i] = sa_prev * x0 + sb_prev * ev[i];
    }
    z = Tensor::from(z.shape(), std::move(next));
  }
  return z;
}

Tensor sample(const EpsModel& model, const ag::Shape& latent_shape, const Conditioning& cond, const NoiseSchedule& schedule,
              int steps, std::uint64_t seed) {
  sampling_timesteps(schedule.T, steps);
  Rng rng(seed);
  Tensor z = Tensor::from(latent_shape, rng.normal_vector(ag::numel(latent_shape)));
  return sample_from(model, std::move(z), cond, schedule, steps);
}

}  // namespace floorgen::diffusion

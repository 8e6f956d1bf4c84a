#include <doctest.h>

#include <cmath>
#include <memory>

#include "floorgen/control.hpp"
#include "floorgen/diffusion.hpp"
#include "gradcheck.hpp"

using namespace floorgen;
using ag::Tensor;
using diffusion::Conditioning;
using diffusion::make_noise_schedule;
using diffusion::NoiseSchedule;

namespace {

// Knows z0, so it can invert the forward process exactly.
class OracleDenoiser final : public diffusion::EpsModel {
 public:
  OracleDenoiser(Tensor z0, const NoiseSchedule& s) : z0_(std::move(z0)), s_(s) {}
  Tensor predict_eps(const Tensor& z_t, std::span<const int> t, const Conditioning&) const override {
    const std::size_t per = z_t.size() / t.size();
    std::vector<double> out(z_t.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double ab = s_.abar(t[i / per]);
      out[i] = (z_t.data()[i] - std::sqrt(ab) * z0_.data()[i]) / std::sqrt(1.0 - ab);
    }
    return Tensor::from(z_t.shape(), std::move(out));
  }

 private:
  Tensor z0_;
  NoiseSchedule s_;
};

class ZeroModel final : public diffusion::EpsModel {
 public:
  Tensor predict_eps(const Tensor& z_t, std::span<const int>, const Conditioning&) const override {
    return Tensor::zeros(z_t.shape());
  }
};

net::TextBatch tiny_text(int n) {
  net::HashTextEmbedder emb({8, 32, 16, 5, {}});
  return net::TextBatch::repeat(emb.embed("a floorplan for a library"), n);
}

}  // namespace

TEST_CASE("linear schedule tables") {
  const NoiseSchedule s = make_noise_schedule(4, 0.1, 0.4);
  const double beta[] = {0.1, 0.2, 0.3, 0.4};
  const double abar[] = {0.9, 0.72, 0.504, 0.3024};
  for (int i = 0; i < 4; ++i) {
    CHECK(s.beta[i] == doctest::Approx(beta[i]).epsilon(1e-14));
    CHECK(s.alpha_bar[i] == doctest::Approx(abar[i]).epsilon(1e-14));
  }
  CHECK(s.abar(0) == 1.0);

  const NoiseSchedule big = make_noise_schedule(1000, 0.00085, 0.0120);
  CHECK(big.beta.front() == 0.00085);
  CHECK(big.beta.back() == doctest::Approx(0.0120).epsilon(1e-14));
  double prod = 1.0;
  for (int i = 0; i < 1000; ++i) {
    prod *= 1.0 - big.beta[i];
    CHECK(std::abs(big.alpha_bar[i] - prod) < 1e-12);
    CHECK(big.alpha_bar[i] > 0.0);
    if (i > 0) {
      CHECK(big.alpha_bar[i] < big.alpha_bar[i - 1]);
      CHECK(big.beta[i] >= big.beta[i - 1]);
    }
  }
  CHECK(big.alpha_bar[0] == big.alpha[0]);

  CHECK(make_noise_schedule(1, 1e-9, 1e-9).abar(1) == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("schedule validation") {
  CHECK_THROWS_AS(make_noise_schedule(0, 0.1, 0.2), ValidationError);
  CHECK_THROWS_AS(make_noise_schedule(4, 0.0, 0.2), ValidationError);
  CHECK_THROWS_AS(make_noise_schedule(4, 0.3, 0.2), ValidationError);
  CHECK_THROWS_AS(make_noise_schedule(4, 0.1, 1.0), ValidationError);
  const NoiseSchedule s = make_noise_schedule(4, 0.1, 0.4);
  CHECK_THROWS_AS(s.abar(5), ValidationError);
}

TEST_CASE("forward diffusion closed form") {
  // abar_1 = 0.25
  const NoiseSchedule s = make_noise_schedule(1, 0.75, 0.75);
  const auto r = diffusion::forward_diffuse(Tensor::from({1}, {1.0}), 1, Tensor::from({1}, {2.0}), s);
  CHECK(r.z.item() == doctest::Approx(0.5 + std::sqrt(0.75) * 2.0).epsilon(1e-14));
  CHECK(r.z.item() == doctest::Approx(2.232051).epsilon(1e-6));

  const Tensor z0 = Tensor::from({1, 3}, {0.3, -1.2, 4.0});
  const auto id = diffusion::forward_diffuse(z0, 0, Tensor::from({1, 3}, {5.0, 6.0, 7.0}), s);
  for (int i = 0; i < 3; ++i) CHECK(id.z.data()[i] == z0.data()[i]);

  CHECK_THROWS_AS(diffusion::forward_diffuse(z0, 1, Tensor::zeros({1, 2}), s), ValidationError);
  CHECK_THROWS_AS(diffusion::forward_diffuse(z0, 2, Tensor::zeros({1, 3}), s), ValidationError);
}

TEST_CASE("closed form matches stepwise composition in distribution") {
  const NoiseSchedule s = make_noise_schedule(8, 0.05, 0.4);
  const int draws = 20000;
  const double z0 = 1.3;
  Rng rng(11);
  for (int t : {1, 3, 8}) {
    double m_step = 0, v_step = 0, m_closed = 0, v_closed = 0;
    std::vector<double> step(draws), closed(draws);
    for (int d = 0; d < draws; ++d) {
      double z = z0;
      for (int k = 1; k <= t; ++k) z = std::sqrt(1.0 - s.beta[k - 1]) * z + std::sqrt(s.beta[k - 1]) * rng.normal();
      step[d] = z;
      closed[d] = diffusion::forward_diffuse(Tensor::from({1}, {z0}), t, Tensor::from({1}, {rng.normal()}), s).z.item();
      m_step += step[d];
      m_closed += closed[d];
    }
    m_step /= draws;
    m_closed /= draws;
    for (int d = 0; d < draws; ++d) {
      v_step += (step[d] - m_step) * (step[d] - m_step);
      v_closed += (closed[d] - m_closed) * (closed[d] - m_closed);
    }
    v_step /= draws - 1;
    v_closed /= draws - 1;
    const double mean_exact = std::sqrt(s.abar(t)) * z0, var_exact = 1.0 - s.abar(t);
    const double se_mean = std::sqrt(var_exact / draws);
    const double se_var = var_exact * std::sqrt(2.0 / (draws - 1));
    CHECK(std::abs(m_closed - mean_exact) < 3 * se_mean);
    CHECK(std::abs(v_closed - var_exact) < 3 * se_var);
    CHECK(std::abs(m_step - mean_exact) < 3 * se_mean);
    CHECK(std::abs(v_step - var_exact) < 3 * se_var);
  }
}

TEST_CASE("mean squared error reduction") {
  CHECK(ag::mse(Tensor::from({2}, {0.0, 0.0}), Tensor::from({2}, {1.0, 0.0})).item() == 0.5);
  CHECK(ag::mse(Tensor::from({3}, {0.0, 0.0, 0.0}), Tensor::from({3}, {0.0, 3.0, 4.0})).item() ==
        doctest::Approx(8.3333).epsilon(1e-4));
}

TEST_CASE("stage one loss") {
  const NoiseSchedule s = make_noise_schedule(8, 0.05, 0.4);
  Rng data(3);
  const Tensor z0 = Tensor::from({2, 2, 2, 2}, data.normal_vector(16));
  const auto text = tiny_text(2);

  SUBCASE("perfect denoiser gives zero") {
    OracleDenoiser oracle(z0, s);
    Rng rng(5);
    const auto r = diffusion::stage1_loss(oracle, z0, text, s, rng);
    CHECK(r.report.value < 1e-24);
    CHECK(r.report.value >= 0.0);
    CHECK(r.report.stage == 1);
    CHECK(r.report.batch_size == 2);
  }
  SUBCASE("zero model loss replays the rng draws") {
    ZeroModel zero;
    Rng rng(9);
    const double value = diffusion::stage1_loss(zero, z0, text, s, rng).report.value;
    Rng replay(9);
    for (int n = 0; n < 2; ++n) replay.uniform_int(1, s.T);
    double sq = 0.0;
    for (double e : replay.normal_vector(16)) sq += e * e;
    CHECK(value == doctest::Approx(sq / 16).epsilon(1e-14));
  }
  SUBCASE("deterministic under a fixed seed") {
    auto unet = std::make_shared<net::UNet>(
        net::UNetConfig{2, 8, {1, 2}, {2}, 1, 16, 8, 4, 1}, 4);
    control::TextOnlyModel model(unet);
    Rng a(21), b(21);
    CHECK(diffusion::stage1_loss(model, z0, text, s, a).report.value ==
          diffusion::stage1_loss(model, z0, text, s, b).report.value);
  }
  SUBCASE("batch mismatch is rejected") {
    ZeroModel zero;
    Rng rng(1);
    CHECK_THROWS_AS(diffusion::stage1_loss(zero, z0, tiny_text(3), s, rng), ValidationError);
  }
}

TEST_CASE("stage one loss gradient matches finite differences") {
  const NoiseSchedule s = make_noise_schedule(8, 0.05, 0.4);
  auto unet = std::make_shared<net::UNet>(net::UNetConfig{2, 8, {1, 2}, {2}, 1, 16, 8, 4, 1}, 6);
  control::TextOnlyModel model(unet);
  Rng data(4);
  const Tensor z0 = Tensor::from({1, 2, 4, 4}, data.normal_vector(32));
  const auto text = tiny_text(1);
  const NamedParams p = unet->params();
  std::vector<Tensor> probes;
  for (const auto& [name, t] : p.items)
    if (name.find("conv_out.weight") != std::string::npos || name.find("cross_attn.w_k") != std::string::npos ||
        name.find("time_embed.fc1.weight") != std::string::npos)
      probes.push_back(t);
  REQUIRE(probes.size() >= 2);
  auto f = [&] {
    Rng rng(17);
    return diffusion::stage1_loss(model, z0, text, s, rng).loss;
  };
  const auto r = testing::check_gradients(f, probes, 1e-5, 20);
  CHECK(r.checked > 0);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("sampler timesteps and validation") {
  CHECK(diffusion::sampling_timesteps(8, 8) == std::vector<int>{8, 7, 6, 5, 4, 3, 2, 1});
  CHECK(diffusion::sampling_timesteps(8, 2) == std::vector<int>{8, 4});
  CHECK(diffusion::sampling_timesteps(1000, 5) == std::vector<int>{1000, 800, 600, 400, 200});
  CHECK_THROWS_AS(diffusion::sampling_timesteps(8, 0), ValidationError);
  CHECK_THROWS_AS(diffusion::sampling_timesteps(8, 9), ValidationError);
}

TEST_CASE("sampler inverts the process for a perfect denoiser") {
  Rng data(8);
  const Tensor z0 = Tensor::from({1, 2, 3, 3}, data.normal_vector(18));
  for (const NoiseSchedule& s : {make_noise_schedule(8, 1e-9, 1e-9), make_noise_schedule(8, 0.05, 0.4)}) {
    OracleDenoiser oracle(z0, s);
    const Tensor out = diffusion::sample(oracle, z0.shape(), Conditioning{tiny_text(1), {}}, s, s.T, 3);
    for (std::size_t i = 0; i < z0.size(); ++i) CHECK(std::abs(out.data()[i] - z0.data()[i]) < 1e-5);
  }
}

TEST_CASE("sampler is deterministic for a fixed seed") {
  const NoiseSchedule s = make_noise_schedule(8, 0.05, 0.4);
  auto unet = std::make_shared<net::UNet>(net::UNetConfig{2, 8, {1, 2}, {2}, 1, 16, 8, 4, 1}, 4);
  control::TextOnlyModel model(unet);
  const Conditioning c{tiny_text(1), {}};
  const Tensor a = diffusion::sample(model, {1, 2, 4, 4}, c, s, 4, 99);
  const Tensor b = diffusion::sample(model, {1, 2, 4, 4}, c, s, 4, 99);
  const Tensor d = diffusion::sample(model, {1, 2, 4, 4}, c, s, 4, 100);
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  CHECK_FALSE(std::equal(a.data().begin(), a.data().end(), d.data().begin()));
  CHECK_THROWS_AS(diffusion::sample(model, {1, 2, 4, 4}, c, s, 9, 1), ValidationError);
}

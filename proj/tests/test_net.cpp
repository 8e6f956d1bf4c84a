#include <doctest.h>

#include <cmath>

#include "floorgen/net/codec.hpp"
#include "floorgen/net/unet.hpp"
#include "gradcheck.hpp"

using namespace floorgen;
using ag::Tensor;
using testing::random_tensor;

namespace {

net::UNetConfig tiny_unet(int in_channels = 3) { return net::UNetConfig{in_channels, 8, {1, 2}, {1, 2}, 1, 16, 8, 4, 1}; }

net::HashTextEmbedder tiny_embedder() { return net::HashTextEmbedder({8, 32, 16, 5, {}}); }

}  // namespace

TEST_CASE("cross attention on a hand-sized example") {
  net::AttentionWeights w;
  w.w_q = Tensor::from({1, 1}, {1.0});
  w.w_k = Tensor::from({1, 2}, {1.0, 0.0});
  w.w_v = Tensor::from({1, 2}, {0.0, 1.0});
  w.w_o = Tensor::from({1, 1}, {1.0});
  w.b_o = Tensor::from({1}, {0.0});
  const Tensor x = Tensor::from({1, 1, 1}, {1.0});
  // K = [1, -1], V = [1, 0]
  const Tensor ctx = Tensor::from({1, 2, 2}, {1.0, 1.0, -1.0, 0.0});
  Tensor weights;
  const Tensor y = net::cross_attention(x, ctx, w, {}, &weights);
  const double e = std::exp(1.0), f = std::exp(-1.0);
  CHECK(weights.data()[0] == doctest::Approx(e / (e + f)).epsilon(1e-12));
  CHECK(weights.data()[1] == doctest::Approx(f / (e + f)).epsilon(1e-12));
  CHECK(weights.data()[0] == doctest::Approx(0.88080).epsilon(1e-5));
  CHECK(weights.data()[1] == doctest::Approx(0.11920).epsilon(1e-4));
  CHECK(y.item() == doctest::Approx(0.88080).epsilon(1e-5));
}

TEST_CASE("cross attention with a single key ignores the query") {
  net::AttentionWeights w{random_tensor({4, 3}, 1, 1.0, false), random_tensor({4, 5}, 2, 1.0, false),
                          random_tensor({4, 5}, 3, 1.0, false), random_tensor({3, 4}, 4, 1.0, false),
                          random_tensor({3}, 5, 1.0, false)};
  const Tensor ctx = random_tensor({1, 1, 5}, 6, 1.0, false);
  std::vector<double> expected(3);
  for (int o = 0; o < 3; ++o) {
    double s = w.b_o.data()[o];
    for (int k = 0; k < 4; ++k) {
      double v = 0.0;
      for (int c = 0; c < 5; ++c) v += w.w_v.data()[k * 5 + c] * ctx.data()[c];
      s += w.w_o.data()[o * 4 + k] * v;
    }
    expected[o] = s;
  }
  for (int seed : {7, 8, 9}) {
    const Tensor y = net::cross_attention(random_tensor({1, 2, 3}, seed, 3.0, false), ctx, w);
    for (int q = 0; q < 2; ++q)
      for (int o = 0; o < 3; ++o) CHECK(y.data()[q * 3 + o] == doctest::Approx(expected[o]).epsilon(1e-12));
  }
}

TEST_CASE("cross attention is invariant to context order and rows are stochastic") {
  net::AttentionWeights w{random_tensor({4, 3}, 11, 1.0, false), random_tensor({4, 2}, 12, 1.0, false),
                          random_tensor({4, 2}, 13, 1.0, false), random_tensor({3, 4}, 14, 1.0, false),
                          random_tensor({3}, 15, 1.0, false)};
  const Tensor x = random_tensor({1, 5, 3}, 16, 1.0, false);
  const Tensor ctx = random_tensor({1, 4, 2}, 17, 1.0, false);
  const int perm[] = {2, 0, 3, 1};
  std::vector<double> p(8);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 2; ++c) p[r * 2 + c] = ctx.data()[perm[r] * 2 + c];
  Tensor weights;
  const Tensor a = net::cross_attention(x, ctx, w, {}, &weights);
  const Tensor b = net::cross_attention(x, Tensor::from({1, 4, 2}, p), w);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-12));
  for (int q = 0; q < 5; ++q) {
    double s = 0.0;
    for (int k = 0; k < 4; ++k) s += weights.data()[q * 4 + k];
    CHECK(std::abs(s - 1.0) < 1e-6);
  }

  net::AttentionWeights bad = w;
  bad.w_k = random_tensor({4, 3}, 18, 1.0, false);
  CHECK_THROWS_AS(net::cross_attention(x, ctx, bad), ValidationError);
  bad = w;
  bad.w_q = random_tensor({4, 2}, 19, 1.0, false);
  CHECK_THROWS_AS(net::cross_attention(x, ctx, bad), ValidationError);
}

TEST_CASE("masked context rows receive no attention") {
  net::AttentionWeights w{random_tensor({4, 3}, 21, 1.0, false), random_tensor({4, 2}, 22, 1.0, false),
                          random_tensor({4, 2}, 23, 1.0, false), random_tensor({3, 4}, 24, 1.0, false),
                          random_tensor({3}, 25, 1.0, false)};
  const Tensor x = random_tensor({1, 2, 3}, 26, 1.0, false);
  const Tensor ctx = random_tensor({1, 3, 2}, 27, 1.0, false);
  const std::vector<unsigned char> mask{1, 1, 0};
  Tensor weights;
  const Tensor y = net::cross_attention(x, ctx, w, mask, &weights);
  CHECK(weights.data()[2] == 0.0);
  CHECK(weights.data()[5] == 0.0);
  const Tensor trimmed = Tensor::from({1, 2, 2}, std::vector<double>(ctx.data().begin(), ctx.data().begin() + 4));
  const Tensor z = net::cross_attention(x, trimmed, w);
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y.data()[i] == doctest::Approx(z.data()[i]).epsilon(1e-12));
}

TEST_CASE("text embedder tokenization and determinism") {
  const net::HashTextEmbedder emb;
  const auto b = emb.embed("a floorplan for a library");
  CHECK(b.tokens == std::vector<std::string>{"a", "floorplan", "for", "a", "library"});
  CHECK(b.embedding.shape() == ag::Shape{5, 128});
  CHECK(b.ids[0] == b.ids[3]);
  const auto again = emb.embed("a floorplan for a library");
  CHECK(std::equal(b.embedding.data().begin(), b.embedding.data().end(), again.embedding.data().begin()));

  for (const char* variant : {"A  Floorplan for a library", "  a floorplan\tFOR a Library!", "a floorplan, for a library."})
    CHECK(emb.embed(variant).tokens == b.tokens);
  for (double v : b.embedding.data()) CHECK(std::isfinite(v));

  CHECK_THROWS_AS(emb.embed(""), ValidationError);
  CHECK_THROWS_AS(emb.embed("   ?! "), ValidationError);

  const auto unknown = emb.embed("zyzzyva");
  CHECK(unknown.ids[0] > static_cast<int>(emb.config().vocabulary.size()));
  CHECK(emb.checksum() == net::HashTextEmbedder().checksum());
  CHECK(emb.checksum() != net::HashTextEmbedder({128, 32, 1024, 1, {}}).checksum());

  std::string longer;
  for (int i = 0; i < 40; ++i) longer += "room ";
  CHECK(emb.embed(longer).tokens.size() == 32);
}

TEST_CASE("text batches pad with a key mask") {
  const auto emb = tiny_embedder();
  const std::vector<net::TextBrief> briefs{emb.embed("a library"), emb.embed("a floorplan for a football stadium")};
  const auto batch = net::TextBatch::from(briefs);
  CHECK(batch.context.shape() == ag::Shape{2, 6, 8});
  CHECK(batch.key_mask == std::vector<unsigned char>{1, 1, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1});
}

TEST_CASE("codec shapes, bounds and posterior") {
  const net::LatentCodec codec(net::CodecConfig{3, 8, {1, 2, 2}, 4, 4, 1e-6});
  CHECK(codec.config().downsample_factor() == 4);
  CHECK(codec.latent_shape({1, 3, 64, 64}) == ag::Shape{1, 4, 16, 16});
  CHECK_THROWS_AS(codec.latent_shape({1, 3, 62, 64}), ValidationError);

  const Tensor x = random_tensor({1, 3, 64, 64}, 31, 1.0, false);
  const auto enc = codec.encode(x);
  CHECK(enc.mu.shape() == ag::Shape{1, 4, 16, 16});
  CHECK(std::equal(enc.z.data().begin(), enc.z.data().end(), enc.mu.data().begin()));
  for (double v : enc.sigma2.data()) CHECK(v > 0.0);

  const Tensor y = codec.decode(random_tensor({1, 4, 16, 16}, 32, 50.0, false));
  CHECK(y.shape() == ag::Shape{1, 3, 64, 64});
  for (double v : y.data()) CHECK((v >= -1.0 && v <= 1.0));

  CHECK_THROWS_AS(codec.decode(Tensor::zeros({1, 3, 16, 16})), ValidationError);
  CHECK_THROWS_AS(codec.encode(Tensor::zeros({1, 3, 30, 32})), ValidationError);
}

TEST_CASE("sampled codes follow the posterior") {
  const net::LatentCodec codec(net::CodecConfig{3, 4, {1, 2}, 2, 2, 1e-6});
  const Tensor x = random_tensor({1, 3, 4, 4}, 41, 1.0, false);
  const auto base = codec.encode(x);
  const std::size_t n = base.mu.size();
  const int draws = 10000;
  std::vector<double> sum(n, 0.0), sq(n, 0.0);
  Rng rng(5);
  for (int d = 0; d < draws; ++d) {
    const auto e = codec.encode(x, &rng);
    for (std::size_t i = 0; i < n; ++i) {
      sum[i] += e.z.data()[i];
      sq[i] += e.z.data()[i] * e.z.data()[i];
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double mean = sum[i] / draws;
    const double var = (sq[i] - draws * mean * mean) / (draws - 1);
    const double s2 = base.sigma2.data()[i];
    CHECK(std::abs(mean - base.mu.data()[i]) < 3.5 * std::sqrt(s2 / draws));
    CHECK(std::abs(var - s2) < 3.5 * s2 * std::sqrt(2.0 / (draws - 1)));
  }
}

TEST_CASE("codec loss gradient matches finite differences") {
  const net::LatentCodec codec(net::CodecConfig{3, 4, {1, 2}, 2, 2, 0.1});
  const Tensor x = random_tensor({1, 3, 4, 4}, 51, 0.8, false);
  std::vector<Tensor> probes;
  for (const auto& [name, t] : codec.params().items)
    if (name.find("conv_out.weight") != std::string::npos || name.find("conv_in.weight") != std::string::npos) probes.push_back(t);
  REQUIRE(!probes.empty());
  auto f = [&] {
    Rng rng(3);
    return codec.loss(x, rng);
  };
  CHECK(testing::check_gradients(f, probes, 1e-6, 20, 1e-9).max_rel_error < 1e-3);
}

TEST_CASE("unet output shape matches the latent") {
  const auto emb = tiny_embedder();
  const auto text = net::TextBatch::repeat(emb.embed("a floorplan for a library"), 2);
  for (const auto& cfg : {tiny_unet(3), net::UNetConfig{4, 8, {1, 2, 2}, {4, 2, 1}, 1, 16, 8, 4, 1},
                          net::UNetConfig{4, 8, {1}, {1}, 2, 16, 8, 4, 2}}) {
    const net::UNet unet(cfg);
    const Tensor z = random_tensor({2, cfg.in_channels, 8, 8}, 61, 1.0, false);
    const std::vector<int> t{1, 5};
    const Tensor y = unet(z, t, text);
    CHECK(y.shape() == z.shape());
    for (double v : y.data()) CHECK(std::isfinite(v));
  }
  const net::UNet unet(tiny_unet());
  const std::vector<int> t1{3};
  CHECK_THROWS_AS(unet(Tensor::zeros({1, 4, 8, 8}), t1, net::TextBatch::from(emb.embed("a library"))), ValidationError);
  CHECK_THROWS_AS(unet(Tensor::zeros({2, 3, 8, 8}), t1, text), ValidationError);
  CHECK_THROWS_AS(net::UNetConfig({4, 8, {1, 2}, {8}, 1, 16, 8, 4, 1}).validate(), ValidationError);
  CHECK_THROWS_AS(net::UNetConfig({4, 8, {1, 2}, {1}, 0, 16, 8, 4, 1}).validate(), ValidationError);
}

TEST_CASE("unet gradients match finite differences on a 3-channel 8x8 latent") {
  const net::UNet unet(tiny_unet(3), 7);
  const auto emb = tiny_embedder();
  const auto text = net::TextBatch::from(emb.embed("a floorplan for a library"));
  const Tensor z = random_tensor({1, 3, 8, 8}, 71);
  const Tensor target = random_tensor({1, 3, 8, 8}, 72, 1.0, false);
  const std::vector<int> t{4};
  std::vector<Tensor> inputs{z};
  for (const auto& [name, p] : unet.params().items)
    if (name.find("conv_in.weight") != std::string::npos || name.find("cross_attn.w_v") != std::string::npos ||
        name.find("decoder.conv_out.weight") != std::string::npos)
      inputs.push_back(p);
  REQUIRE(inputs.size() >= 4);
  auto f = [&] { return ag::mse(unet(z, t, text), target); };
  const auto r = testing::check_gradients(f, inputs, 1e-6, 24, 1e-9);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("unet is equivariant to batch permutation") {
  const net::UNet unet(tiny_unet(3), 8);
  const auto emb = tiny_embedder();
  const std::vector<net::TextBrief> briefs{emb.embed("a library"), emb.embed("a floor plan for a football stadium")};
  const std::vector<net::TextBrief> swapped{briefs[1], briefs[0]};
  const Tensor a = random_tensor({1, 3, 8, 8}, 81, 1.0, false);
  const Tensor b = random_tensor({1, 3, 8, 8}, 82, 1.0, false);
  const std::vector<int> t{2, 6}, ts{6, 2};
  const Tensor y = unet(ag::concat_batch({a, b}), t, net::TextBatch::from(briefs));
  const Tensor ys = unet(ag::concat_batch({b, a}), ts, net::TextBatch::from(swapped));
  const std::size_t half = a.size();
  for (std::size_t i = 0; i < half; ++i) {
    CHECK(y.data()[i] == doctest::Approx(ys.data()[half + i]).epsilon(1e-12));
    CHECK(y.data()[half + i] == doctest::Approx(ys.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("trained unet output depends on the brief") {
  net::UNet unet(tiny_unet(3), 9);
  const auto emb = tiny_embedder();
  const auto lib = net::TextBatch::from(emb.embed("a floorplan for a library"));
  const auto stadium = net::TextBatch::from(emb.embed("a floor plan for a football stadium"));
  const Tensor z = random_tensor({1, 3, 8, 8}, 91, 1.0, false);
  const Tensor ta = random_tensor({1, 3, 8, 8}, 92, 1.0, false);
  const Tensor tb = random_tensor({1, 3, 8, 8}, 93, 1.0, false);
  const std::vector<int> t{3};
  Adam opt(unet.params().tensors(), AdamConfig{1e-3});
  for (int step = 0; step < 100; ++step) {
    ag::add(ag::mse(unet(z, t, lib), ta), ag::mse(unet(z, t, stadium), tb)).backward();
    opt.step();
  }
  ag::NoGradGuard g;
  const Tensor ya = unet(z, t, lib), yb = unet(z, t, stadium);
  double linf = 0.0;
  for (std::size_t i = 0; i < ya.size(); ++i) linf = std::max(linf, std::abs(ya.data()[i] - yb.data()[i]));
  CHECK(linf > 0.0);
}

TEST_CASE("timestep embedding layout") {
  const std::vector<double> t{0.0, 3.0};
  const Tensor e = net::timestep_embedding(t, 4);
  CHECK(e.shape() == ag::Shape{2, 4});
  CHECK(e.data()[0] == 1.0);
  CHECK(e.data()[2] == 0.0);
  CHECK(e.data()[4] == doctest::Approx(std::cos(3.0)).epsilon(1e-12));
  CHECK(e.data()[6] == doctest::Approx(std::sin(3.0)).epsilon(1e-12));
}

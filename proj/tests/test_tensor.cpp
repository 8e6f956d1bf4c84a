#include <doctest.h>

#include <cmath>

#include "floorgen/params.hpp"
#include "floorgen/tensor.hpp"
#include "gradcheck.hpp"

using namespace floorgen;
using ag::Tensor;
using testing::check_gradients;
using testing::random_tensor;

TEST_CASE("elementwise ops match finite differences") {
  Tensor a = random_tensor({2, 3, 4}, 1);
  Tensor b = random_tensor({2, 3, 4}, 2);
  auto f = [&] {
    Tensor h = ag::add(ag::mul(ag::silu(a), ag::gelu(b)), ag::sub(ag::exp(ag::scale(a, 0.3)), b));
    return ag::mean(ag::mul(h, h));
  };
  CHECK(check_gradients(f, {a, b}).max_rel_error < 1e-6);
}

TEST_CASE("conv2d gradients, strided and padded") {
  Tensor x = random_tensor({2, 3, 7, 6}, 3);
  Tensor w = random_tensor({4, 3, 3, 3}, 4, 0.5);
  Tensor b = random_tensor({4}, 5);
  for (int stride : {1, 2}) {
    auto f = [&] {
      Tensor y = ag::conv2d(x, w, b, stride, 1);
      return ag::mean(ag::mul(y, y));
    };
    CHECK(check_gradients(f, {x, w, b}).max_rel_error < 1e-6);
  }
  Tensor w1 = random_tensor({5, 3, 1, 1}, 6);
  auto f1 = [&] { return ag::sum(ag::silu(ag::conv2d(x, w1, Tensor(), 1, 0))); };
  CHECK(check_gradients(f1, {x, w1}).max_rel_error < 1e-6);
}

TEST_CASE("conv2d matches a direct loop") {
  Tensor x = random_tensor({1, 2, 5, 5}, 7, 1.0, false);
  Tensor w = random_tensor({3, 2, 3, 3}, 8, 1.0, false);
  Tensor b = random_tensor({3}, 9, 1.0, false);
  Tensor y = ag::conv2d(x, w, b, 2, 1);
  REQUIRE(y.shape() == ag::Shape{1, 3, 3, 3});
  for (int co = 0; co < 3; ++co)
    for (int oy = 0; oy < 3; ++oy)
      for (int ox = 0; ox < 3; ++ox) {
        double s = b.data()[co];
        for (int ci = 0; ci < 2; ++ci)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
              if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
              s += w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx] * x.data()[(ci * 5 + iy) * 5 + ix];
            }
        CHECK(y.data()[(co * 3 + oy) * 3 + ox] == doctest::Approx(s).epsilon(1e-12));
      }
}

TEST_CASE("normalization layers") {
  Tensor x = random_tensor({2, 4, 3, 3}, 10);
  Tensor g = random_tensor({4}, 11);
  Tensor be = random_tensor({4}, 12);
  auto f = [&] {
    Tensor y = ag::group_norm(x, 2, g, be);
    return ag::mean(ag::mul(y, ag::silu(y)));
  };
  CHECK(check_gradients(f, {x, g, be}).max_rel_error < 1e-5);

  Tensor t = random_tensor({2, 5, 6}, 13);
  Tensor lg = random_tensor({6}, 14);
  Tensor lb = random_tensor({6}, 15);
  auto fl = [&] {
    Tensor y = ag::layer_norm(t, lg, lb);
    return ag::mean(ag::mul(y, ag::gelu(y)));
  };
  CHECK(check_gradients(fl, {t, lg, lb}).max_rel_error < 1e-5);
}

TEST_CASE("matmul, softmax and layout ops") {
  Tensor a = random_tensor({2, 3, 4}, 16);
  Tensor b = random_tensor({2, 5, 4}, 17);
  Tensor w = random_tensor({3, 4}, 18);
  Tensor bias = random_tensor({3}, 19);
  const std::vector<unsigned char> mask{1, 1, 0, 1, 1, 1, 1, 1, 1, 0};
  auto f = [&] {
    Tensor s = ag::softmax_last(ag::bmm(a, b, false, true), mask);
    Tensor o = ag::bmm(s, b);
    Tensor l = ag::linear(o, w, bias);
    return ag::mean(ag::mul(l, l));
  };
  CHECK(check_gradients(f, {a, b, w, bias}).max_rel_error < 1e-6);

  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      Tensor p = random_tensor(ta ? ag::Shape{2, 4, 3} : ag::Shape{2, 3, 4}, 20);
      Tensor q = random_tensor(tb ? ag::Shape{2, 5, 4} : ag::Shape{2, 4, 5}, 21);
      auto g = [&] {
        Tensor y = ag::bmm(p, q, ta, tb);
        return ag::mean(ag::mul(y, y));
      };
      CHECK(check_gradients(g, {p, q}).max_rel_error < 1e-6);
    }

  Tensor x = random_tensor({2, 3, 2, 4}, 22);
  Tensor y = random_tensor({2, 2, 2, 4}, 23);
  Tensor v = random_tensor({2, 5}, 24);
  auto h = [&] {
    Tensor c = ag::concat_channels(x, y);
    Tensor u = ag::upsample_nearest2x(ag::add_channel_bias(c, v));
    Tensor r = ag::nlc_to_nchw(ag::nchw_to_nlc(u), 4, 8);
    Tensor s = ag::slice_channels(r, 1, 3);
    return ag::add(ag::mean(ag::mul(s, s)), ag::sum(ag::spatial_mean(ag::abs(s))));
  };
  CHECK(check_gradients(h, {x, y, v}).max_rel_error < 1e-6);
}

TEST_CASE("softmax rows are stochastic and shift invariant") {
  Tensor x = random_tensor({1, 4, 6}, 25, 3.0, false);
  Tensor p = ag::softmax_last(x);
  Tensor q = ag::softmax_last(ag::add_scalar(x, 17.0));
  for (int r = 0; r < 4; ++r) {
    double s = 0.0;
    for (int j = 0; j < 6; ++j) {
      s += p.data()[r * 6 + j];
      CHECK(std::abs(p.data()[r * 6 + j] - q.data()[r * 6 + j]) < 1e-12);
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("leaf gradients accumulate and no-grad records nothing") {
  Tensor w = Tensor::from({2}, {1.0, 2.0}, true);
  ag::sum(w).backward();
  ag::sum(w).backward();
  CHECK(w.grad()[0] == 2.0);
  {
    ag::NoGradGuard g;
    Tensor y = ag::mul(w, w);
    CHECK_FALSE(y.requires_grad());
  }
}

TEST_CASE("f32 mode rounds results to binary32") {
  Tensor a = Tensor::from({1}, {0.1});
  Tensor b = Tensor::from({1}, {0.2});
  ag::PrecisionGuard p(ag::Precision::f32);
  const double s = ag::add(a, b).item();
  CHECK(s == static_cast<double>(static_cast<float>(0.1 + 0.2)));
}

TEST_CASE("adam moves parameters against the gradient") {
  Tensor w = Tensor::from({1}, {1.0}, true);
  Adam opt({w}, AdamConfig{0.1, 0.9, 0.999, 1e-8, 0.0});
  for (int i = 0; i < 50; ++i) {
    ag::mul(w, w).backward();
    opt.step();
  }
  CHECK(std::abs(w.data()[0]) < 0.5);
  CHECK(opt.steps() == 50);
}

TEST_CASE("shape errors are validation errors") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 2});
  CHECK_THROWS_AS(ag::add(a, b), ValidationError);
  CHECK_THROWS_AS(Tensor::from({2}, {1.0}), ValidationError);
  CHECK_THROWS_AS(Tensor::zeros({2}, true).backward(), ValidationError);
}

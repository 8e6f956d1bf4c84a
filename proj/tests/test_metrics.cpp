#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "floorgen/metrics.hpp"
#include "floorgen/rng.hpp"

using namespace floorgen;
using namespace floorgen::metrics;

namespace {

Eigen::MatrixXd random_matrix(Rng& rng, int n, int d, double shift = 0.0) {
  Eigen::MatrixXd m(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) m(i, j) = rng.normal() + shift;
  return m;
}

Eigen::MatrixXd random_spd(Rng& rng, int d) {
  const Eigen::MatrixXd a = random_matrix(rng, d, d);
  return a * a.transpose() + 0.1 * Eigen::MatrixXd::Identity(d, d);
}

// Tr((S1 S2)^(1/2)) from the (real, nonnegative) eigenvalues of the
// nonsymmetric product.
double trace_sqrt_product(const Eigen::MatrixXd& S1, const Eigen::MatrixXd& S2) {
  Eigen::EigenSolver<Eigen::MatrixXd> es(S1 * S2);
  double t = 0.0;
  for (auto l : es.eigenvalues()) t += std::sqrt(std::max(l.real(), 0.0));
  return t;
}

double brute_kid(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) {
  const int m = static_cast<int>(X.rows()), n = static_cast<int>(Y.rows());
  const double d = static_cast<double>(X.cols());
  auto k = [&](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    const double v = a.dot(b) / d + 1.0;
    return v * v * v;
  };
  double xx = 0.0, yy = 0.0, xy = 0.0;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      if (i != j) xx += k(X.row(i), X.row(j));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j) yy += k(Y.row(i), Y.row(j));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) xy += k(X.row(i), Y.row(j));
  return xx / (m * (m - 1.0)) + yy / (n * (n - 1.0)) - 2.0 * xy / (m * static_cast<double>(n));
}

ImageGrid random_image(Rng& rng, int h, int w, int c) {
  ImageGrid im(h, w, c);
  for (double& v : im.pixels) v = rng.uniform();
  return im;
}

// Direct 2-D SSIM: per-pixel Gaussian weights over the in-bounds part of the
// window, renormalized to sum to one.
double ssim_2d(const ImageGrid& x, const ImageGrid& y) {
  const int r = 5;
  const double sigma = 1.5, c1 = 1e-4, c2 = 9e-4;
  double total = 0.0;
  for (int c = 0; c < x.channels; ++c) {
    double s = 0.0;
    for (int i = 0; i < x.height; ++i)
      for (int j = 0; j < x.width; ++j) {
        double ws = 0, mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
        for (int di = -r; di <= r; ++di)
          for (int dj = -r; dj <= r; ++dj) {
            const int a = i + di, b = j + dj;
            if (a < 0 || a >= x.height || b < 0 || b >= x.width) continue;
            const double w = std::exp(-(di * di + dj * dj) / (2 * sigma * sigma));
            const double u = x.at(a, b, c), v = y.at(a, b, c);
            ws += w;
            mx += w * u;
            my += w * v;
            mxx += w * u * u;
            myy += w * v * v;
            mxy += w * u * v;
          }
        mx /= ws;
        my /= ws;
        const double vx = mxx / ws - mx * mx, vy = myy / ws - my * my, cv = mxy / ws - mx * my;
        s += (2 * mx * my + c1) * (2 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      }
    total += s / (x.height * x.width);
  }
  return total / x.channels;
}

RatingRecord rating(const std::string& group, int score) {
  RatingRecord r;
  r.group = group;
  r.score = score;
  return r;
}

}  // namespace

TEST_CASE("frechet distance of diagonal gaussians") {
  Eigen::VectorXd mu1(3), mu2(3);
  mu1 << 0, 1, 2;
  mu2 << 1, 1, 0;
  const Eigen::Vector3d a(1.0, 4.0, 0.25), b(9.0, 1.0, 0.25);
  const double expected = 5.0 + (1 - 3) * (1 - 3) + (2 - 1) * (2 - 1) + 0.0;
  CHECK(frechet_distance(mu1, a.asDiagonal().toDenseMatrix(), mu2, b.asDiagonal().toDenseMatrix()) ==
        doctest::Approx(expected).epsilon(1e-12));
  const Eigen::MatrixXd S = a.asDiagonal().toDenseMatrix();
  CHECK(frechet_distance(mu1, S, mu1, S) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("frechet distance with equal covariances is the mean gap") {
  Rng rng(3);
  const Eigen::MatrixXd S = random_spd(rng, 4);
  const Eigen::VectorXd mu1 = random_matrix(rng, 4, 1), mu2 = random_matrix(rng, 4, 1);
  CHECK(std::abs(frechet_distance(mu1, S, mu2, S) - (mu1 - mu2).squaredNorm()) < 1e-6);
}

TEST_CASE("frechet distance matches the non-commuting trace formula") {
  Rng rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const int d = 2 + trial;
    const Eigen::MatrixXd S1 = random_spd(rng, d), S2 = random_spd(rng, d);
    const Eigen::VectorXd mu1 = random_matrix(rng, d, 1), mu2 = random_matrix(rng, d, 1);
    const double expected = (mu1 - mu2).squaredNorm() + S1.trace() + S2.trace() - 2 * trace_sqrt_product(S1, S2);
    CHECK(frechet_distance(mu1, S1, mu2, S2) == doctest::Approx(expected).epsilon(1e-9));
  }
}

TEST_CASE("frechet distance validates covariances") {
  Eigen::Matrix2d asym;
  asym << 1, 0.5, 0, 1;
  Eigen::Matrix2d neg;
  neg << 1, 0, 0, -1;
  const Eigen::Vector2d mu = Eigen::Vector2d::Zero();
  const Eigen::MatrixXd I = Eigen::Matrix2d::Identity();
  CHECK_THROWS_AS(frechet_distance(mu, asym, mu, I), ValidationError);
  CHECK_THROWS_AS(frechet_distance(mu, I, mu, neg), ValidationError);
  CHECK_THROWS_AS(frechet_distance(Eigen::Vector3d::Zero(), I, mu, I), ValidationError);
}

TEST_CASE("kid equals the brute force estimator for small sets") {
  Rng rng(9);
  for (int m = 2; m <= 10; ++m)
    for (int n = 2; n <= 10; n += 4) {
      const Eigen::MatrixXd X = random_matrix(rng, m, 5), Y = random_matrix(rng, n, 5, 0.3);
      CHECK(kid(X, Y) == doctest::Approx(brute_kid(X, Y)).epsilon(1e-12));
    }
  const Eigen::MatrixXd X = random_matrix(rng, 1, 5), Y = random_matrix(rng, 4, 5);
  CHECK_THROWS_AS(kid(X, Y), ValidationError);
  CHECK_THROWS_AS(kid(Y, random_matrix(rng, 4, 6)), ValidationError);
}

TEST_CASE("kid is near zero for the same distribution") {
  Rng rng(10);
  const Eigen::MatrixXd X = random_matrix(rng, 400, 8), Y = random_matrix(rng, 400, 8);
  const Eigen::MatrixXd Z = random_matrix(rng, 400, 8, 1.0);
  CHECK(std::abs(kid(X, Y)) < 0.05);
  CHECK(kid(X, Z) > 10 * std::abs(kid(X, Y)));
  CHECK(polynomial_kernel(Eigen::Vector2d(1, 1), Eigen::Vector2d(1, 1)) == doctest::Approx(8.0));
}

TEST_CASE("ssim") {
  Rng rng(2);
  const ImageGrid a = random_image(rng, 16, 16, 3), b = random_image(rng, 16, 16, 3);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(ssim(a, b) == doctest::Approx(ssim_2d(a, b)).epsilon(1e-10));
  const ImageGrid g1 = random_image(rng, 9, 13, 1), g2 = random_image(rng, 9, 13, 1);
  CHECK(ssim(g1, g2) == doctest::Approx(ssim_2d(g1, g2)).epsilon(1e-10));

  // Constant images: only the luminance term survives.
  const ImageGrid c1(8, 8, 1, 0.2), c2(8, 8, 1, 0.6);
  CHECK(ssim(c1, c2) == doctest::Approx((2 * 0.2 * 0.6 + 1e-4) / (0.04 + 0.36 + 1e-4)).epsilon(1e-12));
  CHECK_THROWS_AS(ssim(a, g1), ValidationError);
  CHECK_THROWS_AS(ssim(a, a, {4, 1.5, 1.0}), ValidationError);
}

TEST_CASE("psnr") {
  const ImageGrid a(4, 4, 3, 0.5), b(4, 4, 3, 0.6);
  CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-9));
  CHECK(psnr(a, b, 255.0) == doctest::Approx(20.0 + 20.0 * std::log10(255.0)).epsilon(1e-9));
  const ImageGrid black(2, 2, 1, 0.0), gray(2, 2, 1, 0.5);
  CHECK(psnr(black, gray) == doctest::Approx(6.0206).epsilon(1e-5));
  CHECK(std::isinf(psnr(a, a)));
  CHECK(format_number(psnr(a, a)) == "inf");
  CHECK_THROWS_AS(psnr(a, ImageGrid(4, 4, 1)), ValidationError);
}

TEST_CASE("welch t test matches scipy") {
  std::ifstream in(FLOORGEN_FIXTURES_DIR "/welch.json");
  REQUIRE(in.good());
  const auto cases = nlohmann::json::parse(in);
  REQUIRE(cases.size() >= 5);
  for (const auto& c : cases) {
    const auto a = c["a"].get<std::vector<double>>(), b = c["b"].get<std::vector<double>>();
    const WelchResult r = welch_t(a, b);
    CHECK(r.t == doctest::Approx(c["t"].get<double>()).epsilon(1e-10));
    CHECK(r.df == doctest::Approx(c["df"].get<double>()).epsilon(1e-10));
    CHECK(r.p == doctest::Approx(c["p"].get<double>()).epsilon(1e-8));
  }
}

TEST_CASE("welch t test edge cases") {
  const std::vector<double> same{3, 3, 3}, other{5, 5};
  const WelchResult r = welch_t(same, same);
  CHECK(r.t == 0.0);
  CHECK(r.p == 1.0);
  const WelchResult s = welch_t(same, other);
  CHECK(std::isinf(s.t));
  CHECK(s.p == 0.0);
  CHECK_THROWS_AS(welch_t(std::vector<double>{1}, other), ValidationError);
}

TEST_CASE("score summary") {
  std::vector<RatingRecord> rs;
  for (int s : {2, 4, 4, 9}) rs.push_back(rating("real", s));
  for (int s : {1, 3, 8}) rs.push_back(rating("generated", s));
  const ScoreTable t = score_summary(rs);
  CHECK(t.real.mean == doctest::Approx(4.75));
  CHECK(t.real.std == doctest::Approx(std::sqrt(26.75 / 3.0)));
  CHECK(t.real.median == 4.0);
  CHECK(t.real.min == 2.0);
  CHECK(t.real.max == 9.0);
  CHECK(t.generated.median == 3.0);
  CHECK(t.generated.n == 3);
  CHECK(t.test.t == doctest::Approx(welch_t(std::vector<double>{2, 4, 4, 9}, std::vector<double>{1, 3, 8}).t));
  const std::string text = t.to_text();
  CHECK(text.find("mean ± std") != std::string::npos);
  CHECK(text.find("Median") != std::string::npos);
  CHECK(text.find("t-test") != std::string::npos);
  CHECK(t.to_json()["real"]["median"] == 4.0);

  rs.pop_back();
  rs.pop_back();
  try {
    score_summary(rs);
    FAIL("expected insufficient data");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("insufficient data") != std::string::npos);
  }
  rs.push_back(rating("imagined", 3));
  CHECK_THROWS_AS(score_summary(rs), ValidationError);
}

TEST_CASE("random conv extractor") {
  Rng rng(5);
  std::vector<ImageGrid> imgs;
  for (int i = 0; i < 6; ++i) imgs.push_back(random_image(rng, 16, 16, 3));
  const RandomConvExtractor ex(3), same(3), other(4);
  const FeatureSet f = ex.extract(imgs, "real");
  CHECK(f.features.rows() == 6);
  CHECK(f.features.cols() == 64);
  CHECK(f.extractor_id == same.id());
  CHECK(f.extractor_id != other.id());
  CHECK(f.features == same.extract(imgs, "real").features);
  CHECK(f.features.cwiseAbs().maxCoeff() > 0.0);

  std::vector<ImageGrid> gray{random_image(rng, 16, 16, 1), random_image(rng, 16, 16, 1)};
  CHECK(ex.extract(gray, "real").features.rows() == 2);
  imgs.push_back(random_image(rng, 8, 8, 3));
  CHECK_THROWS_AS(ex.extract(imgs, "real"), ValidationError);
  imgs.pop_back();

  const FeatureSet g = other.extract(imgs, "generated");
  CHECK_THROWS_AS(fid(f, g), ValidationError);
  CHECK_THROWS_AS(kid(f, g), ValidationError);
}

TEST_CASE("evaluate and report") {
  Rng rng(6);
  std::vector<ImageGrid> real, shifted;
  for (int i = 0; i < 8; ++i) {
    real.push_back(random_image(rng, 16, 16, 3));
    ImageGrid s = real.back();
    for (double& v : s.pixels) v = std::min(1.0, v * 0.5 + 0.5);
    shifted.push_back(s);
  }
  const RandomConvExtractor ex;
  const MetricReport same = evaluate(real, real, ex);
  CHECK(same.fid == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(same.ssim_mean == doctest::Approx(1.0));
  CHECK(std::isinf(same.psnr_mean));
  CHECK(same.to_json()["psnr_mean"] == "inf");
  CHECK(same.to_text().find("inf") != std::string::npos);

  const MetricReport diff = evaluate(real, shifted, ex);
  CHECK(diff.fid > same.fid);
  CHECK(diff.ssim_mean < 1.0);
  CHECK(std::isfinite(diff.psnr_mean));
  CHECK(diff.n_real == 8);
  CHECK(diff.extractor_id == ex.id());
  const auto j = diff.to_json();
  std::vector<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.push_back(k);
  CHECK(keys[0] == "fid");
  CHECK(keys[1] == "kid");
  CHECK_THROWS_AS(evaluate(std::span(real).first(1), real, ex), ValidationError);
}

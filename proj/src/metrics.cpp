#include "floorgen/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include <boost/math/distributions/students_t.hpp>

#include "floorgen/params.hpp"
#include "floorgen/rng.hpp"

namespace floorgen::metrics {

Eigen::VectorXd FeatureSet::mean() const { return features.colwise().mean().transpose(); }

Eigen::MatrixXd FeatureSet::covariance() const {
  if (features.rows() < 2) throw ValidationError("covariance: need at least 2 samples");
  const Eigen::MatrixXd c = features.rowwise() - features.colwise().mean();
  return (c.transpose() * c) / static_cast<double>(features.rows() - 1);
}

RandomConvExtractor::RandomConvExtractor(std::uint64_t seed, int dim) {
  if (dim < 4) throw ValidationError("feature extractor: dim must be >= 4");
  Rng rng(seed);
  const int ch[4] = {3, std::max(8, dim / 4), std::max(8, dim / 2), dim};
  NamedParams p;
  for (int i = 0; i < 3; ++i) {
    const double s = std::sqrt(2.0 / (ch[i] * 9));
    weights_.push_back(ag::Tensor::from({ch[i + 1], ch[i], 3, 3}, [&] {
      std::vector<double> v(static_cast<std::size_t>(ch[i + 1]) * ch[i] * 9);
      for (double& x : v) x = s * rng.normal();
      return v;
    }()));
    biases_.push_back(ag::Tensor::from({ch[i + 1]}, std::vector<double>(static_cast<std::size_t>(ch[i + 1]), 0.01)));
    p.add("conv" + std::to_string(i) + ".weight", weights_.back());
  }
  id_ = "randconv-d" + std::to_string(dim) + "-s" + std::to_string(seed) + "-" + params_checksum(p).substr(0, 12);
}

FeatureSet RandomConvExtractor::extract(std::span<const ImageGrid> images, const std::string& source) const {
  if (images.empty()) throw ValidationError("extract_features: no images");
  std::vector<ImageGrid> rgb;
  rgb.reserve(images.size());
  for (const auto& im : images) {
    if (im.height != images[0].height || im.width != images[0].width)
      throw ValidationError("extract_features: mixed image sizes");
    if (im.channels == 3) {
      rgb.push_back(im);
    } else if (im.channels == 1) {
      ImageGrid c(im.height, im.width, 3);
      for (std::size_t i = 0; i < im.pixels.size(); ++i)
        for (int k = 0; k < 3; ++k) c.pixels[i * 3 + k] = im.pixels[i];
      rgb.push_back(std::move(c));
    } else {
      throw ValidationError("extract_features: expected 1 or 3 channels");
    }
  }
  ag::NoGradGuard g;
  ag::Tensor h = to_tensor(rgb);
  for (std::size_t i = 0; i < weights_.size(); ++i) h = ag::relu(ag::conv2d(h, weights_[i], biases_[i], 2, 1));
  const ag::Tensor pooled = ag::spatial_mean(h);
  FeatureSet fs;
  fs.extractor_id = id_;
  fs.source = source;
  fs.features.resize(pooled.dim(0), pooled.dim(1));
  for (int n = 0; n < pooled.dim(0); ++n)
    for (int d = 0; d < pooled.dim(1); ++d) fs.features(n, d) = pooled.data()[static_cast<std::size_t>(n) * pooled.dim(1) + d];
  return fs;
}

namespace {

constexpr double kPsdTol = 1e-8;

void check_covariance(const Eigen::MatrixXd& S, const char* name) {
  if (S.rows() != S.cols()) throw ValidationError(std::string("frechet_distance: ") + name + " is not square");
  const double scale = std::max(1.0, S.cwiseAbs().maxCoeff());
  if ((S - S.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale)
    throw ValidationError(std::string("frechet_distance: ") + name + " is not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S, Eigen::EigenvaluesOnly);
  if (es.eigenvalues().minCoeff() < -kPsdTol * scale)
    throw ValidationError(std::string("frechet_distance: ") + name + " is not positive semidefinite");
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& S) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (S + S.transpose()));
  const Eigen::VectorXd r = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * r.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const Eigen::VectorXd& mu1, const Eigen::MatrixXd& S1, const Eigen::VectorXd& mu2,
                        const Eigen::MatrixXd& S2) {
  const auto d = mu1.size();
  if (mu2.size() != d || S1.rows() != d || S2.rows() != d) throw ValidationError("frechet_distance: dimension mismatch");
  check_covariance(S1, "S1");
  check_covariance(S2, "S2");
  const Eigen::MatrixXd r1 = psd_sqrt(S1);
  const Eigen::MatrixXd m = r1 * S2 * r1;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  double tr_sqrt = 0.0;
  for (double l : es.eigenvalues()) tr_sqrt += std::sqrt(std::max(l, 0.0));
  const double v = (mu1 - mu2).squaredNorm() + S1.trace() + S2.trace() - 2.0 * tr_sqrt;
  return std::max(v, 0.0);
}

double fid(const FeatureSet& a, const FeatureSet& b) {
  if (a.extractor_id != b.extractor_id)
    throw ValidationError("fid: feature sets come from different extractors (" + a.extractor_id + " vs " + b.extractor_id + ")");
  return frechet_distance(a.mean(), a.covariance(), b.mean(), b.covariance());
}

double polynomial_kernel(const Eigen::VectorXd& x, const Eigen::VectorXd& y, int degree) {
  return std::pow(x.dot(y) / static_cast<double>(x.size()) + 1.0, degree);
}

double kid(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, int degree) {
  const auto m = X.rows(), n = Y.rows();
  if (m < 2 || n < 2) throw ValidationError("kid: both sets need at least 2 samples");
  if (X.cols() != Y.cols()) throw ValidationError("kid: feature dimensions differ");
  const double d = static_cast<double>(X.cols());
  auto gram = [&](const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
    Eigen::MatrixXd k = (A * B.transpose()).array() / d + 1.0;
    return Eigen::MatrixXd(k.array().pow(degree));
  };
  const Eigen::MatrixXd kxx = gram(X, X), kyy = gram(Y, Y), kxy = gram(X, Y);
  const double sxx = (kxx.sum() - kxx.trace()) / static_cast<double>(m * (m - 1));
  const double syy = (kyy.sum() - kyy.trace()) / static_cast<double>(n * (n - 1));
  const double sxy = kxy.sum() / static_cast<double>(m * n);
  return sxx + syy - 2.0 * sxy;
}

double kid(const FeatureSet& a, const FeatureSet& b, int degree) {
  if (a.extractor_id != b.extractor_id) throw ValidationError("kid: feature sets come from different extractors");
  return kid(a.features, b.features, degree);
}

namespace {

// Gaussian-weighted local mean along one axis, renormalized where the window
// leaves the image.
std::vector<double> blur_axis(const std::vector<double>& in, int h, int w, const std::vector<double>& g, bool rows) {
  const int r = static_cast<int>(g.size() / 2);
  std::vector<double> out(in.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0, ws = 0.0;
      for (int k = -r; k <= r; ++k) {
        const int yy = rows ? y : y + k, xx = rows ? x + k : x;
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
        const double wt = g[static_cast<std::size_t>(k + r)];
        s += wt * in[static_cast<std::size_t>(yy) * w + xx];
        ws += wt;
      }
      out[static_cast<std::size_t>(y) * w + x] = s / ws;
    }
  return out;
}

std::vector<double> blur(const std::vector<double>& in, int h, int w, const std::vector<double>& g) {
  return blur_axis(blur_axis(in, h, w, g, true), h, w, g, false);
}

}  // namespace

double ssim(const ImageGrid& x, const ImageGrid& y, const SsimOptions& opt) {
  if (!x.same_shape(y)) throw ValidationError("ssim: image shapes differ");
  if (x.channels != 1 && x.channels != 3) throw ValidationError("ssim: expected 1 or 3 channels");
  if (opt.window < 1 || opt.window % 2 == 0 || !(opt.sigma > 0)) throw ValidationError("ssim: window must be odd and sigma > 0");
  std::vector<double> g(static_cast<std::size_t>(opt.window));
  const int r = opt.window / 2;
  for (int k = -r; k <= r; ++k) g[static_cast<std::size_t>(k + r)] = std::exp(-0.5 * k * k / (opt.sigma * opt.sigma));
  const double c1 = std::pow(0.01 * opt.data_range, 2), c2 = std::pow(0.03 * opt.data_range, 2);
  const int h = x.height, w = x.width;
  const std::size_t n = static_cast<std::size_t>(h) * w;
  double total = 0.0;
  for (int c = 0; c < x.channels; ++c) {
    std::vector<double> a(n), b(n), aa(n), bb(n), ab(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = x.pixels[i * x.channels + c];
      b[i] = y.pixels[i * y.channels + c];
      aa[i] = a[i] * a[i];
      bb[i] = b[i] * b[i];
      ab[i] = a[i] * b[i];
    }
    const auto ma = blur(a, h, w, g), mb = blur(b, h, w, g);
    const auto maa = blur(aa, h, w, g), mbb = blur(bb, h, w, g), mab = blur(ab, h, w, g);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double va = maa[i] - ma[i] * ma[i], vb = mbb[i] - mb[i] * mb[i], cov = mab[i] - ma[i] * mb[i];
      s += ((2 * ma[i] * mb[i] + c1) * (2 * cov + c2)) / ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
    }
    total += s / static_cast<double>(n);
  }
  return total / x.channels;
}

double psnr(const ImageGrid& x, const ImageGrid& y, double max_val) {
  if (!x.same_shape(y)) throw ValidationError("psnr: image shapes differ");
  if (x.pixels.empty()) throw ValidationError("psnr: empty images");
  double se = 0.0;
  for (std::size_t i = 0; i < x.pixels.size(); ++i) se += (x.pixels[i] - y.pixels[i]) * (x.pixels[i] - y.pixels[i]);
  const double mse = se / static_cast<double>(x.pixels.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(max_val * max_val / mse);
}

namespace {

std::pair<double, double> mean_var(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, s / static_cast<double>(v.size() - 1)};
}

}  // namespace

WelchResult welch_t(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw ValidationError("welch_t: each group needs at least 2 values");
  const auto [ma, va] = mean_var(a);
  const auto [mb, vb] = mean_var(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double qa = va / na, qb = vb / nb;
  WelchResult r;
  if (qa + qb == 0.0) {
    r.df = na + nb - 2;
    if (ma == mb) return r;
    r.t = ma > mb ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    r.p = 0.0;
    return r;
  }
  r.t = (ma - mb) / std::sqrt(qa + qb);
  r.df = (qa + qb) * (qa + qb) / (qa * qa / (na - 1) + qb * qb / (nb - 1));
  const boost::math::students_t dist(r.df);
  r.p = 2.0 * boost::math::cdf(dist, -std::abs(r.t));
  return r;
}

ScoreSummary summarize(const std::string& group, std::span<const double> scores) {
  if (scores.empty()) throw ValidationError("summary: no scores for group " + group);
  ScoreSummary s;
  s.group = group;
  s.n = static_cast<int>(scores.size());
  std::vector<double> v(scores.begin(), scores.end());
  std::sort(v.begin(), v.end());
  s.min = v.front();
  s.max = v.back();
  const std::size_t mid = v.size() / 2;
  s.median = v.size() % 2 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

ScoreTable score_summary(std::span<const RatingRecord> ratings) {
  std::vector<double> real, gen;
  for (const auto& r : ratings) {
    if (r.group == "real") {
      real.push_back(r.score);
    } else if (r.group == "generated") {
      gen.push_back(r.score);
    } else {
      throw ValidationError("score_summary: unknown group '" + r.group + "'");
    }
  }
  if (real.size() < 2 || gen.size() < 2) throw ValidationError("insufficient data: each group needs at least 2 ratings");
  ScoreTable t;
  t.real = summarize("real", real);
  t.generated = summarize("generated", gen);
  t.test = welch_t(real, gen);
  return t;
}

std::string format_number(double v, int precision) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

namespace {

nlohmann::ordered_json summary_json(const ScoreSummary& s) {
  nlohmann::ordered_json j;
  j["group"] = s.group;
  j["n"] = s.n;
  j["mean"] = s.mean;
  j["std"] = s.std;
  j["min"] = s.min;
  j["max"] = s.max;
  j["median"] = s.median;
  return j;
}

nlohmann::ordered_json finite_or_string(double v) {
  if (std::isfinite(v)) return v;
  return format_number(v);
}

}  // namespace

nlohmann::ordered_json ScoreTable::to_json() const {
  nlohmann::ordered_json j;
  j["real"] = summary_json(real);
  j["generated"] = summary_json(generated);
  j["t_test"] = {{"t", finite_or_string(test.t)}, {"df", test.df}, {"p", test.p}};
  return j;
}

std::string ScoreTable::to_text() const {
  std::ostringstream os;
  os << "Group     | mean ± std    | Min | Max | Median | t-test\n";
  auto row = [&](const ScoreSummary& s, const std::string& t) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-9s | %5.2f ± %-5.2f | %3g | %3g | %6g | %s\n", s.group.c_str(), s.mean, s.std, s.min, s.max,
                  s.median, t.c_str());
    os << buf;
  };
  row(real, "t=" + format_number(test.t, 3) + " (p=" + format_number(test.p, 3) + ")");
  row(generated, "");
  return os.str();
}

nlohmann::ordered_json MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["fid"] = fid;
  j["kid"] = kid;
  j["ssim_mean"] = ssim_mean;
  j["psnr_mean"] = finite_or_string(psnr_mean);
  j["n_real"] = n_real;
  j["n_gen"] = n_gen;
  j["extractor_id"] = extractor_id;
  j["conventions"] = {{"kid", "raw unbiased MMD^2, kernel (x.y/d + 1)^3"},
                      {"ssim", "gaussian window 11, sigma 1.5, data range 1, unit-range images"},
                      {"psnr", "max value 1, unit-range images"}};
  return j;
}

std::string MetricReport::to_text(const std::string& model_name) const {
  std::ostringstream os;
  char buf[200];
  std::snprintf(buf, sizeof buf, "%-12s | %10s | %10s | %8s | %8s\n", "Model", "FID", "KID", "SSIM", "PSNR");
  os << buf;
  std::snprintf(buf, sizeof buf, "%-12s | %10s | %10s | %8s | %8s\n", model_name.c_str(), format_number(fid, 3).c_str(),
                format_number(kid, 4).c_str(), format_number(ssim_mean, 3).c_str(), format_number(psnr_mean, 3).c_str());
  os << buf;
  os << "extractor: " << extractor_id << "  (n_real=" << n_real << ", n_gen=" << n_gen << ")\n";
  return os.str();
}

MetricReport evaluate(std::span<const ImageGrid> real, std::span<const ImageGrid> generated, const FeatureExtractor& extractor) {
  if (real.size() < 2 || generated.size() < 2) throw ValidationError("evaluate: need at least 2 real and 2 generated images");
  const FeatureSet fr = extractor.extract(real, "real");
  const FeatureSet fg = extractor.extract(generated, "generated");
  MetricReport r;
  r.fid = fid(fr, fg);
  r.kid = kid(fr, fg);
  r.n_real = static_cast<int>(real.size());
  r.n_gen = static_cast<int>(generated.size());
  r.extractor_id = extractor.id();
  const std::size_t pairs = std::min(real.size(), generated.size());
  double s = 0.0, p = 0.0;
  for (std::size_t i = 0; i < pairs; ++i) {
    s += ssim(real[i], generated[i]);
    p += psnr(real[i], generated[i]);
  }
  r.ssim_mean = s / static_cast<double>(pairs);
  r.psnr_mean = p / static_cast<double>(pairs);
  return r;
}

}  // namespace floorgen::metrics

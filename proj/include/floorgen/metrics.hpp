#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "floorgen/image.hpp"

namespace floorgen::metrics {

/// n x d feature matrix from one extractor.
struct FeatureSet {
  Eigen::MatrixXd features;
  std::string extractor_id;
  std::string source;  // "real" or "generated"

  Eigen::VectorXd mean() const;
  /// Unbiased (n - 1) covariance.
  Eigen::MatrixXd covariance() const;
};

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  /// Images in unit range [0, 1], 1 or 3 channels, all the same size.
  virtual FeatureSet extract(std::span<const ImageGrid> images, const std::string& source) const = 0;
  virtual std::string id() const = 0;
};

/// Three strided 3x3 ReLU convolutions with fixed seeded weights, then
/// global average pooling to `dim` features.
class RandomConvExtractor final : public FeatureExtractor {
 public:
  explicit RandomConvExtractor(std::uint64_t seed = 0xf1d, int dim = 64);
  FeatureSet extract(std::span<const ImageGrid> images, const std::string& source) const override;
  std::string id() const override { return id_; }

 private:
  std::vector<ag::Tensor> weights_;
  std::vector<ag::Tensor> biases_;
  std::string id_;
};

/// ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)). The root trace is taken
/// from the eigenvalues of sqrt(S1) S2 sqrt(S1).
double frechet_distance(const Eigen::VectorXd& mu1, const Eigen::MatrixXd& S1, const Eigen::VectorXd& mu2,
                        const Eigen::MatrixXd& S2);
/// Frechet distance of Gaussian fits; extractor ids must match.
double fid(const FeatureSet& a, const FeatureSet& b);

/// (x.y / d + 1)^degree
double polynomial_kernel(const Eigen::VectorXd& x, const Eigen::VectorXd& y, int degree = 3);
/// Unbiased MMD^2 with the polynomial kernel. Reported raw (not x100).
double kid(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, int degree = 3);
double kid(const FeatureSet& a, const FeatureSet& b, int degree = 3);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double data_range = 1.0;
};

/// Mean SSIM with a Gaussian window that is truncated and renormalized at the
/// borders. Multi-channel images average the per-channel maps.
double ssim(const ImageGrid& x, const ImageGrid& y, const SsimOptions& opt = {});

/// 10 log10(max^2 / MSE); +inf when the images are identical.
double psnr(const ImageGrid& x, const ImageGrid& y, double max_val = 1.0);

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
};

/// Unequal-variance two-sample t test, two-sided p.
WelchResult welch_t(std::span<const double> a, std::span<const double> b);

struct RatingRecord {
  std::string session_id;
  std::string player_id;
  std::string image_id;
  std::string group;  // "real" or "generated"
  int score = 0;
  std::string submitted_at;
};

struct ScoreSummary {
  std::string group;
  double mean = 0.0;
  double std = 0.0;  // sample (n - 1)
  double min = 0.0;
  double max = 0.0;
  double median = 0.0;
  int n = 0;
};

ScoreSummary summarize(const std::string& group, std::span<const double> scores);

struct ScoreTable {
  ScoreSummary real;
  ScoreSummary generated;
  WelchResult test;

  nlohmann::ordered_json to_json() const;
  /// Group | mean ± std | Min | Max | Median | t-test
  std::string to_text() const;
};

/// Throws ValidationError ("insufficient data") unless both groups have at
/// least two ratings.
ScoreTable score_summary(std::span<const RatingRecord> ratings);

struct MetricReport {
  double fid = 0.0;
  double kid = 0.0;
  double ssim_mean = 0.0;
  double psnr_mean = 0.0;
  int n_real = 0;
  int n_gen = 0;
  std::string extractor_id;

  /// psnr_mean is written as "inf" when infinite.
  nlohmann::ordered_json to_json() const;
  /// Model | FID | KID | SSIM | PSNR
  std::string to_text(const std::string& model_name = "floorgen") const;
};

/// FID/KID over all images; SSIM/PSNR over index-aligned pairs. Unit-range
/// images.
MetricReport evaluate(std::span<const ImageGrid> real, std::span<const ImageGrid> generated, const FeatureExtractor& extractor);

std::string format_number(double v, int precision = 4);

}  // namespace floorgen::metrics

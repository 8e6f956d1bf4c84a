#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "floorgen/control.hpp"
#include "floorgen/net/text.hpp"

namespace floorgen::analytics {

/// One row per generated output.
struct EmbeddingSet {
  Eigen::MatrixXd vectors;
  std::vector<std::string> ids;
  std::vector<std::string> labels;
  std::vector<std::string> warnings;

  /// Throws ValidationError on non-finite entries or mismatched lengths.
  void validate() const;
};

struct PcaModel {
  Eigen::VectorXd mean;
  /// k x d, orthonormal rows.
  Eigen::MatrixXd components;
  /// Per-component sample variance, non-increasing.
  Eigen::VectorXd explained_variance;
  /// Trace of the sample covariance of the fitted data.
  double total_variance = 0.0;

  int k() const { return static_cast<int>(components.rows()); }
  Eigen::VectorXd explained_variance_ratio() const;
};

/// Centered SVD. The largest-magnitude entry of each component is positive.
/// Requires n >= 2 and 1 <= k <= min(n, d).
PcaModel pca_fit(const Eigen::MatrixXd& X, int k);
PcaModel pca_fit(const EmbeddingSet& E, int k);
/// n x d -> n x k
Eigen::MatrixXd pca_transform(const PcaModel& model, const Eigen::MatrixXd& X);
/// n x k -> n x d
Eigen::MatrixXd pca_inverse(const PcaModel& model, const Eigen::MatrixXd& Y);

struct ProjectionFiles {
  std::filesystem::path csv;
  std::filesystem::path sidecar;
};

/// Writes `csv_path` (id,label,pc1,pc2; %.17g) and a JSON sidecar with the
/// explained variance next to it (same stem, .json).
ProjectionFiles export_projection(const PcaModel& model, const EmbeddingSet& E, const std::filesystem::path& csv_path);

/// One cell of the prompt x mask grid.
struct EmbeddingPrompt {
  std::string label;
  std::string prompt;
  control::FootprintMask mask;
};

struct EmbedOptions {
  int n = 1600;
  int sampling_steps = 8;
  std::uint64_t seed = 0;
  int batch = 16;
  /// Latent channels; the spatial size follows from the mask and the
  /// model's downsample factor.
  int z_channels = 4;
  /// False adds a warning to the result.
  bool checkpoint_trained = true;
};

/// Item i uses grid[i % grid.size()] and seed derive(seed, i): DDIM sample,
/// re-noise to t = T/2, then the pooled middle-block activation of the
/// controlled U-Net at that timestep.
EmbeddingSet collect_embeddings(const control::ControlledModel& model, const net::TextEncoder& text,
                                const diffusion::NoiseSchedule& schedule, const std::vector<EmbeddingPrompt>& grid,
                                const EmbedOptions& opt);

}  // namespace floorgen::analytics

#include "floorgen/analytics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace floorgen::analytics {

using ag::Tensor;

void EmbeddingSet::validate() const {
  const auto n = static_cast<std::size_t>(vectors.rows());
  if (labels.size() != n) throw ValidationError("embedding set: labels length differs from vector count");
  if (!ids.empty() && ids.size() != n) throw ValidationError("embedding set: ids length differs from vector count");
  if (!vectors.allFinite()) throw ValidationError("embedding set: non-finite entries");
}

Eigen::VectorXd PcaModel::explained_variance_ratio() const {
  if (total_variance <= 0.0) return Eigen::VectorXd::Zero(explained_variance.size());
  return explained_variance / total_variance;
}

PcaModel pca_fit(const Eigen::MatrixXd& X, int k) {
  const auto n = X.rows(), d = X.cols();
  if (n < 2) throw ValidationError("pca_fit: need at least 2 vectors");
  if (k < 1 || k > std::min(n, d))
    throw ValidationError("pca_fit: k = " + std::to_string(k) + " outside [1, " + std::to_string(std::min(n, d)) + "]");
  if (!X.allFinite()) throw ValidationError("pca_fit: non-finite input");
  PcaModel m;
  m.mean = X.colwise().mean().transpose();
  const Eigen::MatrixXd C = X.rowwise() - m.mean.transpose();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(C, Eigen::ComputeThinV);
  const Eigen::VectorXd s = svd.singularValues();
  const Eigen::MatrixXd V = svd.matrixV();
  m.components.resize(k, d);
  m.explained_variance.resize(k);
  for (int i = 0; i < k; ++i) {
    Eigen::VectorXd c = V.col(i);
    Eigen::Index arg = 0;
    c.cwiseAbs().maxCoeff(&arg);
    if (c(arg) < 0) c = -c;
    m.components.row(i) = c.transpose();
    m.explained_variance(i) = s(i) * s(i) / static_cast<double>(n - 1);
  }
  m.total_variance = C.squaredNorm() / static_cast<double>(n - 1);
  return m;
}

PcaModel pca_fit(const EmbeddingSet& E, int k) {
  E.validate();
  return pca_fit(E.vectors, k);
}

Eigen::MatrixXd pca_transform(const PcaModel& model, const Eigen::MatrixXd& X) {
  if (X.cols() != model.mean.size()) throw ValidationError("pca_transform: dimension mismatch");
  return (X.rowwise() - model.mean.transpose()) * model.components.transpose();
}

Eigen::MatrixXd pca_inverse(const PcaModel& model, const Eigen::MatrixXd& Y) {
  if (Y.cols() != model.k()) throw ValidationError("pca_inverse: expected " + std::to_string(model.k()) + " columns");
  return (Y * model.components).rowwise() + model.mean.transpose();
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

ProjectionFiles export_projection(const PcaModel& model, const EmbeddingSet& E, const std::filesystem::path& csv_path) {
  if (model.k() < 2) throw ValidationError("export_projection: model needs k >= 2");
  E.validate();
  const Eigen::MatrixXd Y = pca_transform(model, E.vectors);
  ProjectionFiles files{csv_path, std::filesystem::path(csv_path).replace_extension(".json")};
  if (csv_path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(csv_path.parent_path(), ec);
  }
  std::ofstream out(files.csv, std::ios::binary);
  if (!out) throw IoError("export_projection: cannot write " + files.csv.string());
  out << "id,label,pc1,pc2\n";
  for (Eigen::Index i = 0; i < Y.rows(); ++i) {
    const std::string id = E.ids.empty() ? std::to_string(i) : E.ids[static_cast<std::size_t>(i)];
    out << csv_field(id) << ',' << csv_field(E.labels[static_cast<std::size_t>(i)]) << ',' << g17(Y(i, 0)) << ','
        << g17(Y(i, 1)) << '\n';
  }
  if (!out.flush()) throw IoError("export_projection: write failed for " + files.csv.string());

  nlohmann::ordered_json j;
  j["n"] = E.vectors.rows();
  j["d"] = E.vectors.cols();
  j["k"] = model.k();
  j["explained_variance"] = std::vector<double>(model.explained_variance.data(),
                                                model.explained_variance.data() + model.explained_variance.size());
  const Eigen::VectorXd ratio = model.explained_variance_ratio();
  j["explained_variance_ratio"] = std::vector<double>(ratio.data(), ratio.data() + ratio.size());
  j["total_variance"] = model.total_variance;
  j["warnings"] = E.warnings;
  std::ofstream side(files.sidecar, std::ios::binary);
  if (!side) throw IoError("export_projection: cannot write " + files.sidecar.string());
  side << j.dump(2) << '\n';
  if (!side.flush()) throw IoError("export_projection: write failed for " + files.sidecar.string());
  return files;
}

EmbeddingSet collect_embeddings(const control::ControlledModel& model, const net::TextEncoder& text,
                                const diffusion::NoiseSchedule& schedule, const std::vector<EmbeddingPrompt>& grid,
                                const EmbedOptions& opt) {
  if (opt.n < 2) throw ValidationError("collect_embeddings: n must be >= 2");
  if (grid.empty()) throw ValidationError("collect_embeddings: empty prompt grid");
  if (opt.batch < 1) throw ValidationError("collect_embeddings: batch must be >= 1");
  const int f = model.downsample_factor();
  const int H = grid[0].mask.height(), W = grid[0].mask.width();
  for (const auto& g : grid)
    if (g.mask.height() != H || g.mask.width() != W) throw ValidationError("collect_embeddings: masks differ in size");
  if (H % f || W % f) throw ValidationError("collect_embeddings: mask size not divisible by the downsample factor");
  const int h = H / f, w = W / f;
  const int t_mid = std::max(1, schedule.T / 2);
  const std::size_t latent = static_cast<std::size_t>(opt.z_channels) * h * w;

  EmbeddingSet E;
  if (!opt.checkpoint_trained) E.warnings.push_back("checkpoint is untrained; embeddings reflect random weights");
  std::vector<net::TextBrief> briefs;
  briefs.reserve(grid.size());
  for (const auto& g : grid) briefs.push_back(text.embed(g.prompt));

  ag::NoGradGuard no_grad;
  const int mid = model.base().config().mid_channels();
  E.vectors.resize(opt.n, mid);
  E.ids.resize(static_cast<std::size_t>(opt.n));
  E.labels.resize(static_cast<std::size_t>(opt.n));

  // Items sharing a grid cell are batched together.
  for (std::size_t cell = 0; cell < grid.size(); ++cell) {
    std::vector<int> items;
    for (int i = static_cast<int>(cell); i < opt.n; i += static_cast<int>(grid.size())) items.push_back(i);
    for (std::size_t start = 0; start < items.size(); start += static_cast<std::size_t>(opt.batch)) {
      const std::size_t b = std::min(items.size() - start, static_cast<std::size_t>(opt.batch));
      std::vector<double> zT, eps;
      zT.reserve(b * latent);
      eps.reserve(b * latent);
      for (std::size_t j = 0; j < b; ++j) {
        Rng rng(Rng::derive(opt.seed, static_cast<std::uint64_t>(items[start + j])));
        const auto a = rng.normal_vector(latent), e = rng.normal_vector(latent);
        zT.insert(zT.end(), a.begin(), a.end());
        eps.insert(eps.end(), e.begin(), e.end());
      }
      const ag::Shape shape{static_cast<int>(b), opt.z_channels, h, w};
      diffusion::Conditioning cond;
      cond.text = net::TextBatch::repeat(briefs[cell], static_cast<int>(b));
      std::vector<Tensor> masks(b, grid[cell].mask.to_tensor());
      cond.mask = ag::concat_batch(masks);
      const Tensor z0 = diffusion::sample_from(model, Tensor::from(shape, std::move(zT)), cond, schedule, opt.sampling_steps);
      const auto noised = diffusion::forward_diffuse(z0, t_mid, Tensor::from(shape, std::move(eps)), schedule);
      Tensor pooled;
      model.controlled_forward(noised.z, noised.t, cond.text, cond.mask, &pooled);
      for (std::size_t j = 0; j < b; ++j) {
        const int i = items[start + j];
        for (int c = 0; c < mid; ++c) E.vectors(i, c) = pooled.data()[j * static_cast<std::size_t>(mid) + c];
        char id[24];
        std::snprintf(id, sizeof id, "emb-%05d", i);
        E.ids[static_cast<std::size_t>(i)] = id;
        E.labels[static_cast<std::size_t>(i)] = grid[cell].label;
      }
    }
  }
  E.validate();
  return E;
}

}  // namespace floorgen::analytics

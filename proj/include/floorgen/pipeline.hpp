#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "floorgen/checkpoint.hpp"
#include "floorgen/config.hpp"
#include "floorgen/control.hpp"
#include "floorgen/data.hpp"

namespace floorgen::pipeline {

using ag::Tensor;

/// Training triples held in memory, model space.
struct TripleSet {
  std::vector<std::string> ids;
  std::vector<std::string> prompts;
  /// [N, 3, H, W] in [-1, 1]
  Tensor plans;
  /// [N, 1, H, W] in {0, 1}
  Tensor masks;

  int size() const { return static_cast<int>(ids.size()); }
  bool empty() const { return ids.empty(); }
  TripleSet subset(std::span<const int> index) const;
};

/// All records of one split, in manifest order.
TripleSet load_triples(const data::Manifest& manifest, const std::string& split);
TripleSet make_triples(std::span<const data::Sample> samples);

/// Codec, text embedder, stage-1 U-Net and (after stage 2 starts) the
/// control branch.
class Model {
 public:
  /// Fresh weights seeded from cfg.seed.
  explicit Model(const RunConfig& cfg);

  const RunConfig& config() const { return cfg_; }
  const diffusion::NoiseSchedule& schedule() const { return schedule_; }
  const net::HashTextEmbedder& text() const { return *text_; }
  net::LatentCodec& codec() { return *codec_; }
  const net::LatentCodec& codec() const { return *codec_; }
  net::UNet& unet() { return *unet_; }
  const net::UNet& unet() const { return *unet_; }
  /// Null before stage 2.
  const control::ControlledModel* controlled() const { return controlled_.get(); }

  /// 0: untrained, 1: codec and U-Net trained, 2: control branch trained.
  int stage() const { return stage_; }
  void set_stage(int s) { stage_ = s; }
  long steps(int stage) const;
  void add_steps(int stage, long n);

  double latent_scale() const { return latent_scale_; }
  /// Sets the latent scale to 1 / std of the codec means over `plans`.
  void calibrate_latent_scale(const Tensor& plans);

  /// Scaled posterior means.
  Tensor encode(const Tensor& plans) const;
  /// Images in [-1, 1].
  Tensor decode(const Tensor& z) const;
  ag::Shape latent_shape(int n) const;

  /// Clones and freezes the U-Net behind zero convolutions.
  void attach_control();
  /// Control branch when attached, else the text-only U-Net.
  const diffusion::EpsModel& eps_model() const;

  /// Storage-space images. Image i starts from z_T drawn with
  /// Rng::derive(seed, i), so it does not depend on n.
  std::vector<ImageGrid> generate(const std::string& prompt, const control::FootprintMask& mask, int steps, int n,
                                  std::uint64_t seed) const;

  /// Stage-1 archives hold "codec.*" and "unet.*"; stage-2 archives add
  /// "control.*" and the stage-1 U-Net checksum.
  void save(const std::filesystem::path& path) const;
  /// Throws LoadError on corruption or a stage-1 checksum mismatch.
  static Model load(const std::filesystem::path& path);
  std::string stage1_checksum() const;

 private:
  RunConfig cfg_;
  diffusion::NoiseSchedule schedule_;
  std::shared_ptr<net::HashTextEmbedder> text_;
  std::shared_ptr<net::LatentCodec> codec_;
  std::shared_ptr<net::UNet> unet_;
  std::shared_ptr<control::ControlledModel> controlled_;
  std::shared_ptr<control::TextOnlyModel> text_only_;
  double latent_scale_ = 1.0;
  int stage_ = 0;
  long steps_[3] = {0, 0, 0};
};

struct EpochLoss {
  int epoch = 0;
  double train = 0.0;
  /// Deterministic probe loss over the validation split; absent when empty.
  std::optional<double> val;
  long steps = 0;
};

struct ProbePoint {
  long step = 0;
  double loss = 0.0;
};

struct TrainReport {
  /// 0: codec, 1: denoiser, 2: control branch.
  int stage = 0;
  std::vector<EpochLoss> curve;
  std::vector<ProbePoint> probes;
  long steps = 0;
  double initial_probe = 0.0;
  double final_probe = 0.0;

  nlohmann::ordered_json to_json() const;
};

struct TrainHooks {
  /// Probe the training set every this many steps (0: only at the ends).
  long probe_every = 0;
  /// Called after each probe; returning true stops training.
  std::function<bool(const ProbePoint&)> stop;
  /// Stops once a probe falls below this fraction of the initial probe
  /// (0: off).
  double stop_fraction = 0.0;
  std::function<void(const std::string&)> log;
};

/// Deterministic loss on fixed (t, eps) draws: every t when T <= 16, else
/// 16 evenly spaced timesteps. Stage 0 is the codec's L1 reconstruction.
double probe_loss(const Model& model, const TripleSet& set, int stage, std::uint64_t seed);

TrainReport train_codec(Model& model, const TripleSet& train, const TripleSet& val, const OptimConfig& opt,
                        std::uint64_t seed, const TrainHooks& hooks = {});
/// Calibrates the latent scale from the training plans before the first step.
TrainReport train_stage1(Model& model, const TripleSet& train, const TripleSet& val, const OptimConfig& opt,
                         std::uint64_t seed, const TrainHooks& hooks = {});
/// Attaches the control branch if needed. Only the clone, zero convolutions
/// and hint encoder are updated.
TrainReport train_stage2(Model& model, const TripleSet& train, const TripleSet& val, const OptimConfig& opt,
                         std::uint64_t seed, const TrainHooks& hooks = {});

struct SweepRow {
  int steps = 0;
  /// Mean over eval triples of the per-triple median MSE over seeds.
  double mse_median = 0.0;
  double mse_mean = 0.0;
  double ssim_mean = 0.0;
};

struct SweepReport {
  std::vector<SweepRow> rows;
  int seeds = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> eval_ids;

  nlohmann::ordered_json to_json() const;
  std::string to_text() const;
};

/// Reconstruction fidelity of the conditioned sampler against the eval plans
/// for each step count. Samples are quantized to 8 bits before scoring; when
/// `dump_dir` is set they are written as <id>_s<steps>_<k>.png.
SweepReport steps_fidelity_sweep(const Model& model, const TripleSet& eval, std::span<const int> step_list, int seeds,
                                 std::uint64_t seed, const std::optional<std::filesystem::path>& dump_dir = {});

/// Four samples of one building type sharing a prompt, each plan and mask
/// shrunk by `scale` into a different quadrant, so only the footprint tells
/// them apart.
std::vector<data::Sample> quadrant_samples(data::BuildingType type, std::uint64_t seed, int size, double scale = 0.55);

struct ConditioningReport {
  /// iou[i][j]: silhouette of the image generated for mask i against mask j.
  std::vector<std::vector<double>> iou;
  /// Cases whose own mask has the strictly highest IoU.
  int own_best = 0;

  nlohmann::ordered_json to_json() const;
};

/// Generates one image per sample from its prompt and mask and compares the
/// plan silhouette with every mask.
ConditioningReport conditioning_efficacy(const Model& model, std::span<const data::Sample> samples, int steps,
                                         std::uint64_t seed);

/// Storage-space [0, 255] -> unit range [0, 1].
ImageGrid to_unit(const ImageGrid& storage);
/// One row of tiles, storage space.
ImageGrid tile_row(std::span<const ImageGrid> images, int gap = 2);

}  // namespace floorgen::pipeline

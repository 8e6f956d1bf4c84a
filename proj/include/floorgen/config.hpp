#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "floorgen/control.hpp"
#include "floorgen/diffusion.hpp"
#include "floorgen/net/codec.hpp"
#include "floorgen/net/text.hpp"
#include "floorgen/net/unet.hpp"

namespace floorgen {

struct OptimConfig {
  double lr = 1e-4;
  int epochs = 429;
  int batch_size = 1;
  /// Stops training after this many optimizer steps; 0 means no limit.
  long max_steps = 0;
  double clip_norm = 1.0;
  /// "constant" or "cosine" (decays to lr / 20 over the planned steps).
  std::string lr_schedule = "constant";

  /// Learning rate at a step of a run planned to last `total` steps.
  double lr_at(long step, long total) const;
  AdamConfig adam() const;
  nlohmann::json to_json() const;
};

struct ScheduleConfig {
  int T = 1000;
  double beta_start = 0.00085;
  double beta_end = 0.012;

  diffusion::NoiseSchedule make() const { return diffusion::make_noise_schedule(T, beta_start, beta_end); }
};

struct DatasetConfig {
  /// Directory holding manifest.jsonl. Empty means <output_dir>/dataset.
  std::string path;
  int n = 500;
  double val_fraction = 0.1;
};

/// Declarative description of one experiment. All randomness derives from
/// `seed`.
struct RunConfig {
  std::string profile = "default";
  std::uint64_t seed = 1;
  int image_size = 64;
  ScheduleConfig schedule;
  net::CodecConfig codec;
  net::UNetConfig unet;
  net::TextEmbedderConfig text;
  control::HintConfig hint;
  OptimConfig codec_train;
  OptimConfig stage1;
  OptimConfig stage2;
  int sample_steps = 50;
  DatasetConfig dataset;
  std::string output_dir = "runs/default";

  /// Full-scale settings at 64 x 64 with T = 1000.
  static RunConfig defaults();
  /// Smoke profile: 32 x 32 images, T = 8, 5 epochs.
  static RunConfig desk();
  static RunConfig profile_named(const std::string& name);

  /// Throws ValidationError naming the offending field.
  void validate() const;

  /// Canonical form; the text vocabulary is omitted when it is the default.
  nlohmann::json to_json() const;
  /// Fields absent from `j` keep the values of `base`. Unknown fields and
  /// type mismatches raise ValidationError with the dotted field name.
  static RunConfig from_json(const nlohmann::json& j, const RunConfig& base);
  static RunConfig from_json(const nlohmann::json& j);

  /// SHA-256 of the canonical JSON dump.
  std::string hash() const;

  std::filesystem::path dataset_dir() const;
};

/// Reads a JSON config file. A top-level "profile" selects the base profile
/// that the remaining fields override.
RunConfig load_config(const std::filesystem::path& path);

}  // namespace floorgen

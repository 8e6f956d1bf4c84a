#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "floorgen/control.hpp"
#include "floorgen/image.hpp"

namespace floorgen::data {

enum class BuildingType {
  studio,
  one_bedroom_apartment,
  two_bedroom_apartment,
  office_one_core,
  library,
  auditorium,
  football_stadium,
  arena,
};

inline constexpr std::array<BuildingType, 8> kAllBuildingTypes{
    BuildingType::studio,         BuildingType::one_bedroom_apartment, BuildingType::two_bedroom_apartment,
    BuildingType::office_one_core, BuildingType::library,              BuildingType::auditorium,
    BuildingType::football_stadium, BuildingType::arena};

enum class FootprintShape { rectangle, l_shape, ellipse, rounded_rect };

std::string to_string(BuildingType t);
std::string to_string(FootprintShape s);
BuildingType parse_building_type(const std::string& s);
FootprintShape parse_footprint_shape(const std::string& s);

struct BuildingSpec {
  BuildingType building_type = BuildingType::studio;
  FootprintShape footprint = FootprintShape::rectangle;
  int rooms_min = 1;
  int rooms_max = 2;
  std::uint64_t seed = 0;
};

/// Type-specific room range and a seeded footprint choice. Stadiums and
/// arenas are always elliptical.
BuildingSpec default_spec(BuildingType type, std::uint64_t seed);
std::pair<int, int> room_count_range(BuildingType type);

/// "a floorplan for a {phrase}" ("a floor plan for a football stadium").
std::string prompt_from_spec(const BuildingSpec& spec);

/// Fill colours in storage space, keyed by room role. Every entry has
/// luminance below 0.9 so plan silhouettes cover the whole footprint.
struct Palette {
  static constexpr std::array<double, 3> background{255, 255, 255};
  static constexpr std::array<double, 3> wall{38, 38, 46};
  static const std::map<std::string, std::array<double, 3>>& rooms();
};

struct Sample {
  /// Filled footprint silhouette.
  control::FootprintMask mask;
  /// RGB, storage space [0, 255].
  ImageGrid plan;
  std::string prompt;
  /// Roles of the rendered rooms, in render order.
  std::vector<std::string> rooms;
};

/// Renders a plan on a `size` x `size` canvas. Geometry is defined in unit
/// coordinates, so the same spec at a larger size gives a scaled companion.
/// Throws GenerationError when the room range cannot fit the footprint.
Sample generate_sample(const BuildingSpec& spec, int size = 64);

struct DatasetRecord {
  std::string id;
  std::string prompt;
  std::string mask_path;
  std::string plan_path;
  BuildingType building_type = BuildingType::studio;
  std::uint64_t seed = 0;
  std::string split;

  /// Field order is fixed: id, prompt, mask_path, plan_path, building_type,
  /// seed, split.
  nlohmann::ordered_json to_json() const;
  static DatasetRecord from_json(const nlohmann::json& j);
};

struct Manifest {
  /// Directory holding manifest.jsonl; record paths are relative to it.
  std::filesystem::path root;
  std::vector<DatasetRecord> records;
  /// Non-fatal conditions, e.g. an empty validation split.
  std::vector<std::string> warnings;

  std::vector<const DatasetRecord*> split(const std::string& name) const;
  std::filesystem::path path() const { return root / "manifest.jsonl"; }
};

struct DatasetOptions {
  int n = 500;
  /// Relative weights; empty means uniform over all types.
  std::vector<std::pair<BuildingType, double>> type_mix;
  std::uint64_t seed = 1;
  int image_size = 64;
  /// Also writes 256 x 256 companions under hires/.
  bool hires = false;
  double val_fraction = 0.1;
};

/// Per-type counts by largest remainder: each is within 1 of n * fraction.
std::vector<std::pair<BuildingType, int>> stratify(int n, const std::vector<std::pair<BuildingType, double>>& mix);

/// Writes PNGs and manifest.jsonl (plus manifest.meta.json) under out_dir.
Manifest build_dataset(const DatasetOptions& opts, const std::filesystem::path& out_dir);

/// Reads and checks manifest.jsonl (unique ids, required fields).
Manifest load_manifest(const std::filesystem::path& path);

struct Batch {
  std::vector<std::string> ids;
  std::vector<std::string> prompts;
  /// [B, 3, H, W] in [-1, 1]
  ag::Tensor plans;
  /// [B, 1, H, W] in {0, 1}
  ag::Tensor masks;
  std::vector<BuildingType> types;
};

/// Deterministic epoch iterator over one split. Images are read once and
/// kept in memory.
class BatchLoader {
 public:
  BatchLoader(const Manifest& manifest, const std::string& split, int batch_size, std::uint64_t seed);

  std::size_t size() const { return items_.size(); }
  std::size_t batches_per_epoch() const;
  /// Batches of the given epoch in shuffled order; the last one may be short.
  std::vector<Batch> epoch(int index) const;
  /// Record order of an epoch, for inspection.
  std::vector<std::string> order(int index) const;

 private:
  struct Item {
    DatasetRecord record;
    ImageGrid plan;  // model space
    ImageGrid mask;  // {0, 1}
  };
  std::vector<std::size_t> permutation(int index) const;

  std::vector<Item> items_;
  int batch_size_;
  std::uint64_t seed_;
};

}  // namespace floorgen::data

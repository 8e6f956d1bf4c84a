#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "floorgen/params.hpp"

namespace floorgen {

/// Single-file weight archive:
///   "FLOORGEN-CKPT\n" | u64 LE header length | JSON header | f64 LE payload
/// The header carries caller metadata under "meta", a tensor index
/// (name, shape, offset in values) and the SHA-256 of the payload.
struct Archive {
  struct Entry {
    std::string name;
    ag::Shape shape;
    std::vector<double> values;
  };
  nlohmann::json meta;
  std::vector<Entry> tensors;

  const Entry* find(const std::string& name) const;
  /// Names under `prefix.` with the prefix stripped.
  NamedParams view(const std::string& prefix) const;
};

void save_archive(const std::filesystem::path& path, const nlohmann::json& meta, const NamedParams& params);
/// Throws LoadError on a bad magic, truncation or payload checksum mismatch.
Archive load_archive(const std::filesystem::path& path);

/// Copies archive values into `dst` by name. Every entry of dst must be
/// present with the same shape (LoadError otherwise).
void restore(const Archive& archive, const std::string& prefix, NamedParams& dst);

}  // namespace floorgen

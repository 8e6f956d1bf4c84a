#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "floorgen/tensor.hpp"

namespace floorgen::net {

/// A tokenized design brief and its frozen context embedding.
struct TextBrief {
  std::string raw;
  std::vector<std::string> tokens;
  std::vector<int> ids;
  /// [L, dim]
  ag::Tensor embedding;
};

/// Padded batch of briefs for cross-attention.
struct TextBatch {
  /// [N, L_max, dim]
  ag::Tensor context;
  /// N * L_max bytes; 1 marks a real token, 0 padding.
  std::vector<unsigned char> key_mask;

  int batch() const { return context.dim(0); }
  static TextBatch from(std::span<const TextBrief> briefs);
  static TextBatch from(const TextBrief& brief) { return from(std::span<const TextBrief>(&brief, 1)); }
  /// The same brief for every one of n samples.
  static TextBatch repeat(const TextBrief& brief, int n);
};

struct TextEmbedderConfig {
  int dim = 128;
  int max_tokens = 32;
  int hash_buckets = 1024;
  std::uint64_t seed = 0x7e47ULL;
  /// Known words get dedicated rows; everything else is hashed into buckets.
  std::vector<std::string> vocabulary;

  static std::vector<std::string> default_vocabulary();
  nlohmann::json to_json() const;
  static TextEmbedderConfig from_json(const nlohmann::json& j);
};

/// Pluggable text encoder. Implementations must be deterministic and must not
/// change under training.
class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual TextBrief embed(std::string_view raw) const = 0;
  virtual int dim() const = 0;
  /// Stable identifier of the encoder weights.
  virtual std::string checksum() const = 0;
};

/// Lowercase, strip punctuation, split on whitespace.
std::vector<std::string> tokenize(std::string_view raw);

/// Default encoder: a seeded Gaussian table indexed by vocabulary id or by a
/// stable FNV-1a hash bucket for unknown words. Never updated.
class HashTextEmbedder final : public TextEncoder {
 public:
  explicit HashTextEmbedder(TextEmbedderConfig cfg = {});

  TextBrief embed(std::string_view raw) const override;
  int dim() const override { return cfg_.dim; }
  std::string checksum() const override;

  int token_id(const std::string& token) const;
  const TextEmbedderConfig& config() const { return cfg_; }
  std::size_t table_rows() const { return table_.size() / static_cast<std::size_t>(cfg_.dim); }

 private:
  TextEmbedderConfig cfg_;
  std::vector<double> table_;
};

std::uint64_t fnv1a64(std::string_view s);

}  // namespace floorgen::net

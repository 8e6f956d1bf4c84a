#include "floorgen/net/text.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "floorgen/hash.hpp"
#include "floorgen/rng.hpp"

namespace floorgen::net {

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::string> tokenize(std::string_view raw) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : raw) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else {
      // whitespace and punctuation both end a token: "two-bedroom" -> "two", "bedroom"
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::vector<std::string> TextEmbedderConfig::default_vocabulary() {
  std::vector<std::string> v{"a",       "an",        "floorplan", "floor",   "plan",    "for",     "the",
                             "studio",  "one",       "two",       "three",   "bedroom", "apartment",
                             "office",  "core",      "library",   "auditorium", "football", "stadium",
                             "arena",   "with",      "and",       "of",      "rooms",   "room",    "building"};
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

nlohmann::json TextEmbedderConfig::to_json() const {
  return {{"dim", dim}, {"max_tokens", max_tokens}, {"hash_buckets", hash_buckets}, {"seed", seed}, {"vocabulary", vocabulary}};
}

TextEmbedderConfig TextEmbedderConfig::from_json(const nlohmann::json& j) {
  TextEmbedderConfig c;
  c.dim = j.at("dim").get<int>();
  c.max_tokens = j.at("max_tokens").get<int>();
  c.hash_buckets = j.at("hash_buckets").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
  return c;
}

HashTextEmbedder::HashTextEmbedder(TextEmbedderConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.vocabulary.empty()) cfg_.vocabulary = TextEmbedderConfig::default_vocabulary();
  std::sort(cfg_.vocabulary.begin(), cfg_.vocabulary.end());
  if (cfg_.dim < 1 || cfg_.max_tokens < 1 || cfg_.hash_buckets < 1)
    throw ValidationError("HashTextEmbedder: dim, max_tokens and hash_buckets must be positive");
  const std::size_t rows = 1 + cfg_.vocabulary.size() + static_cast<std::size_t>(cfg_.hash_buckets);
  Rng rng(cfg_.seed);
  table_ = rng.normal_vector(rows * static_cast<std::size_t>(cfg_.dim));
}

int HashTextEmbedder::token_id(const std::string& token) const {
  auto it = std::lower_bound(cfg_.vocabulary.begin(), cfg_.vocabulary.end(), token);
  if (it != cfg_.vocabulary.end() && *it == token) return 1 + static_cast<int>(it - cfg_.vocabulary.begin());
  const auto bucket = fnv1a64(token) % static_cast<std::uint64_t>(cfg_.hash_buckets);
  return 1 + static_cast<int>(cfg_.vocabulary.size()) + static_cast<int>(bucket);
}

TextBrief HashTextEmbedder::embed(std::string_view raw) const {
  TextBrief b;
  b.raw = std::string(raw);
  b.tokens = tokenize(raw);
  if (b.tokens.empty()) throw ValidationError("embed_text: prompt is empty after normalization");
  if (b.tokens.size() > static_cast<std::size_t>(cfg_.max_tokens)) b.tokens.resize(static_cast<std::size_t>(cfg_.max_tokens));
  const int L = static_cast<int>(b.tokens.size());
  std::vector<double> e(static_cast<std::size_t>(L) * cfg_.dim);
  for (int i = 0; i < L; ++i) {
    const int id = token_id(b.tokens[i]);
    b.ids.push_back(id);
    std::copy_n(table_.begin() + static_cast<std::ptrdiff_t>(id) * cfg_.dim, cfg_.dim, e.begin() + i * cfg_.dim);
  }
  b.embedding = ag::Tensor::from({L, cfg_.dim}, std::move(e));
  return b;
}

std::string HashTextEmbedder::checksum() const {
  Sha256 h;
  h.update(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(table_.data()), table_.size() * sizeof(double)));
  return h.hex();
}

TextBatch TextBatch::from(std::span<const TextBrief> briefs) {
  if (briefs.empty()) throw ValidationError("TextBatch: no briefs");
  const int dim = briefs[0].embedding.dim(1);
  int L = 0;
  for (const auto& b : briefs) {
    if (b.embedding.dim(1) != dim) throw ValidationError("TextBatch: mixed embedding widths");
    L = std::max(L, b.embedding.dim(0));
  }
  const int n = static_cast<int>(briefs.size());
  std::vector<double> ctx(static_cast<std::size_t>(n) * L * dim, 0.0);
  TextBatch out;
  out.key_mask.assign(static_cast<std::size_t>(n) * L, 0);
  for (int i = 0; i < n; ++i) {
    const auto e = briefs[i].embedding.data();
    std::copy(e.begin(), e.end(), ctx.begin() + static_cast<std::ptrdiff_t>(i) * L * dim);
    std::fill_n(out.key_mask.begin() + static_cast<std::ptrdiff_t>(i) * L, briefs[i].embedding.dim(0), 1);
  }
  out.context = ag::Tensor::from({n, L, dim}, std::move(ctx));
  return out;
}

TextBatch TextBatch::repeat(const TextBrief& brief, int n) {
  std::vector<TextBrief> v(static_cast<std::size_t>(n), brief);
  return from(v);
}

}  // namespace floorgen::net

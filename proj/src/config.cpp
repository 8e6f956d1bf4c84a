#include "floorgen/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "floorgen/hash.hpp"

namespace floorgen {

using nlohmann::json;

AdamConfig OptimConfig::adam() const {
  AdamConfig a;
  a.lr = lr;
  a.clip_norm = clip_norm;
  return a;
}

double OptimConfig::lr_at(long step, long total) const {
  if (lr_schedule != "cosine" || total <= 1) return lr;
  const double f = std::min(1.0, static_cast<double>(step) / static_cast<double>(total - 1));
  const double floor = lr / 20.0;
  return floor + 0.5 * (lr - floor) * (1.0 + std::cos(3.141592653589793 * f));
}

json OptimConfig::to_json() const {
  return {{"lr", lr},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"max_steps", max_steps},
          {"clip_norm", clip_norm},
          {"lr_schedule", lr_schedule}};
}

RunConfig RunConfig::defaults() { return RunConfig{}; }

RunConfig RunConfig::desk() {
  RunConfig c;
  c.profile = "desk";
  c.image_size = 32;
  c.schedule = {8, 0.1, 0.6};
  c.codec.base_channels = 16;
  c.codec.channel_mults = {1, 2, 2};
  c.codec.groups = 8;
  c.unet = net::UNetConfig{4, 16, {1, 2, 2}, {1, 2, 4}, 1, 64, 32, 8, 1};
  c.text.dim = 32;
  c.text.hash_buckets = 256;
  c.hint.channels = {8, 16};
  c.codec_train = {3e-3, 5, 4, 0, 1.0, "cosine"};
  c.stage1 = {2e-3, 5, 8, 0, 1.0, "cosine"};
  c.stage2 = {2e-3, 5, 8, 0, 1.0, "cosine"};
  c.sample_steps = 8;
  c.dataset.n = 64;
  c.output_dir = "runs/desk";
  return c;
}

RunConfig RunConfig::profile_named(const std::string& name) {
  if (name == "default") return defaults();
  if (name == "desk") return desk();
  throw ValidationError("config.profile: unknown profile '" + name + "' (expected default or desk)");
}

namespace {

void require(bool ok, const std::string& field, const std::string& msg) {
  if (!ok) throw ValidationError("config." + field + ": " + msg);
}

void validate_optim(const OptimConfig& o, const std::string& f) {
  require(o.lr > 0, f + ".lr", "must be > 0");
  require(o.epochs >= 1, f + ".epochs", "must be >= 1");
  require(o.batch_size >= 1, f + ".batch_size", "must be >= 1");
  require(o.max_steps >= 0, f + ".max_steps", "must be >= 0");
  require(o.clip_norm >= 0, f + ".clip_norm", "must be >= 0");
  require(o.lr_schedule == "constant" || o.lr_schedule == "cosine", f + ".lr_schedule", "must be constant or cosine");
}

}  // namespace

void RunConfig::validate() const {
  require(image_size >= 8, "image_size", "must be >= 8");
  require(schedule.T >= 1, "schedule.T", "must be >= 1");
  require(schedule.beta_start > 0 && schedule.beta_start < 1, "schedule.beta_start", "must lie in (0, 1)");
  require(schedule.beta_end > 0 && schedule.beta_end < 1, "schedule.beta_end", "must lie in (0, 1)");
  try {
    codec.validate();
  } catch (const ValidationError& e) {
    throw ValidationError(std::string("config.codec: ") + e.what());
  }
  try {
    unet.validate();
  } catch (const ValidationError& e) {
    throw ValidationError(std::string("config.unet: ") + e.what());
  }
  const int f = codec.downsample_factor();
  require(image_size % f == 0, "image_size", "must be divisible by the codec downsample factor " + std::to_string(f));
  const int latent = image_size / f;
  const int unet_factor = 1 << (static_cast<int>(unet.channel_mults.size()) - 1);
  require(latent % unet_factor == 0, "unet.channel_mults",
          "latent size " + std::to_string(latent) + " is not divisible by the U-Net factor " + std::to_string(unet_factor));
  require(unet.in_channels == codec.z_channels, "unet.in_channels", "must equal codec.z_channels");
  require(unet.context_dim == text.dim, "unet.context_dim", "must equal text.dim");
  require(text.dim >= 1, "text.dim", "must be >= 1");
  require(text.max_tokens >= 1, "text.max_tokens", "must be >= 1");
  require(text.hash_buckets >= 1, "text.hash_buckets", "must be >= 1");
  require(hint.channels[0] >= 1 && hint.channels[1] >= 1, "hint.channels", "must be positive");
  validate_optim(codec_train, "codec_train");
  validate_optim(stage1, "stage1");
  validate_optim(stage2, "stage2");
  require(sample_steps >= 1 && sample_steps <= schedule.T, "sample_steps", "must lie in [1, schedule.T]");
  require(dataset.n >= 1, "dataset.n", "must be >= 1");
  require(dataset.val_fraction >= 0 && dataset.val_fraction < 1, "dataset.val_fraction", "must lie in [0, 1)");
  require(!output_dir.empty(), "output_dir", "must not be empty");
}

json RunConfig::to_json() const {
  json text_j = {{"dim", text.dim}, {"max_tokens", text.max_tokens}, {"hash_buckets", text.hash_buckets}, {"seed", text.seed}};
  if (!text.vocabulary.empty() && text.vocabulary != net::TextEmbedderConfig::default_vocabulary())
    text_j["vocabulary"] = text.vocabulary;
  return {{"profile", profile},
          {"seed", seed},
          {"image_size", image_size},
          {"schedule", {{"T", schedule.T}, {"beta_start", schedule.beta_start}, {"beta_end", schedule.beta_end}}},
          {"codec", codec.to_json()},
          {"unet", unet.to_json()},
          {"text", text_j},
          {"hint", {{"channels", hint.channels}}},
          {"codec_train", codec_train.to_json()},
          {"stage1", stage1.to_json()},
          {"stage2", stage2.to_json()},
          {"sample_steps", sample_steps},
          {"dataset", {{"path", dataset.path}, {"n", dataset.n}, {"val_fraction", dataset.val_fraction}}},
          {"output_dir", output_dir}};
}

namespace {

// Reads fields from one JSON object, tracking which keys were consumed.
class Reader {
 public:
  Reader(const json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ValidationError("config" + dotted("") + ": expected an object");
  }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ValidationError("config" + dotted(key) + ": wrong type (got " + std::string(j_.at(key).type_name()) + ")");
    }
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  Reader child(const std::string& key) { return Reader(j_.at(key), prefix_.empty() ? key : prefix_ + "." + key); }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ValidationError("config" + dotted(k) + ": unknown field");
  }

 private:
  std::string dotted(const std::string& key) const {
    std::string s = prefix_;
    if (!key.empty()) s = s.empty() ? key : s + "." + key;
    return s.empty() ? "" : "." + s;
  }

  const json& j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

void read_optim(Reader r, OptimConfig& o) {
  r.get("lr", o.lr);
  r.get("epochs", o.epochs);
  r.get("batch_size", o.batch_size);
  r.get("max_steps", o.max_steps);
  r.get("clip_norm", o.clip_norm);
  r.get("lr_schedule", o.lr_schedule);
  r.finish();
}

}  // namespace

RunConfig RunConfig::from_json(const json& j, const RunConfig& base) {
  RunConfig c = base;
  Reader r(j, "");
  r.get("profile", c.profile);
  r.get("seed", c.seed);
  r.get("image_size", c.image_size);
  if (r.has("schedule")) {
    Reader s = r.child("schedule");
    s.get("T", c.schedule.T);
    s.get("beta_start", c.schedule.beta_start);
    s.get("beta_end", c.schedule.beta_end);
    s.finish();
  }
  if (r.has("codec")) {
    Reader s = r.child("codec");
    s.get("image_channels", c.codec.image_channels);
    s.get("base_channels", c.codec.base_channels);
    s.get("channel_mults", c.codec.channel_mults);
    s.get("z_channels", c.codec.z_channels);
    s.get("groups", c.codec.groups);
    s.get("kl_weight", c.codec.kl_weight);
    s.finish();
  }
  if (r.has("unet")) {
    Reader s = r.child("unet");
    s.get("in_channels", c.unet.in_channels);
    s.get("base_channels", c.unet.base_channels);
    s.get("channel_mults", c.unet.channel_mults);
    s.get("attention_resolutions", c.unet.attention_resolutions);
    s.get("transformer_depth", c.unet.transformer_depth);
    s.get("time_embed_dim", c.unet.time_embed_dim);
    s.get("context_dim", c.unet.context_dim);
    s.get("groups", c.unet.groups);
    s.get("num_res_blocks", c.unet.num_res_blocks);
    s.finish();
  }
  if (r.has("text")) {
    Reader s = r.child("text");
    s.get("dim", c.text.dim);
    s.get("max_tokens", c.text.max_tokens);
    s.get("hash_buckets", c.text.hash_buckets);
    s.get("seed", c.text.seed);
    s.get("vocabulary", c.text.vocabulary);
    s.finish();
  }
  if (r.has("hint")) {
    Reader s = r.child("hint");
    s.get("channels", c.hint.channels);
    s.finish();
  }
  if (r.has("codec_train")) read_optim(r.child("codec_train"), c.codec_train);
  if (r.has("stage1")) read_optim(r.child("stage1"), c.stage1);
  if (r.has("stage2")) read_optim(r.child("stage2"), c.stage2);
  r.get("sample_steps", c.sample_steps);
  if (r.has("dataset")) {
    Reader s = r.child("dataset");
    s.get("path", c.dataset.path);
    s.get("n", c.dataset.n);
    s.get("val_fraction", c.dataset.val_fraction);
    s.finish();
  }
  r.get("output_dir", c.output_dir);
  r.finish();
  return c;
}

RunConfig RunConfig::from_json(const json& j) {
  std::string profile = "default";
  if (j.is_object() && j.contains("profile")) {
    if (!j.at("profile").is_string()) throw ValidationError("config.profile: wrong type");
    profile = j.at("profile").get<std::string>();
  }
  return from_json(j, profile_named(profile));
}

std::string RunConfig::hash() const { return sha256_hex(to_json().dump()); }

std::filesystem::path RunConfig::dataset_dir() const {
  if (!dataset.path.empty()) return dataset.path;
  return std::filesystem::path(output_dir) / "dataset";
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config: cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("config: " + path.string() + " is not valid JSON (" + e.what() + ")");
  }
  return RunConfig::from_json(j);
}

}  // namespace floorgen

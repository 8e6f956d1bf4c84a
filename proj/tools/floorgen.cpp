// floorgen: dataset generation, two-stage training, sampling, evaluation,
// latent analytics and the rating service behind one command.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "floorgen/analytics.hpp"
#include "floorgen/config.hpp"
#include "floorgen/data.hpp"
#include "floorgen/errors.hpp"
#include "floorgen/hash.hpp"
#include "floorgen/image.hpp"
#include "floorgen/metrics.hpp"
#include "floorgen/pipeline.hpp"
#include "floorgen/rng.hpp"
#include "floorgen/service.hpp"

namespace fs = std::filesystem;
using namespace floorgen;
using ojson = nlohmann::ordered_json;

namespace {

/// Unmet precondition (missing dataset or checkpoint). Exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr const char* kManifestName = "run_manifest.json";
constexpr const char* kTimingsName = "timings.json";

void log_line(const std::string& s) { std::cerr << s << '\n'; }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

/// Artifacts of one command, written under a single directory and listed in
/// its run manifest. Timings live in a separate file so the manifest depends
/// only on the config, the arguments and the artifact bytes.
class RunRecord {
 public:
  RunRecord(std::string command, fs::path dir) : command_(std::move(command)), dir_(std::move(dir)) {
    remove_previous();
    fs::create_directories(dir_);
    start_ = std::chrono::steady_clock::now();
    phase_start_ = start_;
  }

  const fs::path& dir() const { return dir_; }
  ojson& args() { return args_; }

  void phase(const std::string& name) {
    const auto now = std::chrono::steady_clock::now();
    timings_[name] = std::chrono::duration<double>(now - phase_start_).count();
    phase_start_ = now;
  }

  /// Lists every file under the run directory except the manifest and the
  /// timings file.
  void finish(const RunConfig& cfg) {
    timings_["total"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir_)) {
      if (!e.is_regular_file()) continue;
      const fs::path rel = fs::relative(e.path(), dir_);
      if (rel == kManifestName || rel == kTimingsName) continue;
      files.push_back(rel);
    }
    std::sort(files.begin(), files.end());
    ojson artifacts = ojson::array();
    for (const auto& rel : files) {
      artifacts.push_back({{"path", rel.generic_string()},
                           {"bytes", fs::file_size(dir_ / rel)},
                           {"sha1", git_blob_sha1_file(dir_ / rel)}});
    }
    ojson m;
    m["command"] = command_;
    m["args"] = args_;
    m["seed"] = cfg.seed;
    m["config_hash"] = cfg.hash();
    m["config"] = cfg.to_json();
    m["artifacts"] = artifacts;
    m["timings"] = kTimingsName;
    write_text(dir_ / kManifestName, m.dump(2) + "\n");
    ojson t;
    t["command"] = command_;
    t["seconds"] = timings_;
    write_text(dir_ / kTimingsName, t.dump(2) + "\n");
    std::cout << "wrote " << (dir_ / kManifestName).string() << " (" << files.size() << " artifacts)\n";
  }

 private:
  /// Files listed by an earlier manifest in the same directory belong to
  /// that run; removing them keeps each file under exactly one manifest.
  void remove_previous() {
    const fs::path old = dir_ / kManifestName;
    if (!fs::exists(old)) return;
    std::ifstream in(old);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception&) {
      throw LoadError("unreadable run manifest " + old.string());
    }
    for (const auto& a : j.value("artifacts", nlohmann::json::array())) {
      const fs::path p = dir_ / a.at("path").get<std::string>();
      std::error_code ec;
      fs::remove(p, ec);
    }
    fs::remove(old);
    fs::remove(dir_ / kTimingsName);
  }

  std::string command_;
  fs::path dir_;
  ojson args_ = ojson::object();
  ojson timings_ = ojson::object();
  std::chrono::steady_clock::time_point start_, phase_start_;
};

struct GlobalOptions {
  std::string config_path;
  std::string profile;
  std::optional<std::uint64_t> seed;
  std::string out;
};

/// Profile, then config file, then FLOORGEN_OUT, then flags.
RunConfig resolve_config(const GlobalOptions& g) {
  RunConfig cfg;
  if (!g.config_path.empty()) {
    std::ifstream in(g.config_path);
    if (!in) throw ValidationError("config: cannot open " + g.config_path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError("config: " + g.config_path + " is not valid JSON (" + e.what() + ")");
    }
    if (!g.profile.empty()) j["profile"] = g.profile;
    cfg = RunConfig::from_json(j);
  } else {
    cfg = RunConfig::profile_named(g.profile.empty() ? "default" : g.profile);
  }
  if (const char* env = std::getenv("FLOORGEN_OUT"); env && *env) cfg.output_dir = env;
  if (!g.out.empty()) cfg.output_dir = g.out;
  if (g.seed) cfg.seed = *g.seed;
  return cfg;
}

fs::path out_dir(const RunConfig& cfg) { return cfg.output_dir; }
fs::path stage_checkpoint(const RunConfig& cfg, int stage) {
  return out_dir(cfg) / ("train-stage" + std::to_string(stage)) / ("stage" + std::to_string(stage) + ".ckpt");
}

data::Manifest require_dataset(const RunConfig& cfg) {
  const fs::path path = cfg.dataset_dir() / "manifest.jsonl";
  if (!fs::exists(path)) {
    throw UsageError("no dataset at " + path.string() + "; run `floorgen dataset` first or set dataset.path");
  }
  return data::load_manifest(path);
}

/// Loads `explicit_path`, or the stage-2 checkpoint of this output dir.
pipeline::Model require_model(const RunConfig& cfg, const std::string& explicit_path, int min_stage) {
  const fs::path path = explicit_path.empty() ? stage_checkpoint(cfg, 2) : fs::path(explicit_path);
  if (!fs::exists(path)) {
    throw UsageError("checkpoint " + path.string() + " not found; run `floorgen train --stage 2` first or pass --checkpoint");
  }
  pipeline::Model m = pipeline::Model::load(path);
  if (m.stage() < min_stage) {
    throw UsageError("checkpoint " + path.string() + " is at stage " + std::to_string(m.stage()) + "; this command needs stage " +
                     std::to_string(min_stage));
  }
  return m;
}

std::string checkpoint_id(const RunConfig& cfg, const std::string& explicit_path) {
  const fs::path path = explicit_path.empty() ? stage_checkpoint(cfg, 2) : fs::path(explicit_path);
  return git_blob_sha1_file(path);
}

void check_steps(int steps, const pipeline::Model& m) {
  const int T = m.schedule().T;
  if (steps < 1 || steps > T) {
    throw ValidationError("--steps must lie in [1, " + std::to_string(T) + "], got " + std::to_string(steps));
  }
}

pipeline::TrainHooks logging_hooks() {
  pipeline::TrainHooks h;
  h.log = log_line;
  return h;
}

// ---- commands ----

struct DatasetArgs {
  std::optional<int> n;
  bool hires = false;
};

int cmd_dataset(RunConfig cfg, const DatasetArgs& a) {
  if (a.n) cfg.dataset.n = *a.n;
  cfg.validate();
  data::DatasetOptions opt;
  opt.n = cfg.dataset.n;
  opt.seed = cfg.seed;
  opt.image_size = cfg.image_size;
  opt.hires = a.hires;
  opt.val_fraction = cfg.dataset.val_fraction;
  RunRecord run("dataset", cfg.dataset_dir());
  run.args() = {{"n", opt.n}, {"hires", opt.hires}};
  const data::Manifest m = data::build_dataset(opt, run.dir());
  for (const auto& w : m.warnings) log_line("warning: " + w);
  run.phase("generate");
  std::cout << "dataset: " << m.records.size() << " records in " << run.dir().string() << '\n';
  run.finish(cfg);
  return 0;
}

struct TrainArgs {
  int stage = 1;
  std::string from;
  std::optional<int> epochs;
  std::optional<long> max_steps;
  std::optional<double> lr;
  std::optional<int> batch_size;
};

void apply_optim_overrides(OptimConfig& o, const TrainArgs& a) {
  if (a.epochs) o.epochs = *a.epochs;
  if (a.max_steps) o.max_steps = *a.max_steps;
  if (a.lr) o.lr = *a.lr;
  if (a.batch_size) o.batch_size = *a.batch_size;
}

int cmd_train(RunConfig cfg, const TrainArgs& a) {
  if (a.stage != 1 && a.stage != 2) throw ValidationError("--stage must be 1 or 2");
  apply_optim_overrides(a.stage == 1 ? cfg.stage1 : cfg.stage2, a);
  cfg.validate();

  pipeline::Model model = [&] {
    if (a.stage == 1) return pipeline::Model(cfg);
    const fs::path from = a.from.empty() ? stage_checkpoint(cfg, 1) : fs::path(a.from);
    if (!fs::exists(from)) {
      throw UsageError("stage 2 trains the control branch on top of a stage-1 checkpoint, and none was found at " +
                       from.string() + "; run `floorgen train --stage 1` first or pass --from");
    }
    pipeline::Model m = pipeline::Model::load(from);
    if (m.stage() < 1) throw UsageError("checkpoint " + from.string() + " has not finished stage 1");
    return m;
  }();

  const data::Manifest manifest = require_dataset(cfg);
  const pipeline::TripleSet train = pipeline::load_triples(manifest, "train");
  const pipeline::TripleSet val = pipeline::load_triples(manifest, "val");
  if (train.empty()) throw UsageError("dataset " + manifest.path().string() + " has no training records");

  const std::string name = "train-stage" + std::to_string(a.stage);
  RunRecord run("train", out_dir(cfg) / name);
  run.args() = {{"stage", a.stage}, {"dataset_manifest_sha1", git_blob_sha1_file(manifest.path())}};
  if (a.stage == 2) run.args()["from_sha1"] = git_blob_sha1_file(a.from.empty() ? stage_checkpoint(cfg, 1) : fs::path(a.from));
  run.phase("load");

  const auto hooks = logging_hooks();
  if (a.stage == 1) {
    const auto codec = pipeline::train_codec(model, train, val, cfg.codec_train, Rng::derive(cfg.seed, 0), hooks);
    write_text(run.dir() / "codec_curve.json", codec.to_json().dump(2) + "\n");
    run.phase("codec");
    const auto unet = pipeline::train_stage1(model, train, val, cfg.stage1, Rng::derive(cfg.seed, 1), hooks);
    write_text(run.dir() / "stage1_curve.json", unet.to_json().dump(2) + "\n");
    run.phase("stage1");
  } else {
    const auto ctrl = pipeline::train_stage2(model, train, val, cfg.stage2, Rng::derive(cfg.seed, 2), hooks);
    write_text(run.dir() / "stage2_curve.json", ctrl.to_json().dump(2) + "\n");
    run.phase("stage2");
  }
  model.save(run.dir() / ("stage" + std::to_string(a.stage) + ".ckpt"));
  run.phase("save");
  run.finish(cfg);
  return 0;
}

struct SampleArgs {
  std::string prompt;
  std::string mask;
  std::optional<int> steps;
  int n = 1;
  std::string checkpoint;
};

int cmd_sample(RunConfig cfg, const SampleArgs& a) {
  cfg.validate();
  if (a.prompt.empty()) throw ValidationError("--prompt must not be empty");
  if (a.n < 1) throw ValidationError("--n must be >= 1");
  const pipeline::Model model = require_model(cfg, a.checkpoint, 1);
  const int steps = a.steps.value_or(model.config().sample_steps);
  check_steps(steps, model);

  ImageGrid img;
  try {
    img = read_png(a.mask);
  } catch (const std::exception& e) {
    throw ValidationError("--mask: " + std::string(e.what()));
  }
  const int size = model.config().image_size;
  if (img.height != size || img.width != size) {
    log_line("warning: mask resized from " + std::to_string(img.width) + "x" + std::to_string(img.height) + " to " +
             std::to_string(size) + "x" + std::to_string(size));
    img = resize_nearest(img, size, size);
  }
  const auto mask = control::FootprintMask::from_storage(img);
  if (mask.foreground() == 0) throw ValidationError("--mask has no foreground (footprint pixels must be white)");

  const std::string ckpt = checkpoint_id(cfg, a.checkpoint);
  const std::string mask_sha = git_blob_sha1_file(a.mask);
  const std::string key =
      sha256_hex(a.prompt + "\n" + mask_sha + "\n" + std::to_string(steps) + "\n" + std::to_string(a.n) + "\n" + ckpt + "\n" +
                 std::to_string(cfg.seed));
  RunRecord run("sample", out_dir(cfg) / ("sample-" + key.substr(0, 12)));
  run.args() = {{"prompt", a.prompt}, {"mask_sha1", mask_sha}, {"steps", steps}, {"n", a.n}, {"checkpoint_sha1", ckpt}};

  const auto images = model.generate(a.prompt, mask, steps, a.n, cfg.seed);
  run.phase("sample");
  for (std::size_t i = 0; i < images.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "sample_%03zu.png", i);
    write_png(run.dir() / name, images[i]);
  }
  write_png(run.dir() / "grid.png", pipeline::tile_row(images));
  write_png(run.dir() / "mask.png", mask.to_storage());
  run.finish(cfg);
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string split = "val";
  std::optional<int> steps;
  std::string ratings;
};

int cmd_eval(RunConfig cfg, const EvalArgs& a) {
  cfg.validate();
  const pipeline::Model model = require_model(cfg, a.checkpoint, 1);
  const int steps = a.steps.value_or(model.config().sample_steps);
  check_steps(steps, model);
  const data::Manifest manifest = require_dataset(cfg);
  const auto records = manifest.split(a.split);
  if (records.size() < 2) {
    throw UsageError("split '" + a.split + "' has " + std::to_string(records.size()) + " records; evaluation needs at least 2");
  }

  RunRecord run("eval", out_dir(cfg) / ("eval-" + a.split));
  run.args() = {{"split", a.split},
                {"steps", steps},
                {"checkpoint_sha1", checkpoint_id(cfg, a.checkpoint)},
                {"dataset_manifest_sha1", git_blob_sha1_file(manifest.path())}};
  fs::create_directories(run.dir() / "samples");

  std::vector<ImageGrid> real, gen;
  ojson ids = ojson::array();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = *records[i];
    const auto mask = control::FootprintMask::from_storage(read_png(manifest.root / r.mask_path));
    const auto out = model.generate(r.prompt, mask, steps, 1, Rng::derive(cfg.seed, i)).front();
    write_png(run.dir() / "samples" / (r.id + ".png"), out);
    real.push_back(pipeline::to_unit(read_png(manifest.root / r.plan_path)));
    gen.push_back(pipeline::to_unit(out));
    ids.push_back(r.id);
  }
  run.phase("generate");
  const metrics::RandomConvExtractor extractor;
  const metrics::MetricReport report = metrics::evaluate(real, gen, extractor);
  run.phase("metrics");
  ojson j = report.to_json();
  j["ids"] = ids;
  write_text(run.dir() / "metrics.json", j.dump(2) + "\n");
  const std::string table = report.to_text();
  write_text(run.dir() / "metrics.txt", table);
  std::cout << table;

  if (!a.ratings.empty()) {
    const auto log = service::read_log(a.ratings);
    for (const auto& w : log.warnings) log_line("warning: " + w);
    const auto counted = service::counted_ratings(log);
    const metrics::ScoreTable scores = metrics::score_summary(counted);
    ojson s = scores.to_json();
    s["ratings_counted"] = counted.size();
    write_text(run.dir() / "scores.json", s.dump(2) + "\n");
    write_text(run.dir() / "scores.txt", scores.to_text());
    std::cout << scores.to_text();
    run.args()["ratings_sha1"] = git_blob_sha1_file(a.ratings);
  }
  run.finish(cfg);
  return 0;
}

struct EmbedArgs {
  std::string checkpoint;
  int n = 1600;
  int k = 2;
};

int cmd_embed(RunConfig cfg, const EmbedArgs& a) {
  cfg.validate();
  if (a.n < 2) throw ValidationError("--n must be >= 2");
  const pipeline::Model model = require_model(cfg, a.checkpoint, 2);
  const data::Manifest manifest = require_dataset(cfg);
  if (manifest.records.empty()) throw UsageError("dataset " + manifest.path().string() + " is empty");

  RunRecord run("embed", out_dir(cfg) / "embed");
  run.args() = {{"n", a.n},
                {"k", a.k},
                {"checkpoint_sha1", checkpoint_id(cfg, a.checkpoint)},
                {"dataset_manifest_sha1", git_blob_sha1_file(manifest.path())}};

  std::vector<analytics::EmbeddingPrompt> grid;
  for (const auto& r : manifest.records) {
    grid.push_back({data::to_string(r.building_type), r.prompt,
                    control::FootprintMask::from_storage(read_png(manifest.root / r.mask_path))});
  }
  analytics::EmbedOptions opt;
  opt.n = a.n;
  opt.sampling_steps = model.config().sample_steps;
  opt.seed = cfg.seed;
  opt.z_channels = model.config().codec.z_channels;
  opt.checkpoint_trained = model.stage() >= 2;
  const auto E = analytics::collect_embeddings(*model.controlled(), model.text(), model.schedule(), grid, opt);
  for (const auto& w : E.warnings) log_line("warning: " + w);
  run.phase("collect");
  const auto pca = analytics::pca_fit(E, a.k);
  analytics::export_projection(pca, E, run.dir() / "projection.csv");
  run.phase("pca");
  const auto ratio = pca.explained_variance_ratio();
  std::cout << "embeddings: " << E.vectors.rows() << " x " << E.vectors.cols() << ", pc1 " << metrics::format_number(ratio(0))
            << ", pc2 " << metrics::format_number(ratio.size() > 1 ? ratio(1) : 0.0) << " of variance\n";
  run.finish(cfg);
  return 0;
}

struct SweepArgs {
  std::string checkpoint;
  std::vector<int> steps{5, 10, 25, 50};
  int seeds = 16;
  std::string split = "val";
  int limit = 0;
  bool dump = false;
};

int cmd_sweep(RunConfig cfg, const SweepArgs& a) {
  cfg.validate();
  if (a.seeds < 1) throw ValidationError("--seeds must be >= 1");
  if (a.steps.empty()) throw ValidationError("--steps needs at least one value");
  const pipeline::Model model = require_model(cfg, a.checkpoint, 2);
  for (int s : a.steps) check_steps(s, model);
  const data::Manifest manifest = require_dataset(cfg);
  pipeline::TripleSet eval = pipeline::load_triples(manifest, a.split);
  if (eval.empty()) throw UsageError("split '" + a.split + "' is empty");
  if (a.limit > 0 && a.limit < eval.size()) {
    std::vector<int> idx(static_cast<std::size_t>(a.limit));
    for (int i = 0; i < a.limit; ++i) idx[static_cast<std::size_t>(i)] = i;
    eval = eval.subset(idx);
  }

  RunRecord run("sweep", out_dir(cfg) / "sweep");
  run.args() = {{"steps", a.steps},
                {"seeds", a.seeds},
                {"split", a.split},
                {"limit", a.limit},
                {"checkpoint_sha1", checkpoint_id(cfg, a.checkpoint)},
                {"dataset_manifest_sha1", git_blob_sha1_file(manifest.path())}};
  std::optional<fs::path> dump;
  if (a.dump) {
    dump = run.dir() / "samples";
    fs::create_directories(*dump);
  }
  const auto report = pipeline::steps_fidelity_sweep(model, eval, a.steps, a.seeds, cfg.seed, dump);
  run.phase("sweep");
  write_text(run.dir() / "sweep.json", report.to_json().dump(2) + "\n");
  write_text(run.dir() / "sweep.txt", report.to_text());
  std::cout << report.to_text();
  run.finish(cfg);
  return 0;
}

struct ServeArgs {
  std::string real, generated, log, checkpoint, host = "127.0.0.1";
  int port = 8080;
};

int cmd_serve(RunConfig cfg, const ServeArgs& a) {
  service::ServiceOptions opt;
  opt.real_dir = a.real;
  opt.generated_dir = a.generated;
  opt.log_path = a.log;
  opt.seed = cfg.seed;
  if (!a.checkpoint.empty()) opt.checkpoint = a.checkpoint;
  service::Service svc(opt);
  for (const auto& w : svc.warnings()) log_line("warning: " + w);
  service::HttpServer http(svc);
  std::cout << "serving on http://" << a.host << ":" << a.port << " (" << svc.pool_size("real") << " real, "
            << svc.pool_size("generated") << " generated)" << std::endl;
  if (!http.listen(a.host, a.port)) throw IoError("cannot listen on " + a.host + ":" + std::to_string(a.port));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"floorgen: footprint-conditioned floor plan diffusion"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config_path, "JSON config; flags override its fields");
  app.add_option("--profile", g.profile, "Base profile: default or desk");
  app.add_option("--seed", g.seed, "Seed for all randomness");
  app.add_option("--out", g.out, "Output directory (overrides FLOORGEN_OUT and the config)");

  DatasetArgs da;
  auto* dataset = app.add_subcommand("dataset", "Generate the synthetic triple dataset");
  dataset->add_option("--n", da.n, "Number of records");
  dataset->add_option("--seed", g.seed, "Seed for all randomness");
  dataset->add_flag("--hires", da.hires, "Also write 256x256 companions");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train stage 1 (codec and U-Net) or stage 2 (control branch)");
  train->add_option("--stage", ta.stage, "1 or 2")->required();
  train->add_option("--from", ta.from, "Stage-1 checkpoint for stage 2");
  train->add_option("--epochs", ta.epochs);
  train->add_option("--max-steps", ta.max_steps);
  train->add_option("--lr", ta.lr);
  train->add_option("--batch-size", ta.batch_size);

  SampleArgs sa;
  auto* sample = app.add_subcommand("sample", "Generate plans for a prompt and footprint mask");
  sample->add_option("--prompt", sa.prompt)->required();
  sample->add_option("--mask", sa.mask, "Footprint PNG, white inside")->required();
  sample->add_option("--steps", sa.steps, "DDIM steps");
  sample->add_option("--n", sa.n, "Number of images");
  sample->add_option("--checkpoint", sa.checkpoint);

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "FID, KID, SSIM and PSNR against a dataset split");
  eval->add_option("--checkpoint", ea.checkpoint);
  eval->add_option("--split", ea.split);
  eval->add_option("--steps", ea.steps);
  eval->add_option("--ratings", ea.ratings, "Rating log to summarize as well");

  EmbedArgs ma;
  auto* embed = app.add_subcommand("embed", "Collect latent embeddings and project them with PCA");
  embed->add_option("--checkpoint", ma.checkpoint);
  embed->add_option("--n", ma.n);
  embed->add_option("--k", ma.k, "Principal components kept");

  SweepArgs wa;
  auto* sweep = app.add_subcommand("sweep", "Reconstruction fidelity against DDIM step count");
  sweep->add_option("--checkpoint", wa.checkpoint);
  sweep->add_option("--steps", wa.steps)->delimiter(',');
  sweep->add_option("--seeds", wa.seeds);
  sweep->add_option("--split", wa.split);
  sweep->add_option("--limit", wa.limit, "Use only the first records of the split");
  sweep->add_flag("--dump", wa.dump, "Write every sample as PNG");

  ServeArgs va;
  auto* serve = app.add_subcommand("serve", "Run the rating game and generation HTTP service");
  serve->add_option("--real", va.real)->required();
  serve->add_option("--generated", va.generated)->required();
  serve->add_option("--log", va.log)->required();
  serve->add_option("--checkpoint", va.checkpoint);
  serve->add_option("--host", va.host);
  serve->add_option("--port", va.port);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    const RunConfig cfg = resolve_config(g);
    if (dataset->parsed()) return cmd_dataset(cfg, da);
    if (train->parsed()) return cmd_train(cfg, ta);
    if (sample->parsed()) return cmd_sample(cfg, sa);
    if (eval->parsed()) return cmd_eval(cfg, ea);
    if (embed->parsed()) return cmd_embed(cfg, ma);
    if (sweep->parsed()) return cmd_sweep(cfg, wa);
    if (serve->parsed()) return cmd_serve(cfg, va);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

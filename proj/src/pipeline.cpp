#include "floorgen/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "floorgen/metrics.hpp"

namespace floorgen::pipeline {

TripleSet TripleSet::subset(std::span<const int> index) const {
  TripleSet out;
  std::vector<Tensor> plans, masks;
  for (int i : index) {
    if (i < 0 || i >= size()) throw ValidationError("TripleSet::subset: index out of range");
    out.ids.push_back(ids[static_cast<std::size_t>(i)]);
    out.prompts.push_back(prompts[static_cast<std::size_t>(i)]);
    plans.push_back(ag::slice_batch(this->plans, i, 1));
    masks.push_back(ag::slice_batch(this->masks, i, 1));
  }
  if (!plans.empty()) {
    out.plans = ag::concat_batch(plans);
    out.masks = ag::concat_batch(masks);
  }
  return out;
}

TripleSet load_triples(const data::Manifest& manifest, const std::string& split) {
  TripleSet out;
  std::vector<ImageGrid> plans, masks;
  for (const data::DatasetRecord* r : manifest.split(split)) {
    try {
      plans.push_back(to_model_space(read_png(manifest.root / r->plan_path)));
      masks.push_back(control::FootprintMask::from_storage(read_png(manifest.root / r->mask_path)).pixels);
    } catch (const std::exception& e) {
      throw LoadError("record " + r->id + ": " + e.what());
    }
    if (plans.back().channels != 3) throw LoadError("record " + r->id + ": plan is not RGB");
    out.ids.push_back(r->id);
    out.prompts.push_back(r->prompt);
  }
  if (!plans.empty()) {
    out.plans = to_tensor(plans);
    out.masks = to_tensor(masks);
  }
  return out;
}

TripleSet make_triples(std::span<const data::Sample> samples) {
  TripleSet out;
  std::vector<ImageGrid> plans, masks;
  int k = 0;
  for (const auto& s : samples) {
    char id[24];
    std::snprintf(id, sizeof id, "triple-%03d", k++);
    out.ids.push_back(id);
    out.prompts.push_back(s.prompt);
    plans.push_back(to_model_space(s.plan));
    masks.push_back(s.mask.pixels);
  }
  if (!plans.empty()) {
    out.plans = to_tensor(plans);
    out.masks = to_tensor(masks);
  }
  return out;
}

// ---------------------------------------------------------------------------

Model::Model(const RunConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  schedule_ = cfg_.schedule.make();
  text_ = std::make_shared<net::HashTextEmbedder>(cfg_.text);
  codec_ = std::make_shared<net::LatentCodec>(cfg_.codec, Rng::derive(cfg_.seed, 1));
  unet_ = std::make_shared<net::UNet>(cfg_.unet, Rng::derive(cfg_.seed, 2));
  text_only_ = std::make_shared<control::TextOnlyModel>(unet_);
}

long Model::steps(int stage) const { return steps_[std::clamp(stage, 0, 2)]; }

void Model::add_steps(int stage, long n) { steps_[std::clamp(stage, 0, 2)] += n; }

void Model::calibrate_latent_scale(const Tensor& plans) {
  ag::NoGradGuard g;
  const Tensor mu = codec_->encode(plans).mu;
  const auto d = mu.data();
  double m = 0.0;
  for (double v : d) m += v;
  m /= static_cast<double>(d.size());
  double s = 0.0;
  for (double v : d) s += (v - m) * (v - m);
  const double sd = std::sqrt(s / static_cast<double>(d.size()));
  latent_scale_ = sd > 1e-8 ? 1.0 / sd : 1.0;
}

Tensor Model::encode(const Tensor& plans) const {
  ag::NoGradGuard g;
  return ag::scale(codec_->encode(plans).mu, latent_scale_);
}

Tensor Model::decode(const Tensor& z) const {
  ag::NoGradGuard g;
  return codec_->decode(ag::scale(z, 1.0 / latent_scale_));
}

ag::Shape Model::latent_shape(int n) const {
  return codec_->latent_shape({n, cfg_.codec.image_channels, cfg_.image_size, cfg_.image_size});
}

void Model::attach_control() {
  if (controlled_) return;
  controlled_ = std::make_shared<control::ControlledModel>(control::ControlledModel::clone_and_freeze(
      unet_, cfg_.codec.downsample_factor(), cfg_.hint, Rng::derive(cfg_.seed, 3)));
}

const diffusion::EpsModel& Model::eps_model() const {
  if (controlled_) return *controlled_;
  return *text_only_;
}

std::string Model::stage1_checksum() const { return params_checksum(unet_->params()); }

std::vector<ImageGrid> Model::generate(const std::string& prompt, const control::FootprintMask& mask, int steps, int n,
                                       std::uint64_t seed) const {
  if (n < 1) throw ValidationError("generate: n must be >= 1");
  if (steps < 1 || steps > schedule_.T)
    throw ValidationError("generate: steps must lie in [1, " + std::to_string(schedule_.T) + "]");
  if (mask.height() != cfg_.image_size || mask.width() != cfg_.image_size)
    throw ValidationError("generate: mask must be " + std::to_string(cfg_.image_size) + "x" + std::to_string(cfg_.image_size));
  ag::NoGradGuard g;
  const net::TextBrief brief = text_->embed(prompt);
  const Tensor mask_t = mask.to_tensor();
  std::vector<ImageGrid> out;
  constexpr int kChunk = 16;
  for (int start = 0; start < n; start += kChunk) {
    const int b = std::min(kChunk, n - start);
    const ag::Shape shape = latent_shape(b);
    const std::size_t per = ag::numel(shape) / static_cast<std::size_t>(b);
    std::vector<double> zT;
    zT.reserve(per * static_cast<std::size_t>(b));
    for (int i = 0; i < b; ++i) {
      Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(start + i)));
      const auto v = rng.normal_vector(per);
      zT.insert(zT.end(), v.begin(), v.end());
    }
    diffusion::Conditioning cond;
    cond.text = net::TextBatch::repeat(brief, b);
    cond.mask = ag::concat_batch(std::vector<Tensor>(static_cast<std::size_t>(b), mask_t));
    const Tensor z0 = diffusion::sample_from(eps_model(), Tensor::from(shape, std::move(zT)), cond, schedule_, steps);
    for (auto& img : from_tensor(decode(z0))) out.push_back(to_storage_space(img));
  }
  return out;
}

void Model::save(const std::filesystem::path& path) const {
  nlohmann::json meta{{"stage", stage_},
                      {"steps", {steps_[0], steps_[1], steps_[2]}},
                      {"seed", cfg_.seed},
                      {"config", cfg_.to_json()},
                      {"config_hash", cfg_.hash()},
                      {"latent_scale", latent_scale_},
                      {"trained", stage_ > 0},
                      {"text_checksum", text_->checksum()},
                      {"stage1_checksum", stage1_checksum()},
                      {"has_control", static_cast<bool>(controlled_)}};
  NamedParams p = codec_->params().prefixed("codec");
  p.append(unet_->params().prefixed("unet"));
  if (controlled_) p.append(controlled_->trainable_params().prefixed("control"));
  save_archive(path, meta, p);
}

Model Model::load(const std::filesystem::path& path) {
  const Archive a = load_archive(path);
  const std::string where = "checkpoint " + path.string() + ": ";
  RunConfig cfg;
  try {
    cfg = RunConfig::from_json(a.meta.at("config"));
    cfg.validate();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(where + "missing config (" + e.what() + ")");
  } catch (const ValidationError& e) {
    throw LoadError(where + "invalid embedded config (" + e.what() + ")");
  }
  Model m(cfg);
  try {
    NamedParams codec = m.codec_->params();
    restore(a, "codec", codec);
    NamedParams unet = m.unet_->params();
    restore(a, "unet", unet);
    m.latent_scale_ = a.meta.at("latent_scale").get<double>();
    m.stage_ = a.meta.at("stage").get<int>();
    const auto steps = a.meta.at("steps").get<std::vector<long>>();
    for (std::size_t i = 0; i < 3 && i < steps.size(); ++i) m.steps_[i] = steps[i];
    if (a.meta.at("text_checksum").get<std::string>() != m.text_->checksum())
      throw LoadError(where + "text embedder checksum differs from the one used in training");
    if (m.stage1_checksum() != a.meta.at("stage1_checksum").get<std::string>())
      throw LoadError(where + "stage-1 checksum mismatch: frozen weights do not match the recorded stage-1 model");
    if (a.meta.at("has_control").get<bool>()) {
      m.attach_control();
      NamedParams ctl = m.controlled_->trainable_params();
      restore(a, "control", ctl);
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(where + "corrupt metadata (" + e.what() + ")");
  }
  return m;
}

// ---------------------------------------------------------------------------

nlohmann::ordered_json TrainReport::to_json() const {
  nlohmann::ordered_json j;
  j["stage"] = stage;
  j["steps"] = steps;
  j["initial_probe"] = initial_probe;
  j["final_probe"] = final_probe;
  auto& c = j["curve"] = nlohmann::ordered_json::array();
  for (const auto& e : curve) {
    nlohmann::ordered_json row;
    row["epoch"] = e.epoch;
    row["train"] = e.train;
    row["val"] = e.val ? nlohmann::ordered_json(*e.val) : nlohmann::ordered_json(nullptr);
    row["steps"] = e.steps;
    c.push_back(row);
  }
  auto& p = j["probes"] = nlohmann::ordered_json::array();
  for (const auto& e : probes) p.push_back({{"step", e.step}, {"loss", e.loss}});
  return j;
}

namespace {

std::vector<int> probe_timesteps(int T) {
  std::vector<int> ts;
  if (T <= 16) {
    for (int t = 1; t <= T; ++t) ts.push_back(t);
  } else {
    for (int k = 0; k < 16; ++k) ts.push_back(1 + static_cast<int>(std::lround(k * (T - 1) / 15.0)));
  }
  return ts;
}

std::vector<net::TextBrief> embed_all(const Model& m, const std::vector<std::string>& prompts) {
  std::map<std::string, net::TextBrief> cache;
  std::vector<net::TextBrief> out;
  for (const auto& p : prompts) {
    auto it = cache.find(p);
    if (it == cache.end()) it = cache.emplace(p, m.text().embed(p)).first;
    out.push_back(it->second);
  }
  return out;
}

Tensor gather(const Tensor& t, std::span<const int> idx) {
  std::vector<Tensor> parts;
  parts.reserve(idx.size());
  for (int i : idx) parts.push_back(ag::slice_batch(t, i, 1));
  return ag::concat_batch(parts);
}

net::TextBatch text_batch(const std::vector<net::TextBrief>& briefs, std::span<const int> idx) {
  std::vector<net::TextBrief> sel;
  sel.reserve(idx.size());
  for (int i : idx) sel.push_back(briefs[static_cast<std::size_t>(i)]);
  return net::TextBatch::from(sel);
}

double diffusion_probe(const Model& m, const Tensor& z0, const std::vector<net::TextBrief>& briefs, const Tensor& masks,
                       int stage, std::uint64_t seed) {
  ag::NoGradGuard g;
  const diffusion::EpsModel* model = nullptr;
  control::TextOnlyModel text_only(std::shared_ptr<const net::UNet>(std::shared_ptr<const net::UNet>{}, &m.unet()));
  if (stage == 2) {
    if (!m.controlled()) throw ValidationError("probe_loss: stage 2 needs the control branch");
    model = m.controlled();
  } else {
    model = &text_only;
  }
  const auto ts = probe_timesteps(m.schedule().T);
  const int n = z0.dim(0);
  const std::size_t per = z0.size() / static_cast<std::size_t>(n);
  Rng rng(Rng::derive(seed, 0x9b0be));
  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < n; ++i)
    for (int t : ts) pairs.emplace_back(i, t);
  double total = 0.0;
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < pairs.size(); start += kChunk) {
    const std::size_t b = std::min(kChunk, pairs.size() - start);
    std::vector<int> idx, t;
    std::vector<double> eps;
    for (std::size_t k = 0; k < b; ++k) {
      idx.push_back(pairs[start + k].first);
      t.push_back(pairs[start + k].second);
      const auto e = rng.normal_vector(per);
      eps.insert(eps.end(), e.begin(), e.end());
    }
    ag::Shape shape = z0.shape();
    shape[0] = static_cast<int>(b);
    const Tensor e = Tensor::from(shape, std::move(eps));
    const auto state = diffusion::forward_diffuse(gather(z0, idx), t, e, m.schedule());
    diffusion::Conditioning cond;
    cond.text = text_batch(briefs, idx);
    if (stage == 2) cond.mask = gather(masks, idx);
    const Tensor pred = model->predict_eps(state.z, state.t, cond);
    const auto pd = pred.data(), ed = e.data();
    for (std::size_t k = 0; k < pd.size(); ++k) total += (pd[k] - ed[k]) * (pd[k] - ed[k]);
  }
  return total / (static_cast<double>(pairs.size()) * static_cast<double>(per));
}

double codec_probe(const Model& m, const Tensor& plans) {
  ag::NoGradGuard g;
  double total = 0.0;
  const int n = plans.dim(0);
  for (int start = 0; start < n; start += 16) {
    const int b = std::min(16, n - start);
    const Tensor x = ag::slice_batch(plans, start, b);
    const Tensor r = m.codec().decode(m.codec().encode(x).mu);
    const auto xd = x.data(), rd = r.data();
    for (std::size_t k = 0; k < xd.size(); ++k) total += std::abs(xd[k] - rd[k]);
  }
  return total / static_cast<double>(plans.size());
}

using StepFn = std::function<Tensor(std::span<const int>, Rng&)>;
using ProbeFn = std::function<double(bool val)>;

TrainReport run_loop(Model& model, int stage, const std::vector<Tensor>& params, int n_train, bool has_val,
                     const OptimConfig& opt, std::uint64_t seed, const TrainHooks& hooks, const StepFn& step_fn,
                     const ProbeFn& probe) {
  if (n_train == 0) throw ValidationError("training: empty dataset");
  TrainReport rep;
  rep.stage = stage;
  Adam adam(params, opt.adam());
  adam.zero_grad();
  rep.initial_probe = probe(false);
  rep.probes.push_back({0, rep.initial_probe});
  auto say = [&](const std::string& s) {
    if (hooks.log) hooks.log(s);
  };
  say("stage " + std::to_string(stage) + ": initial probe loss " + metrics::format_number(rep.initial_probe, 6));

  const long batches = (n_train + opt.batch_size - 1) / opt.batch_size;
  const long planned = opt.max_steps > 0 ? std::min<long>(opt.max_steps, batches * opt.epochs) : batches * opt.epochs;
  long step = 0;
  bool stop = false;
  for (int epoch = 0; epoch < opt.epochs && !stop; ++epoch) {
    std::vector<int> order(static_cast<std::size_t>(n_train));
    std::iota(order.begin(), order.end(), 0);
    Rng order_rng(Rng::derive(seed, 1000 + static_cast<std::uint64_t>(epoch)));
    order_rng.shuffle(order);
    Rng loss_rng(Rng::derive(seed, 2000 + static_cast<std::uint64_t>(epoch)));
    double sum = 0.0;
    int count = 0;
    for (std::size_t start = 0; start < order.size() && !stop; start += static_cast<std::size_t>(opt.batch_size)) {
      const std::size_t b = std::min(order.size() - start, static_cast<std::size_t>(opt.batch_size));
      const std::span<const int> idx(order.data() + start, b);
      const Tensor loss = step_fn(idx, loss_rng);
      loss.backward();
      adam.set_lr(opt.lr_at(step, planned));
      adam.step();
      sum += loss.item();
      ++count;
      ++step;
      if (hooks.probe_every > 0 && step % hooks.probe_every == 0) {
        const ProbePoint p{step, probe(false)};
        rep.probes.push_back(p);
        if (hooks.stop && hooks.stop(p)) stop = true;
        if (hooks.stop_fraction > 0.0 && p.loss < hooks.stop_fraction * rep.initial_probe) stop = true;
      }
      if (opt.max_steps > 0 && step >= opt.max_steps) stop = true;
    }
    EpochLoss e;
    e.epoch = epoch;
    e.train = count ? sum / count : 0.0;
    if (has_val) e.val = probe(true);
    e.steps = step;
    rep.curve.push_back(e);
    say("stage " + std::to_string(stage) + " epoch " + std::to_string(epoch) + ": train " + metrics::format_number(e.train, 6) +
        (e.val ? ", val " + metrics::format_number(*e.val, 6) : std::string()) + " (" + std::to_string(step) + " steps)");
  }
  rep.steps = step;
  if (rep.probes.back().step != step) rep.probes.push_back({step, probe(false)});
  rep.final_probe = rep.probes.back().loss;
  model.add_steps(stage, step);
  return rep;
}

}  // namespace

double probe_loss(const Model& model, const TripleSet& set, int stage, std::uint64_t seed) {
  if (set.empty()) throw ValidationError("probe_loss: empty set");
  if (stage == 0) return codec_probe(model, set.plans);
  return diffusion_probe(model, model.encode(set.plans), embed_all(model, set.prompts), set.masks, stage, seed);
}

TrainReport train_codec(Model& model, const TripleSet& train, const TripleSet& val, const OptimConfig& opt,
                        std::uint64_t seed, const TrainHooks& hooks) {
  net::LatentCodec& codec = model.codec();
  const NamedParams params = codec.params();
  const StepFn step = [&](std::span<const int> idx, Rng& rng) { return codec.loss(gather(train.plans, idx), rng); };
  const ProbeFn probe = [&](bool v) { return codec_probe(model, v ? val.plans : train.plans); };
  return run_loop(model, 0, params.tensors(), train.size(), !val.empty(), opt, seed, hooks, step, probe);
}

TrainReport train_stage1(Model& model, const TripleSet& train, const TripleSet& val, const OptimConfig& opt,
                         std::uint64_t seed, const TrainHooks& hooks) {
  if (model.controlled()) throw ValidationError("train_stage1: the model already has a control branch");
  if (train.empty()) throw ValidationError("training: empty dataset");
  model.calibrate_latent_scale(train.plans);
  const Tensor z_train = model.encode(train.plans);
  const Tensor z_val = val.empty() ? Tensor() : model.encode(val.plans);
  const auto b_train = embed_all(model, train.prompts), b_val = embed_all(model, val.prompts);
  const control::TextOnlyModel eps(std::shared_ptr<const net::UNet>(std::shared_ptr<const net::UNet>{}, &model.unet()));
  const StepFn step = [&](std::span<const int> idx, Rng& rng) {
    return diffusion::stage1_loss(eps, gather(z_train, idx), text_batch(b_train, idx), model.schedule(), rng).loss;
  };
  const ProbeFn probe = [&](bool v) {
    return v ? diffusion_probe(model, z_val, b_val, val.masks, 1, seed) : diffusion_probe(model, z_train, b_train, train.masks, 1, seed);
  };
  TrainReport r = run_loop(model, 1, model.unet().params().tensors(), train.size(), !val.empty(), opt, seed, hooks, step, probe);
  model.set_stage(1);
  return r;
}

TrainReport train_stage2(Model& model, const TripleSet& train, const TripleSet& val, const OptimConfig& opt,
                         std::uint64_t seed, const TrainHooks& hooks) {
  if (train.empty()) throw ValidationError("training: empty dataset");
  model.attach_control();
  const control::ControlledModel& cm = *model.controlled();
  const Tensor z_train = model.encode(train.plans);
  const Tensor z_val = val.empty() ? Tensor() : model.encode(val.plans);
  const auto b_train = embed_all(model, train.prompts), b_val = embed_all(model, val.prompts);
  const StepFn step = [&](std::span<const int> idx, Rng& rng) {
    return diffusion::stage2_loss(cm, gather(z_train, idx), text_batch(b_train, idx), gather(train.masks, idx), model.schedule(),
                                  rng)
        .loss;
  };
  const ProbeFn probe = [&](bool v) {
    return v ? diffusion_probe(model, z_val, b_val, val.masks, 2, seed) : diffusion_probe(model, z_train, b_train, train.masks, 2, seed);
  };
  TrainReport r = run_loop(model, 2, cm.trainable_params().tensors(), train.size(), !val.empty(), opt, seed, hooks, step, probe);
  model.set_stage(2);
  return r;
}

// ---------------------------------------------------------------------------

std::vector<data::Sample> quadrant_samples(data::BuildingType type, std::uint64_t seed, int size, double scale) {
  if (!(scale > 0.0 && scale <= 0.75)) throw ValidationError("quadrant_samples: scale must lie in (0, 0.75]");
  const control::Mat2 A{{{scale, 0.0}, {0.0, scale}}};
  const double off = size / 4.0;
  const control::Vec2 shifts[4] = {{-off, -off}, {off, -off}, {-off, off}, {off, off}};
  std::vector<data::Sample> out;
  for (int q = 0; q < 4; ++q) {
    data::Sample s = data::generate_sample(data::default_spec(type, seed + static_cast<std::uint64_t>(q)), size);
    s.mask = control::affine_condition_transform(s.mask, A, shifts[q]);
    s.plan = control::affine_resample(s.plan, A, shifts[q], 255.0);
    out.push_back(std::move(s));
  }
  return out;
}

nlohmann::ordered_json ConditioningReport::to_json() const {
  nlohmann::ordered_json j;
  j["iou"] = iou;
  j["own_best"] = own_best;
  j["cases"] = iou.size();
  return j;
}

ConditioningReport conditioning_efficacy(const Model& model, std::span<const data::Sample> samples, int steps,
                                         std::uint64_t seed) {
  ConditioningReport r;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto img = model.generate(samples[i].prompt, samples[i].mask, steps, 1, Rng::derive(seed, i));
    const auto sil = silhouette(to_unit(img[0]));
    std::vector<double> row;
    for (const auto& other : samples) row.push_back(iou(sil, other.mask.bits()));
    bool best = true;
    for (std::size_t j = 0; j < row.size(); ++j)
      if (j != i && row[j] >= row[i]) best = false;
    r.own_best += best;
    r.iou.push_back(std::move(row));
  }
  return r;
}

ImageGrid to_unit(const ImageGrid& storage) {
  ImageGrid out = storage;
  for (double& v : out.pixels) v /= 255.0;
  return out;
}

ImageGrid tile_row(std::span<const ImageGrid> images, int gap) {
  if (images.empty()) throw ValidationError("tile_row: no images");
  const int h = images[0].height, w = images[0].width, c = images[0].channels;
  const int n = static_cast<int>(images.size());
  ImageGrid out(h, n * w + (n - 1) * gap, c, 255.0);
  for (int k = 0; k < n; ++k) {
    if (!images[static_cast<std::size_t>(k)].same_shape(images[0])) throw ValidationError("tile_row: mixed shapes");
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int ch = 0; ch < c; ++ch) out.at(y, k * (w + gap) + x, ch) = images[static_cast<std::size_t>(k)].at(y, x, ch);
  }
  return out;
}

nlohmann::ordered_json SweepReport::to_json() const {
  nlohmann::ordered_json j;
  j["seeds"] = seeds;
  j["seed"] = seed;
  j["eval_ids"] = eval_ids;
  auto& rs = j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json row;
    row["steps"] = r.steps;
    row["mse_median"] = r.mse_median;
    row["mse_mean"] = r.mse_mean;
    row["ssim_mean"] = r.ssim_mean;
    rs.push_back(row);
  }
  return j;
}

std::string SweepReport::to_text() const {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%6s | %12s | %12s | %10s\n", "steps", "median MSE", "mean MSE", "mean SSIM");
  os << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%6d | %12.6f | %12.6f | %10.6f\n", r.steps, r.mse_median, r.mse_mean, r.ssim_mean);
    os << buf;
  }
  os << "(" << eval_ids.size() << " eval plans x " << seeds << " seeds, seed " << seed << ")\n";
  return os.str();
}

SweepReport steps_fidelity_sweep(const Model& model, const TripleSet& eval, std::span<const int> step_list, int seeds,
                                 std::uint64_t seed, const std::optional<std::filesystem::path>& dump_dir) {
  if (eval.empty()) throw ValidationError("steps_fidelity_sweep: empty eval set");
  if (step_list.empty()) throw ValidationError("steps_fidelity_sweep: empty step list");
  if (seeds < 1) throw ValidationError("steps_fidelity_sweep: seeds must be >= 1");
  for (int s : step_list)
    if (s < 1 || s > model.schedule().T)
      throw ValidationError("steps_fidelity_sweep: step count " + std::to_string(s) + " outside [1, " +
                            std::to_string(model.schedule().T) + "]");
  if (dump_dir) {
    std::error_code ec;
    std::filesystem::create_directories(*dump_dir, ec);
    if (ec) throw IoError("steps_fidelity_sweep: cannot create " + dump_dir->string());
  }
  SweepReport rep;
  rep.seeds = seeds;
  rep.seed = seed;
  rep.eval_ids = eval.ids;
  const auto masks = from_tensor(eval.masks);
  const auto plans = from_tensor(eval.plans);
  for (int steps : step_list) {
    SweepRow row;
    row.steps = steps;
    double mse_sum = 0.0, ssim_sum = 0.0, median_sum = 0.0;
    for (int i = 0; i < eval.size(); ++i) {
      const control::FootprintMask mask{masks[static_cast<std::size_t>(i)]};
      const ImageGrid truth = to_unit(to_storage_space(plans[static_cast<std::size_t>(i)]));
      const auto imgs = model.generate(eval.prompts[static_cast<std::size_t>(i)], mask, steps, seeds,
                                       Rng::derive(seed, static_cast<std::uint64_t>(i)));
      std::vector<double> mses;
      for (int k = 0; k < seeds; ++k) {
        const ImageGrid& img = imgs[static_cast<std::size_t>(k)];
        if (dump_dir) {
          char name[64];
          std::snprintf(name, sizeof name, "_s%d_%02d.png", steps, k);
          write_png(*dump_dir / (eval.ids[static_cast<std::size_t>(i)] + name), img);
        }
        const ImageGrid u = to_unit(img);
        double se = 0.0;
        for (std::size_t p = 0; p < u.pixels.size(); ++p) se += (u.pixels[p] - truth.pixels[p]) * (u.pixels[p] - truth.pixels[p]);
        mses.push_back(se / static_cast<double>(u.pixels.size()));
        ssim_sum += metrics::ssim(u, truth);
      }
      for (double v : mses) mse_sum += v;
      median_sum += metrics::summarize("mse", mses).median;
    }
    const double cells = static_cast<double>(eval.size()) * seeds;
    row.mse_mean = mse_sum / cells;
    row.ssim_mean = ssim_sum / cells;
    row.mse_median = median_sum / eval.size();
    rep.rows.push_back(row);
  }
  return rep;
}

}  // namespace floorgen::pipeline

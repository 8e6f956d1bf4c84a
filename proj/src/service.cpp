#include "floorgen/service.hpp"

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iterator>
#include <set>
#include <thread>

#include "floorgen/hash.hpp"

// After Eigen: resolv.h, pulled in here, defines a _res macro.
#include <httplib.h>

namespace floorgen::service {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string now_iso() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[40];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[48];
  std::snprintf(out, sizeof out, "%s.%03lldZ", buf, static_cast<long long>(ms));
  return out;
}

Response json_response(int status, const ordered_json& body) { return {status, "application/json", body.dump(), {}}; }

Response error(int status, const std::string& message) { return json_response(status, ordered_json{{"error", message}}); }

std::optional<long long> parse_int(const std::string& s) {
  if (s.empty() || s.size() > 18) return std::nullopt;
  std::size_t i = s[0] == '-' ? 1 : 0;
  if (i == s.size()) return std::nullopt;
  for (std::size_t k = i; k < s.size(); ++k)
    if (s[k] < '0' || s[k] > '9') return std::nullopt;
  return std::stoll(s);
}

std::optional<json> parse_object(const std::string& body) {
  try {
    json j = json::parse(body);
    if (j.is_object()) return j;
  } catch (const json::exception&) {
  }
  return std::nullopt;
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

LogContents read_log(const std::filesystem::path& path) {
  LogContents out;
  std::ifstream in(path, std::ios::binary);
  if (!in) return out;
  const std::string text(std::istreambuf_iterator<char>(in), {});
  std::size_t pos = 0;
  int line_no = 0;
  std::set<std::string> sessions;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    ++line_no;
    if (nl == std::string::npos) {
      out.warnings.push_back("rating log line " + std::to_string(line_no) + " is incomplete and was ignored");
      break;
    }
    const std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) continue;
    const std::string where = "rating log " + path.string() + " line " + std::to_string(line_no) + ": ";
    try {
      const json j = json::parse(line);
      const std::string event = j.at("event").get<std::string>();
      if (event == "session") {
        LogContents::Session s;
        s.session_id = j.at("session_id").get<std::string>();
        s.player_id = j.at("player_id").get<std::string>();
        s.created_at = j.at("created_at").get<std::string>();
        for (const auto& im : j.at("images")) s.images.emplace_back(im.at("image_id").get<std::string>(), im.at("group").get<std::string>());
        if (!sessions.insert(s.session_id).second) throw LoadError(where + "duplicate session " + s.session_id);
        out.sessions.push_back(std::move(s));
      } else if (event == "rating") {
        metrics::RatingRecord r;
        r.session_id = j.at("session_id").get<std::string>();
        r.player_id = j.at("player_id").get<std::string>();
        r.image_id = j.at("image_id").get<std::string>();
        r.score = j.at("score").get<int>();
        r.submitted_at = j.at("submitted_at").get<std::string>();
        if (!sessions.count(r.session_id)) throw LoadError(where + "rating for unknown session " + r.session_id);
        out.ratings.push_back(std::move(r));
      } else {
        throw LoadError(where + "unknown event '" + event + "'");
      }
    } catch (const json::exception& e) {
      throw LoadError(where + e.what());
    }
  }
  return out;
}

std::vector<metrics::RatingRecord> counted_ratings(const LogContents& log) {
  std::map<std::string, const LogContents::Session*> by_id;
  for (const auto& s : log.sessions) by_id[s.session_id] = &s;
  std::map<std::string, std::set<std::string>> rated;
  for (const auto& r : log.ratings) rated[r.session_id].insert(r.image_id);
  std::vector<metrics::RatingRecord> out;
  for (const auto& r : log.ratings) {
    const auto* s = by_id.at(r.session_id);
    if (rated[r.session_id].size() != s->images.size()) continue;
    metrics::RatingRecord c = r;
    for (const auto& [id, group] : s->images)
      if (id == r.image_id) c.group = group;
    out.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------------------

Service::Service(ServiceOptions opt) : opt_(std::move(opt)) {
  if (opt_.session_size < 2 || opt_.session_size % 2 != 0) throw ValidationError("service: session size must be even and >= 2");
  load_pool(opt_.real_dir, "real");
  load_pool(opt_.generated_dir, "generated");

  const LogContents log = read_log(opt_.log_path);
  for (const auto& w : log.warnings) warnings_.push_back(w);
  for (const auto& s : log.sessions) {
    Session& dst = sessions_[s.session_id];
    dst.session_id = s.session_id;
    dst.player_id = s.player_id;
    for (const auto& [id, group] : s.images) {
      dst.image_ids.push_back(id);
      dst.groups[id] = group;
    }
  }
  for (const auto& r : log.ratings) sessions_.at(r.session_id).scores[r.image_id] = r.score;
  session_counter_ = log.sessions.size();

  if (opt_.log_path.has_parent_path()) std::filesystem::create_directories(opt_.log_path.parent_path());
  if (!log.warnings.empty()) {
    // Cut the interrupted tail so new records start on a fresh line.
    const std::string text = read_bytes(opt_.log_path);
    std::filesystem::resize_file(opt_.log_path, text.rfind('\n') == std::string::npos ? 0 : text.rfind('\n') + 1);
  }
  log_ = std::fopen(opt_.log_path.c_str(), "ab");
  if (!log_) throw IoError("service: cannot open rating log " + opt_.log_path.string());

  if (opt_.checkpoint) {
    auto m = std::make_unique<pipeline::Model>(pipeline::Model::load(*opt_.checkpoint));
    if (!m->controlled()) {
      warnings_.push_back("checkpoint " + opt_.checkpoint->string() + " has no control branch; /generate is disabled");
    } else {
      model_ = std::move(m);
    }
  } else {
    warnings_.push_back("no checkpoint given; /generate is disabled");
  }
}

Service::~Service() {
  if (log_) std::fclose(log_);
}

void Service::load_pool(const std::filesystem::path& dir, const std::string& group) {
  auto& pool = group == "real" ? real_ : generated_;
  std::error_code ec;
  if (dir.empty() || !std::filesystem::is_directory(dir, ec)) {
    warnings_.push_back("image pool directory " + dir.string() + " is missing");
    return;
  }
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    PoolImage im;
    im.group = group;
    im.png = read_bytes(f);
    im.image_id = "im-" + sha256_hex(group + "\n" + f.filename().string() + "\n" + im.png).substr(0, 16);
    pool.push_back(std::move(im));
  }
  for (const auto& im : pool) by_id_[im.image_id] = &im;
}

std::size_t Service::pool_size(const std::string& group) const { return group == "real" ? real_.size() : generated_.size(); }

void Service::append_log(const json& record) {
  const std::string line = record.dump() + "\n";
  if (std::fwrite(line.data(), 1, line.size(), log_) != line.size() || std::fflush(log_) != 0)
    throw IoError("service: rating log write failed");
  ::fsync(::fileno(log_));
}

Response Service::create_session(const std::string& body) {
  const auto j = parse_object(body);
  if (!j || !j->contains("player_id") || !(*j)["player_id"].is_string() || (*j)["player_id"].get<std::string>().empty())
    return error(422, "body must be a JSON object with a non-empty string player_id");
  const std::size_t half = static_cast<std::size_t>(opt_.session_size / 2);
  if (real_.size() < half || generated_.size() < half)
    return error(409, "image pools too small: each pool needs at least " + std::to_string(half) + " images");

  std::lock_guard lock(mu_);
  Rng rng(Rng::derive(opt_.seed, session_counter_));
  std::string id;
  do {
    char buf[24];
    std::snprintf(buf, sizeof buf, "s-%016llx", static_cast<unsigned long long>(rng.next()));
    id = buf;
  } while (sessions_.count(id));

  std::vector<const PoolImage*> picked;
  for (const auto* pool : {&real_, &generated_}) {
    std::vector<std::size_t> idx(pool->size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    rng.shuffle(idx);
    for (std::size_t k = 0; k < half; ++k) picked.push_back(&(*pool)[idx[k]]);
  }
  rng.shuffle(picked);

  Session s;
  s.session_id = id;
  s.player_id = (*j)["player_id"].get<std::string>();
  json images = json::array();
  for (const auto* im : picked) {
    s.image_ids.push_back(im->image_id);
    s.groups[im->image_id] = im->group;
    images.push_back({{"image_id", im->image_id}, {"group", im->group}});
  }
  append_log({{"event", "session"}, {"session_id", id}, {"player_id", s.player_id}, {"created_at", now_iso()}, {"images", images}});
  ++session_counter_;
  sessions_[id] = std::move(s);
  return json_response(201, ordered_json{{"session_id", id}, {"image_count", opt_.session_size}});
}

Response Service::get_session(const std::string& session_id) const {
  std::lock_guard lock(mu_);
  const auto it = sessions_.find(session_id);
  if (it == sessions_.end()) return error(404, "unknown session");
  const Session& s = it->second;
  ordered_json j;
  j["session_id"] = s.session_id;
  j["player_id"] = s.player_id;
  j["image_count"] = s.image_ids.size();
  j["image_ids"] = s.image_ids;
  std::vector<std::string> rated;
  for (const auto& id : s.image_ids)
    if (s.scores.count(id)) rated.push_back(id);
  j["rated"] = rated;
  j["complete"] = rated.size() == s.image_ids.size();
  return json_response(200, j);
}

Response Service::get_image(const std::string& session_id, const std::string& index) const {
  std::lock_guard lock(mu_);
  const auto it = sessions_.find(session_id);
  if (it == sessions_.end()) return error(404, "unknown session");
  const auto k = parse_int(index);
  if (!k || *k < 0 || *k >= static_cast<long long>(it->second.image_ids.size())) return error(404, "no image at that position");
  const std::string& id = it->second.image_ids[static_cast<std::size_t>(*k)];
  const auto im = by_id_.find(id);
  if (im == by_id_.end()) return error(404, "image is no longer in the pools");
  return {200, "image/png", im->second->png, {{"X-Image-Id", id}, {"Cache-Control", "no-store"}}};
}

Response Service::post_rating(const std::string& session_id, const std::string& body) {
  std::lock_guard lock(mu_);
  const auto it = sessions_.find(session_id);
  if (it == sessions_.end()) return error(404, "unknown session");
  const auto j = parse_object(body);
  if (!j || !j->contains("image_id") || !(*j)["image_id"].is_string()) return error(422, "body must carry a string image_id");
  if (!j->contains("score") || !(*j)["score"].is_number_integer()) return error(422, "score must be an integer");
  const long long score = (*j)["score"].get<long long>();
  if (score < 0 || score > 10) return error(422, "score must lie in [0, 10]");
  Session& s = it->second;
  const std::string image_id = (*j)["image_id"].get<std::string>();
  if (!s.groups.count(image_id)) return error(404, "image is not part of this session");
  if (s.scores.count(image_id)) return error(409, "this image has a rating in this session");
  append_log({{"event", "rating"},
              {"session_id", session_id},
              {"player_id", s.player_id},
              {"image_id", image_id},
              {"score", score},
              {"submitted_at", now_iso()}});
  s.scores[image_id] = static_cast<int>(score);
  return {204, "", "", {}};
}

Response Service::stats() const {
  std::lock_guard lock(mu_);
  const LogContents log = read_log(opt_.log_path);
  const auto ratings = counted_ratings(log);
  metrics::ScoreTable table;
  try {
    table = metrics::score_summary(ratings);
  } catch (const ValidationError& e) {
    return error(409, e.what());
  }
  std::set<std::string> counted;
  for (const auto& r : ratings) counted.insert(r.session_id);
  ordered_json j = table.to_json();
  j["sessions_counted"] = counted.size();
  j["ratings_counted"] = ratings.size();
  j["table"] = table.to_text();
  return json_response(200, j);
}

Response Service::generate(const GenerateRequest& req) {
  if (!model_) return error(503, "no stage-2 checkpoint loaded");
  const int T = model_->schedule().T;
  if (req.prompt.empty()) return error(422, "prompt must not be empty");
  if (req.steps < 1 || req.steps > T) return error(422, "steps must lie in [1, " + std::to_string(T) + "]");
  if (req.n < 1 || req.n > 8) return error(422, "n must lie in [1, 8]");
  ImageGrid img;
  try {
    img = luminance(decode_png(std::span(reinterpret_cast<const std::uint8_t*>(req.mask_png.data()), req.mask_png.size())));
  } catch (const std::exception&) {
    return error(422, "mask is not a readable PNG");
  }
  std::vector<std::string> warnings;
  const int size = model_->config().image_size;
  if (img.height != size || img.width != size) {
    warnings.push_back("mask resized from " + std::to_string(img.width) + "x" + std::to_string(img.height) + " to " +
                       std::to_string(size) + "x" + std::to_string(size));
    img = resize_nearest(img, size, size);
  }
  std::size_t grey = 0;
  for (double v : img.pixels) grey += v > 32.0 && v < 223.0;
  if (static_cast<double>(grey) > 0.05 * static_cast<double>(img.pixels.size()))
    return error(422, "mask is not binary: " + std::to_string(grey) + " of " + std::to_string(img.pixels.size()) +
                          " pixels are mid-grey");
  const control::FootprintMask mask = control::FootprintMask::from_storage(img);
  if (mask.foreground() == 0) return error(422, "mask has no foreground (footprint pixels must be white)");

  std::uint64_t job_no = 0;
  {
    std::lock_guard lock(jobs_mu_);
    job_no = job_counter_++;
  }
  Job job;
  char buf[32];
  std::snprintf(buf, sizeof buf, "job-%06llu", static_cast<unsigned long long>(job_no));
  job.job_id = buf;
  job.prompt = req.prompt;
  job.steps = req.steps;
  job.seed = req.seed ? *req.seed : Rng::derive(opt_.seed, 0x6a6f62 + job_no);
  job.warnings = warnings;
  {
    std::lock_guard lock(generate_mu_);
    for (const auto& g : model_->generate(req.prompt, mask, req.steps, req.n, job.seed)) {
      const auto bytes = encode_png(g);
      job.pngs.emplace_back(bytes.begin(), bytes.end());
    }
  }
  ordered_json j;
  j["job_id"] = job.job_id;
  j["status"] = "done";
  j["n"] = job.pngs.size();
  j["seed"] = job.seed;
  j["warnings"] = job.warnings;
  std::lock_guard lock(jobs_mu_);
  jobs_[job.job_id] = std::move(job);
  return json_response(201, j);
}

Response Service::get_job(const std::string& job_id) const {
  std::lock_guard lock(jobs_mu_);
  const auto it = jobs_.find(job_id);
  if (it == jobs_.end()) return error(404, "unknown job");
  const Job& job = it->second;
  ordered_json j;
  j["job_id"] = job.job_id;
  j["status"] = "done";
  j["prompt"] = job.prompt;
  j["steps"] = job.steps;
  j["seed"] = job.seed;
  j["warnings"] = job.warnings;
  auto& images = j["images"] = ordered_json::array();
  for (std::size_t k = 0; k < job.pngs.size(); ++k)
    images.push_back({{"index", k},
                      {"url", "/jobs/" + job.job_id + "/images/" + std::to_string(k)},
                      {"sha256", sha256_hex(job.pngs[k])},
                      {"png_base64", base64_encode(job.pngs[k])}});
  return json_response(200, j);
}

Response Service::get_job_image(const std::string& job_id, const std::string& index) const {
  std::lock_guard lock(jobs_mu_);
  const auto it = jobs_.find(job_id);
  if (it == jobs_.end()) return error(404, "unknown job");
  const auto k = parse_int(index);
  if (!k || *k < 0 || *k >= static_cast<long long>(it->second.pngs.size())) return error(404, "no image at that position");
  return {200, "image/png", it->second.pngs[static_cast<std::size_t>(*k)], {}};
}

// ---------------------------------------------------------------------------

struct HttpServer::Impl {
  Service& service;
  httplib::Server server;
  std::thread thread;

  explicit Impl(Service& s) : service(s) {}

  static void send(httplib::Response& res, const Response& r) {
    res.status = r.status;
    for (const auto& [k, v] : r.headers) res.set_header(k, v);
    if (r.status != 204) res.set_content(r.body, r.content_type);
  }

  void routes() {
    Service& s = service;
    server.Post("/sessions", [&s](const httplib::Request& req, httplib::Response& res) { send(res, s.create_session(req.body)); });
    server.Get(R"(/sessions/([^/]+))", [&s](const httplib::Request& req, httplib::Response& res) {
      send(res, s.get_session(req.matches[1]));
    });
    server.Get(R"(/sessions/([^/]+)/images/([^/]+))", [&s](const httplib::Request& req, httplib::Response& res) {
      send(res, s.get_image(req.matches[1], req.matches[2]));
    });
    server.Post(R"(/sessions/([^/]+)/ratings)", [&s](const httplib::Request& req, httplib::Response& res) {
      send(res, s.post_rating(req.matches[1], req.body));
    });
    server.Get("/stats", [&s](const httplib::Request&, httplib::Response& res) { send(res, s.stats()); });
    server.Post("/generate", [&s](const httplib::Request& req, httplib::Response& res) {
      if (!req.is_multipart_form_data()) {
        send(res, error(422, "expected multipart/form-data with fields prompt, mask, steps, n and optional seed"));
        return;
      }
      GenerateRequest g;
      auto field = [&](const char* name) { return req.has_file(name) ? req.get_file_value(name).content : std::string(); };
      g.prompt = field("prompt");
      g.mask_png = field("mask");
      const auto steps = parse_int(field("steps"));
      const auto n = parse_int(field("n"));
      if (!steps) return send(res, error(422, "steps must be an integer"));
      if (!n && !field("n").empty()) return send(res, error(422, "n must be an integer"));
      g.steps = static_cast<int>(*steps);
      g.n = n ? static_cast<int>(*n) : 1;
      if (!field("seed").empty()) {
        const auto seed = parse_int(field("seed"));
        if (!seed || *seed < 0) return send(res, error(422, "seed must be a non-negative integer"));
        g.seed = static_cast<std::uint64_t>(*seed);
      }
      if (g.mask_png.empty()) return send(res, error(422, "mask upload is missing"));
      send(res, s.generate(g));
    });
    server.Get(R"(/jobs/([^/]+))", [&s](const httplib::Request& req, httplib::Response& res) { send(res, s.get_job(req.matches[1])); });
    server.Get(R"(/jobs/([^/]+)/images/([^/]+))", [&s](const httplib::Request& req, httplib::Response& res) {
      send(res, s.get_job_image(req.matches[1], req.matches[2]));
    });
    server.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    const std::string origin = s.options().cors_origin;
    server.set_post_routing_handler([origin](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Origin", origin);
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.set_header("Access-Control-Expose-Headers", "X-Image-Id");
    });
    server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (res.body.empty()) res.set_content(ordered_json{{"error", "not found"}}.dump(), "application/json");
    });
    server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string what = "internal error";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        what = e.what();
      } catch (...) {
      }
      res.status = 500;
      res.set_content(ordered_json{{"error", what}}.dump(), "application/json");
    });
  }
};

HttpServer::HttpServer(Service& service) : impl_(std::make_unique<Impl>(service)) { impl_->routes(); }

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw IoError("service: cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

bool HttpServer::listen(const std::string& host, int port) { return impl_->server.listen(host, port); }

void HttpServer::stop() {
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace floorgen::service

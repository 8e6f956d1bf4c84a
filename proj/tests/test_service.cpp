#include <doctest.h>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <thread>

#include "floorgen/hash.hpp"
#include "floorgen/service.hpp"
#include "tempdir.hpp"

// After Eigen: resolv.h, pulled in here, defines a _res macro.
#include <httplib.h>

using namespace floorgen;
using namespace floorgen::service;
using testing::TempDir;
using nlohmann::json;

namespace {

// Writes n distinct random 8x8 RGB PNGs and returns their bytes.
std::vector<std::string> make_pool(const std::filesystem::path& dir, int n, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  Rng rng(seed);
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i) {
    ImageGrid img(8, 8, 3);
    for (double& v : img.pixels) v = static_cast<double>(rng.uniform_int(0, 255));
    char name[32];
    std::snprintf(name, sizeof name, "img_%03d.png", i);
    write_png(dir / name, img);
    out.push_back(testing::read_file(dir / name));
  }
  return out;
}

struct Fixture {
  TempDir dir{"svc"};
  std::map<std::string, std::string> group_of_bytes;

  explicit Fixture(int n_real = 16, int n_gen = 16) {
    for (const auto& b : make_pool(dir / "pool_a", n_real, 1)) group_of_bytes[b] = "real";
    for (const auto& b : make_pool(dir / "pool_b", n_gen, 2)) group_of_bytes[b] = "generated";
  }

  ServiceOptions options() const {
    ServiceOptions o;
    o.real_dir = dir / "pool_a";
    o.generated_dir = dir / "pool_b";
    o.log_path = dir / "log" / "ratings.jsonl";
    o.seed = 7;
    return o;
  }
};

// Every response seen by a client, for the anonymity scan.
struct Recorder {
  std::vector<std::string> transcript;

  void add(const httplib::Result& r) {
    REQUIRE(r);
    std::string s = std::to_string(r->status) + "\n";
    for (const auto& [k, v] : r->headers) s += k + ": " + v + "\n";
    transcript.push_back(s + r->body);
  }
  int leaks() const {
    int n = 0;
    for (std::string t : transcript) {
      std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
      n += t.find("real") != std::string::npos;
      n += t.find("generated") != std::string::npos;
    }
    return n;
  }
};

std::string rating(const std::string& image_id, const json& score) { return json{{"image_id", image_id}, {"score", score}}.dump(); }

struct Client {
  httplib::Client http;
  Recorder* rec;

  Client(int port, Recorder* r) : http("127.0.0.1", port), rec(r) {}

  httplib::Result post(const std::string& path, const std::string& body) {
    auto r = http.Post(path, body, "application/json");
    if (rec) rec->add(r);
    return r;
  }
  httplib::Result get(const std::string& path) {
    auto r = http.Get(path);
    if (rec) rec->add(r);
    return r;
  }
  std::string new_session(const std::string& player) {
    auto r = post("/sessions", json{{"player_id", player}}.dump());
    REQUIRE(r->status == 201);
    return json::parse(r->body)["session_id"].get<std::string>();
  }
  std::vector<std::string> image_ids(const std::string& session) {
    return json::parse(get("/sessions/" + session)->body)["image_ids"].get<std::vector<std::string>>();
  }
};

}  // namespace

TEST_CASE("sessions hold 15 images from each pool, anonymized") {
  Fixture fx;
  Service svc(fx.options());
  HttpServer server(svc);
  const int port = server.start("127.0.0.1", 0);
  Recorder rec;
  Client c(port, &rec);

  auto r = c.post("/sessions", R"({"player_id": "p1"})");
  REQUIRE(r->status == 201);
  const json j = json::parse(r->body);
  CHECK(j["image_count"] == 30);
  const std::string sid = j["session_id"];

  std::set<std::string> ids;
  int real = 0;
  for (int k = 0; k < 30; ++k) {
    auto im = c.get("/sessions/" + sid + "/images/" + std::to_string(k));
    REQUIRE(im->status == 200);
    CHECK(im->get_header_value("Content-Type") == "image/png");
    ids.insert(im->get_header_value("X-Image-Id"));
    REQUIRE(fx.group_of_bytes.count(im->body));
    real += fx.group_of_bytes[im->body] == "real";
  }
  CHECK(ids.size() == 30);
  CHECK(real == 15);
  CHECK(c.image_ids(sid).size() == 30);

  CHECK(c.get("/sessions/" + sid + "/images/30")->status == 404);
  CHECK(c.get("/sessions/" + sid + "/images/-1")->status == 404);
  CHECK(c.get("/sessions/" + sid + "/images/x")->status == 404);
  CHECK(c.get("/sessions/nope/images/0")->status == 404);
  CHECK(c.get("/sessions/nope")->status == 404);
  CHECK(c.post("/sessions", "{}")->status == 422);
  CHECK(c.post("/sessions", "not json")->status == 422);
  CHECK(c.post("/sessions", R"({"player_id": 4})")->status == 422);
  CHECK(rec.leaks() == 0);
}

TEST_CASE("small pools refuse sessions") {
  Fixture fx(10, 16);
  Service svc(fx.options());
  auto r = svc.create_session(R"({"player_id": "p"})");
  CHECK(r.status == 409);
  CHECK(r.body.find("real") == std::string::npos);
}

TEST_CASE("rating validation and exactly-once") {
  Fixture fx;
  Service svc(fx.options());
  HttpServer server(svc);
  const int port = server.start("127.0.0.1", 0);
  Client c(port, nullptr);
  const std::string sid = c.new_session("p1");
  const auto ids = c.image_ids(sid);
  const std::string path = "/sessions/" + sid + "/ratings";

  CHECK(c.post(path, rating(ids[0], 11))->status == 422);
  CHECK(c.post(path, rating(ids[0], -1))->status == 422);
  CHECK(c.post(path, rating(ids[0], 7.5))->status == 422);
  CHECK(c.post(path, rating(ids[0], "7"))->status == 422);
  CHECK(c.post(path, R"({"score": 3})")->status == 422);
  CHECK(c.post("/sessions/nope/ratings", rating(ids[0], 3))->status == 404);
  CHECK(c.post(path, rating("im-0000000000000000", 3))->status == 404);
  CHECK(c.post(path, rating(ids[0], 0))->status == 204);
  CHECK(c.post(path, rating(ids[1], 10))->status == 204);
  CHECK(c.post(path, rating(ids[0], 5))->status == 409);

  // Concurrent duplicates: exactly one wins.
  std::atomic<int> created{0}, conflicts{0};
  std::vector<std::thread> threads;
  for (int i = 0; i < 12; ++i)
    threads.emplace_back([&, i] {
      httplib::Client h("127.0.0.1", port);
      auto r = h.Post(path, rating(ids[2], i % 11), "application/json");
      if (r && r->status == 204) ++created;
      if (r && r->status == 409) ++conflicts;
    });
  for (auto& t : threads) t.join();
  CHECK(created == 1);
  CHECK(conflicts == 11);

  const LogContents log = read_log(fx.options().log_path);
  CHECK(log.ratings.size() == 3);
  const auto session = json::parse(c.get("/sessions/" + sid)->body);
  CHECK(session["rated"].size() == 3);
  CHECK(session["complete"] == false);
}

TEST_CASE("stats match an offline recomputation and survive replay") {
  Fixture fx;
  Recorder rec;
  std::string stats_body;
  std::vector<metrics::RatingRecord> oracle;
  {
    Service svc(fx.options());
    HttpServer server(svc);
    const int port = server.start("127.0.0.1", 0);
    Client c(port, &rec);

    CHECK(c.get("/stats")->status == 409);
    CHECK(json::parse(c.get("/stats")->body)["error"].get<std::string>().find("insufficient data") != std::string::npos);

    // Two players rate everything with a score rule the oracle can repeat;
    // a third leaves a session unfinished and must not count.
    for (int p = 0; p < 3; ++p) {
      const std::string sid = c.new_session("player-" + std::to_string(p));
      for (int k = 0; k < 30; ++k) {
        auto im = c.get("/sessions/" + sid + "/images/" + std::to_string(k));
        const std::string id = im->get_header_value("X-Image-Id");
        const std::string group = fx.group_of_bytes.at(im->body);
        const int score = static_cast<int>((sha256_hex(id + std::to_string(p))[0] - '0' + 16) % 11);
        if (p == 2 && k == 29) break;
        REQUIRE(c.post("/sessions/" + sid + "/ratings", rating(id, score))->status == 204);
        if (p < 2) oracle.push_back({sid, "player-" + std::to_string(p), id, group, score, ""});
      }
      if (p == 0) CHECK(c.http.Get("/stats")->status == 200);
    }
    CHECK(rec.leaks() == 0);

    auto r = c.get("/stats");
    REQUIRE(r->status == 200);
    stats_body = r->body;
  }

  const json s = json::parse(stats_body);
  const metrics::ScoreTable want = metrics::score_summary(oracle);
  CHECK(s["sessions_counted"] == 2);
  CHECK(s["ratings_counted"] == 60);
  CHECK(s["real"]["n"] == want.real.n);
  CHECK(s["real"]["mean"].get<double>() == want.real.mean);
  CHECK(s["real"]["std"].get<double>() == want.real.std);
  CHECK(s["real"]["median"].get<double>() == want.real.median);
  CHECK(s["generated"]["mean"].get<double>() == want.generated.mean);
  CHECK(s["generated"]["min"].get<double>() == want.generated.min);
  CHECK(s["generated"]["max"].get<double>() == want.generated.max);
  CHECK(s["t_test"]["p"].get<double>() == want.test.p);
  CHECK(s["t_test"]["df"].get<double>() == want.test.df);
  CHECK(s["table"].get<std::string>() == want.to_text());

  // Restart on the same log.
  Service again(fx.options());
  CHECK(again.stats().body == stats_body);
  const auto fresh = again.create_session(R"({"player_id": "late"})");
  CHECK(fresh.status == 201);
  CHECK(read_log(fx.options().log_path).sessions.size() == 4);
}

TEST_CASE("interrupted log writes are dropped on replay") {
  Fixture fx;
  std::string sid;
  {
    Service svc(fx.options());
    sid = json::parse(svc.create_session(R"({"player_id": "p"})").body)["session_id"];
  }
  {
    std::ofstream(fx.options().log_path, std::ios::app) << R"({"event":"rating","session_id":")";
  }
  Service svc(fx.options());
  REQUIRE(svc.warnings().size() >= 1);
  CHECK(svc.get_session(sid).status == 200);
  const auto ids = json::parse(svc.get_session(sid).body)["image_ids"];
  CHECK(svc.post_rating(sid, rating(ids[0], 4)).status == 204);
  CHECK(read_log(fx.options().log_path).ratings.size() == 1);
  CHECK(read_log(fx.options().log_path).warnings.empty());

  {
    std::ofstream(fx.options().log_path, std::ios::app) << "{broken}\n";
  }
  CHECK_THROWS_AS(read_log(fx.options().log_path), LoadError);
}

TEST_CASE("shuffle fairness over 1000 sessions") {
  Fixture fx(20, 20);
  Service svc(fx.options());
  HttpServer server(svc);
  const int port = server.start("127.0.0.1", 0);
  Client c(port, nullptr);
  std::map<std::string, std::string> group_of_id;
  std::vector<int> real_at(30, 0);
  const int sessions = 1000;
  for (int s = 0; s < sessions; ++s) {
    const std::string sid = c.new_session("mc");
    const auto ids = c.image_ids(sid);
    for (int k = 0; k < 30; ++k) {
      const std::string& id = ids[static_cast<std::size_t>(k)];
      if (!group_of_id.count(id))
        group_of_id[id] = fx.group_of_bytes.at(c.get("/sessions/" + sid + "/images/" + std::to_string(k))->body);
      real_at[static_cast<std::size_t>(k)] += group_of_id[id] == "real";
    }
  }
  CHECK(group_of_id.size() == 40);
  for (int k = 0; k < 30; ++k) {
    const double f = real_at[static_cast<std::size_t>(k)] / static_cast<double>(sessions);
    CHECK_MESSAGE(std::abs(f - 0.5) <= 0.05, "position " << k << " frequency " << f);
  }
}

TEST_CASE("CORS headers and preflight") {
  Fixture fx;
  Service svc(fx.options());
  HttpServer server(svc);
  const int port = server.start("127.0.0.1", 0);
  httplib::Client h("127.0.0.1", port);
  auto r = h.Get("/stats");
  REQUIRE(r);
  CHECK(r->get_header_value("Access-Control-Allow-Origin") == "*");
  auto pre = h.Options("/sessions");
  REQUIRE(pre);
  CHECK(pre->status == 204);
  CHECK(pre->get_header_value("Access-Control-Allow-Methods").find("POST") != std::string::npos);
  auto missing = h.Get("/nowhere");
  REQUIRE(missing);
  CHECK(missing->status == 404);
}

namespace {

RunConfig tiny_config() {
  RunConfig c = RunConfig::desk();
  c.image_size = 16;
  c.codec.base_channels = 8;
  c.codec.channel_mults = {1, 2};
  c.codec.groups = 4;
  c.unet = net::UNetConfig{4, 8, {1, 2}, {1, 2}, 1, 16, 16, 4, 1};
  c.text.dim = 16;
  c.hint.channels = {4, 8};
  for (OptimConfig* o : {&c.codec_train, &c.stage1, &c.stage2}) {
    o->epochs = 1;
    o->batch_size = 2;
  }
  return c;
}

httplib::MultipartFormDataItems form(const std::string& prompt, const std::string& mask, const std::string& steps,
                                     const std::string& n, const std::string& seed) {
  httplib::MultipartFormDataItems items{{"prompt", prompt, "", ""}, {"steps", steps, "", ""}, {"n", n, "", ""}};
  if (!mask.empty()) items.push_back({"mask", mask, "mask.png", "image/png"});
  if (!seed.empty()) items.push_back({"seed", seed, "", ""});
  return items;
}

}  // namespace

TEST_CASE("generation endpoint") {
  Fixture fx;
  ServiceOptions opt = fx.options();
  {
    Service none(opt);
    CHECK(none.generate({"a floorplan for a library", "x", 4, 1, {}}).status == 503);
  }

  const auto s = data::generate_sample(data::default_spec(data::BuildingType::library, 4), 16);
  {
    const std::vector<data::Sample> set{s};
    pipeline::Model m(tiny_config());
    const auto triples = pipeline::make_triples(set);
    pipeline::train_codec(m, triples, {}, m.config().codec_train, 1);
    pipeline::train_stage1(m, triples, {}, m.config().stage1, 1);
    m.save(fx.dir / "s1.ckpt");
    pipeline::train_stage2(m, triples, {}, m.config().stage2, 1);
    m.save(fx.dir / "s2.ckpt");
  }
  opt.checkpoint = fx.dir / "s1.ckpt";
  {
    Service stage1_only(opt);
    CHECK(stage1_only.generate({"a floorplan for a library", "x", 4, 1, {}}).status == 503);
  }
  opt.checkpoint = fx.dir / "s2.ckpt";
  Service svc(opt);
  HttpServer server(svc);
  const int port = server.start("127.0.0.1", 0);
  httplib::Client h("127.0.0.1", port);
  Recorder rec;

  const auto mask_bytes = encode_png(s.mask.to_storage());
  const std::string mask(mask_bytes.begin(), mask_bytes.end());
  auto r = h.Post("/generate", form("a floorplan for a library", mask, "4", "2", "99"));
  rec.add(r);
  REQUIRE(r->status == 201);
  const json job = json::parse(r->body);
  CHECK(job["n"] == 2);
  CHECK(job["warnings"].empty());
  auto j1 = h.Get("/jobs/" + job["job_id"].get<std::string>());
  rec.add(j1);
  REQUIRE(j1->status == 200);
  const json listing = json::parse(j1->body);
  REQUIRE(listing["images"].size() == 2);
  std::vector<std::string> first;
  for (int k = 0; k < 2; ++k) {
    auto img = h.Get("/jobs/" + job["job_id"].get<std::string>() + "/images/" + std::to_string(k));
    rec.add(img);
    REQUIRE(img->status == 200);
    CHECK(sha256_hex(img->body) == listing["images"][static_cast<std::size_t>(k)]["sha256"]);
    CHECK(base64_encode(img->body) == listing["images"][static_cast<std::size_t>(k)]["png_base64"]);
    CHECK(decode_png(std::span(reinterpret_cast<const std::uint8_t*>(img->body.data()), img->body.size())).height == 16);
    first.push_back(img->body);
  }

  // Same seed, same bytes.
  auto again = h.Post("/generate", form("a floorplan for a library", mask, "4", "2", "99"));
  REQUIRE(again->status == 201);
  const std::string job2 = json::parse(again->body)["job_id"];
  CHECK(job2 != job["job_id"]);
  for (int k = 0; k < 2; ++k) CHECK(h.Get("/jobs/" + job2 + "/images/" + std::to_string(k))->body == first[static_cast<std::size_t>(k)]);

  // Wrong size is resized with a warning.
  const auto big = data::generate_sample(data::default_spec(data::BuildingType::library, 4), 32);
  const auto big_bytes = encode_png(big.mask.to_storage());
  auto resized = h.Post("/generate", form("a floorplan for a library", std::string(big_bytes.begin(), big_bytes.end()), "4", "1", ""));
  rec.add(resized);
  REQUIRE(resized->status == 201);
  CHECK(json::parse(resized->body)["warnings"][0].get<std::string>().find("resized from 32x32 to 16x16") != std::string::npos);

  ImageGrid noise(16, 16, 1);
  Rng rng(3);
  for (double& v : noise.pixels) v = static_cast<double>(rng.uniform_int(0, 255));
  const auto noise_bytes = encode_png(noise);
  const std::string noisy(noise_bytes.begin(), noise_bytes.end());
  const ImageGrid black(16, 16, 1, 0.0);
  const auto black_bytes = encode_png(black);
  const std::string empty_mask(black_bytes.begin(), black_bytes.end());
  for (const auto& [items, status] : std::vector<std::pair<httplib::MultipartFormDataItems, int>>{
           {form("a floorplan for a library", noisy, "4", "1", ""), 422},
           {form("a floorplan for a library", empty_mask, "4", "1", ""), 422},
           {form("a floorplan for a library", "not a png", "4", "1", ""), 422},
           {form("a floorplan for a library", mask, "9", "1", ""), 422},
           {form("a floorplan for a library", mask, "0", "1", ""), 422},
           {form("a floorplan for a library", mask, "4", "9", ""), 422},
           {form("a floorplan for a library", mask, "four", "1", ""), 422},
           {form("", mask, "4", "1", ""), 422},
           {form("a floorplan for a library", "", "4", "1", ""), 422},
       }) {
    auto e = h.Post("/generate", items);
    rec.add(e);
    CHECK(e->status == status);
  }
  auto plain = h.Post("/generate", R"({"prompt": "x"})", "application/json");
  rec.add(plain);
  CHECK(plain->status == 422);
  CHECK(h.Get("/jobs/job-999999")->status == 404);
  CHECK(h.Get("/jobs/" + job2 + "/images/2")->status == 404);
  CHECK(rec.leaks() == 0);
}

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "floorgen/metrics.hpp"
#include "floorgen/pipeline.hpp"

namespace floorgen::service {

struct ServiceOptions {
  std::filesystem::path real_dir;
  std::filesystem::path generated_dir;
  /// Append-only JSONL rating log, replayed on start.
  std::filesystem::path log_path;
  /// Stage-2 checkpoint for /generate; without one /generate answers 503.
  std::optional<std::filesystem::path> checkpoint;
  std::uint64_t seed = 1;
  /// Images per session, half from each pool.
  int session_size = 30;
  std::string cors_origin = "*";
};

/// One HTTP exchange, independent of the transport.
struct Response {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
  std::vector<std::pair<std::string, std::string>> headers;
};

struct GenerateRequest {
  std::string prompt;
  /// PNG bytes.
  std::string mask_png;
  int steps = 0;
  int n = 1;
  std::optional<std::uint64_t> seed;
};

/// Parsed rating log.
struct LogContents {
  struct Session {
    std::string session_id;
    std::string player_id;
    std::string created_at;
    /// (image_id, group) in presentation order.
    std::vector<std::pair<std::string, std::string>> images;
  };
  std::vector<Session> sessions;
  std::vector<metrics::RatingRecord> ratings;
  std::vector<std::string> warnings;
};

/// Reads a rating log. A final line without a newline (interrupted write) is
/// dropped with a warning; any other malformed line raises LoadError.
LogContents read_log(const std::filesystem::path& path);

/// Ratings that count toward statistics: those of sessions with every image
/// rated, in log order, with their groups filled in.
std::vector<metrics::RatingRecord> counted_ratings(const LogContents& log);

/// Evaluation game and generation studio state. Every handler is safe to call
/// from several threads; log writes are serialized.
class Service {
 public:
  explicit Service(ServiceOptions opt);
  ~Service();

  Response create_session(const std::string& body);
  Response get_session(const std::string& session_id) const;
  Response get_image(const std::string& session_id, const std::string& index) const;
  Response post_rating(const std::string& session_id, const std::string& body);
  Response stats() const;
  Response generate(const GenerateRequest& req);
  Response get_job(const std::string& job_id) const;
  Response get_job_image(const std::string& job_id, const std::string& index) const;

  const ServiceOptions& options() const { return opt_; }
  /// Startup notes (missing pools, dropped log lines, checkpoint status).
  const std::vector<std::string>& warnings() const { return warnings_; }
  std::size_t pool_size(const std::string& group) const;

 private:
  struct PoolImage {
    std::string image_id;
    std::string group;
    std::string png;
  };
  struct Session {
    std::string session_id;
    std::string player_id;
    std::vector<std::string> image_ids;
    std::map<std::string, std::string> groups;
    std::map<std::string, int> scores;
  };
  struct Job {
    std::string job_id;
    std::string prompt;
    int steps = 0;
    std::uint64_t seed = 0;
    std::vector<std::string> pngs;
    std::vector<std::string> warnings;
  };

  void load_pool(const std::filesystem::path& dir, const std::string& group);
  void append_log(const nlohmann::json& record);

  ServiceOptions opt_;
  std::vector<std::string> warnings_;
  std::vector<PoolImage> real_, generated_;
  std::map<std::string, const PoolImage*> by_id_;

  mutable std::mutex mu_;
  std::map<std::string, Session> sessions_;
  std::uint64_t session_counter_ = 0;
  std::FILE* log_ = nullptr;

  std::unique_ptr<pipeline::Model> model_;
  std::mutex generate_mu_;
  mutable std::mutex jobs_mu_;
  std::map<std::string, Job> jobs_;
  std::uint64_t job_counter_ = 0;
};

/// HTTP front end over a Service, with CORS headers on every response.
class HttpServer {
 public:
  explicit HttpServer(Service& service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds and serves on a background thread. Port 0 picks a free port;
  /// the bound port is returned.
  int start(const std::string& host, int port);
  /// Binds and serves on the calling thread until stop().
  bool listen(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace floorgen::service

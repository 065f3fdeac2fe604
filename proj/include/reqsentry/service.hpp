#pragma once

// The operational shell: scoring backends, the ingest-score-store pipeline
// with its retry queue, and the JSON/HTTP API the analyst UI talks to.
//
// API (all bodies JSON unless noted; errors are {"error": {"code", "reason"}})
//   GET  /api/logs?threshold=&sort=&dir=     Overview rows, ascending label by default
//   POST /api/logs                           same, body {"predicates": [{"field", "pattern"}],
//                                            "connective": "AND"|"OR", threshold/sort/dir}
//   GET  /api/entry/{id}                     one entry with its field/value pairs
//   POST /api/query {"text"}                 result table; a malformed query is still a
//                                            200 whose table describes the problem
//   GET  /api/stats?threshold=&unit=&from=&to=   bucketed anomaly counts
//   POST /api/ingest {"record"} | {"records"}   score and store; record is a log line
//                                            string or a flat object
//   GET  /api/model                          metadata of the live model
//   POST /api/model                          replace the model: raw model bytes
//                                            (application/octet-stream) or {"path"}

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "reqsentry/chunkwire.hpp"
#include "reqsentry/logstore.hpp"
#include "reqsentry/neuralnet.hpp"
#include "reqsentry/request_codec.hpp"

namespace reqsentry {

struct ModelInfo {
  std::string format = "RQSM v1";
  std::string model_id;  // FNV-1a of the serialized bytes, hex
  std::size_t bytes = 0;
  std::size_t vocab_size = 0;
  std::size_t merges = 0;
  std::size_t embed_dim = 0;
  std::size_t seq_len = 0;
  std::size_t filters_per_width = 0;
};

ModelInfo describe_model(const Model& model);

// Whole-file helpers; IoError on failure.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);
Model load_model_file(const std::filesystem::path& path);
void save_model_file(const std::filesystem::path& path, const Model& model);

// Turns canonical request strings into anomaly probabilities.
class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual std::vector<float> score(std::span<const std::string> canonical) = 0;
  // Throws InvalidInput (BadModel) when the bytes do not deserialize.
  virtual ModelInfo replace_model(const std::string& model_bytes) = 0;
  virtual std::optional<ModelInfo> info() const = 0;
  virtual std::string mode() const = 0;
};

class LocalScorer : public Scorer {
 public:
  explicit LocalScorer(std::shared_ptr<const Model> model);
  std::vector<float> score(std::span<const std::string> canonical) override;
  ModelInfo replace_model(const std::string& model_bytes) override;
  std::optional<ModelInfo> info() const override;
  std::string mode() const override { return "in-process"; }

 private:
  mutable std::mutex mu_;
  std::shared_ptr<const Model> model_;
  ModelInfo info_;
};

// Scores through a chunkwire model server; replace_model ships the bytes as a
// MODEL_CHUNK task. Metadata is known only for models pushed from here.
class RemoteScorer : public Scorer {
 public:
  explicit RemoteScorer(Endpoint endpoint,
                        std::chrono::milliseconds timeout = std::chrono::milliseconds(10'000));
  std::vector<float> score(std::span<const std::string> canonical) override;
  ModelInfo replace_model(const std::string& model_bytes) override;
  std::optional<ModelInfo> info() const override;
  std::string mode() const override { return "remote " + endpoint_.str(); }

 private:
  Endpoint endpoint_;
  std::chrono::milliseconds timeout_;
  mutable std::mutex mu_;
  std::optional<ModelInfo> info_;
};

// Failed scoring leaves the entry unscored and retries it up to `attempts`
// more times, waiting initial_backoff * 2^k before retry k.
struct RetryPolicy {
  std::size_t attempts = 3;
  std::chrono::milliseconds initial_backoff{200};
};

struct ScoreResult {
  std::int64_t entry_id = 0;
  std::optional<float> model_label;  // empty while queued for retry
};

class Pipeline {
 public:
  // Entries already unscored in the store are queued for retry.
  Pipeline(LogStore& store, std::shared_ptr<Scorer> scorer, RetryPolicy retry = {});
  ~Pipeline();
  Pipeline(const Pipeline&) = delete;
  Pipeline& operator=(const Pipeline&) = delete;

  // flatten -> score -> ingest. Records are stored even when scoring fails.
  ScoreResult score(const RequestRecord& record);
  std::vector<ScoreResult> score_batch(std::span<const RequestRecord> records);

  // Blocks until no retry is pending.
  void drain();
  std::size_t pending() const;
  // Entries whose retries ran out.
  std::vector<std::int64_t> abandoned() const;

  LogStore& store() { return store_; }
  Scorer& scorer() { return *scorer_; }

 private:
  using Clock = std::chrono::steady_clock;
  struct Job {
    std::int64_t entry_id;
    std::size_t attempt;  // retries already made
  };

  void enqueue(std::int64_t entry_id, std::size_t attempt);
  void worker();

  LogStore& store_;
  std::shared_ptr<Scorer> scorer_;
  RetryPolicy retry_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable idle_cv_;
  std::multimap<Clock::time_point, Job> queue_;
  std::size_t in_flight_ = 0;
  std::set<std::int64_t> abandoned_;
  bool stopping_ = false;
  std::thread thread_;
};

struct ApiConfig {
  Endpoint listen{"127.0.0.1", 8080};
  std::optional<std::filesystem::path> store_path;  // memory only when empty
  std::optional<Endpoint> model_endpoint;           // remote scoring when set
  std::optional<std::filesystem::path> model_file;  // in-process model, or pushed to the endpoint
  double threshold = kDefaultThreshold;
  std::optional<std::filesystem::path> static_dir;  // UI bundle
  std::chrono::milliseconds model_timeout{10'000};
  RetryPolicy retry;

  // Throws InvalidConfig.
  void validate() const;
};

// Accepts a log line string or a flat JSON object of field values.
RequestRecord record_from_json(const std::string& json_text);

class ApiServer {
 public:
  ApiServer(ApiConfig config, Pipeline& pipeline);
  ~ApiServer();
  ApiServer(const ApiServer&) = delete;
  ApiServer& operator=(const ApiServer&) = delete;

  void start();
  void stop();
  std::uint16_t port() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Everything serve-api needs, built from a config: store, scorer, pipeline and
// API server.
class Service {
 public:
  explicit Service(ApiConfig config);
  ~Service();

  void start();
  void stop();
  std::uint16_t port() const;
  LogStore& store() { return *store_; }
  Pipeline& pipeline() { return *pipeline_; }

 private:
  ApiConfig config_;
  std::unique_ptr<LogStore> store_;
  std::unique_ptr<Pipeline> pipeline_;
  std::unique_ptr<ApiServer> api_;
};

}  // namespace reqsentry

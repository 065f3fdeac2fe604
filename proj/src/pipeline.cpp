#include <cstdio>
#include <fstream>
#include <sstream>

#include "reqsentry/service.hpp"

namespace reqsentry {

namespace {

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ModelInfo describe_bytes(const Model& model, std::string_view bytes) {
  ModelInfo info;
  info.model_id = fnv1a_hex(bytes);
  info.bytes = bytes.size();
  info.vocab_size = model.config.vocab_size;
  info.merges = model.vocab.merges().size();
  info.embed_dim = model.config.embed_dim;
  info.seq_len = model.config.seq_len;
  info.filters_per_width = model.config.filters_per_width;
  return info;
}

Model parse_model(const std::string& bytes) {
  try {
    return deserialize_model(bytes);
  } catch (const Error& e) {
    throw InvalidInput(std::string("bad model: ") + e.what());
  }
}

}  // namespace

ModelInfo describe_model(const Model& model) { return describe_bytes(model, serialize_model(model)); }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw IoError("cannot read " + path.string());
  return std::move(buf).str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError("cannot write " + path.string());
}

Model load_model_file(const std::filesystem::path& path) { return parse_model(read_file(path)); }

void save_model_file(const std::filesystem::path& path, const Model& model) {
  write_file(path, serialize_model(model));
}

LocalScorer::LocalScorer(std::shared_ptr<const Model> model) : model_(std::move(model)) {
  if (model_) info_ = describe_model(*model_);
}

std::vector<float> LocalScorer::score(std::span<const std::string> canonical) {
  std::shared_ptr<const Model> m;
  {
    std::lock_guard lock(mu_);
    m = model_;
  }
  if (!m) throw Error("no model loaded");
  std::vector<float> out;
  out.reserve(canonical.size());
  for (const auto& c : canonical) out.push_back(m->predict(c));
  return out;
}

ModelInfo LocalScorer::replace_model(const std::string& model_bytes) {
  auto next = std::make_shared<const Model>(parse_model(model_bytes));
  const auto info = describe_bytes(*next, model_bytes);
  std::lock_guard lock(mu_);
  model_ = std::move(next);
  info_ = info;
  return info;
}

std::optional<ModelInfo> LocalScorer::info() const {
  std::lock_guard lock(mu_);
  if (!model_) return std::nullopt;
  return info_;
}

RemoteScorer::RemoteScorer(Endpoint endpoint, std::chrono::milliseconds timeout)
    : endpoint_(std::move(endpoint)), timeout_(timeout) {}

std::vector<float> RemoteScorer::score(std::span<const std::string> canonical) {
  return infer_remote(endpoint_, canonical, timeout_);
}

ModelInfo RemoteScorer::replace_model(const std::string& model_bytes) {
  const auto info = describe_bytes(parse_model(model_bytes), model_bytes);
  invoke(endpoint_, FrameKind::ModelChunk, model_bytes, timeout_);
  std::lock_guard lock(mu_);
  info_ = info;
  return info;
}

std::optional<ModelInfo> RemoteScorer::info() const {
  std::lock_guard lock(mu_);
  return info_;
}

Pipeline::Pipeline(LogStore& store, std::shared_ptr<Scorer> scorer, RetryPolicy retry)
    : store_(store), scorer_(std::move(scorer)), retry_(retry) {
  if (!scorer_) throw InvalidConfig("pipeline needs a scorer");
  {
    std::lock_guard lock(mu_);
    for (const auto id : store_.unscored()) queue_.emplace(Clock::now(), Job{id, 0});
  }
  thread_ = std::thread([this] { worker(); });
}

Pipeline::~Pipeline() {
  {
    std::lock_guard lock(mu_);
    stopping_ = true;
  }
  cv_.notify_all();
  thread_.join();
}

ScoreResult Pipeline::score(const RequestRecord& record) {
  return score_batch(std::span<const RequestRecord>(&record, 1)).front();
}

std::vector<ScoreResult> Pipeline::score_batch(std::span<const RequestRecord> records) {
  std::vector<std::string> canonical;
  canonical.reserve(records.size());
  for (const auto& r : records) canonical.push_back(flatten(r));

  std::optional<std::vector<float>> probs;
  if (!records.empty()) {
    try {
      probs = scorer_->score(canonical);
      if (probs->size() != records.size()) throw InternalError("scorer returned a short batch");
    } catch (const std::exception&) {
      probs.reset();
    }
  }

  std::vector<ScoreResult> out;
  out.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    ScoreResult r;
    if (probs) {
      r.model_label = (*probs)[i];
      r.entry_id = store_.ingest(records[i], static_cast<double>((*probs)[i]));
    } else {
      r.entry_id = store_.ingest(records[i], std::nullopt);
      enqueue(r.entry_id, 0);
    }
    out.push_back(r);
  }
  return out;
}

void Pipeline::enqueue(std::int64_t entry_id, std::size_t attempt) {
  const auto delay = retry_.initial_backoff * (std::int64_t{1} << attempt);
  {
    std::lock_guard lock(mu_);
    queue_.emplace(Clock::now() + delay, Job{entry_id, attempt});
  }
  cv_.notify_all();
}

void Pipeline::worker() {
  std::unique_lock lock(mu_);
  while (true) {
    if (stopping_) return;
    if (queue_.empty()) {
      cv_.wait(lock);
      continue;
    }
    const auto due = queue_.begin()->first;
    if (Clock::now() < due) {
      cv_.wait_until(lock, due);
      continue;
    }
    const Job job = queue_.begin()->second;
    queue_.erase(queue_.begin());
    ++in_flight_;
    lock.unlock();

    bool done = false;
    if (retry_.attempts > 0) try {
        const auto e = store_.entry(job.entry_id);
        if (e->model_label) {
          done = true;
        } else {
          const std::string c = flatten(e->record);
          const auto p = scorer_->score(std::span<const std::string>(&c, 1));
          if (p.size() == 1) {
            store_.set_score(job.entry_id, p.front());
            done = true;
          }
        }
      } catch (const NotFound&) {
        done = true;
      } catch (const std::exception&) {
      }

    lock.lock();
    --in_flight_;
    if (!done) {
      if (job.attempt + 1 < retry_.attempts) {
        const auto delay = retry_.initial_backoff * (std::int64_t{1} << (job.attempt + 1));
        queue_.emplace(Clock::now() + delay, Job{job.entry_id, job.attempt + 1});
      } else {
        abandoned_.insert(job.entry_id);
      }
    }
    if (queue_.empty() && in_flight_ == 0) idle_cv_.notify_all();
  }
}

void Pipeline::drain() {
  std::unique_lock lock(mu_);
  idle_cv_.wait(lock, [&] { return (queue_.empty() && in_flight_ == 0) || stopping_; });
}

std::size_t Pipeline::pending() const {
  std::lock_guard lock(mu_);
  return queue_.size() + in_flight_;
}

std::vector<std::int64_t> Pipeline::abandoned() const {
  std::lock_guard lock(mu_);
  return {abandoned_.begin(), abandoned_.end()};
}

}  // namespace reqsentry

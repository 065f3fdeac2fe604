#pragma once

// Framed task messages over TCP, payload chunking and reassembly, and the
// long-running model process that answers them.
//
// Wire layout, big-endian:
//   total_length u32 | kind u8 | task_id u64 | piece_index u32 | piece_count u32 | payload
// total_length counts every byte of the frame including itself.

#include <chrono>
#include <cstdint>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "reqsentry/errors.hpp"
#include "reqsentry/evalkit.hpp"
#include "reqsentry/neuralnet.hpp"

namespace reqsentry {

inline constexpr std::size_t kPieceCap = 1'000'000;
inline constexpr std::size_t kFrameHeaderBytes = 4 + 1 + 8 + 4 + 4;
inline constexpr std::chrono::milliseconds kDefaultDeadline{30'000};

enum class FrameKind : std::uint8_t {
  InferData = 1,
  TrainData = 2,
  ModelChunk = 3,
  Result = 4,
  Error = 5,
};

std::string_view kind_name(FrameKind kind);

struct Frame {
  FrameKind kind = FrameKind::InferData;
  std::uint64_t task_id = 0;
  std::uint32_t piece_index = 0;
  std::uint32_t piece_count = 1;
  std::string payload;

  friend bool operator==(const Frame&, const Frame&) = default;
};

// The byte stream no longer lines up with frame boundaries.
class FramingError : public Error {
 public:
  using Error::Error;
};

// A well-framed message that breaks the protocol rules.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

class TimeoutError : public Error {
 public:
  using Error::Error;
};

class TaskExpired : public Error {
 public:
  using Error::Error;
};

enum class ErrorCode : std::uint16_t {
  MalformedPayload = 1,
  BadModel = 2,
  NoModel = 3,
  Protocol = 4,
  Expired = 5,
  Unsupported = 6,
  Internal = 7,
};

class RemoteError : public Error {
 public:
  RemoteError(ErrorCode code, const std::string& reason)
      : Error("remote error " + std::to_string(static_cast<int>(code)) + ": " + reason),
        code_(code),
        reason_(reason) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& reason() const noexcept { return reason_; }

 private:
  ErrorCode code_;
  std::string reason_;
};

class IncompleteModel : public Error {
 public:
  IncompleteModel(const std::string& what, std::uint32_t missing)
      : Error(what), missing_(missing) {}
  std::uint32_t missing_index() const noexcept { return missing_; }

 private:
  std::uint32_t missing_;
};

std::string encode_frame(const Frame& frame);

// Exactly one frame; extra or missing bytes are a FramingError.
Frame decode_frame(std::string_view bytes);

// Incremental decoder for a byte stream.
class FrameReader {
 public:
  void feed(std::string_view bytes);
  // A complete frame if one is buffered. A ProtocolError about a frame's
  // contents leaves the stream aligned; a bad length field does not, and
  // aligned() turns false.
  std::optional<Frame> next();
  std::size_t buffered() const { return buf_.size() - pos_; }
  bool aligned() const { return !broken_; }

 private:
  std::string buf_;
  std::size_t pos_ = 0;
  bool broken_ = false;
};

// max(1, ceil(|payload| / cap)) frames; all but the last carry exactly cap bytes.
std::vector<Frame> chunk(std::uint64_t task_id, FrameKind kind, std::string_view payload,
                         std::size_t cap = kPieceCap);

// Pools pieces by (task_id, kind), across any number of connections.
class ReassemblyBuffer {
 public:
  using Clock = std::chrono::steady_clock;

  explicit ReassemblyBuffer(std::chrono::milliseconds deadline = kDefaultDeadline);

  // The whole payload once every piece is present; the entry is then cleared.
  // Duplicate identical pieces are ignored. A task whose deadline passed is
  // dropped and reported as TaskExpired.
  std::optional<std::string> add(const Frame& frame, Clock::time_point now = Clock::now());

  // Drops expired entries and returns their task ids.
  std::vector<std::uint64_t> expire(Clock::time_point now = Clock::now());

  std::size_t pending() const;

 private:
  struct Entry {
    std::uint32_t count = 0;
    std::map<std::uint32_t, std::string> pieces;
    Clock::time_point deadline;
  };

  std::chrono::milliseconds deadline_;
  mutable std::mutex mu_;
  std::map<std::pair<std::uint64_t, FrameKind>, Entry> entries_;
};

// Payload encodings. Strings are u32-length-prefixed; counts are u32.
std::string encode_inference(std::span<const std::string> requests);
std::vector<std::string> decode_inference(std::string_view payload);
std::string encode_results(std::span<const float> probabilities);
std::vector<float> decode_results(std::string_view payload);
// count u32, then label u8 and a length-prefixed text per example.
std::string encode_training(std::span<const Example> examples);
std::vector<Example> decode_training(std::string_view payload);
std::string encode_error(ErrorCode code, std::string_view reason);
std::pair<ErrorCode, std::string> decode_error(std::string_view payload);

struct BatchPolicy {
  enum class Mode { Immediate, Batch };
  Mode mode = Mode::Immediate;
  std::size_t size = 1;
  std::chrono::milliseconds max_wait{0};

  static BatchPolicy immediate() { return {}; }
  static BatchPolicy batch(std::size_t n, std::chrono::milliseconds max_wait) {
    return {Mode::Batch, n, max_wait};
  }
  void validate() const;
};

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;

  // "host:port" or ":port".
  static Endpoint parse(std::string_view text);
  std::string str() const;
};

struct Reply {
  FrameKind kind = FrameKind::Result;
  std::string payload;
};

// Receives each completed request payload. Throwing RemoteError turns into an
// ERROR frame with that code; any other exception into an Internal error.
using RequestHandler = std::function<Reply(FrameKind kind, std::string payload)>;

struct ServerConfig {
  Endpoint listen;
  std::chrono::milliseconds deadline = kDefaultDeadline;
  std::size_t cap = kPieceCap;
};

// Accepts TCP connections and reads each one sequentially. Pieces of a task
// may arrive over several connections; the reply goes back on the connection
// that delivered the final piece.
class WireServer {
 public:
  WireServer(ServerConfig config, RequestHandler handler);
  ~WireServer();
  WireServer(const WireServer&) = delete;
  WireServer& operator=(const WireServer&) = delete;

  void start();
  void stop();
  // The bound port; useful when listening on port 0.
  std::uint16_t port() const;
  Endpoint endpoint() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Hosts the classifier: inference with an optional batcher, accumulation of
// training examples, and hot model replacement from MODEL_CHUNK payloads.
class ModelServer {
 public:
  ModelServer(ServerConfig config, BatchPolicy policy, std::shared_ptr<const Model> initial);
  ~ModelServer();

  void start();
  void stop();
  std::uint16_t port() const;
  Endpoint endpoint() const;

  std::shared_ptr<const Model> model() const;
  void swap_model(std::shared_ptr<const Model> next);
  std::vector<Example> training_buffer() const;

  // The dispatch used for each completed task; exposed for in-process use.
  Reply handle(FrameKind kind, std::string payload);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Sends payload as a task and waits for its RESULT. Each call uses its own
// connection and task id, so calls from many threads proceed independently.
std::string invoke(const Endpoint& endpoint, FrameKind kind, std::string_view payload,
                   std::chrono::milliseconds timeout, std::size_t cap = kPieceCap);

std::future<std::string> invoke_async(Endpoint endpoint, FrameKind kind, std::string payload,
                                      std::chrono::milliseconds timeout,
                                      std::size_t cap = kPieceCap);

std::vector<float> infer_remote(const Endpoint& endpoint, std::span<const std::string> requests,
                                std::chrono::milliseconds timeout);

std::uint64_t next_task_id();

// Model bytes stored as rows of at most cap bytes.
class ModelChunkTable {
 public:
  struct Row {
    std::uint64_t row_id = 0;
    std::string model_id;
    std::uint32_t chunk_index = 0;
    std::uint32_t chunk_count = 0;
    std::string bytes;
  };

  std::vector<std::uint64_t> store(std::string_view model_id, std::string_view model_bytes,
                                   std::size_t cap = kPieceCap);
  // Concatenation in chunk order; IncompleteModel names the first missing index.
  std::string load(std::span<const std::uint64_t> row_ids) const;
  std::string load(std::string_view model_id) const;
  bool erase(std::uint64_t row_id);
  std::vector<Row> rows() const;

 private:
  std::string assemble(std::vector<const Row*> rows, std::string_view what) const;

  mutable std::mutex mu_;
  std::uint64_t next_id_ = 1;
  std::map<std::uint64_t, Row> rows_;
};

}  // namespace reqsentry

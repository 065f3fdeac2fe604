#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <random>

#include "reqsentry/chunkwire.hpp"

namespace reqsentry {
namespace {

void put_be(std::string& out, std::uint64_t v, int bytes) {
  for (int i = bytes - 1; i >= 0; --i) out += static_cast<char>((v >> (8 * i)) & 0xFF);
}

std::uint64_t get_be(std::string_view s, std::size_t at, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v = (v << 8) | static_cast<unsigned char>(s[at + i]);
  return v;
}

bool known_kind(std::uint8_t k) { return k >= 1 && k <= 5; }

// Validates one frame's header and returns its declared total length.
std::size_t frame_length(std::string_view header) {
  const auto total = static_cast<std::size_t>(get_be(header, 0, 4));
  if (total < kFrameHeaderBytes) {
    throw FramingError("frame length " + std::to_string(total) + " is shorter than the header");
  }
  if (total - kFrameHeaderBytes > kPieceCap) {
    throw ProtocolError("frame payload of " + std::to_string(total - kFrameHeaderBytes) +
                        " bytes exceeds the piece cap");
  }
  return total;
}

Frame parse_frame(std::string_view s) {
  const auto kind = static_cast<std::uint8_t>(s[4]);
  if (!known_kind(kind)) throw ProtocolError("unknown frame kind " + std::to_string(kind));
  Frame f;
  f.kind = static_cast<FrameKind>(kind);
  f.task_id = get_be(s, 5, 8);
  f.piece_index = static_cast<std::uint32_t>(get_be(s, 13, 4));
  f.piece_count = static_cast<std::uint32_t>(get_be(s, 17, 4));
  if (f.piece_count == 0) throw ProtocolError("piece count is zero");
  if (f.piece_index >= f.piece_count) {
    throw ProtocolError("piece index " + std::to_string(f.piece_index) + " is not below count " +
                        std::to_string(f.piece_count));
  }
  f.payload.assign(s.substr(kFrameHeaderBytes));
  return f;
}

class PayloadReader {
 public:
  explicit PayloadReader(std::string_view s) : s_(s) {}

  std::uint64_t uint(int bytes, const char* what) {
    if (s_.size() - pos_ < static_cast<std::size_t>(bytes)) {
      throw InvalidInput(std::string("payload ends inside ") + what);
    }
    const auto v = get_be(s_, pos_, bytes);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string str(const char* what) {
    const auto n = static_cast<std::size_t>(uint(4, what));
    if (s_.size() - pos_ < n) throw InvalidInput(std::string("payload ends inside ") + what);
    std::string v(s_.substr(pos_, n));
    pos_ += n;
    return v;
  }
  std::size_t remaining() const { return s_.size() - pos_; }
  void finish() const {
    if (remaining() != 0) {
      throw InvalidInput(std::to_string(remaining()) + " unexpected bytes after payload items");
    }
  }

 private:
  std::string_view s_;
  std::size_t pos_ = 0;
};

// Guards reserve() against absurd declared counts.
std::size_t bounded_count(std::uint64_t declared, std::size_t remaining, std::size_t min_item) {
  if (declared > remaining / min_item) {
    throw InvalidInput("declared count " + std::to_string(declared) + " exceeds payload size");
  }
  return static_cast<std::size_t>(declared);
}

}  // namespace

std::string_view kind_name(FrameKind kind) {
  switch (kind) {
    case FrameKind::InferData: return "INFER_DATA";
    case FrameKind::TrainData: return "TRAIN_DATA";
    case FrameKind::ModelChunk: return "MODEL_CHUNK";
    case FrameKind::Result: return "RESULT";
    case FrameKind::Error: return "ERROR";
  }
  return "UNKNOWN";
}

std::string encode_frame(const Frame& f) {
  if (f.payload.size() > kPieceCap) throw ProtocolError("payload exceeds the piece cap");
  if (f.piece_count == 0 || f.piece_index >= f.piece_count) {
    throw ProtocolError("piece index must be below a non-zero piece count");
  }
  if (!known_kind(static_cast<std::uint8_t>(f.kind))) throw ProtocolError("unknown frame kind");
  std::string out;
  out.reserve(kFrameHeaderBytes + f.payload.size());
  put_be(out, kFrameHeaderBytes + f.payload.size(), 4);
  out += static_cast<char>(f.kind);
  put_be(out, f.task_id, 8);
  put_be(out, f.piece_index, 4);
  put_be(out, f.piece_count, 4);
  out += f.payload;
  return out;
}

Frame decode_frame(std::string_view bytes) {
  if (bytes.size() < kFrameHeaderBytes) {
    throw FramingError("stream ends after " + std::to_string(bytes.size()) + " header bytes");
  }
  const auto total = frame_length(bytes);
  if (total != bytes.size()) {
    throw FramingError("length field says " + std::to_string(total) + " bytes, stream has " +
                       std::to_string(bytes.size()));
  }
  return parse_frame(bytes);
}

void FrameReader::feed(std::string_view bytes) {
  if (pos_ > 0 && pos_ >= buf_.size() / 2) {
    buf_.erase(0, pos_);
    pos_ = 0;
  }
  buf_.append(bytes);
}

std::optional<Frame> FrameReader::next() {
  if (broken_) throw FramingError("stream lost frame alignment");
  const std::string_view avail = std::string_view(buf_).substr(pos_);
  if (avail.size() < kFrameHeaderBytes) return std::nullopt;
  std::size_t total = 0;
  try {
    total = frame_length(avail);
  } catch (...) {
    broken_ = true;
    throw;
  }
  if (avail.size() < total) return std::nullopt;
  pos_ += total;
  return parse_frame(avail.substr(0, total));
}

std::vector<Frame> chunk(std::uint64_t task_id, FrameKind kind, std::string_view payload,
                         std::size_t cap) {
  if (cap == 0) throw InvalidInput("cap must be at least 1");
  if (cap > kPieceCap) throw InvalidInput("cap exceeds the piece cap");
  const std::size_t n = std::max<std::size_t>(1, (payload.size() + cap - 1) / cap);
  if (n > UINT32_MAX) throw InvalidInput("payload needs more than 2^32-1 pieces");
  std::vector<Frame> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto begin = std::min(payload.size(), i * cap);
    out.push_back({kind, task_id, static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(n),
                   std::string(payload.substr(begin, cap))});
  }
  return out;
}

ReassemblyBuffer::ReassemblyBuffer(std::chrono::milliseconds deadline) : deadline_(deadline) {}

std::optional<std::string> ReassemblyBuffer::add(const Frame& f, Clock::time_point now) {
  if (f.piece_count == 0 || f.piece_index >= f.piece_count) {
    throw ProtocolError("piece index must be below a non-zero piece count");
  }
  if (f.piece_count == 1) return f.payload;

  std::lock_guard lock(mu_);
  const auto key = std::make_pair(f.task_id, f.kind);
  auto it = entries_.find(key);
  if (it != entries_.end() && now > it->second.deadline) {
    entries_.erase(it);
    throw TaskExpired("task " + std::to_string(f.task_id) + " expired before all pieces arrived");
  }
  if (it == entries_.end()) {
    Entry e;
    e.count = f.piece_count;
    e.deadline = now + deadline_;
    it = entries_.emplace(key, std::move(e)).first;
  }
  Entry& e = it->second;
  if (e.count != f.piece_count) {
    entries_.erase(it);
    throw ProtocolError("task " + std::to_string(f.task_id) + " pieces disagree on piece count");
  }
  if (auto slot = e.pieces.find(f.piece_index); slot != e.pieces.end()) {
    if (slot->second != f.payload) {
      entries_.erase(it);
      throw ProtocolError("task " + std::to_string(f.task_id) + " piece " +
                          std::to_string(f.piece_index) + " arrived twice with different bytes");
    }
    return std::nullopt;
  }
  e.pieces.emplace(f.piece_index, f.payload);
  if (e.pieces.size() < e.count) return std::nullopt;

  std::size_t total = 0;
  for (const auto& [i, p] : e.pieces) total += p.size();
  std::string out;
  out.reserve(total);
  for (const auto& [i, p] : e.pieces) out += p;
  entries_.erase(it);
  return out;
}

std::vector<std::uint64_t> ReassemblyBuffer::expire(Clock::time_point now) {
  std::lock_guard lock(mu_);
  std::vector<std::uint64_t> dropped;
  for (auto it = entries_.begin(); it != entries_.end();) {
    if (now > it->second.deadline) {
      dropped.push_back(it->first.first);
      it = entries_.erase(it);
    } else {
      ++it;
    }
  }
  return dropped;
}

std::size_t ReassemblyBuffer::pending() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

std::string encode_inference(std::span<const std::string> requests) {
  std::string out;
  put_be(out, requests.size(), 4);
  for (const auto& r : requests) {
    put_be(out, r.size(), 4);
    out += r;
  }
  return out;
}

std::vector<std::string> decode_inference(std::string_view payload) {
  PayloadReader r(payload);
  const auto n = bounded_count(r.uint(4, "request count"), r.remaining(), 4);
  std::vector<std::string> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(r.str("request string"));
  r.finish();
  return out;
}

std::string encode_results(std::span<const float> probabilities) {
  std::string out;
  put_be(out, probabilities.size(), 4);
  for (const float p : probabilities) put_be(out, std::bit_cast<std::uint32_t>(p), 4);
  return out;
}

std::vector<float> decode_results(std::string_view payload) {
  PayloadReader r(payload);
  const auto n = bounded_count(r.uint(4, "result count"), r.remaining(), 4);
  std::vector<float> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float p = std::bit_cast<float>(static_cast<std::uint32_t>(r.uint(4, "probability")));
    if (!(p >= 0.0f && p <= 1.0f)) throw InvalidInput("probability outside [0, 1]");
    out.push_back(p);
  }
  r.finish();
  return out;
}

std::string encode_training(std::span<const Example> examples) {
  std::string out;
  put_be(out, examples.size(), 4);
  for (const auto& e : examples) {
    if (e.label != 0 && e.label != 1) throw InvalidInput("training label must be 0 or 1");
    out += static_cast<char>(e.label);
    put_be(out, e.text.size(), 4);
    out += e.text;
  }
  return out;
}

std::vector<Example> decode_training(std::string_view payload) {
  PayloadReader r(payload);
  const auto n = bounded_count(r.uint(4, "example count"), r.remaining(), 5);
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = static_cast<int>(r.uint(1, "label"));
    if (label > 1) throw InvalidInput("training label must be 0 or 1");
    out.push_back({r.str("example text"), label});
  }
  r.finish();
  return out;
}

std::string encode_error(ErrorCode code, std::string_view reason) {
  std::string out;
  put_be(out, static_cast<std::uint16_t>(code), 2);
  out += reason;
  return out;
}

std::pair<ErrorCode, std::string> decode_error(std::string_view payload) {
  if (payload.size() < 2) throw ProtocolError("error payload shorter than its code");
  return {static_cast<ErrorCode>(get_be(payload, 0, 2)), std::string(payload.substr(2))};
}

void BatchPolicy::validate() const {
  if (size < 1) throw InvalidConfig("batch size must be at least 1");
  if (max_wait.count() < 0) throw InvalidConfig("batch wait must not be negative");
}

Endpoint Endpoint::parse(std::string_view text) {
  const auto colon = text.rfind(':');
  if (colon == std::string_view::npos) throw InvalidConfig("endpoint needs host:port");
  Endpoint e;
  if (colon > 0) e.host = std::string(text.substr(0, colon));
  const auto port = text.substr(colon + 1);
  unsigned long v = 0;
  try {
    std::size_t used = 0;
    v = std::stoul(std::string(port), &used);
    if (used != port.size()) throw std::invalid_argument("junk");
  } catch (const std::exception&) {
    throw InvalidConfig("bad port in endpoint '" + std::string(text) + "'");
  }
  if (v > 65535) throw InvalidConfig("port out of range in endpoint '" + std::string(text) + "'");
  e.port = static_cast<std::uint16_t>(v);
  return e;
}

std::string Endpoint::str() const { return host + ":" + std::to_string(port); }

std::uint64_t next_task_id() {
  static const std::uint64_t high = [] {
    std::random_device rd;
    return static_cast<std::uint64_t>(rd()) << 32;
  }();
  static std::atomic<std::uint32_t> counter{0};
  return high | counter.fetch_add(1, std::memory_order_relaxed);
}

std::vector<std::uint64_t> ModelChunkTable::store(std::string_view model_id,
                                                  std::string_view model_bytes, std::size_t cap) {
  const auto pieces = chunk(0, FrameKind::ModelChunk, model_bytes, cap);
  std::lock_guard lock(mu_);
  std::vector<std::uint64_t> ids;
  for (const auto& p : pieces) {
    const auto id = next_id_++;
    rows_[id] = Row{id, std::string(model_id), p.piece_index, p.piece_count, p.payload};
    ids.push_back(id);
  }
  return ids;
}

std::string ModelChunkTable::assemble(std::vector<const Row*> rows, std::string_view what) const {
  if (rows.empty()) throw IncompleteModel(std::string(what) + ": no chunks found", 0);
  const auto count = rows.front()->chunk_count;
  std::vector<const Row*> slots(count, nullptr);
  for (const auto* r : rows) {
    if (r->chunk_count != count || r->model_id != rows.front()->model_id) {
      throw IncompleteModel(std::string(what) + ": chunks belong to different models", 0);
    }
    slots[r->chunk_index] = r;
  }
  std::string out;
  for (std::uint32_t i = 0; i < count; ++i) {
    if (slots[i] == nullptr) {
      throw IncompleteModel(std::string(what) + ": chunk index " + std::to_string(i) + " of " +
                                std::to_string(count) + " is missing",
                            i);
    }
    out += slots[i]->bytes;
  }
  return out;
}

std::string ModelChunkTable::load(std::span<const std::uint64_t> row_ids) const {
  std::lock_guard lock(mu_);
  std::vector<const Row*> found;
  for (const auto id : row_ids) {
    if (auto it = rows_.find(id); it != rows_.end()) found.push_back(&it->second);
  }
  return assemble(std::move(found), "model");
}

std::string ModelChunkTable::load(std::string_view model_id) const {
  std::lock_guard lock(mu_);
  std::vector<const Row*> found;
  for (const auto& [id, row] : rows_) {
    if (row.model_id == model_id) found.push_back(&row);
  }
  return assemble(std::move(found), "model '" + std::string(model_id) + "'");
}

bool ModelChunkTable::erase(std::uint64_t row_id) {
  std::lock_guard lock(mu_);
  return rows_.erase(row_id) > 0;
}

std::vector<ModelChunkTable::Row> ModelChunkTable::rows() const {
  std::lock_guard lock(mu_);
  std::vector<Row> out;
  for (const auto& [id, row] : rows_) out.push_back(row);
  return out;
}

}  // namespace reqsentry

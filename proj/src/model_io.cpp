#include <bit>
#include <cstring>

#include "reqsentry/neuralnet.hpp"

namespace reqsentry {
namespace {

constexpr char kMagic[4] = {'R', 'Q', 'S', 'M'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kConfigBytes = 10 * 4;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_ += static_cast<char>((v >> (8 * i)) & 0xFF);
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view s) : s_(s) {}

  void need(std::size_t n, const char* section) const {
    if (s_.size() - pos_ < n) {
      throw ParseError(std::string("model file truncated in ") + section + " section", pos_);
    }
  }
  std::uint32_t u32(const char* section) {
    need(4, section);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }
  float f32(const char* section) { return std::bit_cast<float>(u32(section)); }
  std::string_view take(std::size_t n, const char* section) {
    need(n, section);
    auto v = s_.substr(pos_, n);
    pos_ += n;
    return v;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return s_.size() - pos_; }

 private:
  std::string_view s_;
  std::size_t pos_ = 0;
};

}  // namespace

std::size_t serialized_model_size(std::size_t merges, const ModelConfig& config) {
  const std::size_t d = config.embed_dim;
  const std::size_t F = config.filters_per_width;
  std::size_t floats = config.vocab_size * d;
  for (const auto k : kKernelWidths) floats += F * k * d + F;
  floats += kClasses * kNumWidths * F + kClasses;
  return sizeof(kMagic) + 4 + 4 + 8 * merges + kConfigBytes + 4 * floats;
}

std::string serialize_model(const Model& model) {
  const auto& p = model.params;
  if (p.vocab_size != model.vocab.size() || p.vocab_size != model.config.vocab_size ||
      p.embed_dim != model.config.embed_dim || p.filters != model.config.filters_per_width) {
    throw InvalidInput("model parts disagree on shape");
  }
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.u32(kVersion);

  w.u32(static_cast<std::uint32_t>(model.vocab.merges().size()));
  for (const auto& m : model.vocab.merges()) {
    w.u32(m.left);
    w.u32(m.right);
  }

  w.u32(static_cast<std::uint32_t>(model.config.vocab_size));
  w.u32(static_cast<std::uint32_t>(model.config.embed_dim));
  w.u32(static_cast<std::uint32_t>(model.config.seq_len));
  w.u32(static_cast<std::uint32_t>(model.config.filters_per_width));
  w.u32(static_cast<std::uint32_t>(kNumWidths));
  for (const auto k : kKernelWidths) w.u32(static_cast<std::uint32_t>(k));
  w.f32(static_cast<float>(model.config.dropout_p));
  w.u32(static_cast<std::uint32_t>(kClasses));

  for (const auto t : p.tensors()) {
    for (const float x : t) w.f32(x);
  }
  return w.take();
}

Model deserialize_model(std::string_view bytes) {
  Reader r(bytes);
  const auto magic = r.take(sizeof(kMagic), "header");
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0) {
    throw ParseError("bad magic in header section", 0);
  }
  if (const auto version = r.u32("header"); version != kVersion) {
    throw ParseError("unsupported version " + std::to_string(version) + " in header section", 4);
  }

  const std::size_t merge_count = r.u32("vocabulary");
  r.need(8 * merge_count, "vocabulary");
  std::vector<MergeRule> merges;
  merges.reserve(merge_count);
  for (std::size_t i = 0; i < merge_count; ++i) {
    const auto left = r.u32("vocabulary");
    const auto right = r.u32("vocabulary");
    merges.push_back({left, right, static_cast<TokenId>(kFirstMergedToken + i),
                      static_cast<std::uint32_t>(i)});
  }
  Model model;
  try {
    model.vocab = Vocabulary(std::move(merges));
  } catch (const InvalidInput& e) {
    throw ParseError(std::string("invalid vocabulary section: ") + e.what(), r.pos());
  }

  const std::size_t config_at = r.pos();
  ModelConfig& cfg = model.config;
  cfg.vocab_size = r.u32("config");
  cfg.embed_dim = r.u32("config");
  cfg.seq_len = r.u32("config");
  cfg.filters_per_width = r.u32("config");
  const auto widths = r.u32("config");
  std::array<std::uint32_t, kNumWidths> ks{};
  if (widths == kNumWidths) {
    for (auto& k : ks) k = r.u32("config");
  }
  cfg.dropout_p = r.f32("config");
  const auto classes = r.u32("config");
  if (widths != kNumWidths || ks[0] != kKernelWidths[0] || ks[1] != kKernelWidths[1] ||
      ks[2] != kKernelWidths[2] || classes != kClasses) {
    throw ParseError("unsupported architecture in config section", config_at);
  }
  if (cfg.vocab_size != model.vocab.size()) {
    throw ParseError("config section vocab size disagrees with vocabulary section", config_at);
  }
  try {
    cfg.validate();
  } catch (const InvalidConfig& e) {
    throw ParseError(std::string("invalid config section: ") + e.what(), config_at);
  }

  if (cfg.embed_dim > bytes.size() || cfg.filters_per_width > bytes.size()) {
    throw ParseError("model file truncated in parameters section", bytes.size());
  }
  const std::size_t expected = serialized_model_size(merge_count, cfg);
  if (bytes.size() < expected) {
    throw ParseError("model file truncated in parameters section", bytes.size());
  }
  if (bytes.size() > expected) {
    throw ParseError("trailing bytes after parameters section", expected);
  }
  model.params = Parameters<float>::zeros(cfg.vocab_size, cfg.embed_dim, cfg.filters_per_width);
  for (auto t : model.params.tensors()) {
    for (float& x : t) x = r.f32("parameters");
  }
  if (!model.params.all_finite()) {
    throw ParseError("non-finite value in parameters section", config_at + kConfigBytes);
  }
  return model;
}

}  // namespace reqsentry

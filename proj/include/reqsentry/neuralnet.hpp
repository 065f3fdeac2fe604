#pragma once

// 1D convolutional text classifier over BBPE tokens.
//
//   embed (V x d) -> conv widths 2/3/4, F filters each -> ReLU
//     -> global max-pool per filter -> concat (3F) -> dropout
//     -> dense (2 x 3F) -> softmax over {benign, anomalous}
//
// Forward and backward are written by hand. Everything is templated on the
// scalar so that gradient checks can run in double while serving and training
// use float.

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "reqsentry/errors.hpp"
#include "reqsentry/tokenizer.hpp"

namespace reqsentry {

inline constexpr std::array<std::size_t, 3> kKernelWidths{2, 3, 4};
inline constexpr std::size_t kNumWidths = kKernelWidths.size();
inline constexpr std::size_t kClasses = 2;
inline constexpr std::size_t kDefaultFilters = 100;
inline constexpr double kDefaultDropout = 0.2;
inline constexpr double kProbabilityFloor = 1e-12;

class InternalError : public Error {
 public:
  using Error::Error;
};

struct ModelConfig {
  std::size_t vocab_size = kDefaultVocabSize;
  std::size_t embed_dim = 64;
  std::size_t seq_len = 512;
  std::size_t filters_per_width = kDefaultFilters;
  double dropout_p = kDefaultDropout;

  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;

  std::size_t pooled_width() const { return kNumWidths * filters_per_width; }
  // Throws InvalidConfig.
  void validate() const;
};

enum class Mode { Train, Eval };

template <typename T>
struct Parameters {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 0;
  std::size_t filters = 0;

  std::vector<T> embedding;                        // V x d, row PAD stays zero
  std::array<std::vector<T>, kNumWidths> conv_w;   // F x k x d per width
  std::array<std::vector<T>, kNumWidths> conv_b;   // F per width
  std::vector<T> dense_w;                          // 2 x 3F
  std::vector<T> dense_b;                          // 2

  static Parameters zeros(std::size_t vocab_size, std::size_t embed_dim, std::size_t filters);
  static Parameters zeros_like(const Parameters& other) {
    return zeros(other.vocab_size, other.embed_dim, other.filters);
  }

  // Fixed order: embedding, (conv_w, conv_b) for widths 2, 3, 4, dense_w, dense_b.
  std::array<std::span<T>, 2 * kNumWidths + 3> tensors();
  std::array<std::span<const T>, 2 * kNumWidths + 3> tensors() const;

  std::size_t pooled_width() const { return kNumWidths * filters; }
  bool same_shape(const Parameters& other) const;
  bool all_finite() const;

  template <typename U>
  Parameters<U> cast() const;

  friend bool operator==(const Parameters&, const Parameters&) = default;
};

template <typename T>
using Gradients = Parameters<T>;

template <typename T>
struct ForwardCache {
  std::vector<TokenId> tokens;
  std::vector<T> embedded;                              // L x d
  std::array<std::vector<std::size_t>, kNumWidths> argmax;  // F per width
  std::array<std::vector<T>, kNumWidths> max_pre;           // pre-ReLU max per filter
  std::vector<T> pooled;                                // 3F, after ReLU
  std::vector<T> mask;                                  // 3F, 0 or 1/(1-p)
  std::vector<T> dropped;                               // 3F
  std::array<T, kClasses> logits{};
  std::array<T, kClasses> probs{};
};

template <typename T>
struct ForwardResult {
  std::array<T, kClasses> probs{};
  ForwardCache<T> cache;
};

// Deterministic per seed; uniform +-sqrt(6/(fan_in+fan_out)) for embedding and
// kernels, zero biases, zero PAD row.
template <typename T>
Parameters<T> init_params(const ModelConfig& config, std::uint64_t seed);

// tokens must already be padded/truncated; train mode with dropout_p > 0
// draws the mask from rng. Throws InvalidToken for ids >= vocab size and
// InvalidInput when the sequence is shorter than the widest kernel.
template <typename T>
ForwardResult<T> forward(const Parameters<T>& params, std::span<const TokenId> tokens, Mode mode,
                         double dropout_p, std::mt19937_64* rng);

template <typename T>
std::array<T, kClasses> softmax(const std::array<T, kClasses>& logits);

// -log(max(probs[label], 1e-12)).
template <typename T>
T loss(const std::array<T, kClasses>& probs, int label);

// Adds d loss / d params into grads (accumulating). PAD row stays zero.
template <typename T>
void backward(const Parameters<T>& params, const ForwardCache<T>& cache, int label,
              Gradients<T>& grads);

template <typename T>
Gradients<T> backward(const Parameters<T>& params, const ForwardCache<T>& cache, int label) {
  auto g = Gradients<T>::zeros_like(params);
  backward(params, cache, label, g);
  return g;
}

// Eval-mode probability of the anomalous class.
template <typename T>
T predict(const Parameters<T>& params, std::span<const TokenId> tokens);

struct LabeledSequence {
  TokenSequence sequence;  // padded to the model input length
  int label = 0;
};

struct TrainHistory {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;
  std::vector<std::string> warnings;
};

struct TrainResult {
  Parameters<float> params;
  TrainHistory history;
};

// Shuffled mini-batch Adam; deterministic given config.seed.
TrainResult train(std::span<const LabeledSequence> dataset, const ModelConfig& config);

// A deployable classifier: tokenizer, shape config and weights.
struct Model {
  Vocabulary vocab;
  ModelConfig config;
  Parameters<float> params;

  TokenSequence prepare(std::string_view canonical) const;
  float predict(std::string_view canonical) const;

  friend bool operator==(const Model& a, const Model& b) {
    return a.vocab == b.vocab && a.config.vocab_size == b.config.vocab_size &&
           a.config.embed_dim == b.config.embed_dim && a.config.seq_len == b.config.seq_len &&
           a.config.filters_per_width == b.config.filters_per_width &&
           static_cast<float>(a.config.dropout_p) == static_cast<float>(b.config.dropout_p) &&
           a.params == b.params;
  }
};

// Binary model file; layout documented in docs/formats.md.
std::string serialize_model(const Model& model);
Model deserialize_model(std::string_view bytes);
std::size_t serialized_model_size(std::size_t merges, const ModelConfig& config);

}  // namespace reqsentry

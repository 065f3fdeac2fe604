#include "reqsentry/neuralnet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace reqsentry {
namespace {

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void fill_uniform(std::vector<T>& v, double limit, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (auto& x : v) x = static_cast<T>(dist(rng));
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size == 0) throw InvalidConfig("vocab_size must be positive");
  if (embed_dim == 0) throw InvalidConfig("embed_dim must be positive");
  if (filters_per_width == 0) throw InvalidConfig("filters_per_width must be positive");
  if (seq_len < kKernelWidths.back()) {
    throw InvalidConfig("seq_len must be at least the widest kernel (4)");
  }
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw InvalidConfig("dropout_p must be in [0, 1)");
  if (!(learning_rate > 0.0)) throw InvalidConfig("learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw InvalidConfig("adam betas must be in [0, 1)");
  }
  if (!(epsilon > 0.0)) throw InvalidConfig("epsilon must be positive");
  if (batch_size == 0) throw InvalidConfig("batch_size must be positive");
}

template <typename T>
Parameters<T> Parameters<T>::zeros(std::size_t vocab_size, std::size_t embed_dim,
                                   std::size_t filters) {
  Parameters p;
  p.vocab_size = vocab_size;
  p.embed_dim = embed_dim;
  p.filters = filters;
  p.embedding.assign(vocab_size * embed_dim, T(0));
  for (std::size_t w = 0; w < kNumWidths; ++w) {
    p.conv_w[w].assign(filters * kKernelWidths[w] * embed_dim, T(0));
    p.conv_b[w].assign(filters, T(0));
  }
  p.dense_w.assign(kClasses * p.pooled_width(), T(0));
  p.dense_b.assign(kClasses, T(0));
  return p;
}

template <typename T>
std::array<std::span<T>, 2 * kNumWidths + 3> Parameters<T>::tensors() {
  return {std::span<T>(embedding), std::span<T>(conv_w[0]), std::span<T>(conv_b[0]),
          std::span<T>(conv_w[1]), std::span<T>(conv_b[1]), std::span<T>(conv_w[2]),
          std::span<T>(conv_b[2]), std::span<T>(dense_w), std::span<T>(dense_b)};
}

template <typename T>
std::array<std::span<const T>, 2 * kNumWidths + 3> Parameters<T>::tensors() const {
  return {std::span<const T>(embedding), std::span<const T>(conv_w[0]),
          std::span<const T>(conv_b[0]),  std::span<const T>(conv_w[1]),
          std::span<const T>(conv_b[1]),  std::span<const T>(conv_w[2]),
          std::span<const T>(conv_b[2]),  std::span<const T>(dense_w),
          std::span<const T>(dense_b)};
}

template <typename T>
bool Parameters<T>::same_shape(const Parameters& other) const {
  auto a = tensors();
  auto b = other.tensors();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size()) return false;
  }
  return vocab_size == other.vocab_size && embed_dim == other.embed_dim &&
         filters == other.filters;
}

template <typename T>
bool Parameters<T>::all_finite() const {
  for (const auto t : tensors()) {
    for (const T x : t) {
      if (!std::isfinite(x)) return false;
    }
  }
  return true;
}

template <typename T>
template <typename U>
Parameters<U> Parameters<T>::cast() const {
  auto out = Parameters<U>::zeros(vocab_size, embed_dim, filters);
  auto src = tensors();
  auto dst = out.tensors();
  for (std::size_t i = 0; i < src.size(); ++i) {
    std::transform(src[i].begin(), src[i].end(), dst[i].begin(),
                   [](T x) { return static_cast<U>(x); });
  }
  return out;
}

template <typename T>
Parameters<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t V = config.vocab_size;
  const std::size_t d = config.embed_dim;
  const std::size_t F = config.filters_per_width;
  auto p = Parameters<T>::zeros(V, d, F);
  std::mt19937_64 rng(seed);

  fill_uniform(p.embedding, std::sqrt(6.0 / static_cast<double>(V + d)), rng);
  if (V > kPadToken) {
    std::fill_n(p.embedding.begin() + static_cast<std::ptrdiff_t>(kPadToken * d), d, T(0));
  }
  for (std::size_t w = 0; w < kNumWidths; ++w) {
    const double k = static_cast<double>(kKernelWidths[w]);
    const double fan_in = k * static_cast<double>(d);
    const double fan_out = k * static_cast<double>(F);
    fill_uniform(p.conv_w[w], std::sqrt(6.0 / (fan_in + fan_out)), rng);
  }
  fill_uniform(p.dense_w, std::sqrt(6.0 / static_cast<double>(p.pooled_width() + kClasses)), rng);
  return p;
}

template <typename T>
std::array<T, kClasses> softmax(const std::array<T, kClasses>& logits) {
  const T m = std::max(logits[0], logits[1]);
  const T e0 = std::exp(logits[0] - m);
  const T e1 = std::exp(logits[1] - m);
  const T z = e0 + e1;
  return {e0 / z, e1 / z};
}

template <typename T>
T loss(const std::array<T, kClasses>& probs, int label) {
  const T p = probs[static_cast<std::size_t>(label)];
  return -std::log(std::max(p, static_cast<T>(kProbabilityFloor)));
}

template <typename T>
ForwardResult<T> forward(const Parameters<T>& params, std::span<const TokenId> tokens, Mode mode,
                         double dropout_p, std::mt19937_64* rng) {
  const std::size_t L = tokens.size();
  const std::size_t d = params.embed_dim;
  const std::size_t F = params.filters;
  if (L < kKernelWidths.back()) {
    throw InvalidInput("sequence length " + std::to_string(L) + " shorter than widest kernel");
  }

  ForwardResult<T> out;
  auto& c = out.cache;
  c.tokens.assign(tokens.begin(), tokens.end());
  c.embedded.resize(L * d);
  std::size_t real_end = 0;  // one past the last non-PAD token
  for (std::size_t t = 0; t < L; ++t) {
    const TokenId id = tokens[t];
    if (id >= params.vocab_size) {
      throw InvalidToken("token id " + std::to_string(id) + " >= vocabulary size " +
                         std::to_string(params.vocab_size));
    }
    if (id != kPadToken) real_end = t + 1;
    std::copy_n(params.embedding.begin() + static_cast<std::ptrdiff_t>(id * d), d,
                c.embedded.begin() + static_cast<std::ptrdiff_t>(t * d));
  }

  bool pad_is_zero = false;
  if (params.vocab_size > kPadToken) {
    const auto row = params.embedding.begin() + static_cast<std::ptrdiff_t>(kPadToken * d);
    pad_is_zero = std::all_of(row, row + static_cast<std::ptrdiff_t>(d), [](T x) { return x == T(0); });
  }

  c.pooled.assign(params.pooled_width(), T(0));
  for (std::size_t w = 0; w < kNumWidths; ++w) {
    const std::size_t k = kKernelWidths[w];
    const std::size_t positions = L - k + 1;
    const std::size_t span = k * d;
    // Windows starting at or after real_end read only the zero PAD row, so
    // their pre-activation is exactly the bias.
    const std::size_t computed = pad_is_zero ? std::min(positions, real_end) : positions;
    c.argmax[w].assign(F, 0);
    c.max_pre[w].assign(F, T(0));
    for (std::size_t f = 0; f < F; ++f) {
      const T* kernel = params.conv_w[w].data() + f * span;
      const T bias = params.conv_b[w][f];
      T best = T(0);
      std::size_t best_pos = 0;
      bool have = false;
      for (std::size_t t = 0; t < computed; ++t) {
        const T z = bias + dot(kernel, c.embedded.data() + t * d, span);
        if (!have || z > best) {
          best = z;
          best_pos = t;
          have = true;
        }
      }
      if (computed < positions && (!have || bias > best)) {
        best = bias;
        best_pos = computed;
      }
      c.argmax[w][f] = best_pos;
      c.max_pre[w][f] = best;
      c.pooled[w * F + f] = std::max(best, T(0));
    }
  }

  const std::size_t H = params.pooled_width();
  c.mask.assign(H, T(1));
  if (mode == Mode::Train && dropout_p > 0.0) {
    if (rng == nullptr) throw InvalidInput("train-mode dropout needs a random generator");
    std::bernoulli_distribution keep(1.0 - dropout_p);
    const T scale = static_cast<T>(1.0 / (1.0 - dropout_p));
    for (auto& m : c.mask) m = keep(*rng) ? scale : T(0);
  }
  c.dropped.resize(H);
  for (std::size_t i = 0; i < H; ++i) c.dropped[i] = c.pooled[i] * c.mask[i];

  for (std::size_t o = 0; o < kClasses; ++o) {
    c.logits[o] = params.dense_b[o] + dot(params.dense_w.data() + o * H, c.dropped.data(), H);
  }
  c.probs = softmax(c.logits);
  out.probs = c.probs;
  return out;
}

template <typename T>
void backward(const Parameters<T>& params, const ForwardCache<T>& cache, int label,
              Gradients<T>& grads) {
  if (!grads.same_shape(params)) throw InternalError("gradient buffer shape mismatch");
  const std::size_t H = params.pooled_width();
  const std::size_t d = params.embed_dim;
  const std::size_t F = params.filters;
  const std::size_t L = cache.tokens.size();
  if (cache.pooled.size() != H || cache.embedded.size() != L * d) {
    throw InternalError("forward cache does not match parameters");
  }

  std::array<T, kClasses> dlogits{};
  for (std::size_t o = 0; o < kClasses; ++o) {
    dlogits[o] = cache.probs[o] - (static_cast<int>(o) == label ? T(1) : T(0));
  }

  std::vector<T> dpooled(H, T(0));
  for (std::size_t o = 0; o < kClasses; ++o) {
    grads.dense_b[o] += dlogits[o];
    axpy(dlogits[o], cache.dropped.data(), grads.dense_w.data() + o * H, H);
    axpy(dlogits[o], params.dense_w.data() + o * H, dpooled.data(), H);
  }
  for (std::size_t i = 0; i < H; ++i) dpooled[i] *= cache.mask[i];

  std::vector<T> dembedded(L * d, T(0));
  for (std::size_t w = 0; w < kNumWidths; ++w) {
    const std::size_t span = kKernelWidths[w] * d;
    for (std::size_t f = 0; f < F; ++f) {
      const T g = dpooled[w * F + f];
      if (g == T(0) || !(cache.max_pre[w][f] > T(0))) continue;
      const std::size_t t = cache.argmax[w][f];
      grads.conv_b[w][f] += g;
      axpy(g, cache.embedded.data() + t * d, grads.conv_w[w].data() + f * span, span);
      axpy(g, params.conv_w[w].data() + f * span, dembedded.data() + t * d, span);
    }
  }

  for (std::size_t t = 0; t < L; ++t) {
    const TokenId id = cache.tokens[t];
    if (id == kPadToken) continue;
    axpy(T(1), dembedded.data() + t * d, grads.embedding.data() + id * d, d);
  }
}

template <typename T>
T predict(const Parameters<T>& params, std::span<const TokenId> tokens) {
  return forward(params, tokens, Mode::Eval, 0.0, nullptr).probs[1];
}

TrainResult train(std::span<const LabeledSequence> dataset, const ModelConfig& config) {
  config.validate();
  if (dataset.empty()) throw InvalidInput("training dataset is empty");

  TrainResult result{init_params<float>(config, config.seed), {}};
  auto& params = result.params;
  const bool has_pos = std::any_of(dataset.begin(), dataset.end(), [](auto& e) { return e.label == 1; });
  const bool has_neg = std::any_of(dataset.begin(), dataset.end(), [](auto& e) { return e.label == 0; });
  if (!has_pos || !has_neg) {
    result.history.warnings.push_back("training set contains a single class");
  }

  auto grads = Gradients<float>::zeros_like(params);
  auto m1 = Gradients<float>::zeros_like(params);
  auto m2 = Gradients<float>::zeros_like(params);
  std::mt19937_64 shuffle_rng(config.seed ^ 0x5bd1e995ULL);
  std::mt19937_64 dropout_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::uint64_t step = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double total_loss = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      for (auto t : grads.tensors()) std::fill(t.begin(), t.end(), 0.0f);
      for (std::size_t i = start; i < end; ++i) {
        const auto& ex = dataset[order[i]];
        auto fr = forward(params, std::span<const TokenId>(ex.sequence.tokens), Mode::Train,
                          config.dropout_p, &dropout_rng);
        total_loss += loss(fr.probs, ex.label);
        if ((fr.probs[1] > 0.5f ? 1 : 0) == ex.label) ++correct;
        backward(params, fr.cache, ex.label, grads);
      }

      ++step;
      const float inv_batch = 1.0f / static_cast<float>(end - start);
      const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
      const auto lr = static_cast<float>(config.learning_rate * std::sqrt(bc2) / bc1);
      const auto b1 = static_cast<float>(config.beta1);
      const auto b2 = static_cast<float>(config.beta2);
      const auto eps = static_cast<float>(config.epsilon * std::sqrt(bc2));
      auto pt = params.tensors();
      auto gt = grads.tensors();
      auto mt = m1.tensors();
      auto vt = m2.tensors();
      for (std::size_t k = 0; k < pt.size(); ++k) {
        for (std::size_t i = 0; i < pt[k].size(); ++i) {
          const float g = gt[k][i] * inv_batch;
          mt[k][i] = b1 * mt[k][i] + (1.0f - b1) * g;
          vt[k][i] = b2 * vt[k][i] + (1.0f - b2) * g * g;
          pt[k][i] -= lr * mt[k][i] / (std::sqrt(vt[k][i]) + eps);
        }
      }
    }
    result.history.epoch_loss.push_back(total_loss / static_cast<double>(dataset.size()));
    result.history.epoch_accuracy.push_back(static_cast<double>(correct) /
                                            static_cast<double>(dataset.size()));
  }
  return result;
}

TokenSequence Model::prepare(std::string_view canonical) const {
  return pad_to(encode(vocab, canonical, config.seq_len), config.seq_len);
}

float Model::predict(std::string_view canonical) const {
  const auto seq = prepare(canonical);
  return reqsentry::predict(params, std::span<const TokenId>(seq.tokens));
}

#define REQSENTRY_INSTANTIATE(T)                                                               \
  template struct Parameters<T>;                                                               \
  template Parameters<T> init_params<T>(const ModelConfig&, std::uint64_t);                    \
  template ForwardResult<T> forward<T>(const Parameters<T>&, std::span<const TokenId>, Mode,   \
                                       double, std::mt19937_64*);                              \
  template std::array<T, kClasses> softmax<T>(const std::array<T, kClasses>&);                 \
  template T loss<T>(const std::array<T, kClasses>&, int);                                     \
  template void backward<T>(const Parameters<T>&, const ForwardCache<T>&, int, Gradients<T>&); \
  template T predict<T>(const Parameters<T>&, std::span<const TokenId>);

REQSENTRY_INSTANTIATE(float)
REQSENTRY_INSTANTIATE(double)
template Parameters<double> Parameters<float>::cast<double>() const;
template Parameters<float> Parameters<double>::cast<float>() const;

}  // namespace reqsentry

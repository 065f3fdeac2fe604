#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cnn_oracle.hpp"
#include "gradcheck.hpp"
#include "reqsentry/neuralnet.hpp"

using namespace reqsentry;

namespace {

ModelConfig tiny_config(std::size_t V, std::size_t d, std::size_t L, std::size_t F) {
  ModelConfig c;
  c.vocab_size = V;
  c.embed_dim = d;
  c.seq_len = L;
  c.filters_per_width = F;
  return c;
}

std::vector<TokenId> random_tokens(std::mt19937_64& rng, std::size_t L, std::size_t V) {
  std::vector<TokenId> t(L);
  for (auto& x : t) x = static_cast<TokenId>(rng() % V);
  return t;
}

Parameters<double> random_params(const ModelConfig& c, std::mt19937_64& rng) {
  auto p = init_params<double>(c, rng());
  std::normal_distribution<double> n(0.0, 0.5);
  // Non-zero biases so every tensor is exercised.
  for (std::size_t w = 0; w < kNumWidths; ++w) {
    for (auto& b : p.conv_b[w]) b = n(rng);
  }
  for (auto& b : p.dense_b) b = n(rng);
  for (auto& x : p.embedding) x = n(rng);
  return p;
}

}  // namespace

TEST(InitParams, DeterministicZeroBiasesZeroPad) {
  const auto cfg = tiny_config(300, 8, 16, 3);
  const auto a = init_params<float>(cfg, 1);
  const auto b = init_params<float>(cfg, 1);
  const auto c = init_params<float>(cfg, 2);
  EXPECT_EQ(a, b);
  EXPECT_NE(a.embedding, c.embedding);
  for (std::size_t w = 0; w < kNumWidths; ++w) {
    for (float x : a.conv_b[w]) EXPECT_EQ(x, 0.0f);
  }
  for (float x : a.dense_b) EXPECT_EQ(x, 0.0f);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(a.embedding[kPadToken * 8 + i], 0.0f);
  const double limit = std::sqrt(6.0 / (300 + 8));
  for (float x : a.embedding) EXPECT_LE(std::abs(x), limit);
  EXPECT_EQ(a.pooled_width(), 9u);
}

TEST(InitParams, PaperShapes) {
  ModelConfig cfg;
  cfg.vocab_size = 400;
  cfg.embed_dim = 8;
  const auto p = init_params<float>(cfg, 0);
  EXPECT_EQ(p.pooled_width(), 300u);
  EXPECT_EQ(p.conv_w[0].size(), 100u * 2 * 8);
  EXPECT_EQ(p.conv_w[2].size(), 100u * 4 * 8);
  EXPECT_EQ(p.dense_w.size(), 2u * 300);
}

TEST(Config, Validation) {
  auto cfg = tiny_config(16, 4, 3, 2);
  EXPECT_THROW(cfg.validate(), InvalidConfig);
  cfg.seq_len = 4;
  EXPECT_NO_THROW(cfg.validate());
  cfg.dropout_p = 1.0;
  EXPECT_THROW(cfg.validate(), InvalidConfig);
}

TEST(Softmax, Basics) {
  const auto s = softmax<double>({0.0, 0.0});
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-700, 700);
  for (int i = 0; i < 1000; ++i) {
    const auto p = softmax<double>({u(rng), u(rng)});
    EXPECT_GE(p[0], 0.0);
    EXPECT_GE(p[1], 0.0);
    EXPECT_NEAR(p[0] + p[1], 1.0, 1e-9);
  }
}

TEST(Loss, AnalyticValues) {
  EXPECT_NEAR(loss<double>({0.5, 0.5}, 1), std::log(2.0), 1e-12);
  EXPECT_NEAR(loss<double>({0.0, 1.0}, 1), 0.0, 1e-12);
  EXPECT_NEAR(loss<double>({1.0, 0.0}, 1), -std::log(1e-12), 1e-9);
  EXPECT_NEAR(loss<double>({1.0, 0.0}, 1), 27.631021115928547, 1e-9);
}

TEST(Forward, ZeroParametersGiveEvenOdds) {
  auto p = Parameters<double>::zeros(16, 4, 2);
  std::mt19937_64 rng(3);
  const auto r = forward(p, std::span<const TokenId>(random_tokens(rng, 8, 16)), Mode::Eval, 0.0, nullptr);
  EXPECT_DOUBLE_EQ(r.probs[0], 0.5);
  EXPECT_DOUBLE_EQ(r.probs[1], 0.5);
}

TEST(Forward, MatchesNestedLoopOracleTinyNet) {
  const auto cfg = tiny_config(4, 2, 5, 1);
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_params(cfg, rng);
    const auto toks = random_tokens(rng, 5, 4);
    const auto got = forward(p, std::span<const TokenId>(toks), Mode::Eval, 0.0, nullptr).probs;
    const auto want = oracle::forward(p, toks);
    EXPECT_NEAR(got[0], want[0], 1e-12);
    EXPECT_NEAR(got[1], want[1], 1e-12);
  }
}

TEST(Forward, PaddingShortcutMatchesOracle) {
  // Vocabulary large enough to hold PAD; zero PAD row lets forward skip
  // all-padding windows.
  const auto cfg = tiny_config(260, 3, 12, 2);
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = random_params(cfg, rng);
    std::fill_n(p.embedding.begin() + kPadToken * 3, 3, 0.0);
    auto toks = random_tokens(rng, 12, 256);
    const std::size_t real = rng() % 13;
    std::fill(toks.begin() + static_cast<std::ptrdiff_t>(real), toks.end(), kPadToken);
    const auto got = forward(p, std::span<const TokenId>(toks), Mode::Eval, 0.0, nullptr).probs;
    const auto want = oracle::forward(p, toks);
    EXPECT_NEAR(got[1], want[1], 1e-12);
  }
}

TEST(Forward, CacheShapes) {
  const auto cfg = tiny_config(16, 4, 8, 2);
  std::mt19937_64 rng(4);
  const auto p = init_params<double>(cfg, 4);
  const auto r = forward(p, std::span<const TokenId>(random_tokens(rng, 8, 16)), Mode::Eval, 0.0, nullptr);
  EXPECT_EQ(r.cache.pooled.size(), 6u);
  for (std::size_t w = 0; w < kNumWidths; ++w) {
    for (auto pos : r.cache.argmax[w]) EXPECT_LE(pos, 8 - kKernelWidths[w]);
  }
  for (double x : r.cache.pooled) EXPECT_GE(x, 0.0);
}

TEST(Forward, Errors) {
  const auto p = init_params<double>(tiny_config(16, 4, 8, 2), 1);
  const std::vector<TokenId> bad = {1, 2, 16, 3, 4, 5, 6, 7};
  EXPECT_THROW(forward(p, std::span<const TokenId>(bad), Mode::Eval, 0.0, nullptr), InvalidToken);
  const std::vector<TokenId> short_seq = {1, 2, 3};
  EXPECT_THROW(forward(p, std::span<const TokenId>(short_seq), Mode::Eval, 0.0, nullptr), InvalidInput);
  const std::vector<TokenId> ok = {1, 2, 3, 4, 5, 6, 7, 8};
  EXPECT_THROW(forward(p, std::span<const TokenId>(ok), Mode::Train, 0.2, nullptr), InvalidInput);
}

TEST(Forward, NotABagOfTokens) {
  const auto cfg = tiny_config(16, 4, 8, 2);
  std::mt19937_64 rng(12);
  bool differs = false;
  for (int trial = 0; trial < 20 && !differs; ++trial) {
    const auto p = random_params(cfg, rng);
    auto toks = random_tokens(rng, 8, 16);
    auto shuffled = toks;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    if (shuffled == toks) continue;
    differs = predict(p, std::span<const TokenId>(toks)) != predict(p, std::span<const TokenId>(shuffled));
  }
  EXPECT_TRUE(differs);
}

TEST(Backward, MatchesFiniteDifferences) {
  const auto cfg = tiny_config(16, 4, 8, 2);
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = random_params(cfg, rng);
    const auto toks = random_tokens(rng, 8, 16);
    const auto rep = gradcheck::run(p, toks, static_cast<int>(trial % 2));
    EXPECT_LT(rep.max_rel_error, 1e-4) << "trial " << trial;
  }
}

TEST(Backward, AbsentTokenRowIsExactlyZero) {
  const auto cfg = tiny_config(16, 4, 8, 2);
  std::mt19937_64 rng(5);
  const auto p = random_params(cfg, rng);
  const std::vector<TokenId> toks = {1, 2, 3, 4, 1, 2, 3, 4};
  const auto fr = forward(p, std::span<const TokenId>(toks), Mode::Train, 0.0, nullptr);
  const auto g = backward(p, fr.cache, 1);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(g.embedding[9 * 4 + i], 0.0);
}

TEST(Backward, PadRowGradientIsZero) {
  const auto cfg = tiny_config(300, 4, 10, 3);
  std::mt19937_64 rng(6);
  auto p = random_params(cfg, rng);
  std::fill_n(p.embedding.begin() + kPadToken * 4, 4, 0.0);
  const std::vector<TokenId> toks = {65, 66, 67, kPadToken, kPadToken, kPadToken, kPadToken,
                                     kPadToken, kPadToken, kPadToken};
  const auto fr = forward(p, std::span<const TokenId>(toks), Mode::Train, 0.0, nullptr);
  const auto g = backward(p, fr.cache, 0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(g.embedding[kPadToken * 4 + i], 0.0);
}

TEST(Backward, AccumulationIsLinear) {
  const auto cfg = tiny_config(16, 4, 8, 2);
  std::mt19937_64 rng(7);
  const auto p = random_params(cfg, rng);
  const auto toks = random_tokens(rng, 8, 16);
  const auto fr = forward(p, std::span<const TokenId>(toks), Mode::Train, 0.0, nullptr);
  const auto once = backward(p, fr.cache, 1);
  auto twice = Gradients<double>::zeros_like(p);
  backward(p, fr.cache, 1, twice);
  backward(p, fr.cache, 1, twice);
  const auto a = once.tensors();
  const auto b = twice.tensors();
  for (std::size_t k = 0; k < a.size(); ++k) {
    for (std::size_t i = 0; i < a[k].size(); ++i) EXPECT_DOUBLE_EQ(b[k][i], 2 * a[k][i]);
  }
}

TEST(Backward, ShapeMismatch) {
  const auto p = init_params<double>(tiny_config(16, 4, 8, 2), 1);
  const std::vector<TokenId> toks = {1, 2, 3, 4, 5, 6, 7, 8};
  const auto fr = forward(p, std::span<const TokenId>(toks), Mode::Train, 0.0, nullptr);
  auto wrong = Gradients<double>::zeros(16, 4, 3);
  EXPECT_THROW(backward(p, fr.cache, 0, wrong), InternalError);
}

TEST(Predict, EvalIsDeterministicAndComplementary) {
  const auto cfg = tiny_config(16, 4, 8, 2);
  std::mt19937_64 rng(10);
  const auto p = random_params(cfg, rng);
  const auto toks = random_tokens(rng, 8, 16);
  const double a = predict(p, std::span<const TokenId>(toks));
  EXPECT_EQ(a, predict(p, std::span<const TokenId>(toks)));
  const auto probs = forward(p, std::span<const TokenId>(toks), Mode::Eval, 0.0, nullptr).probs;
  EXPECT_NEAR(a, 1.0 - probs[0], 1e-12);
}

TEST(Predict, InvertedDropoutPreservesExpectedLogits) {
  const auto cfg = tiny_config(16, 4, 8, 20);
  std::mt19937_64 rng(13);
  const auto p = random_params(cfg, rng);
  const auto toks = random_tokens(rng, 8, 16);
  const auto eval = forward(p, std::span<const TokenId>(toks), Mode::Eval, 0.0, nullptr).cache.logits;
  std::mt19937_64 mask_rng(1);
  std::array<double, 2> mean{};
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const auto l = forward(p, std::span<const TokenId>(toks), Mode::Train, 0.2, &mask_rng).cache.logits;
    mean[0] += l[0] / n;
    mean[1] += l[1] / n;
  }
  for (int o = 0; o < 2; ++o) {
    EXPECT_NEAR(mean[o], eval[o], 0.01 * std::abs(eval[o])) << o;
  }
}

TEST(Train, SeparableSequencesConverge) {
  ModelConfig cfg = tiny_config(300, 8, 12, 4);
  cfg.epochs = 20;
  cfg.batch_size = 4;
  cfg.learning_rate = 1e-2;
  std::mt19937_64 rng(17);
  std::vector<LabeledSequence> data;
  for (int i = 0; i < 20; ++i) {
    LabeledSequence ex;
    ex.label = i % 2;
    const TokenId base = ex.label == 1 ? 'a' : 'A';
    for (int t = 0; t < 12; ++t) ex.sequence.tokens.push_back(base + static_cast<TokenId>(rng() % 10));
    ex.sequence.original_length = 12;
    data.push_back(ex);
  }
  const auto r = train(data, cfg);
  ASSERT_EQ(r.history.epoch_loss.size(), 20u);
  EXPECT_LT(r.history.epoch_loss.back(), 0.05);
  EXPECT_TRUE(r.params.all_finite());
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(r.params.embedding[kPadToken * 8 + i], 0.0f);

  const auto again = train(data, cfg);
  EXPECT_EQ(again.params, r.params);

  cfg.epochs = 0;
  EXPECT_EQ(train(data, cfg).params, init_params<float>(cfg, cfg.seed));
}

TEST(Train, SingleClassWarns) {
  ModelConfig cfg = tiny_config(300, 4, 8, 2);
  cfg.epochs = 1;
  std::vector<LabeledSequence> data(3);
  for (auto& ex : data) ex.sequence.tokens.assign(8, 'x');
  const auto r = train(data, cfg);
  EXPECT_EQ(r.history.warnings.size(), 1u);
  EXPECT_THROW(train(std::vector<LabeledSequence>{}, cfg), InvalidInput);
}

TEST(Serialization, RoundTripIsBitExact) {
  const std::vector<std::string> corpus = {"GET /a?x=1", "GET /a?x=2", "POST /b"};
  Model m;
  m.vocab = train_bbpe(corpus, 270);
  m.config.vocab_size = m.vocab.size();
  m.config.embed_dim = 6;
  m.config.seq_len = 16;
  m.config.filters_per_width = 5;
  m.params = init_params<float>(m.config, 3);
  const auto bytes = serialize_model(m);
  EXPECT_EQ(bytes.size(), serialized_model_size(m.vocab.merges().size(), m.config));
  const auto back = deserialize_model(bytes);
  EXPECT_EQ(back, m);
  EXPECT_EQ(serialize_model(back), bytes);
  EXPECT_EQ(back.predict("GET /a?x=3"), m.predict("GET /a?x=3"));
}

TEST(Serialization, DocumentedSizeForDefaultShape) {
  ModelConfig cfg;
  cfg.vocab_size = 5000;
  cfg.embed_dim = 64;
  cfg.seq_len = 512;
  // magic 4 + version 4 + merge count 4 + 8 per merge + config 40
  // + 4 * (V*d + F*(2+3+4)*d + 3F + 2*3F + 2)
  const std::size_t merges = 5000 - 257;
  const std::size_t floats = 5000 * 64 + 100 * 9 * 64 + 300 + 600 + 2;
  EXPECT_EQ(serialized_model_size(merges, cfg), 12 + 8 * merges + 40 + 4 * floats);
  EXPECT_EQ(serialized_model_size(merges, cfg), 1552004u);
}

TEST(Serialization, CorruptionIsAParseErrorNotACrash) {
  const std::vector<std::string> corpus = {"abab", "abab"};
  Model m;
  m.vocab = train_bbpe(corpus, 260);
  m.config.vocab_size = m.vocab.size();
  m.config.embed_dim = 2;
  m.config.seq_len = 8;
  m.config.filters_per_width = 2;
  m.params = init_params<float>(m.config, 1);
  const auto bytes = serialize_model(m);

  std::mt19937_64 rng(2);
  const std::size_t header = 12 + 8 * m.vocab.merges().size() + 40;
  for (std::size_t pos = 0; pos < header; ++pos) {
    for (int trial = 0; trial < 4; ++trial) {
      auto bad = bytes;
      bad[pos] = static_cast<char>(bad[pos] ^ static_cast<char>(1 + rng() % 255));
      try {
        const auto back = deserialize_model(bad);
        // A flip in the dropout float can still decode to a valid model.
        EXPECT_TRUE(back.params.all_finite());
      } catch (const ParseError&) {
      }
    }
  }
  for (std::size_t len = 0; len < bytes.size(); len += 7) {
    EXPECT_THROW(deserialize_model(std::string_view(bytes).substr(0, len)), ParseError);
  }
  try {
    deserialize_model(bytes.substr(0, 20));
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("vocabulary"), std::string::npos);
  }
  auto magic = bytes;
  magic[0] = 'X';
  try {
    deserialize_model(magic);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("header"), std::string::npos);
  }
}

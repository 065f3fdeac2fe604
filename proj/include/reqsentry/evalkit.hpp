#pragma once

// Classification metrics and experiment protocols: confusion matrices,
// stratified k-fold cross-validation, train-fraction sweeps, and a synthetic
// labelled request corpus for desk-scale runs. The anomalous class is the
// positive class throughout.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "reqsentry/neuralnet.hpp"
#include "reqsentry/request_codec.hpp"

namespace reqsentry {

inline constexpr double kDefaultDecisionThreshold = 0.5;

struct ConfusionMatrix {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;

  std::size_t total() const { return tp + fp + tn + fn; }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

struct Metrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// A prediction counts as positive iff probability > threshold.
ConfusionMatrix confusion(std::span<const double> predictions, std::span<const int> labels,
                          double threshold);

// Precision, recall and F1 are 0 when their denominator is 0.
Metrics metrics(const ConfusionMatrix& cm);

struct FoldSpec {
  std::size_t k = 0;
  std::vector<std::size_t> assignment;  // example index -> fold
  std::uint64_t seed = 0;

  std::vector<std::size_t> members(std::size_t fold) const;
};

// Stratified: each class is shuffled and dealt round-robin, so fold sizes
// differ by at most one and each fold's class counts are within one of the
// global proportion.
FoldSpec kfold_split(std::size_t n, std::span<const int> labels, std::size_t k, std::uint64_t seed);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Stratified holdout with round(fraction * class size) of each class in train.
Split stratified_split(std::span<const int> labels, double fraction, std::uint64_t seed);

struct Example {
  std::string text;  // canonical request string
  int label = 0;
};

using Predictor = std::function<double(std::string_view)>;
using TrainerFn = std::function<Predictor(std::span<const Example> train)>;

struct CvResult {
  Metrics mean;
  double f1_std = 0.0;  // population standard deviation over folds
  std::vector<Metrics> folds;
};

CvResult cross_validate(std::span<const Example> dataset, std::size_t k, const TrainerFn& trainer,
                        double threshold, std::uint64_t seed);

struct SweepRow {
  double fraction = 0.0;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  Metrics metrics;
};

std::vector<SweepRow> train_fraction_sweep(std::span<const Example> dataset,
                                           std::span<const double> fractions,
                                           const TrainerFn& trainer, double threshold,
                                           std::uint64_t seed);

// Trains the CNN on each training split, reusing a tokenizer fitted once on
// the full dataset.
TrainerFn cnn_trainer(Vocabulary vocab, ModelConfig config);

// Fits the tokenizer on every example's text and trains a final model.
Model train_model(std::span<const Example> dataset, std::size_t vocab_budget, ModelConfig config,
                  TrainHistory* history = nullptr);

// Convenience wrappers running the CNN end to end.
CvResult cross_validate(std::span<const Example> dataset, std::size_t k, std::size_t vocab_budget,
                        const ModelConfig& config, double threshold);
std::vector<SweepRow> train_fraction_sweep(std::span<const Example> dataset,
                                           std::span<const double> fractions,
                                           std::size_t vocab_budget, const ModelConfig& config,
                                           double threshold);

std::vector<Example> to_examples(std::span<const RequestRecord> records);

// Deterministic synthetic traffic: benign browsing over small URL/agent pools
// and attacks carrying SQL injection, script injection and %-escaped payloads
// in a randomly chosen field. Records carry @timestamp and @label.
std::vector<RequestRecord> synth_corpus(std::size_t n_benign, std::size_t n_attack,
                                        std::uint64_t seed);

// Every payload string the generator may inject into an attack record.
std::span<const std::string> attack_fragments();

// Raw HTTP request dumps (request line, headers, blank line, optional body),
// as distributed with public benchmark datasets.
std::vector<RequestRecord> parse_raw_http_requests(std::string_view text, int label);

// Tables with accuracy, precision, recall, F1 and F1_std columns.
void write_cv_report(std::ostream& out, std::string_view name, const CvResult& result);
void write_sweep_report(std::ostream& out, const std::vector<SweepRow>& rows);
std::string cv_report_csv(std::string_view name, const CvResult& result);
std::string sweep_report_csv(const std::vector<SweepRow>& rows);

}  // namespace reqsentry

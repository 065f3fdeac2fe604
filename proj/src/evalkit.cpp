#include "reqsentry/evalkit.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <memory>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

namespace reqsentry {

ConfusionMatrix confusion(std::span<const double> predictions, std::span<const int> labels,
                          double threshold) {
  if (predictions.size() != labels.size()) {
    throw InvalidInput("predictions and labels differ in length");
  }
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw InvalidInput("threshold must be in [0, 1]");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool positive = predictions[i] > threshold;
    if (labels[i] == 1) {
      positive ? ++cm.tp : ++cm.fn;
    } else {
      positive ? ++cm.fp : ++cm.tn;
    }
  }
  return cm;
}

Metrics metrics(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw InvalidInput("confusion matrix is empty");
  auto ratio = [](std::size_t num, std::size_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  Metrics m;
  m.accuracy = ratio(cm.tp + cm.tn, cm.total());
  m.precision = ratio(cm.tp, cm.tp + cm.fp);
  m.recall = ratio(cm.tp, cm.tp + cm.fn);
  m.f1 = (m.precision + m.recall) == 0.0
             ? 0.0
             : 2.0 * m.precision * m.recall / (m.precision + m.recall);
  return m;
}

std::vector<std::size_t> FoldSpec::members(std::size_t fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (assignment[i] == fold) out.push_back(i);
  }
  return out;
}

namespace {

std::array<std::vector<std::size_t>, 2> shuffled_classes(std::span<const int> labels,
                                                          std::mt19937_64& rng) {
  std::array<std::vector<std::size_t>, 2> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw InvalidInput("labels must be 0 or 1");
    by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  for (auto& c : by_class) std::shuffle(c.begin(), c.end(), rng);
  return by_class;
}

}  // namespace

FoldSpec kfold_split(std::size_t n, std::span<const int> labels, std::size_t k,
                     std::uint64_t seed) {
  if (labels.size() != n) throw InvalidInput("label count differs from n");
  if (k < 2) throw InvalidInput("k must be at least 2");
  if (k > n) throw InvalidInput("k exceeds the number of examples");
  std::mt19937_64 rng(seed);
  FoldSpec spec{k, std::vector<std::size_t>(n, 0), seed};
  std::size_t dealt = 0;
  for (const auto& cls : shuffled_classes(labels, rng)) {
    for (const auto idx : cls) spec.assignment[idx] = dealt++ % k;
  }
  return spec;
}

Split stratified_split(std::span<const int> labels, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw InvalidInput("fraction must be in (0, 1)");
  std::mt19937_64 rng(seed);
  Split split;
  for (const auto& cls : shuffled_classes(labels, rng)) {
    const auto take = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(cls.size())));
    split.train.insert(split.train.end(), cls.begin(), cls.begin() + static_cast<std::ptrdiff_t>(take));
    split.test.insert(split.test.end(), cls.begin() + static_cast<std::ptrdiff_t>(take), cls.end());
  }
  if (split.train.empty() || split.test.empty()) {
    throw InvalidInput("fraction " + std::to_string(fraction) + " leaves an empty train or test set");
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

namespace {

std::vector<int> labels_of(std::span<const Example> data) {
  std::vector<int> out;
  out.reserve(data.size());
  for (const auto& e : data) out.push_back(e.label);
  return out;
}

std::vector<Example> gather(std::span<const Example> data, const std::vector<std::size_t>& idx) {
  std::vector<Example> out;
  out.reserve(idx.size());
  for (const auto i : idx) out.push_back(data[i]);
  return out;
}

Metrics evaluate(const Predictor& predict, std::span<const Example> test, double threshold) {
  std::vector<double> preds;
  std::vector<int> labels;
  for (const auto& e : test) {
    preds.push_back(predict(e.text));
    labels.push_back(e.label);
  }
  return metrics(confusion(preds, labels, threshold));
}

}  // namespace

CvResult cross_validate(std::span<const Example> dataset, std::size_t k, const TrainerFn& trainer,
                        double threshold, std::uint64_t seed) {
  const auto labels = labels_of(dataset);
  const auto spec = kfold_split(dataset.size(), labels, k, seed);
  CvResult result;
  for (std::size_t fold = 0; fold < k; ++fold) {
    std::vector<std::size_t> train_idx, test_idx;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      (spec.assignment[i] == fold ? test_idx : train_idx).push_back(i);
    }
    const auto train_set = gather(dataset, train_idx);
    const auto test_set = gather(dataset, test_idx);
    const Predictor predict = trainer(train_set);
    result.folds.push_back(evaluate(predict, test_set, threshold));
  }
  const double n = static_cast<double>(k);
  for (const auto& m : result.folds) {
    result.mean.accuracy += m.accuracy / n;
    result.mean.precision += m.precision / n;
    result.mean.recall += m.recall / n;
    result.mean.f1 += m.f1 / n;
  }
  double var = 0.0;
  for (const auto& m : result.folds) var += (m.f1 - result.mean.f1) * (m.f1 - result.mean.f1);
  result.f1_std = std::sqrt(var / n);
  return result;
}

std::vector<SweepRow> train_fraction_sweep(std::span<const Example> dataset,
                                           std::span<const double> fractions,
                                           const TrainerFn& trainer, double threshold,
                                           std::uint64_t seed) {
  const auto labels = labels_of(dataset);
  std::vector<SweepRow> rows;
  for (const double f : fractions) {
    const auto split = stratified_split(labels, f, seed);
    const auto train_set = gather(dataset, split.train);
    const auto test_set = gather(dataset, split.test);
    const Predictor predict = trainer(train_set);
    rows.push_back({f, train_set.size(), test_set.size(), evaluate(predict, test_set, threshold)});
  }
  return rows;
}

namespace {

std::vector<LabeledSequence> prepare(const Model& shape, std::span<const Example> data) {
  std::vector<LabeledSequence> out;
  out.reserve(data.size());
  for (const auto& e : data) out.push_back({shape.prepare(e.text), e.label});
  return out;
}

Vocabulary fit_vocab(std::span<const Example> data, std::size_t budget) {
  std::vector<std::string> corpus;
  corpus.reserve(data.size());
  for (const auto& e : data) corpus.push_back(e.text);
  return train_bbpe(corpus, budget);
}

}  // namespace

TrainerFn cnn_trainer(Vocabulary vocab, ModelConfig config) {
  config.vocab_size = vocab.size();
  return [vocab = std::move(vocab), config](std::span<const Example> train_set) -> Predictor {
    auto model = std::make_shared<Model>();
    model->vocab = vocab;
    model->config = config;
    model->params = train(prepare(*model, train_set), config).params;
    return [model](std::string_view text) { return static_cast<double>(model->predict(text)); };
  };
}

Model train_model(std::span<const Example> dataset, std::size_t vocab_budget, ModelConfig config,
                  TrainHistory* history) {
  Model model;
  model.vocab = fit_vocab(dataset, vocab_budget);
  config.vocab_size = model.vocab.size();
  model.config = config;
  auto result = train(prepare(model, dataset), config);
  model.params = std::move(result.params);
  if (history != nullptr) *history = std::move(result.history);
  return model;
}

CvResult cross_validate(std::span<const Example> dataset, std::size_t k, std::size_t vocab_budget,
                        const ModelConfig& config, double threshold) {
  return cross_validate(dataset, k, cnn_trainer(fit_vocab(dataset, vocab_budget), config),
                        threshold, config.seed);
}

std::vector<SweepRow> train_fraction_sweep(std::span<const Example> dataset,
                                           std::span<const double> fractions,
                                           std::size_t vocab_budget, const ModelConfig& config,
                                           double threshold) {
  return train_fraction_sweep(dataset, fractions,
                              cnn_trainer(fit_vocab(dataset, vocab_budget), config), threshold,
                              config.seed);
}

std::vector<Example> to_examples(std::span<const RequestRecord> records) {
  std::vector<Example> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    if (!r.truth_label) throw InvalidInput("record without a ground-truth label");
    out.push_back({flatten(r), *r.truth_label});
  }
  return out;
}

namespace {

void metric_cells(std::ostream& out, const Metrics& m) {
  out << std::setw(10) << m.accuracy << std::setw(11) << m.precision << std::setw(10) << m.recall
      << std::setw(10) << m.f1;
}

}  // namespace

void write_cv_report(std::ostream& out, std::string_view name, const CvResult& result) {
  std::ostringstream f1std;
  f1std << std::scientific << std::setprecision(2) << result.f1_std;
  out << std::left << std::setw(12) << "Dataset" << std::right << std::setw(10) << "Accuracy"
      << std::setw(11) << "Precision" << std::setw(10) << "Recall" << std::setw(10) << "F1"
      << std::setw(12) << "F1_std" << '\n';
  out << std::fixed << std::setprecision(3) << std::left << std::setw(12) << name << std::right;
  metric_cells(out, result.mean);
  out << std::setw(12) << f1std.str() << '\n';
  out.unsetf(std::ios::floatfield);
}

void write_sweep_report(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << std::left << std::setw(10) << "Train %" << std::right << std::setw(10) << "Accuracy"
      << std::setw(11) << "Precision" << std::setw(10) << "Recall" << std::setw(10) << "F1" << '\n';
  for (const auto& r : rows) {
    out << std::fixed << std::setprecision(0) << std::left << std::setw(10) << r.fraction * 100
        << std::right << std::setprecision(3);
    metric_cells(out, r.metrics);
    out << '\n';
  }
  out.unsetf(std::ios::floatfield);
}

std::string cv_report_csv(std::string_view name, const CvResult& result) {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "dataset,accuracy,precision,recall,f1,f1_std\n";
  out << name << ',' << result.mean.accuracy << ',' << result.mean.precision << ','
      << result.mean.recall << ',' << result.mean.f1 << ',' << result.f1_std << '\n';
  return out.str();
}

std::string sweep_report_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "train_fraction,train_size,test_size,accuracy,precision,recall,f1\n";
  for (const auto& r : rows) {
    out << r.fraction << ',' << r.train_size << ',' << r.test_size << ',' << r.metrics.accuracy
        << ',' << r.metrics.precision << ',' << r.metrics.recall << ',' << r.metrics.f1 << '\n';
  }
  return out.str();
}

}  // namespace reqsentry

// reqsentry: command-line front end for training, serving and ingest.
//
// Every long flag can also come from the environment as REQSENTRY_<FLAG>,
// upper-cased with dashes turned into underscores (--model-file is
// REQSENTRY_MODEL_FILE). Command-line values win.

#include <csignal>
#include <fstream>
#include <iostream>
#include <pthread.h>
#include <sstream>

#include "CLI11.hpp"
#include "httplib.h"
#include "json.hpp"
#include "reqsentry/chunkwire.hpp"
#include "reqsentry/evalkit.hpp"
#include "reqsentry/logstore.hpp"
#include "reqsentry/service.hpp"
#include "reqsentry/tokenizer.hpp"

using namespace reqsentry;
using namespace std::chrono_literals;

namespace {

struct CorpusArgs {
  std::string path;
  std::string format = "log";
  int label = -1;
  std::size_t synth_benign = 0;
  std::size_t synth_attack = 0;
  std::uint64_t seed = 0;

  void add_to(CLI::App* app) {
    app->add_option("--corpus", path, "Corpus file, one record per line ('-' for stdin)");
    app->add_option("--format", format, "Corpus format: log lines or raw HTTP dumps")
        ->check(CLI::IsMember({"log", "raw"}));
    app->add_option("--label", label, "Label for every raw HTTP request (0 or 1)")->check(CLI::Range(0, 1));
    app->add_option("--synth-benign", synth_benign, "Use a synthetic corpus with this many benign records");
    app->add_option("--synth-attack", synth_attack, "... and this many attacks");
    app->add_option("--seed", seed, "Seed for synthetic data, splits and training");
  }
};

std::string slurp(const std::string& path) {
  if (path == "-") {
    std::ostringstream buf;
    buf << std::cin.rdbuf();
    return std::move(buf).str();
  }
  return read_file(path);
}

std::vector<RequestRecord> read_log_lines(const std::string& path) {
  std::vector<RequestRecord> out;
  std::istringstream in(slurp(path));
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse_log(line));
    } catch (const Error& e) {
      throw InvalidInput(path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

std::vector<RequestRecord> load_corpus(const CorpusArgs& a) {
  if (a.synth_benign || a.synth_attack) {
    if (!a.path.empty()) throw InvalidInput("give either --corpus or --synth-*, not both");
    return synth_corpus(a.synth_benign, a.synth_attack, a.seed);
  }
  if (a.path.empty()) throw InvalidInput("no corpus: give --corpus or --synth-benign/--synth-attack");
  if (a.format == "raw") {
    if (a.label < 0) throw InvalidInput("--format raw needs --label");
    return parse_raw_http_requests(slurp(a.path), a.label);
  }
  auto recs = read_log_lines(a.path);
  if (a.label >= 0) {
    for (auto& r : recs) r.truth_label = a.label;
  }
  return recs;
}

std::vector<Example> labelled(const std::vector<RequestRecord>& recs) {
  for (std::size_t i = 0; i < recs.size(); ++i) {
    if (!recs[i].truth_label) throw InvalidInput("record " + std::to_string(i + 1) + " has no @label");
  }
  if (recs.empty()) throw InvalidInput("corpus is empty");
  return to_examples(recs);
}

std::vector<double> parse_fractions(const std::string& text) {
  std::vector<double> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw InvalidInput("bad fraction '" + item + "'");
    }
  }
  return out;
}

// Blocks SIGINT/SIGTERM for every thread started afterwards; wait_for_signal
// then picks them up synchronously.
sigset_t block_stop_signals() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  return set;
}

void wait_for_signal(const sigset_t& set) {
  int sig = 0;
  sigwait(&set, &sig);
}

void env_for_all(CLI::App* app) {
  for (auto* opt : app->get_options()) {
    const auto& names = opt->get_lnames();
    if (names.empty() || names.front() == "help") continue;
    std::string env = "REQSENTRY_";
    for (const char c : names.front()) env += c == '-' ? '_' : static_cast<char>(std::toupper(c));
    opt->envname(env);
  }
}

// CLI11 quietly drops environment values that fail an option's check; treat
// them as errors instead.
void reject_bad_env(CLI::App* app) {
  for (auto* opt : app->get_options()) {
    const auto env = opt->get_envname();
    if (env.empty() || opt->count() > 0) continue;
    const char* v = std::getenv(env.c_str());
    if (v != nullptr && *v != '\0') throw InvalidInput(env + "='" + v + "' is not a valid value");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HTTP request anomaly detection: train, serve, ingest and query"};
  app.require_subcommand(1);
  app.failure_message([](const CLI::App*, const CLI::Error& e) {
    return std::string("reqsentry: error: ") + e.what() + "\n";
  });

  // train
  auto* train = app.add_subcommand("train", "Train a model and report cross-validation metrics");
  CorpusArgs train_corpus;
  train_corpus.add_to(train);
  std::string out_path;
  std::size_t vocab_budget = kDefaultVocabSize;
  ModelConfig cfg;
  std::size_t folds = 0;
  std::string fractions;
  double report_threshold = kDefaultDecisionThreshold;
  std::string report_csv;
  train->add_option("--out,--model-file", out_path, "Where to write the trained model")->required();
  train->add_option("--vocab-budget", vocab_budget, "Target vocabulary size, bytes and PAD included");
  train->add_option("--embed-dim", cfg.embed_dim);
  train->add_option("--seq-len", cfg.seq_len);
  train->add_option("--filters", cfg.filters_per_width, "Filters per kernel width");
  train->add_option("--epochs", cfg.epochs);
  train->add_option("--batch", cfg.batch_size, "Mini-batch size");
  train->add_option("--learning-rate", cfg.learning_rate);
  train->add_option("--dropout", cfg.dropout_p);
  train->add_option("--folds", folds, "Run k-fold cross-validation first (0 skips)");
  train->add_option("--fractions", fractions, "Comma-separated train fractions for a sweep, e.g. 0.8,0.05");
  train->add_option("--threshold", report_threshold, "Decision threshold for the reports")
      ->check(CLI::Range(0.0, 1.0));
  train->add_option("--report-csv", report_csv, "Also write the reports as CSV");

  // eval
  auto* eval = app.add_subcommand("eval", "Score a labelled corpus with a trained model");
  CorpusArgs eval_corpus;
  eval_corpus.add_to(eval);
  std::string eval_model;
  double eval_threshold = kDefaultDecisionThreshold;
  eval->add_option("--model-file", eval_model, "Trained model")->required();
  eval->add_option("--threshold", eval_threshold)->check(CLI::Range(0.0, 1.0));

  // serve-model
  auto* serve_model = app.add_subcommand("serve-model", "Run the chunkwire model server");
  std::string sm_listen = "127.0.0.1:7400";
  std::string sm_model;
  std::size_t batch_size = 1;
  std::int64_t batch_wait = 5;
  std::int64_t deadline_ms = kDefaultDeadline.count();
  serve_model->add_option("--listen", sm_listen, "host:port to listen on");
  serve_model->add_option("--model-file", sm_model, "Model to serve; otherwise wait for MODEL_CHUNK");
  serve_model->add_option("--batch-size", batch_size, "Batch up to this many requests (1 = immediate)")
      ->check(CLI::PositiveNumber);
  serve_model->add_option("--batch-wait", batch_wait, "Longest wait for a batch to fill, ms")
      ->check(CLI::NonNegativeNumber);
  serve_model->add_option("--deadline", deadline_ms, "Reassembly deadline for partial tasks, ms")
      ->check(CLI::PositiveNumber);

  // serve-api
  auto* serve_api = app.add_subcommand("serve-api", "Run the HTTP API and serve the UI bundle");
  std::string sa_listen = "127.0.0.1:8080";
  std::string store_path, model_endpoint, sa_model, static_dir;
  double threshold = kDefaultThreshold;
  std::size_t retry_attempts = RetryPolicy{}.attempts;
  std::int64_t retry_backoff = RetryPolicy{}.initial_backoff.count();
  serve_api->add_option("--listen", sa_listen, "host:port to listen on");
  serve_api->add_option("--store", store_path, "Log store file (memory only when omitted)");
  serve_api->add_option("--model-endpoint", model_endpoint, "Score through this model server");
  serve_api->add_option("--model-file", sa_model,
                        "In-process model, or pushed to --model-endpoint at startup");
  serve_api->add_option("--threshold", threshold, "Default display threshold")->check(CLI::Range(0.0, 1.0));
  serve_api->add_option("--static-dir", static_dir, "Built UI bundle to serve at /");
  serve_api->add_option("--retry-attempts", retry_attempts, "Scoring retries for unscored entries");
  serve_api->add_option("--retry-backoff", retry_backoff, "First retry delay, ms; doubles each time")
      ->check(CLI::NonNegativeNumber);

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Replay a log file through the scoring pipeline");
  std::string ingest_file;
  std::string api_addr;
  std::string in_store, in_endpoint, in_model;
  std::size_t chunk = 100;
  ingest->add_option("file", ingest_file, "Log lines ('-' for stdin)")->required();
  ingest->add_option("--api", api_addr, "host:port of a running serve-api");
  ingest->add_option("--store", in_store, "Write straight into this store instead");
  ingest->add_option("--model-endpoint", in_endpoint, "Model server for direct ingest");
  ingest->add_option("--model-file", in_model, "In-process model for direct ingest");
  ingest->add_option("--batch-size", chunk, "Records per request")->check(CLI::PositiveNumber);

  // synth
  auto* synth = app.add_subcommand("synth", "Write a synthetic labelled corpus as log lines");
  std::size_t n_benign = 1000, n_attack = 1000;
  std::uint64_t synth_seed = 0;
  std::string synth_out = "-";
  synth->add_option("--benign", n_benign);
  synth->add_option("--attack", n_attack);
  synth->add_option("--seed", synth_seed);
  synth->add_option("--out", synth_out, "Output file ('-' for stdout)");

  // tokenize
  auto* tokenize = app.add_subcommand("tokenize", "Show the token ids of a request");
  std::string text, tok_model, tok_vocab;
  bool as_log = false;
  tokenize->add_option("text", text, "Request text")->required();
  tokenize->add_option("--model-file", tok_model, "Use this model's vocabulary");
  tokenize->add_option("--vocab-file", tok_vocab, "Use a saved vocabulary");
  tokenize->add_flag("--log", as_log, "Treat text as a log line and flatten it first");

  for (auto* sub : app.get_subcommands({})) env_for_all(sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    for (auto* sub : app.get_subcommands()) reject_bad_env(sub);
    if (*train) {
      const auto data = labelled(load_corpus(train_corpus));
      cfg.seed = train_corpus.seed;
      std::string csv;
      if (folds > 0) {
        const auto cv = cross_validate(data, folds, vocab_budget, cfg, report_threshold);
        write_cv_report(std::cout, "bbpe-cnn", cv);
        csv += cv_report_csv("bbpe-cnn", cv);
      }
      if (!fractions.empty()) {
        const auto f = parse_fractions(fractions);
        const auto rows = train_fraction_sweep(data, f, vocab_budget, cfg, report_threshold);
        write_sweep_report(std::cout, rows);
        csv += sweep_report_csv(rows);
      }
      if (!report_csv.empty()) write_file(report_csv, csv);
      TrainHistory history;
      const auto model = train_model(data, vocab_budget, cfg, &history);
      for (std::size_t e = 0; e < history.epoch_loss.size(); ++e) {
        std::cout << "epoch " << e + 1 << " loss " << history.epoch_loss[e] << " accuracy "
                  << history.epoch_accuracy[e] << "\n";
      }
      for (const auto& w : history.warnings) std::cerr << "warning: " << w << "\n";
      save_model_file(out_path, model);
      std::cout << "wrote " << out_path << " (" << describe_model(model).bytes << " bytes, vocabulary "
                << model.vocab.size() << ")\n";
    } else if (*eval) {
      const auto model = load_model_file(eval_model);
      const auto data = labelled(load_corpus(eval_corpus));
      std::vector<double> probs;
      std::vector<int> labels;
      for (const auto& ex : data) {
        probs.push_back(model.predict(ex.text));
        labels.push_back(ex.label);
      }
      const auto cm = confusion(probs, labels, eval_threshold);
      const auto m = metrics(cm);
      std::cout << "examples " << cm.total() << "  tp " << cm.tp << "  fp " << cm.fp << "  tn " << cm.tn
                << "  fn " << cm.fn << "\n"
                << "accuracy " << m.accuracy << "  precision " << m.precision << "  recall "
                << m.recall << "  f1 " << m.f1 << "\n";
    } else if (*serve_model) {
      const auto signals = block_stop_signals();
      std::shared_ptr<const Model> model;
      if (!sm_model.empty()) model = std::make_shared<const Model>(load_model_file(sm_model));
      const auto policy = batch_size > 1
                              ? BatchPolicy::batch(batch_size, std::chrono::milliseconds(batch_wait))
                              : BatchPolicy::immediate();
      ModelServer server({Endpoint::parse(sm_listen), std::chrono::milliseconds(deadline_ms)}, policy,
                         model);
      server.start();
      std::cout << "model server listening on " << server.endpoint().str() << std::endl;
      wait_for_signal(signals);
      server.stop();
    } else if (*serve_api) {
      const auto signals = block_stop_signals();
      ApiConfig c;
      c.listen = Endpoint::parse(sa_listen);
      if (!store_path.empty()) c.store_path = store_path;
      if (!model_endpoint.empty()) c.model_endpoint = Endpoint::parse(model_endpoint);
      if (!sa_model.empty()) c.model_file = sa_model;
      if (!static_dir.empty()) c.static_dir = static_dir;
      c.threshold = threshold;
      c.retry = {retry_attempts, std::chrono::milliseconds(retry_backoff)};
      Service svc(c);
      svc.start();
      std::cout << "api listening on " << c.listen.host << ":" << svc.port() << std::endl;
      wait_for_signal(signals);
      svc.stop();
    } else if (*ingest) {
      const auto records = read_log_lines(ingest_file);
      std::size_t scored = 0;
      if (!api_addr.empty()) {
        if (!in_store.empty() || !in_endpoint.empty() || !in_model.empty()) {
          throw InvalidInput("--api cannot be combined with --store/--model-endpoint/--model-file");
        }
        const auto ep = Endpoint::parse(api_addr);
        httplib::Client client(ep.host, ep.port);
        client.set_read_timeout(120, 0);
        for (std::size_t i = 0; i < records.size(); i += chunk) {
          auto body = nlohmann::json::object();
          auto& list = body["records"] = nlohmann::json::array();
          for (std::size_t j = i; j < std::min(records.size(), i + chunk); ++j) {
            list.push_back(to_log_line(records[j]));
          }
          auto res = client.Post("/api/ingest", body.dump(), "application/json");
          if (!res) throw IoError("cannot reach " + ep.str() + ": " + httplib::to_string(res.error()));
          if (res->status != 200) {
            const auto err = nlohmann::json::parse(res->body, nullptr, false);
            const std::string reason = !err.is_discarded() && err.contains("error")
                                           ? err["error"].value("reason", res->body)
                                           : res->body;
            throw InvalidInput("api answered " + std::to_string(res->status) + ": " + reason);
          }
          const auto reply = nlohmann::json::parse(res->body);
          for (const auto& r : reply["results"]) scored += r["scored"].get<bool>();
        }
      } else {
        ApiConfig c;
        if (in_store.empty()) throw InvalidInput("give --api or --store");
        if (in_endpoint.empty() && in_model.empty()) throw InvalidInput("give --model-endpoint or --model-file");
        LogStore store(in_store);
        std::shared_ptr<Scorer> scorer;
        if (!in_endpoint.empty()) {
          scorer = std::make_shared<RemoteScorer>(Endpoint::parse(in_endpoint));
          if (!in_model.empty()) scorer->replace_model(read_file(in_model));
        } else {
          scorer = std::make_shared<LocalScorer>(std::make_shared<const Model>(load_model_file(in_model)));
        }
        Pipeline pipeline(store, scorer);
        for (std::size_t i = 0; i < records.size(); i += chunk) {
          const auto n = std::min(chunk, records.size() - i);
          pipeline.score_batch(std::span(records).subspan(i, n));
        }
        pipeline.drain();
        scored = records.size() - pipeline.abandoned().size();
      }
      std::cout << "ingested " << records.size() << " records, " << scored << " scored\n";
    } else if (*synth) {
      std::ostringstream out;
      for (const auto& r : synth_corpus(n_benign, n_attack, synth_seed)) out << to_log_line(r) << "\n";
      if (synth_out == "-") std::cout << out.str();
      else write_file(synth_out, out.str());
    } else if (*tokenize) {
      Vocabulary vocab;
      if (!tok_model.empty() && !tok_vocab.empty()) throw InvalidInput("give --model-file or --vocab-file");
      if (!tok_model.empty()) vocab = load_model_file(tok_model).vocab;
      if (!tok_vocab.empty()) vocab = vocab_from_string(read_file(tok_vocab));
      const auto input = as_log ? flatten(parse_log(text)) : text;
      const auto seq = encode(vocab, input);
      std::cout << "[";
      for (std::size_t i = 0; i < seq.tokens.size(); ++i) std::cout << (i ? ", " : "") << seq.tokens[i];
      std::cout << "]\n";
    }
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (auto& c : msg) {
      if (c == '\n') c = ' ';
    }
    std::cerr << "reqsentry: error: " << msg << "\n";
    return 1;
  }
  return 0;
}

#include <pybind11/chrono.h>
#include <pybind11/functional.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "reqsentry/chunkwire.hpp"
#include "reqsentry/evalkit.hpp"
#include "reqsentry/logstore.hpp"
#include "reqsentry/service.hpp"

namespace py = pybind11;
using namespace reqsentry;

namespace {

py::object value_to_py(const Value& v) {
  return std::visit(
      [](const auto& x) -> py::object {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, std::monostate>) {
          return py::none();
        } else {
          return py::cast(x);
        }
      },
      v);
}

py::dict entry_to_py(const LogEntry& e) {
  py::dict d;
  d["entry_id"] = e.entry_id;
  d["raw"] = e.raw;
  d["model_label"] = e.model_label ? py::cast(*e.model_label) : py::none();
  d["snort_label"] = e.truth_label ? py::cast(*e.truth_label) : py::none();
  py::list fields;
  for (const auto& [k, v] : e.record.fields) fields.append(py::make_tuple(k, v ? py::cast(*v) : py::none()));
  d["fields"] = fields;
  return d;
}

std::vector<std::int64_t> ids_of(const std::vector<EntryPtr>& v) {
  std::vector<std::int64_t> out;
  for (const auto& e : v) out.push_back(e->entry_id);
  return out;
}

}  // namespace

PYBIND11_MODULE(_reqsentry, m) {
  m.doc() = "HTTP request anomaly detection core";

  py::register_exception<Error>(m, "Error");
  py::register_exception<InvalidInput>(m, "InvalidInput", m.attr("Error"));
  py::register_exception<InvalidConfig>(m, "InvalidConfig", m.attr("Error"));
  py::register_exception<ParseError>(m, "ParseError", m.attr("Error"));
  py::register_exception<NotFound>(m, "NotFound", m.attr("Error"));
  py::register_exception<IoError>(m, "IoError", m.attr("Error"));
  py::register_exception<TimeoutError>(m, "TimeoutError", m.attr("Error"));
  py::register_exception<RemoteError>(m, "RemoteError", m.attr("Error"));
  py::register_exception<FramingError>(m, "FramingError", m.attr("Error"));

  // tokenizer
  py::class_<Vocabulary>(m, "Vocabulary")
      .def(py::init<>())
      .def_property_readonly("size", &Vocabulary::size)
      .def("merges",
           [](const Vocabulary& v) {
             std::vector<std::tuple<TokenId, TokenId, TokenId>> out;
             for (const auto& r : v.merges()) out.emplace_back(r.left, r.right, r.result);
             return out;
           })
      .def("to_string", [](const Vocabulary& v) { return vocab_to_string(v); })
      .def_static("from_string", [](const std::string& s) { return vocab_from_string(s); })
      .def("__eq__", [](const Vocabulary& a, const Vocabulary& b) { return a == b; });
  m.attr("PAD") = kPadToken;
  m.def(
      "train_bbpe",
      [](const std::vector<std::string>& corpus, std::size_t target) { return train_bbpe(corpus, target); },
      py::arg("corpus"), py::arg("target_vocab_size"));
  m.def(
      "encode",
      [](const Vocabulary& v, const py::bytes& input, std::optional<std::size_t> max_len) {
        return encode(v, std::string(input), max_len).tokens;
      },
      py::arg("vocab"), py::arg("input"), py::arg("max_len") = std::nullopt);
  m.def("decode", [](const Vocabulary& v, const std::vector<TokenId>& tokens) {
    return py::bytes(decode(v, tokens));
  });

  // request codec
  m.def("parse_log", [](const std::string& line) { return to_log_line(parse_log(line)); },
        "Validates a log line and returns its canonical form.");
  m.def("flatten", [](const std::string& line) { return flatten(parse_log(line)); });
  m.def("render_fields", [](const std::string& line) { return render_fields(parse_log(line)); });
  m.def("log_fields", [](const std::string& line) {
    std::vector<std::pair<std::string, std::optional<std::string>>> out;
    for (const auto& f : parse_log(line).fields) out.push_back(f);
    return out;
  });

  // model
  py::class_<Model, std::shared_ptr<Model>>(m, "Model")
      .def_static("load", [](const std::filesystem::path& p) { return load_model_file(p); })
      .def_static("from_bytes", [](const py::bytes& b) { return deserialize_model(std::string(b)); })
      .def("save", [](const Model& self, const std::filesystem::path& p) { save_model_file(p, self); })
      .def("to_bytes", [](const Model& self) { return py::bytes(serialize_model(self)); })
      .def("predict", [](const Model& self, const std::string& canonical) { return self.predict(canonical); })
      .def("predict_log", [](const Model& self, const std::string& line) {
        return self.predict(flatten(parse_log(line)));
      })
      .def_property_readonly("vocab", [](const Model& self) { return self.vocab; })
      .def_property_readonly("config", [](const Model& self) {
        py::dict d;
        d["vocab_size"] = self.config.vocab_size;
        d["embed_dim"] = self.config.embed_dim;
        d["seq_len"] = self.config.seq_len;
        d["filters_per_width"] = self.config.filters_per_width;
        d["dropout_p"] = self.config.dropout_p;
        return d;
      })
      .def("__eq__", [](const Model& a, const Model& b) { return a == b; });

  // evaluation
  m.def(
      "synth_corpus",
      [](std::size_t benign, std::size_t attack, std::uint64_t seed) {
        std::vector<std::string> out;
        for (const auto& r : synth_corpus(benign, attack, seed)) out.push_back(to_log_line(r));
        return out;
      },
      py::arg("benign"), py::arg("attack"), py::arg("seed") = 0);
  m.def(
      "train_model",
      [](const std::vector<std::string>& lines, std::size_t vocab_budget, std::size_t embed_dim,
         std::size_t seq_len, std::size_t filters, std::size_t epochs, std::uint64_t seed) {
        std::vector<RequestRecord> recs;
        for (const auto& l : lines) recs.push_back(parse_log(l));
        ModelConfig cfg;
        cfg.embed_dim = embed_dim;
        cfg.seq_len = seq_len;
        cfg.filters_per_width = filters;
        cfg.epochs = epochs;
        cfg.seed = seed;
        py::gil_scoped_release release;
        return train_model(to_examples(recs), vocab_budget, cfg);
      },
      py::arg("lines"), py::arg("vocab_budget") = 600, py::arg("embed_dim") = 32,
      py::arg("seq_len") = 256, py::arg("filters") = 32, py::arg("epochs") = 15, py::arg("seed") = 0);
  m.def(
      "metrics",
      [](const std::vector<double>& probs, const std::vector<int>& labels, double threshold) {
        const auto cm = confusion(probs, labels, threshold);
        const auto mt = metrics(cm);
        py::dict d;
        d["tp"] = cm.tp;
        d["fp"] = cm.fp;
        d["tn"] = cm.tn;
        d["fn"] = cm.fn;
        d["accuracy"] = mt.accuracy;
        d["precision"] = mt.precision;
        d["recall"] = mt.recall;
        d["f1"] = mt.f1;
        return d;
      },
      py::arg("probs"), py::arg("labels"), py::arg("threshold") = kDefaultDecisionThreshold);

  // wire protocol
  py::enum_<FrameKind>(m, "FrameKind")
      .value("INFER_DATA", FrameKind::InferData)
      .value("TRAIN_DATA", FrameKind::TrainData)
      .value("MODEL_CHUNK", FrameKind::ModelChunk)
      .value("RESULT", FrameKind::Result)
      .value("ERROR", FrameKind::Error);
  m.def(
      "chunk",
      [](std::uint64_t task, FrameKind kind, const py::bytes& payload, std::size_t cap) {
        std::vector<py::bytes> out;
        for (const auto& f : chunk(task, kind, std::string(payload), cap)) out.emplace_back(encode_frame(f));
        return out;
      },
      py::arg("task"), py::arg("kind"), py::arg("payload"), py::arg("cap") = kPieceCap);
  m.def("reassemble", [](const std::vector<py::bytes>& frames) -> py::object {
    ReassemblyBuffer buf;
    FrameReader reader;
    for (const auto& b : frames) reader.feed(std::string(b));
    const auto now = std::chrono::steady_clock::now();
    while (auto f = reader.next()) {
      if (auto done = buf.add(*f, now)) return py::bytes(*done);
    }
    return py::none();
  });

  py::class_<ModelServer>(m, "ModelServer")
      .def(py::init([](const std::string& listen, std::shared_ptr<Model> model, std::size_t batch_size,
                       std::chrono::milliseconds batch_wait) {
             const auto policy = batch_size > 1 ? BatchPolicy::batch(batch_size, batch_wait)
                                                : BatchPolicy::immediate();
             return std::make_unique<ModelServer>(ServerConfig{Endpoint::parse(listen)}, policy,
                                                  std::shared_ptr<const Model>(std::move(model)));
           }),
           py::arg("listen") = "127.0.0.1:0", py::arg("model") = nullptr, py::arg("batch_size") = 1,
           py::arg("batch_wait") = std::chrono::milliseconds(5))
      .def("start", &ModelServer::start)
      .def("stop", &ModelServer::stop, py::call_guard<py::gil_scoped_release>())
      .def_property_readonly("endpoint", [](const ModelServer& s) { return s.endpoint().str(); });
  m.def(
      "infer_remote",
      [](const std::string& endpoint, const std::vector<std::string>& canonical,
         std::chrono::milliseconds timeout) {
        return infer_remote(Endpoint::parse(endpoint), canonical, timeout);
      },
      py::arg("endpoint"), py::arg("canonical"), py::arg("timeout") = std::chrono::milliseconds(10'000),
      py::call_guard<py::gil_scoped_release>());

  // log store
  m.def(
      "compile_filter",
      [](double threshold, const std::vector<std::pair<std::string, std::string>>& predicates,
         const std::string& connective, const std::string& sort, bool descending) {
        FilterSpec s;
        s.threshold = threshold;
        for (const auto& [f, p] : predicates) s.predicates.push_back({f, p});
        s.connective = connective == "OR" ? Connective::Or : Connective::And;
        s.sort_column = sort;
        s.dir = descending ? SortDir::Desc : SortDir::Asc;
        return compile_filter(s);
      },
      py::arg("threshold") = kDefaultThreshold,
      py::arg("predicates") = std::vector<std::pair<std::string, std::string>>{},
      py::arg("connective") = "AND", py::arg("sort") = std::string(kColModel),
      py::arg("descending") = false);

  py::class_<LogStore>(m, "LogStore")
      .def(py::init<>())
      .def(py::init<const std::filesystem::path&>())
      .def(
          "ingest",
          [](LogStore& s, const std::string& line, std::optional<double> label) {
            return s.ingest(parse_log(line), label);
          },
          py::arg("line"), py::arg("model_label") = std::nullopt)
      .def("set_score", &LogStore::set_score)
      .def("__len__", &LogStore::size)
      .def("entry", [](const LogStore& s, std::int64_t id) { return entry_to_py(*s.entry(id)); })
      .def("unscored", &LogStore::unscored)
      .def(
          "filter",
          [](const LogStore& s, double threshold,
             const std::vector<std::pair<std::string, std::string>>& predicates,
             const std::string& connective, const std::string& sort, bool descending) {
            FilterSpec spec;
            spec.threshold = threshold;
            for (const auto& [f, p] : predicates) spec.predicates.push_back({f, p});
            spec.connective = connective == "OR" ? Connective::Or : Connective::And;
            spec.sort_column = sort;
            spec.dir = descending ? SortDir::Desc : SortDir::Asc;
            return ids_of(s.filter(spec));
          },
          py::arg("threshold") = kDefaultThreshold,
          py::arg("predicates") = std::vector<std::pair<std::string, std::string>>{},
          py::arg("connective") = "AND", py::arg("sort") = std::string(kColModel),
          py::arg("descending") = false)
      .def("query",
           [](const LogStore& s, const std::string& text) {
             const auto t = s.raw_query(text);
             py::list rows;
             for (const auto& row : t.rows) {
               py::list r;
               for (const auto& v : row) r.append(value_to_py(v));
               rows.append(py::tuple(r));
             }
             py::dict d;
             d["columns"] = t.columns;
             d["rows"] = rows;
             d["error"] = t.is_error;
             return d;
           })
      .def(
          "aggregate",
          [](const LogStore& s, double threshold, const std::string& unit, std::int64_t from,
             std::int64_t to) {
            std::vector<std::pair<std::int64_t, std::size_t>> out;
            for (const auto& b : s.aggregate(threshold, parse_time_unit(unit), from, to)) {
              out.emplace_back(b.start_us, b.count);
            }
            return out;
          },
          py::arg("threshold"), py::arg("unit"), py::arg("from_us"), py::arg("to_us"));

  // service
  py::class_<Service>(m, "Service")
      .def(py::init([](const std::string& listen, std::optional<std::filesystem::path> store,
                       std::optional<std::string> model_endpoint,
                       std::optional<std::filesystem::path> model_file, double threshold) {
             ApiConfig c;
             c.listen = Endpoint::parse(listen);
             c.store_path = store;
             if (model_endpoint) c.model_endpoint = Endpoint::parse(*model_endpoint);
             c.model_file = model_file;
             c.threshold = threshold;
             return std::make_unique<Service>(c);
           }),
           py::arg("listen") = "127.0.0.1:0", py::arg("store") = std::nullopt,
           py::arg("model_endpoint") = std::nullopt, py::arg("model_file") = std::nullopt,
           py::arg("threshold") = kDefaultThreshold)
      .def("start", &Service::start)
      .def("stop", &Service::stop, py::call_guard<py::gil_scoped_release>())
      .def("drain", [](Service& s) { s.pipeline().drain(); }, py::call_guard<py::gil_scoped_release>())
      .def_property_readonly("port", &Service::port)
      .def("__len__", [](Service& s) { return s.store().size(); });
}

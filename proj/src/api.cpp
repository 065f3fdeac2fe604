#include <charconv>
#include <cmath>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "reqsentry/service.hpp"

namespace reqsentry {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

// Carries an HTTP status and a machine-readable code out of a handler.
struct ApiError {
  int status;
  std::string code;
  std::string reason;
};

[[noreturn]] void bad_request(const std::string& code, const std::string& reason) {
  throw ApiError{400, code, reason};
}

void send_json(httplib::Response& res, const json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(-1, ' ', false, json::error_handler_t::replace), "application/json");
}

void send_error(httplib::Response& res, const ApiError& e) {
  send_json(res, {{"error", {{"code", e.code}, {"reason", e.reason}}}}, e.status);
}

json to_json(const Value& v) {
  return std::visit(
      [](const auto& x) -> json {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, std::monostate>) {
          return nullptr;
        } else {
          return x;
        }
      },
      v);
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
json optional_json(const std::optional<int>& v) { return v ? json(*v) : json(nullptr); }

double parse_threshold(const std::string& text) {
  double v = 0;
  const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || p != text.data() + text.size() || !std::isfinite(v) || v < 0 || v > 1) {
    bad_request("invalid_threshold", "threshold must be a number in [0, 1], got '" + text + "'");
  }
  return v;
}

std::int64_t parse_int(const std::string& text, const std::string& what) {
  std::int64_t v = 0;
  const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || p != text.data() + text.size()) {
    bad_request("invalid_" + what, what + " must be an integer, got '" + text + "'");
  }
  return v;
}

std::string sort_column(std::string name) {
  for (auto& c : name) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  if (name == "ENTRY_ID" || name == "ENTRYID" || name == kColTimestamp) return std::string(kColTimestamp);
  if (name == "MODEL_LABEL" || name == "PREDICTED_LABEL") return std::string(kColModel);
  if (name == "SNORT_LABEL") return std::string(kColSnort);
  if (name == kColRaw) return std::string(kColRaw);
  bad_request("invalid_sort", "unknown sort column '" + name + "'");
}

SortDir sort_dir(std::string text) {
  for (auto& c : text) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (text == "asc") return SortDir::Asc;
  if (text == "desc") return SortDir::Desc;
  bad_request("invalid_dir", "dir must be asc or desc, got '" + text + "'");
}

json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  auto body = json::parse(req.body, nullptr, false);
  if (body.is_discarded()) bad_request("invalid_json", "request body is not valid JSON");
  return body;
}

std::string field_text(const ordered_json& v, const std::string& key) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number() || v.is_boolean()) return v.dump();
  bad_request("invalid_record", "field '" + key + "' must be a string, number, boolean or null");
}

RequestRecord record_from(const ordered_json& v) {
  if (v.is_string()) return parse_log(v.get<std::string>());
  if (!v.is_object()) bad_request("invalid_record", "record must be a log line string or an object");
  // Rebuild a log line so that reserved keys and duplicate checks stay in one place.
  std::string line = "{";
  bool first = true;
  for (const auto& [key, val] : v.items()) {
    if (!first) line += ", ";
    first = false;
    line += json_quote(key) + " : ";
    if (val.is_null()) {
      line += "null";
    } else if (key == kTimestampKey || key == kLabelKey) {
      if (val.is_number_integer()) line += val.dump();
      else if (val.is_string()) line += std::to_string(parse_int(val.get<std::string>(), key.substr(1)));
      else bad_request("invalid_record", key + " must be an integer");
    } else {
      line += json_quote(field_text(val, key));
    }
  }
  line += "}";
  return parse_log(line);
}

json entry_row(const LogEntry& e) {
  return {{"entry_id", e.entry_id},
          {"model_label", optional_json(e.model_label)},
          {"snort_label", optional_json(e.truth_label)}};
}

json entry_detail(const LogEntry& e) {
  json fields = json::array();
  for (const auto& [name, value] : e.record.fields) {
    fields.push_back({{"field", name}, {"value", value ? json(*value) : json(nullptr)}});
  }
  auto out = entry_row(e);
  out["raw"] = e.raw;
  out["fields"] = std::move(fields);
  return out;
}

json result_json(const ScoreResult& r) {
  return {{"entry_id", r.entry_id},
          {"model_label", r.model_label ? json(*r.model_label) : json(nullptr)},
          {"scored", r.model_label.has_value()}};
}

json info_json(const Scorer& scorer) {
  json out = {{"mode", scorer.mode()}};
  const auto info = scorer.info();
  out["loaded"] = info.has_value();
  if (info) {
    out["format"] = info->format;
    out["model_id"] = info->model_id;
    out["bytes"] = info->bytes;
    out["vocab_size"] = info->vocab_size;
    out["merges"] = info->merges;
    out["config"] = {{"embed_dim", info->embed_dim},
                     {"seq_len", info->seq_len},
                     {"filters_per_width", info->filters_per_width}};
  }
  return out;
}

}  // namespace

RequestRecord record_from_json(const std::string& json_text) {
  const auto v = ordered_json::parse(json_text, nullptr, false);
  if (v.is_discarded()) throw InvalidInput("record is not valid JSON");
  try {
    return record_from(v);
  } catch (const ApiError& e) {
    throw InvalidInput(e.reason);
  }
}

void ApiConfig::validate() const {
  if (!std::isfinite(threshold) || threshold < 0 || threshold > 1) {
    throw InvalidConfig("threshold must be in [0, 1]");
  }
  if (model_timeout.count() <= 0) throw InvalidConfig("model timeout must be positive");
  if (retry.attempts > 16) throw InvalidConfig("at most 16 retry attempts");
  if (retry.initial_backoff.count() < 0) throw InvalidConfig("negative retry backoff");
  if (static_dir && !std::filesystem::is_directory(*static_dir)) {
    throw InvalidConfig("static asset directory " + static_dir->string() + " does not exist");
  }
}

struct ApiServer::Impl {
  ApiConfig config;
  Pipeline& pipeline;
  httplib::Server server;
  std::thread thread;
  std::uint16_t port = 0;

  Impl(ApiConfig c, Pipeline& p) : config(std::move(c)), pipeline(p) {}

  template <typename F>
  httplib::Server::Handler wrap(F&& f) {
    return [f = std::forward<F>(f)](const httplib::Request& req, httplib::Response& res) {
      try {
        f(req, res);
      } catch (const ApiError& e) {
        send_error(res, e);
      } catch (const ParseError& e) {
        send_error(res, {400, "parse_error", e.what()});
      } catch (const DuplicateField& e) {
        send_error(res, {400, "duplicate_field", e.what()});
      } catch (const InvalidInput& e) {
        send_error(res, {400, "invalid_input", e.what()});
      } catch (const NotFound& e) {
        send_error(res, {404, "not_found", e.what()});
      } catch (const RemoteError& e) {
        send_error(res, {502, "remote_error", e.what()});
      } catch (const TimeoutError& e) {
        send_error(res, {504, "timeout", e.what()});
      } catch (const IoError& e) {
        send_error(res, {500, "store_error", e.what()});
      } catch (const std::exception& e) {
        send_error(res, {500, "internal", e.what()});
      }
    };
  }

  void logs(const httplib::Request& req, httplib::Response& res) {
    const auto body = req.method == "POST" ? parse_body(req) : json::object();
    if (!body.is_object()) bad_request("invalid_body", "body must be an object");
    FilterSpec spec;
    spec.threshold = config.threshold;
    auto param = [&](const char* name) -> std::optional<std::string> {
      if (req.has_param(name)) return req.get_param_value(name);
      if (body.contains(name)) {
        const auto& v = body[name];
        return v.is_string() ? v.get<std::string>() : v.dump();
      }
      return std::nullopt;
    };
    if (auto t = param("threshold")) spec.threshold = parse_threshold(*t);
    if (auto s = param("sort")) spec.sort_column = sort_column(*s);
    if (auto d = param("dir")) spec.dir = sort_dir(*d);
    if (auto c = param("connective")) {
      std::string up = *c;
      for (auto& ch : up) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
      if (up == "AND") spec.connective = Connective::And;
      else if (up == "OR") spec.connective = Connective::Or;
      else bad_request("invalid_connective", "connective must be AND or OR");
    }
    if (body.contains("predicates")) {
      const auto& ps = body["predicates"];
      if (!ps.is_array()) bad_request("invalid_predicates", "predicates must be an array");
      for (const auto& p : ps) {
        if (!p.is_object() || !p.contains("field") || !p.contains("pattern") ||
            !p["field"].is_string() || !p["pattern"].is_string()) {
          bad_request("invalid_predicates", "each predicate needs string field and pattern");
        }
        spec.predicates.push_back({p["field"].get<std::string>(), p["pattern"].get<std::string>()});
      }
    }
    const auto rows = pipeline.store().filter(spec);
    json out = {{"query", compile_filter(spec)},
                {"threshold", spec.threshold},
                {"sort", spec.sort_column},
                {"dir", spec.dir == SortDir::Asc ? "asc" : "desc"},
                {"count", rows.size()}};
    json list = json::array();
    for (const auto& e : rows) list.push_back(entry_row(*e));
    out["rows"] = std::move(list);
    send_json(res, out);
  }

  void entry(const httplib::Request& req, httplib::Response& res) {
    const auto id = parse_int(req.matches[1], "id");
    send_json(res, entry_detail(*pipeline.store().entry(id)));
  }

  void query(const httplib::Request& req, httplib::Response& res) {
    const auto body = parse_body(req);
    if (!body.is_object() || !body.contains("text") || !body["text"].is_string()) {
      bad_request("invalid_body", "body must be {\"text\": \"<query>\"}");
    }
    const auto text = body["text"].get<std::string>();
    const auto table = pipeline.store().raw_query(text);
    json rows = json::array();
    for (const auto& row : table.rows) {
      json r = json::array();
      for (const auto& v : row) r.push_back(to_json(v));
      rows.push_back(std::move(r));
    }
    send_json(res, {{"query", text}, {"error", table.is_error}, {"columns", table.columns},
                    {"rows", std::move(rows)}});
  }

  void stats(const httplib::Request& req, httplib::Response& res) {
    double threshold = config.threshold;
    if (req.has_param("threshold")) threshold = parse_threshold(req.get_param_value("threshold"));
    TimeUnit unit = TimeUnit::Hour;
    if (req.has_param("unit")) {
      try {
        unit = parse_time_unit(req.get_param_value("unit"));
      } catch (const InvalidInput& e) {
        bad_request("invalid_unit", e.what());
      }
    }
    const auto snap = pipeline.store().snapshot();
    const auto width = time_unit_micros(unit);
    std::int64_t from = 0, to = 0;
    if (!snap.empty()) {
      const auto first = snap.front()->entry_id;
      from = first - (((first % width) + width) % width);
      to = snap.back()->entry_id + 1;
    }
    if (req.has_param("from")) from = parse_int(req.get_param_value("from"), "from");
    if (req.has_param("to")) to = parse_int(req.get_param_value("to"), "to");
    const auto buckets = reqsentry::aggregate(snap, threshold, unit, from, to);
    json list = json::array();
    std::size_t total = 0;
    for (const auto& b : buckets) {
      list.push_back({{"start", b.start_us}, {"count", b.count}});
      total += b.count;
    }
    send_json(res, {{"unit", std::string(time_unit_name(unit))}, {"threshold", threshold},
                    {"from", from}, {"to", to}, {"total", total}, {"buckets", std::move(list)}});
  }

  void ingest(const httplib::Request& req, httplib::Response& res) {
    const auto body = ordered_json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.is_object()) {
      bad_request("invalid_json", "body must be {\"record\": ...} or {\"records\": [...]}");
    }
    auto parse_one = [](const ordered_json& v, const std::string& where) {
      try {
        return record_from(v);
      } catch (const ApiError& e) {
        throw ApiError{400, e.code, where + e.reason};
      } catch (const ParseError& e) {
        throw ApiError{400, "parse_error", where + e.what()};
      } catch (const DuplicateField& e) {
        throw ApiError{400, "duplicate_field", where + e.what()};
      }
    };
    if (body.contains("record")) {
      const auto record = parse_one(body["record"], "");
      send_json(res, result_json(pipeline.score(record)));
      return;
    }
    if (!body.contains("records") || !body["records"].is_array()) {
      bad_request("invalid_body", "body must be {\"record\": ...} or {\"records\": [...]}");
    }
    // All records are validated before any is stored.
    std::vector<RequestRecord> records;
    for (std::size_t i = 0; i < body["records"].size(); ++i) {
      records.push_back(parse_one(body["records"][i], "record " + std::to_string(i) + ": "));
    }
    json list = json::array();
    for (const auto& r : pipeline.score_batch(records)) list.push_back(result_json(r));
    send_json(res, {{"count", records.size()}, {"results", std::move(list)}});
  }

  void get_model(const httplib::Request&, httplib::Response& res) {
    send_json(res, info_json(pipeline.scorer()));
  }

  void post_model(const httplib::Request& req, httplib::Response& res) {
    std::string bytes;
    if (req.get_header_value("Content-Type") == "application/octet-stream") {
      bytes = req.body;
    } else {
      const auto body = parse_body(req);
      if (!body.is_object() || !body.contains("path") || !body["path"].is_string()) {
        bad_request("invalid_body", "send model bytes as application/octet-stream or {\"path\"}");
      }
      try {
        bytes = read_file(body["path"].get<std::string>());
      } catch (const IoError& e) {
        bad_request("invalid_path", e.what());
      }
    }
    try {
      pipeline.scorer().replace_model(bytes);
    } catch (const InvalidInput& e) {
      bad_request("bad_model", e.what());
    }
    send_json(res, info_json(pipeline.scorer()));
  }

  void routes() {
    server.Get("/api/logs", wrap([this](const auto& q, auto& r) { logs(q, r); }));
    server.Post("/api/logs", wrap([this](const auto& q, auto& r) { logs(q, r); }));
    server.Get(R"(/api/entry/(-?\d+))", wrap([this](const auto& q, auto& r) { entry(q, r); }));
    server.Post("/api/query", wrap([this](const auto& q, auto& r) { query(q, r); }));
    server.Get("/api/stats", wrap([this](const auto& q, auto& r) { stats(q, r); }));
    server.Post("/api/ingest", wrap([this](const auto& q, auto& r) { ingest(q, r); }));
    server.Get("/api/model", wrap([this](const auto& q, auto& r) { get_model(q, r); }));
    server.Post("/api/model", wrap([this](const auto& q, auto& r) { post_model(q, r); }));
    if (config.static_dir && !server.set_mount_point("/", config.static_dir->string())) {
      throw InvalidConfig("cannot serve " + config.static_dir->string());
    }
  }
};

ApiServer::ApiServer(ApiConfig config, Pipeline& pipeline)
    : impl_(std::make_unique<Impl>(std::move(config), pipeline)) {
  impl_->config.validate();
  impl_->routes();
}

ApiServer::~ApiServer() { stop(); }

void ApiServer::start() {
  auto& s = impl_->server;
  const auto& ep = impl_->config.listen;
  if (ep.port == 0) {
    const int p = s.bind_to_any_port(ep.host);
    if (p <= 0) throw IoError("cannot bind " + ep.host + ":0");
    impl_->port = static_cast<std::uint16_t>(p);
  } else {
    if (!s.bind_to_port(ep.host, ep.port)) throw IoError("cannot bind " + ep.str());
    impl_->port = ep.port;
  }
  impl_->thread = std::thread([&s] { s.listen_after_bind(); });
  s.wait_until_ready();
}

void ApiServer::stop() {
  if (!impl_->thread.joinable()) return;
  impl_->server.stop();
  impl_->thread.join();
}

std::uint16_t ApiServer::port() const { return impl_->port; }

Service::Service(ApiConfig config) : config_(std::move(config)) {
  config_.validate();
  store_ = config_.store_path ? std::make_unique<LogStore>(*config_.store_path)
                              : std::make_unique<LogStore>();
  std::shared_ptr<Scorer> scorer;
  if (config_.model_endpoint) {
    scorer = std::make_shared<RemoteScorer>(*config_.model_endpoint, config_.model_timeout);
  } else {
    std::shared_ptr<const Model> model;
    if (config_.model_file) model = std::make_shared<const Model>(load_model_file(*config_.model_file));
    scorer = std::make_shared<LocalScorer>(std::move(model));
  }
  pipeline_ = std::make_unique<Pipeline>(*store_, std::move(scorer), config_.retry);
  api_ = std::make_unique<ApiServer>(config_, *pipeline_);
}

Service::~Service() { stop(); }

void Service::start() {
  if (config_.model_endpoint && config_.model_file) {
    pipeline_->scorer().replace_model(read_file(*config_.model_file));
  }
  api_->start();
}

void Service::stop() {
  if (api_) api_->stop();
}

std::uint16_t Service::port() const { return api_->port(); }

}  // namespace reqsentry

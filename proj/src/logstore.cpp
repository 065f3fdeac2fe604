#include "reqsentry/logstore.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace reqsentry {
namespace {

constexpr std::string_view kHeader = "REQLOG v1";

std::string shortest(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

std::optional<double> parse_double(std::string_view s) {
  double v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::optional<std::int64_t> parse_int(std::string_view s) {
  std::int64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::int64_t now_us() {
  return std::chrono::duration_cast<std::chrono::microseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

void check_label(double v) {
  if (!(v >= 0.0 && v <= 1.0)) throw InvalidInput("model label must be in [0, 1]");
}

bool known_column(std::string_view c) {
  return c == kColTimestamp || c == kColRaw || c == kColModel || c == kColSnort;
}

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

// Strict weak order for sorting with NULL smallest; text compares bytewise.
int compare_column(const LogEntry& a, const LogEntry& b, std::string_view col) {
  auto cmp_opt = [](const auto& x, const auto& y) {
    if (!x && !y) return 0;
    if (!x) return -1;
    if (!y) return 1;
    return *x < *y ? -1 : (*y < *x ? 1 : 0);
  };
  if (col == kColTimestamp) return a.entry_id < b.entry_id ? -1 : (a.entry_id > b.entry_id ? 1 : 0);
  if (col == kColRaw) return a.raw.compare(b.raw) < 0 ? -1 : (a.raw == b.raw ? 0 : 1);
  if (col == kColModel) return cmp_opt(a.model_label, b.model_label);
  return cmp_opt(a.truth_label, b.truth_label);
}

}  // namespace

void FilterSpec::validate() const {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw InvalidInput("threshold must be in [0, 1]");
  if (!known_column(sort_column)) throw InvalidInput("unknown sort column '" + sort_column + "'");
  for (const auto& p : predicates) {
    if (p.field.empty()) throw InvalidInput("predicate with an empty field name");
  }
}

std::string predicate_like_pattern(const FieldPredicate& p) {
  auto inner = [](std::string_view s) {
    const auto q = json_quote(s);
    return q.substr(1, q.size() - 2);
  };
  return "%" + inner(p.field) + "\" : \"" + inner(p.pattern) + "\"%";
}

bool like_match(std::string_view text, std::string_view pattern) {
  std::size_t t = 0, p = 0;
  std::size_t star = std::string_view::npos, mark = 0;
  while (t < text.size()) {
    if (p < pattern.size() && pattern[p] == '%') {
      star = p++;
      mark = t;
    } else if (p < pattern.size() && pattern[p] == text[t]) {
      ++p;
      ++t;
    } else if (star != std::string_view::npos) {
      p = star + 1;
      t = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '%') ++p;
  return p == pattern.size();
}

std::string format_threshold(double threshold) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", threshold);
  if (parse_double(buf) == threshold) return buf;
  return shortest(threshold);
}

std::string compile_filter(const FilterSpec& spec) {
  spec.validate();
  std::string q = "SELECT LOG_TIMESTAMP, RAW_REQUEST, MODEL_LABEL, SNORT_LABEL FROM ";
  q += kLogTable;
  q += " WHERE MODEL_LABEL > " + format_threshold(spec.threshold);
  if (!spec.predicates.empty()) {
    const bool group = spec.connective == Connective::Or && spec.predicates.size() > 1;
    q += group ? " AND (" : " AND ";
    for (std::size_t i = 0; i < spec.predicates.size(); ++i) {
      if (i > 0) q += spec.connective == Connective::And ? " AND " : " OR ";
      std::string lit;
      for (const char c : predicate_like_pattern(spec.predicates[i])) {
        lit += c;
        if (c == '\'') lit += '\'';
      }
      q += "RAW_REQUEST LIKE '" + lit + "'";
    }
    if (group) q += ")";
  }
  q += " ORDER BY " + spec.sort_column;
  if (spec.dir == SortDir::Desc) q += " DESC";
  return q;
}

Table Table::error(std::string_view fragment, std::string_view query) {
  Table t;
  t.columns = {"item", "value"};
  t.rows.push_back({std::string("problem"), std::string(fragment)});
  t.rows.push_back({std::string("query"), std::string(query)});
  t.is_error = true;
  return t;
}

TimeUnit parse_time_unit(std::string_view text) {
  if (text == "day") return TimeUnit::Day;
  if (text == "hour") return TimeUnit::Hour;
  if (text == "minute") return TimeUnit::Minute;
  throw InvalidInput("unit must be day, hour or minute, not '" + std::string(text) + "'");
}

std::string_view time_unit_name(TimeUnit unit) {
  switch (unit) {
    case TimeUnit::Day: return "day";
    case TimeUnit::Hour: return "hour";
    case TimeUnit::Minute: return "minute";
  }
  return "?";
}

std::int64_t time_unit_micros(TimeUnit unit) {
  switch (unit) {
    case TimeUnit::Day: return 86'400'000'000LL;
    case TimeUnit::Hour: return 3'600'000'000LL;
    case TimeUnit::Minute: return 60'000'000LL;
  }
  return 1;
}

std::vector<TimeBucket> aggregate(std::span<const EntryPtr> entries, double threshold,
                                  TimeUnit unit, std::int64_t from_us, std::int64_t to_us) {
  if (to_us < from_us) throw InvalidInput("time range ends before it starts");
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw InvalidInput("threshold must be in [0, 1]");
  const auto width = time_unit_micros(unit);
  std::vector<TimeBucket> out;
  if (to_us == from_us) return out;
  const auto first = floor_div(from_us, width);
  const auto last = floor_div(to_us - 1, width);
  if (last - first >= 1'000'000) throw InvalidInput("time range spans more than 1,000,000 buckets");
  out.reserve(static_cast<std::size_t>(last - first + 1));
  for (auto b = first; b <= last; ++b) out.push_back({b * width, 0});
  for (const auto& e : entries) {
    if (e->entry_id < from_us || e->entry_id >= to_us) continue;
    if (!e->model_label || !(*e->model_label > threshold)) continue;
    ++out[static_cast<std::size_t>(floor_div(e->entry_id, width) - first)].count;
  }
  return out;
}

std::vector<EntryPtr> filter_entries(std::span<const EntryPtr> entries, const FilterSpec& spec) {
  spec.validate();
  std::vector<std::string> patterns;
  for (const auto& p : spec.predicates) patterns.push_back(predicate_like_pattern(p));
  std::vector<EntryPtr> out;
  for (const auto& e : entries) {
    if (!e->model_label || !(*e->model_label > spec.threshold)) continue;
    if (!patterns.empty()) {
      const bool all = spec.connective == Connective::And;
      bool keep = all;
      for (const auto& pat : patterns) {
        const bool m = like_match(e->raw, pat);
        if (all && !m) {
          keep = false;
          break;
        }
        if (!all && m) {
          keep = true;
          break;
        }
      }
      if (!keep) continue;
    }
    out.push_back(e);
  }
  std::stable_sort(out.begin(), out.end(), [&](const EntryPtr& a, const EntryPtr& b) {
    const int c = compare_column(*a, *b, spec.sort_column);
    return spec.dir == SortDir::Asc ? c < 0 : c > 0;
  });
  return out;
}

LogStore::LogStore() = default;

LogStore::LogStore(const std::filesystem::path& path) : path_(path) { load(); }

LogStore::~LogStore() {
  if (fd_ >= 0) ::close(fd_);
}

void LogStore::load() {
  std::string data;
  if (std::filesystem::exists(*path_)) {
    std::ifstream in(*path_, std::ios::binary);
    if (!in) throw IoError("cannot read store " + path_->string());
    std::ostringstream ss;
    ss << in.rdbuf();
    data = ss.str();
  }
  if (!data.empty()) {
    // A crash can leave a partial last line; it was never acknowledged.
    const auto last_nl = data.rfind('\n');
    const std::size_t keep = last_nl == std::string::npos ? 0 : last_nl + 1;
    if (keep < data.size()) {
      std::filesystem::resize_file(*path_, keep);
      data.resize(keep);
    }
  }

  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < data.size()) {
    const auto nl = data.find('\n', pos);
    const std::string_view line(data.data() + pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (line_no == 1) {
      if (line != kHeader) throw ParseError("store header is not '" + std::string(kHeader) + "'", 1);
      continue;
    }
    auto bad = [&](const std::string& why) { return ParseError("store line: " + why, line_no); };
    auto next_field = [&](std::string_view& rest) {
      const auto sp = rest.find(' ');
      if (sp == std::string_view::npos) throw bad("too few fields");
      const auto f = rest.substr(0, sp);
      rest.remove_prefix(sp + 1);
      return f;
    };
    std::string_view rest = line;
    const auto tag = next_field(rest);
    if (tag == "E") {
      auto e = std::make_shared<LogEntry>();
      const auto id = parse_int(next_field(rest));
      if (!id) throw bad("bad entry id");
      e->entry_id = *id;
      const auto ml = next_field(rest);
      if (ml != "-") {
        e->model_label = parse_double(ml);
        if (!e->model_label) throw bad("bad model label");
      }
      const auto tl = next_field(rest);
      if (tl != "-") {
        const auto v = parse_int(tl);
        if (!v || (*v != 0 && *v != 1)) throw bad("bad truth label");
        e->truth_label = static_cast<int>(*v);
      }
      try {
        e->record = parse_log(rest);
      } catch (const Error& err) {
        throw bad(std::string("bad record: ") + err.what());
      }
      e->raw = render_fields(e->record);
      if (e->entry_id <= last_id_) throw bad("entry ids are not increasing");
      last_id_ = e->entry_id;
      entries_.push_back(std::move(e));
    } else if (tag == "S") {
      const auto id = parse_int(next_field(rest));
      const auto ml = parse_double(rest);
      if (!id || !ml) throw bad("bad score record");
      const auto i = index_of(*id);
      auto e = std::make_shared<LogEntry>(*entries_[i]);
      e->model_label = *ml;
      entries_[i] = std::move(e);
    } else {
      throw bad("unknown record tag '" + std::string(tag) + "'");
    }
  }

  fd_ = ::open(path_->c_str(), O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
  if (fd_ < 0) throw IoError("cannot open store " + path_->string() + ": " + std::strerror(errno));
  if (line_no == 0) append_line(std::string(kHeader));
}

void LogStore::append_line(const std::string& line) {
  if (fd_ < 0) return;
  std::string out = line + '\n';
  std::size_t done = 0;
  while (done < out.size()) {
    const auto n = ::write(fd_, out.data() + done, out.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw IoError(std::string("store write failed: ") + std::strerror(errno));
    }
    done += static_cast<std::size_t>(n);
  }
  if (::fdatasync(fd_) != 0) throw IoError(std::string("store sync failed: ") + std::strerror(errno));
}

std::size_t LogStore::index_of(std::int64_t entry_id) const {
  const auto it = std::lower_bound(entries_.begin(), entries_.end(), entry_id,
                                   [](const EntryPtr& e, std::int64_t id) { return e->entry_id < id; });
  if (it == entries_.end() || (*it)->entry_id != entry_id) {
    throw NotFound("no entry with id " + std::to_string(entry_id));
  }
  return static_cast<std::size_t>(it - entries_.begin());
}

std::int64_t LogStore::ingest(const RequestRecord& record, std::optional<double> model_label,
                              std::optional<int> truth_label) {
  if (model_label) check_label(*model_label);
  if (!truth_label) truth_label = record.truth_label;
  if (truth_label && *truth_label != 0 && *truth_label != 1) {
    throw InvalidInput("truth label must be 0 or 1");
  }
  std::lock_guard writer(write_mu_);
  auto e = std::make_shared<LogEntry>();
  e->entry_id = std::max(record.timestamp_us.value_or(now_us()), last_id_ + 1);
  e->record = record;
  e->raw = render_fields(record);
  e->model_label = model_label;
  e->truth_label = truth_label;

  append_line("E " + std::to_string(e->entry_id) + " " +
              (model_label ? shortest(*model_label) : std::string("-")) + " " +
              (truth_label ? std::to_string(*truth_label) : std::string("-")) + " " +
              to_log_line(record));
  std::unique_lock lock(mu_);
  last_id_ = e->entry_id;
  entries_.push_back(e);
  return e->entry_id;
}

void LogStore::set_score(std::int64_t entry_id, double model_label) {
  check_label(model_label);
  std::lock_guard writer(write_mu_);
  EntryPtr current;
  std::size_t i = 0;
  {
    std::shared_lock lock(mu_);
    i = index_of(entry_id);
    current = entries_[i];
  }
  if (current->model_label) {
    throw InvalidInput("entry " + std::to_string(entry_id) + " is already scored");
  }
  append_line("S " + std::to_string(entry_id) + " " + shortest(model_label));
  auto e = std::make_shared<LogEntry>(*current);
  e->model_label = model_label;
  std::unique_lock lock(mu_);
  entries_[i] = std::move(e);
}

std::vector<EntryPtr> LogStore::snapshot() const {
  std::shared_lock lock(mu_);
  return entries_;
}

std::size_t LogStore::size() const {
  std::shared_lock lock(mu_);
  return entries_.size();
}

std::vector<std::int64_t> LogStore::unscored() const {
  std::shared_lock lock(mu_);
  std::vector<std::int64_t> out;
  for (const auto& e : entries_) {
    if (!e->model_label) out.push_back(e->entry_id);
  }
  return out;
}

EntryPtr LogStore::entry(std::int64_t entry_id) const {
  std::shared_lock lock(mu_);
  return entries_[index_of(entry_id)];
}

std::vector<EntryPtr> LogStore::filter(const FilterSpec& spec) const {
  const auto snap = snapshot();
  return filter_entries(snap, spec);
}

Table LogStore::raw_query(std::string_view text) const {
  const auto snap = snapshot();
  return run_query(snap, text);
}

std::vector<TimeBucket> LogStore::aggregate(double threshold, TimeUnit unit, std::int64_t from_us,
                                            std::int64_t to_us) const {
  const auto snap = snapshot();
  return reqsentry::aggregate(snap, threshold, unit, from_us, to_us);
}

}  // namespace reqsentry

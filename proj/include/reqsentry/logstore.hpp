#pragma once

// Append-only store of scored request logs, with the Overview filter, a small
// SQL dialect for ad-hoc search, entry lookup and time-bucketed counts.
//
// One table, HTTPLOG_REQUEST_LABELED, with columns
//   LOG_TIMESTAMP  integer   entry id, microseconds since the epoch (UTC)
//   RAW_REQUEST    text      render_fields() of the record
//   MODEL_LABEL    real      predicted anomaly probability, NULL while unscored
//   SNORT_LABEL    integer   ground truth 0/1, NULL when unknown
//
// SQL subset: SELECT * | col, ... FROM HTTPLOG_REQUEST_LABELED
//   [WHERE cond] [ORDER BY col [ASC|DESC]] [LIMIT n]
// cond combines `operand op operand` (op one of > < = LIKE) with AND, OR and
// parentheses; operands are columns, numbers or 'quoted strings'. Keywords and
// column names are case-insensitive. Comparisons involving NULL are false.
// ORDER BY is stable over entry-id order, with NULL smallest. LIKE knows only
// the % wildcard.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "reqsentry/errors.hpp"
#include "reqsentry/request_codec.hpp"

namespace reqsentry {

inline constexpr std::string_view kLogTable = "HTTPLOG_REQUEST_LABELED";
inline constexpr std::string_view kColTimestamp = "LOG_TIMESTAMP";
inline constexpr std::string_view kColRaw = "RAW_REQUEST";
inline constexpr std::string_view kColModel = "MODEL_LABEL";
inline constexpr std::string_view kColSnort = "SNORT_LABEL";
inline constexpr double kDefaultThreshold = 0.7;

struct LogEntry {
  std::int64_t entry_id = 0;
  RequestRecord record;
  std::string raw;
  std::optional<double> model_label;
  std::optional<int> truth_label;
};

using EntryPtr = std::shared_ptr<const LogEntry>;

enum class Connective { And, Or };
enum class SortDir { Asc, Desc };

struct FieldPredicate {
  std::string field;
  std::string pattern;  // % matches any run of characters
};

struct FilterSpec {
  double threshold = kDefaultThreshold;
  std::vector<FieldPredicate> predicates;
  Connective connective = Connective::And;
  std::string sort_column = std::string(kColModel);
  SortDir dir = SortDir::Asc;

  void validate() const;
};

// LIKE pattern for one predicate: matches raw text containing
// `field" : "pattern"` with the field and literal parts JSON-escaped.
std::string predicate_like_pattern(const FieldPredicate& predicate);

bool like_match(std::string_view text, std::string_view pattern);

// Threshold text as displayed: two decimals when that is exact, otherwise the
// shortest round-tripping form.
std::string format_threshold(double threshold);

std::string compile_filter(const FilterSpec& spec);

using Value = std::variant<std::monostate, std::int64_t, double, std::string>;

struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<Value>> rows;
  bool is_error = false;

  // Columns "item", "value"; rows ("problem", fragment) and ("query", text).
  static Table error(std::string_view fragment, std::string_view query);
};

// Runs a query over entries given in entry-id order.
Table run_query(std::span<const EntryPtr> entries, std::string_view text);

enum class TimeUnit { Day, Hour, Minute };

TimeUnit parse_time_unit(std::string_view text);
std::string_view time_unit_name(TimeUnit unit);
std::int64_t time_unit_micros(TimeUnit unit);

struct TimeBucket {
  std::int64_t start_us = 0;
  std::size_t count = 0;

  friend bool operator==(const TimeBucket&, const TimeBucket&) = default;
};

// Entries with from_us <= entry_id < to_us and model_label > threshold,
// counted per UTC-aligned bucket; empty buckets are included.
std::vector<TimeBucket> aggregate(std::span<const EntryPtr> entries, double threshold,
                                  TimeUnit unit, std::int64_t from_us, std::int64_t to_us);

std::vector<EntryPtr> filter_entries(std::span<const EntryPtr> entries, const FilterSpec& spec);

// Backed by a line-oriented file when given a path, otherwise memory only.
// One writer at a time; readers work on snapshots.
//
// File layout: a "REQLOG v1" header line, then
//   E <entry_id> <model_label|-> <truth_label|-> <log line>
//   S <entry_id> <model_label>
// where the log line is to_log_line(record) and S records the late score of a
// previously unscored entry.
class LogStore {
 public:
  LogStore();
  explicit LogStore(const std::filesystem::path& path);
  ~LogStore();
  LogStore(const LogStore&) = delete;
  LogStore& operator=(const LogStore&) = delete;

  // entry_id = max(record timestamp or now, previous id + 1). truth_label
  // defaults to the record's own label. Durable before returning.
  std::int64_t ingest(const RequestRecord& record, std::optional<double> model_label,
                      std::optional<int> truth_label = std::nullopt);

  // Records a score for an entry ingested without one.
  void set_score(std::int64_t entry_id, double model_label);

  std::vector<EntryPtr> snapshot() const;
  std::size_t size() const;
  std::vector<std::int64_t> unscored() const;

  EntryPtr entry(std::int64_t entry_id) const;
  std::vector<EntryPtr> filter(const FilterSpec& spec) const;
  Table raw_query(std::string_view text) const;
  std::vector<TimeBucket> aggregate(double threshold, TimeUnit unit, std::int64_t from_us,
                                    std::int64_t to_us) const;

  const std::optional<std::filesystem::path>& path() const { return path_; }

 private:
  void load();
  void append_line(const std::string& line);
  std::size_t index_of(std::int64_t entry_id) const;

  std::optional<std::filesystem::path> path_;
  int fd_ = -1;
  std::mutex write_mu_;
  mutable std::shared_mutex mu_;
  std::vector<EntryPtr> entries_;
  std::int64_t last_id_ = 0;
};

}  // namespace reqsentry

#pragma once

// HTTP request log records and their canonical flattened form.
//
// A log line is one flat key/value object in the shape the web tier writes:
//
//   { "getMethod" : "GET", "getAuthType" : null, "header: host" : "x.org", }
//
// Values are strings or null (numbers and booleans are kept as their literal
// text). A trailing comma before the closing brace is accepted. Two reserved
// keys carry metadata rather than request fields: "@timestamp" (microseconds
// since the epoch, UTC) and "@label" (ground truth, 0 benign or 1 anomalous).

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace reqsentry {

using FieldValue = std::optional<std::string>;

struct RequestRecord {
  std::vector<std::pair<std::string, FieldValue>> fields;
  std::optional<std::int64_t> timestamp_us;
  std::optional<int> truth_label;

  const FieldValue* find(std::string_view name) const;
  // Set-equality on fields plus equal metadata; field order is ignored.
  bool same_as(const RequestRecord& other) const;
};

inline constexpr std::string_view kTimestampKey = "@timestamp";
inline constexpr std::string_view kLabelKey = "@label";
inline constexpr std::string_view kProtocolPlaceholder = "HTTP/1.1";

// Throws ParseError (byte offset) or DuplicateField.
RequestRecord parse_log(std::string_view line);

// getMethod, getRequestURL, "HTTP/1.1", then every other field's value in
// ascending field-name order, joined by single spaces. Absent or null values
// render as "null".
std::string flatten(const RequestRecord& record);

// Source-order rendering `{"name" : "value", "other" : null}` used as the
// searchable raw request text.
std::string render_fields(const RequestRecord& record);

// Inverse of parse_log, including the reserved metadata keys.
std::string to_log_line(const RequestRecord& record);

std::string json_quote(std::string_view text);

}  // namespace reqsentry

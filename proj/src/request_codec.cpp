#include "reqsentry/request_codec.hpp"

#include <algorithm>
#include <charconv>
#include <unordered_set>

#include "reqsentry/errors.hpp"

namespace reqsentry {
namespace {

class FlatObjectParser {
 public:
  explicit FlatObjectParser(std::string_view text) : s_(text) {}

  RequestRecord parse() {
    RequestRecord rec;
    std::unordered_set<std::string> names;
    skip_ws();
    expect('{');
    skip_ws();
    if (peek() == '}') {
      ++pos_;
    } else {
      while (true) {
        skip_ws();
        if (peek() == '}') {  // trailing comma
          ++pos_;
          break;
        }
        const std::size_t key_at = pos_;
        std::string key = parse_string();
        skip_ws();
        expect(':');
        skip_ws();
        const std::size_t value_at = pos_;
        FieldValue value = parse_value();
        if (!names.insert(key).second) {
          throw DuplicateField("duplicate field \"" + key + "\" at byte " + std::to_string(key_at));
        }
        if (key == kTimestampKey) {
          rec.timestamp_us = to_integer(value, value_at);
        } else if (key == kLabelKey) {
          const auto label = to_integer(value, value_at);
          if (label != 0 && label != 1) fail("label must be 0 or 1", value_at);
          rec.truth_label = static_cast<int>(label);
        } else {
          rec.fields.emplace_back(std::move(key), std::move(value));
        }
        skip_ws();
        const char c = peek();
        ++pos_;
        if (c == ',') continue;
        if (c == '}') break;
        fail("expected ',' or '}'", pos_ - 1);
      }
    }
    skip_ws();
    if (pos_ != s_.size()) fail("trailing characters after object", pos_);
    return rec;
  }

 private:
  [[noreturn]] void fail(const std::string& what, std::size_t at) const {
    throw ParseError(what + " at byte " + std::to_string(at), at);
  }

  char peek() const {
    if (pos_ >= s_.size()) fail("unexpected end of input", pos_);
    return s_[pos_];
  }

  void expect(char c) {
    if (peek() != c) fail(std::string("expected '") + c + "'", pos_);
    ++pos_;
  }

  void skip_ws() {
    while (pos_ < s_.size() &&
           (s_[pos_] == ' ' || s_[pos_] == '\t' || s_[pos_] == '\n' || s_[pos_] == '\r')) {
      ++pos_;
    }
  }

  std::int64_t to_integer(const FieldValue& v, std::size_t at) const {
    if (!v) fail("metadata value must not be null", at);
    std::int64_t out = 0;
    const char* first = v->data();
    const char* last = first + v->size();
    auto [p, ec] = std::from_chars(first, last, out);
    if (ec != std::errc() || p != last) fail("metadata value is not an integer", at);
    return out;
  }

  FieldValue parse_value() {
    const char c = peek();
    if (c == '"') return parse_string();
    const std::size_t start = pos_;
    while (pos_ < s_.size()) {
      const char d = s_[pos_];
      if (d == ',' || d == '}' || d == ' ' || d == '\t' || d == '\n' || d == '\r') break;
      ++pos_;
    }
    const std::string_view word = s_.substr(start, pos_ - start);
    if (word == "null") return std::nullopt;
    if (word == "true" || word == "false") return std::string(word);
    if (!word.empty()) {
      double ignored = 0;
      auto [p, ec] = std::from_chars(word.data(), word.data() + word.size(), ignored);
      if (ec == std::errc() && p == word.data() + word.size()) return std::string(word);
    }
    fail("invalid value", start);
  }

  unsigned parse_hex4() {
    if (pos_ + 4 > s_.size()) fail("truncated \\u escape", pos_);
    unsigned v = 0;
    for (int i = 0; i < 4; ++i) {
      const char c = s_[pos_++];
      v <<= 4;
      if (c >= '0' && c <= '9') v |= static_cast<unsigned>(c - '0');
      else if (c >= 'a' && c <= 'f') v |= static_cast<unsigned>(c - 'a' + 10);
      else if (c >= 'A' && c <= 'F') v |= static_cast<unsigned>(c - 'A' + 10);
      else fail("bad hex digit in \\u escape", pos_ - 1);
    }
    return v;
  }

  static void append_utf8(std::string& out, unsigned cp) {
    if (cp < 0x80) {
      out += static_cast<char>(cp);
    } else if (cp < 0x800) {
      out += static_cast<char>(0xC0 | (cp >> 6));
      out += static_cast<char>(0x80 | (cp & 0x3F));
    } else if (cp < 0x10000) {
      out += static_cast<char>(0xE0 | (cp >> 12));
      out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
      out += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
      out += static_cast<char>(0xF0 | (cp >> 18));
      out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
      out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
      out += static_cast<char>(0x80 | (cp & 0x3F));
    }
  }

  std::string parse_string() {
    expect('"');
    std::string out;
    while (true) {
      if (pos_ >= s_.size()) fail("unterminated string", pos_);
      const char c = s_[pos_++];
      if (c == '"') return out;
      if (c != '\\') {
        out += c;
        continue;
      }
      if (pos_ >= s_.size()) fail("unterminated escape", pos_);
      const char e = s_[pos_++];
      switch (e) {
        case '"': out += '"'; break;
        case '\\': out += '\\'; break;
        case '/': out += '/'; break;
        case 'b': out += '\b'; break;
        case 'f': out += '\f'; break;
        case 'n': out += '\n'; break;
        case 'r': out += '\r'; break;
        case 't': out += '\t'; break;
        case 'u': {
          unsigned cp = parse_hex4();
          if (cp >= 0xD800 && cp < 0xDC00 && pos_ + 6 <= s_.size() && s_[pos_] == '\\' &&
              s_[pos_ + 1] == 'u') {
            pos_ += 2;
            const unsigned lo = parse_hex4();
            if (lo >= 0xDC00 && lo < 0xE000) {
              cp = 0x10000 + ((cp - 0xD800) << 10) + (lo - 0xDC00);
            } else {
              append_utf8(out, cp);
              cp = lo;
            }
          }
          append_utf8(out, cp);
          break;
        }
        default:
          fail("invalid escape", pos_ - 1);
      }
    }
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

void append_value(std::string& out, const FieldValue& v) {
  if (v) {
    out += *v;
  } else {
    out += "null";
  }
}

}  // namespace

const FieldValue* RequestRecord::find(std::string_view name) const {
  for (const auto& [k, v] : fields) {
    if (k == name) return &v;
  }
  return nullptr;
}

bool RequestRecord::same_as(const RequestRecord& other) const {
  if (fields.size() != other.fields.size() || timestamp_us != other.timestamp_us ||
      truth_label != other.truth_label) {
    return false;
  }
  return std::all_of(fields.begin(), fields.end(), [&](const auto& kv) {
    const FieldValue* v = other.find(kv.first);
    return v != nullptr && *v == kv.second;
  });
}

RequestRecord parse_log(std::string_view line) { return FlatObjectParser(line).parse(); }

std::string flatten(const RequestRecord& record) {
  std::string out;
  const FieldValue* method = record.find("getMethod");
  const FieldValue* url = record.find("getRequestURL");
  append_value(out, method ? *method : std::nullopt);
  out += ' ';
  append_value(out, url ? *url : std::nullopt);
  out += ' ';
  out += kProtocolPlaceholder;

  std::vector<const std::pair<std::string, FieldValue>*> rest;
  for (const auto& kv : record.fields) {
    if (kv.first != "getMethod" && kv.first != "getRequestURL") rest.push_back(&kv);
  }
  std::sort(rest.begin(), rest.end(), [](auto* a, auto* b) { return a->first < b->first; });
  for (const auto* kv : rest) {
    out += ' ';
    append_value(out, kv->second);
  }
  return out;
}

std::string json_quote(std::string_view text) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(text.size() + 2);
  out += '"';
  for (const char c : text) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\t': out += "\\t"; break;
      default:
        if (static_cast<unsigned char>(c) < 0x20) {
          out += "\\u00";
          out += kHex[(c >> 4) & 0xF];
          out += kHex[c & 0xF];
        } else {
          out += c;
        }
    }
  }
  out += '"';
  return out;
}

std::string render_fields(const RequestRecord& record) {
  std::string out = "{";
  bool first = true;
  for (const auto& [k, v] : record.fields) {
    if (!first) out += ", ";
    first = false;
    out += json_quote(k);
    out += " : ";
    out += v ? json_quote(*v) : std::string("null");
  }
  out += '}';
  return out;
}

std::string to_log_line(const RequestRecord& record) {
  std::string out = render_fields(record);
  out.pop_back();
  const bool empty = record.fields.empty();
  std::string meta;
  if (record.timestamp_us) {
    meta += json_quote(kTimestampKey) + " : " + std::to_string(*record.timestamp_us);
  }
  if (record.truth_label) {
    if (!meta.empty()) meta += ", ";
    meta += json_quote(kLabelKey) + " : " + std::to_string(*record.truth_label);
  }
  if (!meta.empty()) out += (empty ? "" : ", ") + meta;
  out += '}';
  return out;
}

}  // namespace reqsentry

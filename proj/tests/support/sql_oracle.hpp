#pragma once

// Slow reference interpreter for the logstore SQL subset. It shares no code
// with the engine: the query text is re-scanned for every row, comparisons are
// done directly on the text, and LIKE goes through std::regex.

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "reqsentry/logstore.hpp"

namespace oracle {

using reqsentry::Value;

struct Result {
  std::vector<std::string> columns;
  std::vector<std::vector<Value>> rows;
  bool error = false;
};

class Scan {
 public:
  explicit Scan(const std::string& q) : q_(q) {}

  void ws() {
    while (p_ < q_.size() && std::isspace(static_cast<unsigned char>(q_[p_]))) ++p_;
  }
  bool eof() {
    ws();
    return p_ >= q_.size();
  }
  // Case-insensitive word match at a word boundary.
  bool word(const std::string& w) {
    ws();
    if (q_.size() - p_ < w.size()) return false;
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (std::toupper(static_cast<unsigned char>(q_[p_ + i])) != w[i]) return false;
    }
    const std::size_t end = p_ + w.size();
    if (end < q_.size() && (std::isalnum(static_cast<unsigned char>(q_[end])) || q_[end] == '_')) {
      return false;
    }
    p_ = end;
    return true;
  }
  bool sym(char c) {
    ws();
    if (p_ < q_.size() && q_[p_] == c) {
      ++p_;
      return true;
    }
    return false;
  }
  std::optional<std::string> ident() {
    ws();
    std::size_t e = p_;
    while (e < q_.size() && (std::isalnum(static_cast<unsigned char>(q_[e])) || q_[e] == '_')) ++e;
    if (e == p_ || std::isdigit(static_cast<unsigned char>(q_[p_]))) return std::nullopt;
    std::string s = q_.substr(p_, e - p_);
    for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    p_ = e;
    return s;
  }
  std::optional<std::string> str() {
    ws();
    if (p_ >= q_.size() || q_[p_] != '\'') return std::nullopt;
    std::string out;
    std::size_t i = p_ + 1;
    while (i < q_.size()) {
      if (q_[i] == '\'') {
        if (i + 1 < q_.size() && q_[i + 1] == '\'') {
          out += '\'';
          i += 2;
          continue;
        }
        p_ = i + 1;
        return out;
      }
      out += q_[i++];
    }
    return std::nullopt;
  }
  std::optional<Value> number() {
    ws();
    const char* b = q_.c_str() + p_;
    char* e = nullptr;
    errno = 0;
    const long long iv = std::strtoll(b, &e, 10);
    const char* ie = e;
    const double dv = std::strtod(b, &e);
    if (e == b) return std::nullopt;
    // Reject hex floats and the like that strtod would take.
    for (const char* c = b; c < e; ++c) {
      if (!(std::isdigit(static_cast<unsigned char>(*c)) || *c == '.' || *c == '-' || *c == '+' ||
            *c == 'e' || *c == 'E')) {
        return std::nullopt;
      }
    }
    p_ += static_cast<std::size_t>(e - b);
    if (ie == e && errno == 0) return Value(static_cast<std::int64_t>(iv));
    return Value(dv);
  }
  std::size_t pos() const { return p_; }
  void seek(std::size_t p) { p_ = p; }

 private:
  const std::string& q_;
  std::size_t p_ = 0;
};

inline Value column(const reqsentry::LogEntry& e, const std::string& name) {
  if (name == "LOG_TIMESTAMP") return e.entry_id;
  if (name == "RAW_REQUEST") return e.raw;
  if (name == "MODEL_LABEL") return e.model_label ? Value(*e.model_label) : Value();
  return e.truth_label ? Value(static_cast<std::int64_t>(*e.truth_label)) : Value();
}

inline bool is_column(const std::string& n) {
  return n == "LOG_TIMESTAMP" || n == "RAW_REQUEST" || n == "MODEL_LABEL" || n == "SNORT_LABEL";
}

inline bool like(const std::string& text, const std::string& pat) {
  std::string re;
  for (const char c : pat) {
    if (c == '%') {
      re += "[\\s\\S]*";
    } else if (std::string("\\^$.|?*+()[]{}").find(c) != std::string::npos) {
      re += '\\';
      re += c;
    } else {
      re += c;
    }
  }
  return std::regex_match(text, std::regex(re));
}

struct Bad {};

// Value of one operand for the current row; nullopt for NULL.
inline std::optional<Value> operand(Scan& s, const reqsentry::LogEntry& row, bool& is_text) {
  if (auto str = s.str()) {
    is_text = true;
    return Value(*str);
  }
  const auto at = s.pos();
  if (auto id = s.ident()) {
    if (!is_column(*id)) throw Bad{};
    is_text = *id == "RAW_REQUEST";
    const auto v = column(row, *id);
    if (std::holds_alternative<std::monostate>(v)) return std::nullopt;
    return v;
  }
  s.seek(at);
  if (auto n = s.number()) {
    is_text = false;
    return n;
  }
  throw Bad{};
}

inline double as_double(const Value& v) {
  if (const auto* i = std::get_if<std::int64_t>(&v)) return static_cast<double>(*i);
  return std::get<double>(v);
}

inline bool cond(Scan& s, const reqsentry::LogEntry& row);

inline bool atom(Scan& s, const reqsentry::LogEntry& row) {
  if (s.sym('(')) {
    const bool v = cond(s, row);
    if (!s.sym(')')) throw Bad{};
    return v;
  }
  bool lt = false, rt = false;
  const auto l = operand(s, row, lt);
  enum { GT, LT, EQ, LK } op;
  if (s.sym('>')) {
    op = GT;
  } else if (s.sym('<')) {
    op = LT;
  } else if (s.sym('=')) {
    op = EQ;
  } else if (s.word("LIKE")) {
    op = LK;
  } else {
    throw Bad{};
  }
  const auto r = operand(s, row, rt);
  if (op == LK && !(lt && rt)) throw Bad{};
  if ((op == GT || op == LT) && (lt || rt)) throw Bad{};
  if (op == EQ && lt != rt) throw Bad{};
  if (!l || !r) return false;
  if (op == LK) return like(std::get<std::string>(*l), std::get<std::string>(*r));
  if (lt) return op == EQ && std::get<std::string>(*l) == std::get<std::string>(*r);
  const auto* li = std::get_if<std::int64_t>(&*l);
  const auto* ri = std::get_if<std::int64_t>(&*r);
  if (li && ri) {
    if (op == GT) return *li > *ri;
    if (op == LT) return *li < *ri;
    return *li == *ri;
  }
  const double a = as_double(*l), b = as_double(*r);
  if (op == GT) return a > b;
  if (op == LT) return a < b;
  return a == b;
}

// No short-circuit: every atom is scanned so the cursor ends in the right place.
inline bool conj(Scan& s, const reqsentry::LogEntry& row) {
  bool v = atom(s, row);
  while (s.word("AND")) v = atom(s, row) && v;
  return v;
}

inline bool cond(Scan& s, const reqsentry::LogEntry& row) {
  bool v = conj(s, row);
  while (s.word("OR")) v = conj(s, row) || v;
  return v;
}

inline Result run(const std::vector<reqsentry::EntryPtr>& entries, const std::string& q) {
  Result out;
  try {
    Scan s(q);
    if (!s.word("SELECT")) throw Bad{};
    std::vector<std::string> cols;
    if (s.sym('*')) {
      cols = {"LOG_TIMESTAMP", "RAW_REQUEST", "MODEL_LABEL", "SNORT_LABEL"};
    } else {
      do {
        auto id = s.ident();
        if (!id || !is_column(*id)) throw Bad{};
        cols.push_back(*id);
      } while (s.sym(','));
    }
    if (!s.word("FROM")) throw Bad{};
    const auto table = s.ident();
    if (!table || *table != "HTTPLOG_REQUEST_LABELED") throw Bad{};
    const auto where_at = s.pos();
    const bool has_where = s.word("WHERE");
    std::size_t cond_at = s.pos();

    // Evaluate against every row, re-scanning each time; a dummy row is used
    // first to find where the condition ends.
    std::size_t after = cond_at;
    if (has_where) {
      reqsentry::LogEntry dummy;
      Scan probe(q);
      probe.seek(cond_at);
      cond(probe, dummy);
      after = probe.pos();
    } else {
      after = where_at;
    }
    std::vector<const reqsentry::LogEntry*> rows;
    for (const auto& e : entries) {
      if (has_where) {
        Scan each(q);
        each.seek(cond_at);
        if (!cond(each, *e)) continue;
      }
      rows.push_back(e.get());
    }
    s.seek(after);
    std::optional<std::string> order;
    bool desc = false;
    if (s.word("ORDER")) {
      if (!s.word("BY")) throw Bad{};
      order = s.ident();
      if (!order || !is_column(*order)) throw Bad{};
      if (s.word("DESC")) {
        desc = true;
      } else {
        s.word("ASC");
      }
    }
    std::optional<long long> limit;
    if (s.word("LIMIT")) {
      const auto n = s.number();
      if (!n || !std::holds_alternative<std::int64_t>(*n) || std::get<std::int64_t>(*n) < 0) throw Bad{};
      limit = std::get<std::int64_t>(*n);
    }
    s.sym(';');
    if (!s.eof()) throw Bad{};

    if (order) {
      // Insertion sort: stable, quadratic, obviously correct.
      auto less = [&](const reqsentry::LogEntry* a, const reqsentry::LogEntry* b) {
        const auto va = column(*a, *order), vb = column(*b, *order);
        const bool na = std::holds_alternative<std::monostate>(va);
        const bool nb = std::holds_alternative<std::monostate>(vb);
        if (na || nb) return na && !nb;
        if (const auto* sa = std::get_if<std::string>(&va)) return *sa < std::get<std::string>(vb);
        const auto* ia = std::get_if<std::int64_t>(&va);
        const auto* ib = std::get_if<std::int64_t>(&vb);
        if (ia && ib) return *ia < *ib;
        return as_double(va) < as_double(vb);
      };
      for (std::size_t i = 1; i < rows.size(); ++i) {
        for (std::size_t j = i; j > 0; --j) {
          const bool swap = desc ? less(rows[j - 1], rows[j]) : less(rows[j], rows[j - 1]);
          if (!swap) break;
          std::swap(rows[j], rows[j - 1]);
        }
      }
    }
    if (limit && rows.size() > static_cast<std::size_t>(*limit)) rows.resize(*limit);
    out.columns = cols;
    for (const auto* r : rows) {
      std::vector<Value> v;
      for (const auto& c : cols) v.push_back(column(*r, c));
      out.rows.push_back(std::move(v));
    }
  } catch (const Bad&) {
    out = Result{};
    out.error = true;
  }
  return out;
}

}  // namespace oracle

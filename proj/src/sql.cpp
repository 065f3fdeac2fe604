// Parser and evaluator for the logstore's SQL subset.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <memory>

#include "reqsentry/logstore.hpp"

namespace reqsentry {
namespace {

enum class Tok { Ident, Number, String, Symbol, End };

struct Token {
  Tok kind = Tok::End;
  std::string text;   // source text (identifiers upper-cased)
  std::string value;  // unquoted string literal
};

// Carries the offending fragment to the error table.
struct QueryError {
  std::string fragment;
};

std::string upper(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

std::vector<Token> lex(std::string_view q) {
  std::vector<Token> out;
  std::size_t i = 0;
  auto is_ident = [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
  };
  while (i < q.size()) {
    const char c = q[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
    } else if (c == '\'') {
      std::string v;
      std::size_t j = i + 1;
      for (;;) {
        if (j >= q.size()) throw QueryError{std::string(q.substr(i))};
        if (q[j] == '\'') {
          if (j + 1 < q.size() && q[j + 1] == '\'') {
            v += '\'';
            j += 2;
            continue;
          }
          break;
        }
        v += q[j++];
      }
      out.push_back({Tok::String, std::string(q.substr(i, j + 1 - i)), std::move(v)});
      i = j + 1;
    } else if (std::isdigit(static_cast<unsigned char>(c)) || c == '.' ||
               (c == '-' && i + 1 < q.size() &&
                (std::isdigit(static_cast<unsigned char>(q[i + 1])) || q[i + 1] == '.'))) {
      std::size_t j = i + 1;
      while (j < q.size() && (std::isalnum(static_cast<unsigned char>(q[j])) || q[j] == '.' ||
                              ((q[j] == '-' || q[j] == '+') && (q[j - 1] == 'e' || q[j - 1] == 'E')))) {
        ++j;
      }
      out.push_back({Tok::Number, std::string(q.substr(i, j - i)), {}});
      i = j;
    } else if (is_ident(c)) {
      std::size_t j = i;
      while (j < q.size() && is_ident(q[j])) ++j;
      out.push_back({Tok::Ident, upper(q.substr(i, j - i)), std::string(q.substr(i, j - i))});
      i = j;
    } else if (c == '>' || c == '<' || c == '=' || c == '(' || c == ')' || c == ',' || c == '*' ||
               c == ';') {
      out.push_back({Tok::Symbol, std::string(1, c), {}});
      ++i;
    } else {
      std::size_t j = i + 1;
      while (j < q.size() && !std::isspace(static_cast<unsigned char>(q[j]))) ++j;
      throw QueryError{std::string(q.substr(i, j - i))};
    }
  }
  out.push_back({Tok::End, "", {}});
  return out;
}

enum class Col { Timestamp, Raw, Model, Snort };
enum class Type { Int, Real, Text };

std::optional<Col> column_of(std::string_view name) {
  if (name == kColTimestamp) return Col::Timestamp;
  if (name == kColRaw) return Col::Raw;
  if (name == kColModel) return Col::Model;
  if (name == kColSnort) return Col::Snort;
  return std::nullopt;
}

std::string_view column_name(Col c) {
  switch (c) {
    case Col::Timestamp: return kColTimestamp;
    case Col::Raw: return kColRaw;
    case Col::Model: return kColModel;
    case Col::Snort: return kColSnort;
  }
  return "";
}

Type column_type(Col c) {
  switch (c) {
    case Col::Timestamp:
    case Col::Snort: return Type::Int;
    case Col::Model: return Type::Real;
    case Col::Raw: return Type::Text;
  }
  return Type::Text;
}

Value column_value(const LogEntry& e, Col c) {
  switch (c) {
    case Col::Timestamp: return e.entry_id;
    case Col::Raw: return e.raw;
    case Col::Model: return e.model_label ? Value(*e.model_label) : Value();
    case Col::Snort: return e.truth_label ? Value(static_cast<std::int64_t>(*e.truth_label)) : Value();
  }
  return {};
}

struct Operand {
  std::optional<Col> column;
  Value literal;
  Type type = Type::Text;

  Value eval(const LogEntry& e) const { return column ? column_value(e, *column) : literal; }
};

enum class Op { Gt, Lt, Eq, Like };

struct Expr {
  enum class Kind { Cmp, And, Or } kind = Kind::Cmp;
  Operand lhs, rhs;
  Op op = Op::Eq;
  std::unique_ptr<Expr> a, b;
};

bool is_numeric(Type t) { return t != Type::Text; }

// -1, 0, 1, or nullopt when either side is NULL.
std::optional<int> compare_values(const Value& x, const Value& y) {
  if (std::holds_alternative<std::monostate>(x) || std::holds_alternative<std::monostate>(y)) {
    return std::nullopt;
  }
  if (const auto* sx = std::get_if<std::string>(&x)) {
    const auto& sy = std::get<std::string>(y);
    const int c = sx->compare(sy);
    return c < 0 ? -1 : (c > 0 ? 1 : 0);
  }
  const auto* ix = std::get_if<std::int64_t>(&x);
  const auto* iy = std::get_if<std::int64_t>(&y);
  if (ix && iy) return *ix < *iy ? -1 : (*ix > *iy ? 1 : 0);
  const double dx = ix ? static_cast<double>(*ix) : std::get<double>(x);
  const double dy = iy ? static_cast<double>(*iy) : std::get<double>(y);
  return dx < dy ? -1 : (dx > dy ? 1 : 0);
}

bool eval(const Expr& e, const LogEntry& row) {
  switch (e.kind) {
    case Expr::Kind::And: return eval(*e.a, row) && eval(*e.b, row);
    case Expr::Kind::Or: return eval(*e.a, row) || eval(*e.b, row);
    case Expr::Kind::Cmp: break;
  }
  const auto l = e.lhs.eval(row);
  const auto r = e.rhs.eval(row);
  if (e.op == Op::Like) {
    const auto* ls = std::get_if<std::string>(&l);
    const auto* rs = std::get_if<std::string>(&r);
    return ls && rs && like_match(*ls, *rs);
  }
  const auto c = compare_values(l, r);
  if (!c) return false;
  switch (e.op) {
    case Op::Gt: return *c > 0;
    case Op::Lt: return *c < 0;
    default: return *c == 0;
  }
}

struct Query {
  std::vector<Col> select;
  std::unique_ptr<Expr> where;
  std::optional<Col> order;
  bool desc = false;
  std::optional<std::size_t> limit;
};

class Parser {
 public:
  explicit Parser(std::vector<Token> toks) : t_(std::move(toks)) {}

  Query parse() {
    Query q;
    expect_kw("SELECT");
    if (peek().kind == Tok::Symbol && peek().text == "*") {
      take();
      q.select = {Col::Timestamp, Col::Raw, Col::Model, Col::Snort};
    } else {
      q.select.push_back(column());
      while (peek().kind == Tok::Symbol && peek().text == ",") {
        take();
        q.select.push_back(column());
      }
    }
    expect_kw("FROM");
    const auto table = take();
    if (table.kind != Tok::Ident || table.text != kLogTable) throw QueryError{fragment(table)};
    if (at_kw("WHERE")) {
      take();
      q.where = or_expr();
    }
    if (at_kw("ORDER")) {
      take();
      expect_kw("BY");
      q.order = column();
      if (at_kw("ASC")) {
        take();
      } else if (at_kw("DESC")) {
        take();
        q.desc = true;
      }
    }
    if (at_kw("LIMIT")) {
      take();
      const auto n = take();
      std::size_t v = 0;
      const auto r = std::from_chars(n.text.data(), n.text.data() + n.text.size(), v);
      if (n.kind != Tok::Number || r.ec != std::errc() || r.ptr != n.text.data() + n.text.size()) {
        throw QueryError{fragment(n)};
      }
      q.limit = v;
    }
    if (peek().kind == Tok::Symbol && peek().text == ";") take();
    if (peek().kind != Tok::End) throw QueryError{fragment(peek())};
    return q;
  }

 private:
  const Token& peek() const { return t_[i_]; }
  Token take() { return t_[i_ < t_.size() - 1 ? i_++ : i_]; }
  bool at_kw(std::string_view kw) const { return peek().kind == Tok::Ident && peek().text == kw; }
  void expect_kw(std::string_view kw) {
    if (!at_kw(kw)) throw QueryError{fragment(peek())};
    take();
  }
  static std::string fragment(const Token& t) {
    if (t.kind == Tok::End) return "end of query";
    return t.kind == Tok::Ident ? t.value : t.text;
  }

  Col column() {
    const auto t = take();
    if (t.kind == Tok::Ident) {
      if (auto c = column_of(t.text)) return *c;
    }
    throw QueryError{fragment(t)};
  }

  std::unique_ptr<Expr> or_expr() {
    auto left = and_expr();
    while (at_kw("OR")) {
      take();
      auto e = std::make_unique<Expr>();
      e->kind = Expr::Kind::Or;
      e->a = std::move(left);
      e->b = and_expr();
      left = std::move(e);
    }
    return left;
  }

  std::unique_ptr<Expr> and_expr() {
    auto left = atom();
    while (at_kw("AND")) {
      take();
      auto e = std::make_unique<Expr>();
      e->kind = Expr::Kind::And;
      e->a = std::move(left);
      e->b = atom();
      left = std::move(e);
    }
    return left;
  }

  std::unique_ptr<Expr> atom() {
    if (peek().kind == Tok::Symbol && peek().text == "(") {
      take();
      auto e = or_expr();
      if (!(peek().kind == Tok::Symbol && peek().text == ")")) throw QueryError{fragment(peek())};
      take();
      return e;
    }
    auto e = std::make_unique<Expr>();
    e->lhs = operand();
    const auto op = take();
    if (op.kind == Tok::Symbol && op.text == ">") {
      e->op = Op::Gt;
    } else if (op.kind == Tok::Symbol && op.text == "<") {
      e->op = Op::Lt;
    } else if (op.kind == Tok::Symbol && op.text == "=") {
      e->op = Op::Eq;
    } else if (op.kind == Tok::Ident && op.text == "LIKE") {
      e->op = Op::Like;
    } else {
      throw QueryError{fragment(op)};
    }
    e->rhs = operand();
    const bool text_l = e->lhs.type == Type::Text;
    const bool text_r = e->rhs.type == Type::Text;
    const bool ok = e->op == Op::Like ? (text_l && text_r)
                    : e->op == Op::Eq ? (text_l == text_r)
                                      : (is_numeric(e->lhs.type) && is_numeric(e->rhs.type));
    if (!ok) throw QueryError{fragment(op)};
    return e;
  }

  Operand operand() {
    const auto t = take();
    Operand o;
    if (t.kind == Tok::Ident) {
      o.column = column_of(t.text);
      if (!o.column) throw QueryError{fragment(t)};
      o.type = column_type(*o.column);
    } else if (t.kind == Tok::String) {
      o.literal = t.value;
      o.type = Type::Text;
    } else if (t.kind == Tok::Number) {
      const char* b = t.text.data();
      const char* e = b + t.text.size();
      std::int64_t iv = 0;
      if (auto r = std::from_chars(b, e, iv); r.ec == std::errc() && r.ptr == e) {
        o.literal = iv;
        o.type = Type::Int;
      } else {
        double dv = 0;
        auto rd = std::from_chars(b, e, dv);
        if (rd.ec != std::errc() || rd.ptr != e) throw QueryError{t.text};
        o.literal = dv;
        o.type = Type::Real;
      }
    } else {
      throw QueryError{fragment(t)};
    }
    return o;
  }

  std::vector<Token> t_;
  std::size_t i_ = 0;
};

// NULL sorts smallest.
bool value_less(const Value& a, const Value& b) {
  const bool na = std::holds_alternative<std::monostate>(a);
  const bool nb = std::holds_alternative<std::monostate>(b);
  if (na || nb) return na && !nb;
  return *compare_values(a, b) < 0;
}

}  // namespace

Table run_query(std::span<const EntryPtr> entries, std::string_view text) {
  Query q;
  try {
    q = Parser(lex(text)).parse();
  } catch (const QueryError& e) {
    return Table::error(e.fragment, text);
  }
  std::vector<const LogEntry*> rows;
  for (const auto& e : entries) {
    if (!q.where || eval(*q.where, *e)) rows.push_back(e.get());
  }
  if (q.order) {
    const Col c = *q.order;
    std::stable_sort(rows.begin(), rows.end(), [&](const LogEntry* a, const LogEntry* b) {
      const auto va = column_value(*a, c);
      const auto vb = column_value(*b, c);
      return q.desc ? value_less(vb, va) : value_less(va, vb);
    });
  }
  if (q.limit && rows.size() > *q.limit) rows.resize(*q.limit);

  Table t;
  for (const auto c : q.select) t.columns.emplace_back(column_name(c));
  t.rows.reserve(rows.size());
  for (const auto* r : rows) {
    std::vector<Value> out;
    out.reserve(q.select.size());
    for (const auto c : q.select) out.push_back(column_value(*r, c));
    t.rows.push_back(std::move(out));
  }
  return t;
}

}  // namespace reqsentry

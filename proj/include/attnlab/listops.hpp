#pragma once

// ListOps grammar: tokenizer, parser, renderer, evaluator, one-step
// simplifier, bracket spans and an exact-length random generator.
//
// Token conventions: brackets are separate symbols and the operator is the
// symbol that follows an opening bracket, so "[MAX 2 3 ]" is the five tokens
// "[", "MAX", "2", "3", "]". The closing bracket counts towards length.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "attnlab/common.hpp"

namespace attnlab::listops {

using Tokens = std::vector<std::string>;

enum class OpKind { Max, Min, Med, Sum, First, Last };

inline constexpr std::array<OpKind, 4> kOriginalOps = {OpKind::Max, OpKind::Min, OpKind::Med,
                                                       OpKind::Sum};
inline constexpr std::array<OpKind, 4> kModifiedOps = {OpKind::Max, OpKind::Min, OpKind::First,
                                                       OpKind::Last};

constexpr std::string_view op_name(OpKind op) {
  switch (op) {
    case OpKind::Max: return "MAX";
    case OpKind::Min: return "MIN";
    case OpKind::Med: return "MED";
    case OpKind::Sum: return "SM";
    case OpKind::First: return "FIRST";
    case OpKind::Last: return "LAST";
  }
  return "?";
}

/// Case-insensitive; "SUM" is accepted as an alias of "SM".
inline std::optional<OpKind> op_from_name(std::string_view name) {
  std::string upper(name);
  for (char& c : upper) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  if (upper == "MAX") return OpKind::Max;
  if (upper == "MIN") return OpKind::Min;
  if (upper == "MED") return OpKind::Med;
  if (upper == "SM" || upper == "SUM") return OpKind::Sum;
  if (upper == "FIRST") return OpKind::First;
  if (upper == "LAST") return OpKind::Last;
  return std::nullopt;
}

inline bool is_digit_token(std::string_view t) {
  return t.size() == 1 && t[0] >= '0' && t[0] <= '9';
}

/// A ListOps expression: a digit leaf or an operator node over >= 2 children.
struct Expr {
  int value = 0;
  std::optional<OpKind> op;
  std::vector<Expr> children;

  static Expr leaf(int v) { return Expr{v, std::nullopt, {}}; }
  static Expr node(OpKind k, std::vector<Expr> kids) { return Expr{0, k, std::move(kids)}; }

  bool is_leaf() const noexcept { return !op.has_value(); }

  friend bool operator==(const Expr&, const Expr&) = default;
};

/// Splits text on whitespace and peels brackets off their neighbours, so both
/// "[MAX 2 3]" and "[ MAX 2 3 ]" yield the same symbols. Operator names are
/// normalised to their canonical spelling.
inline Tokens tokenize(std::string_view text) {
  Tokens out;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    if (c == '[' || c == ']') {
      out.emplace_back(1, c);
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j])) && text[j] != '[' &&
           text[j] != ']') {
      ++j;
    }
    std::string word(text.substr(i, j - i));
    if (auto op = op_from_name(word)) word = std::string(op_name(*op));
    out.push_back(std::move(word));
    i = j;
  }
  return out;
}

/// Joins symbols the way ListOps corpora print them: "[MAX 2 3 ]".
inline std::string to_text(const Tokens& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0 && tokens[i - 1] != "[") out += ' ';
    out += tokens[i];
  }
  return out;
}

inline std::string join(const Tokens& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out += ' ';
    out += tokens[i];
  }
  return out;
}

namespace detail {

class Parser {
 public:
  explicit Parser(const Tokens& t) : t_(t) {}

  Expr parse_all() {
    if (t_.empty()) throw Error(ErrorCode::EmptyInput, "no tokens");
    Expr e = parse_expr();
    if (pos_ != t_.size()) {
      if (t_[pos_] == "]") {
        throw Error(ErrorCode::UnbalancedBrackets, "unmatched ']'", pos_);
      }
      throw Error(ErrorCode::StrayToken, "trailing token '" + t_[pos_] + "'", pos_);
    }
    return e;
  }

 private:
  Expr parse_expr() {
    const std::string& tok = t_[pos_];
    if (is_digit_token(tok)) {
      ++pos_;
      return Expr::leaf(tok[0] - '0');
    }
    if (tok == "]") throw Error(ErrorCode::UnbalancedBrackets, "unmatched ']'", pos_);
    if (tok != "[") throw Error(ErrorCode::StrayToken, "unexpected token '" + tok + "'", pos_);

    const std::size_t open = pos_++;
    if (pos_ >= t_.size()) throw Error(ErrorCode::UnbalancedBrackets, "unclosed '['", open);
    const auto op = op_from_name(t_[pos_]);
    if (!op) throw Error(ErrorCode::MissingOperator, "'[' not followed by an operator", pos_);
    ++pos_;

    std::vector<Expr> kids;
    while (true) {
      if (pos_ >= t_.size()) throw Error(ErrorCode::UnbalancedBrackets, "unclosed '['", open);
      if (t_[pos_] == "]") break;
      kids.push_back(parse_expr());
    }
    if (kids.size() < 2) {
      throw Error(ErrorCode::TooFewOperands, "operator needs at least two operands", pos_);
    }
    ++pos_;
    return Expr::node(*op, std::move(kids));
  }

  const Tokens& t_;
  std::size_t pos_ = 0;
};

inline void render_into(const Expr& e, Tokens& out) {
  if (e.is_leaf()) {
    out.emplace_back(1, static_cast<char>('0' + e.value));
    return;
  }
  out.emplace_back("[");
  out.emplace_back(op_name(*e.op));
  for (const Expr& c : e.children) render_into(c, out);
  out.emplace_back("]");
}

}  // namespace detail

inline Expr parse(const Tokens& tokens) { return detail::Parser(tokens).parse_all(); }
inline Expr parse(std::string_view text) { return parse(tokenize(text)); }

inline Tokens render(const Expr& e) {
  Tokens out;
  detail::render_into(e, out);
  return out;
}

/// Applies one operator to already-resolved operand values.
inline int apply(OpKind op, std::vector<int> values) {
  switch (op) {
    case OpKind::Max: return *std::max_element(values.begin(), values.end());
    case OpKind::Min: return *std::min_element(values.begin(), values.end());
    case OpKind::Med: {
      // Lower median for even counts.
      std::sort(values.begin(), values.end());
      return values[(values.size() - 1) / 2];
    }
    case OpKind::Sum: {
      int s = 0;
      for (int v : values) s += v;
      return s % 10;
    }
    case OpKind::First: return values.front();
    case OpKind::Last: return values.back();
  }
  return 0;
}

inline int eval(const Expr& e) {
  if (e.is_leaf()) return e.value;
  std::vector<int> values;
  values.reserve(e.children.size());
  for (const Expr& c : e.children) values.push_back(eval(c));
  return apply(*e.op, std::move(values));
}

/// Resolves every direct sub-expression of the root to its value.
inline Expr simplify_once(const Expr& e) {
  if (e.is_leaf()) throw Error(ErrorCode::RootIsLeaf, "cannot simplify a bare digit");
  std::vector<Expr> kids;
  kids.reserve(e.children.size());
  for (const Expr& c : e.children) kids.push_back(c.is_leaf() ? c : Expr::leaf(eval(c)));
  return Expr::node(*e.op, std::move(kids));
}

inline int depth(const Expr& e) {
  int d = 0;
  for (const Expr& c : e.children) d = std::max(d, depth(c));
  return e.is_leaf() ? 0 : d + 1;
}

/// One bracket pair: [start, end] token positions inclusive, nesting depth
/// (root = 0) and the position of its operator symbol.
struct Span {
  std::size_t start = 0;
  std::size_t end = 0;
  int depth = 0;
  std::size_t op_pos = 0;

  std::size_t length() const noexcept { return end - start + 1; }
  bool contains(std::size_t i) const noexcept { return i >= start && i <= end; }
  friend bool operator==(const Span&, const Span&) = default;
};

/// Spans ordered by opening position.
inline std::vector<Span> sub_spans(const Tokens& tokens) {
  std::vector<Span> spans;
  std::vector<std::size_t> open;  // indices into spans
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == "[") {
      open.push_back(spans.size());
      spans.push_back(Span{i, i, static_cast<int>(open.size()) - 1, i + 1});
    } else if (tokens[i] == "]") {
      if (open.empty()) throw Error(ErrorCode::UnbalancedBrackets, "unmatched ']'", i);
      spans[open.back()].end = i;
      open.pop_back();
    }
  }
  if (!open.empty()) {
    throw Error(ErrorCode::UnbalancedBrackets, "unclosed '['", spans[open.back()].start);
  }
  return spans;
}

/// Index of the smallest span containing each token, or -1 when outside all.
inline std::vector<int> innermost_span(const std::vector<Span>& spans, std::size_t n_tokens) {
  std::vector<int> owner(n_tokens, -1);
  // Spans are ordered by start, so later spans that contain a token are nested deeper.
  for (std::size_t s = 0; s < spans.size(); ++s) {
    for (std::size_t i = spans[s].start; i <= spans[s].end && i < n_tokens; ++i) {
      owner[i] = static_cast<int>(s);
    }
  }
  return owner;
}

// ---------------------------------------------------------------------------
// Generation

struct GenSpec {
  int len_min = 200;
  int len_max = 400;
  int max_depth = 10;
  int arity_min = 2;
  int arity_max = 5;
  std::vector<OpKind> ops{kOriginalOps.begin(), kOriginalOps.end()};
  // Chance that an operand is a digit when a sub-expression would also fit.
  double leaf_prob = 0.6;
  std::uint64_t seed = 1;

  void validate() const {
    if (len_min < 1 || len_min > len_max) {
      throw Error(ErrorCode::InvalidArgument, "length range must satisfy 1 <= min <= max");
    }
    if (arity_min < 2 || arity_max < arity_min) {
      throw Error(ErrorCode::InvalidArgument, "arity range must satisfy 2 <= min <= max");
    }
    if (ops.empty()) throw Error(ErrorCode::InvalidArgument, "operator set is empty");
    if (max_depth < 1) throw Error(ErrorCode::InvalidArgument, "max depth must be >= 1");
    if (!(leaf_prob >= 0.0 && leaf_prob <= 1.0)) {
      throw Error(ErrorCode::InvalidArgument, "leaf probability must lie in [0, 1]");
    }
  }
};

struct Sample {
  Tokens tokens;
  int label = 0;
};

/// Table of which token counts an expression can have under the depth and
/// arity bounds. `node(d, n)`: a node of height <= d spans n tokens.
class SizeTable {
 public:
  explicit SizeTable(const GenSpec& spec)
      : max_n_(spec.len_max), depth_(spec.max_depth), amin_(spec.arity_min), amax_(spec.arity_max) {
    const auto cells = static_cast<std::size_t>(max_n_ + 1);
    any_.assign(static_cast<std::size_t>(depth_ + 1), std::vector<char>(cells, 0));
    node_ = any_;
    split_.assign(static_cast<std::size_t>(depth_ + 1),
                  std::vector<std::vector<char>>(static_cast<std::size_t>(amax_ + 1),
                                                 std::vector<char>(cells, 0)));
    if (max_n_ >= 1) any_[0][1] = 1;
    for (int d = 1; d <= depth_; ++d) {
      auto& sp = split_[static_cast<std::size_t>(d)];
      const auto& child = any_[static_cast<std::size_t>(d - 1)];
      sp[0][0] = 1;
      for (int k = 1; k <= amax_; ++k) {
        for (int m = 1; m <= max_n_; ++m) {
          char ok = 0;
          for (int s = 1; s <= m && !ok; ++s) {
            ok = child[static_cast<std::size_t>(s)] && sp[static_cast<std::size_t>(k - 1)][static_cast<std::size_t>(m - s)];
          }
          sp[static_cast<std::size_t>(k)][static_cast<std::size_t>(m)] = ok;
        }
      }
      for (int n = 1; n <= max_n_; ++n) {
        char ok = 0;
        for (int k = amin_; k <= amax_ && !ok && n - 3 >= 0; ++k) {
          ok = sp[static_cast<std::size_t>(k)][static_cast<std::size_t>(n - 3)];
        }
        node_[static_cast<std::size_t>(d)][static_cast<std::size_t>(n)] = ok;
        any_[static_cast<std::size_t>(d)][static_cast<std::size_t>(n)] = ok || n == 1;
      }
    }
  }

  bool node(int d, int n) const { return in(n) && node_[idx(d)][static_cast<std::size_t>(n)]; }
  bool any(int d, int n) const { return in(n) && any_[idx(d)][static_cast<std::size_t>(n)]; }
  bool split(int d, int k, int m) const {
    return m >= 0 && m <= max_n_ && k >= 0 && k <= amax_ &&
           split_[idx(d)][static_cast<std::size_t>(k)][static_cast<std::size_t>(m)];
  }

 private:
  bool in(int n) const { return n >= 0 && n <= max_n_; }
  static std::size_t idx(int d) { return static_cast<std::size_t>(d); }

  int max_n_, depth_, amin_, amax_;
  std::vector<std::vector<char>> any_, node_;
  std::vector<std::vector<std::vector<char>>> split_;
};

namespace detail {

inline Expr build(const GenSpec& spec, const SizeTable& table, int n, int d, Rng& rng) {
  if (n == 1) return Expr::leaf(static_cast<int>(rng.below(10)));

  std::vector<int> arities;
  for (int k = spec.arity_min; k <= spec.arity_max; ++k) {
    if (table.split(d, k, n - 3)) arities.push_back(k);
  }
  const int k = arities[rng.below(arities.size())];

  std::vector<int> sizes;
  int remaining = n - 3;
  for (int i = 0; i < k; ++i) {
    const int left = k - i;
    if (left == 1) {
      sizes.push_back(remaining);
      break;
    }
    std::vector<int> nodes;
    bool leaf_ok = false;
    for (int s = 1; s <= remaining; ++s) {
      if (!table.any(d - 1, s) || !table.split(d, left - 1, remaining - s)) continue;
      if (s == 1) {
        leaf_ok = true;
      } else {
        nodes.push_back(s);
      }
    }
    int s;
    if (leaf_ok && (nodes.empty() || rng.bernoulli(spec.leaf_prob))) {
      s = 1;
    } else {
      s = nodes[rng.below(nodes.size())];
    }
    sizes.push_back(s);
    remaining -= s;
  }
  rng.shuffle(sizes);

  const OpKind op = spec.ops[rng.below(spec.ops.size())];
  std::vector<Expr> kids;
  kids.reserve(sizes.size());
  for (int s : sizes) kids.push_back(build(spec, table, s, d - 1, rng));
  return Expr::node(op, std::move(kids));
}

}  // namespace detail

/// Lengths in the spec's range that a root operator node can have.
inline std::vector<int> feasible_lengths(const GenSpec& spec, const SizeTable& table) {
  std::vector<int> out;
  for (int n = spec.len_min; n <= spec.len_max; ++n) {
    if (table.node(spec.max_depth, n)) out.push_back(n);
  }
  return out;
}

/// Draws a target length uniformly among the feasible lengths in range, then
/// builds a random tree of exactly that many tokens.
inline Sample generate(const GenSpec& spec, const SizeTable& table, Rng& rng) {
  const std::vector<int> lengths = feasible_lengths(spec, table);
  if (lengths.empty()) {
    throw Error(ErrorCode::SpecInfeasible,
                "no expression of " + std::to_string(spec.len_min) + "-" +
                    std::to_string(spec.len_max) + " tokens fits the depth/arity bounds");
  }
  const int n = lengths[rng.below(lengths.size())];
  Expr e = detail::build(spec, table, n, spec.max_depth, rng);
  Sample s{render(e), eval(e)};
  return s;
}

inline Sample generate(const GenSpec& spec, Rng& rng) {
  spec.validate();
  return generate(spec, SizeTable(spec), rng);
}

/// `count` samples drawn from the stream seeded by `spec.seed`.
inline std::vector<Sample> generate_many(const GenSpec& spec, std::size_t count) {
  spec.validate();
  const SizeTable table(spec);
  Rng rng(spec.seed);
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate(spec, table, rng));
  return out;
}

}  // namespace attnlab::listops

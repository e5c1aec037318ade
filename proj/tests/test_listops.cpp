#include <gtest/gtest.h>

#include <set>

#include "attnlab/listops.hpp"
#include "oracles.hpp"

using namespace attnlab;
using namespace attnlab::listops;

namespace {

Expr L(int v) { return Expr::leaf(v); }
Expr N(OpKind k, std::vector<Expr> c) { return Expr::node(k, std::move(c)); }

ErrorCode parse_error(std::string_view text, std::optional<std::size_t>* index = nullptr) {
  try {
    parse(text);
  } catch (const Error& e) {
    if (index) *index = e.index();
    return e.code();
  }
  ADD_FAILURE() << "no error for " << text;
  return ErrorCode::InvalidArgument;
}

GenSpec spec_of(int lo, int hi, bool modified, std::uint64_t seed) {
  GenSpec s;
  s.len_min = lo;
  s.len_max = hi;
  s.seed = seed;
  if (modified) s.ops.assign(kModifiedOps.begin(), kModifiedOps.end());
  return s;
}

}  // namespace

TEST(ListOpsParse, NodeAndLeaf) {
  EXPECT_EQ(parse("[MIN 0 5 4]"), N(OpKind::Min, {L(0), L(5), L(4)}));
  EXPECT_EQ(parse("7"), L(7));
  EXPECT_EQ(parse("[ max 1 [sum 2 3 ] ]"), N(OpKind::Max, {L(1), N(OpKind::Sum, {L(2), L(3)})}));
}

TEST(ListOpsParse, ErrorsCarryTokenIndex) {
  std::optional<std::size_t> at;
  EXPECT_EQ(parse_error("[MAX 1 [MIN", &at), ErrorCode::UnbalancedBrackets);
  EXPECT_EQ(parse_error("[MAX 1 2 ] ]", &at), ErrorCode::UnbalancedBrackets);
  EXPECT_EQ(at, 5u);
  EXPECT_EQ(parse_error("[MAX 1 2 ] 3", &at), ErrorCode::StrayToken);
  EXPECT_EQ(at, 5u);
  EXPECT_EQ(parse_error("[ 1 2 ]", &at), ErrorCode::MissingOperator);
  EXPECT_EQ(at, 1u);
  EXPECT_EQ(parse_error("[MAX 1 MIN 2 ]", &at), ErrorCode::StrayToken);
  EXPECT_EQ(at, 3u);
  EXPECT_EQ(parse_error("[MAX 1 ]"), ErrorCode::TooFewOperands);
  EXPECT_EQ(parse_error(""), ErrorCode::EmptyInput);
  EXPECT_EQ(parse_error("12"), ErrorCode::StrayToken);
}

TEST(ListOpsRender, Serialisation) {
  EXPECT_EQ(to_text(render(N(OpKind::Max, {L(2), L(3)}))), "[MAX 2 3 ]");
  EXPECT_EQ(to_text(render(L(5))), "5");
  const std::string first = "[FIRST 2 3 [MAX 1 5 6 1 2 ] 0 [MIN 1 0 2 ] ]";
  EXPECT_EQ(render(parse("[FIRST 2 3 [Max 1 5 6 1 2] 0 [MIN 1 0 2]]")), tokenize(first));
  EXPECT_EQ(to_text(render(parse(first))), first);
}

TEST(ListOpsEval, DocumentedExamples) {
  EXPECT_EQ(eval(parse("[LAST 2 [MIN 0 5 4] 3 [FIRST 5 1] 4 9 [MAX 1 5]]")), 5);
  EXPECT_EQ(eval(parse("[MAX 2 3 [MIN 1 5 6 1 2] 1 [FIRST 1 4 2] 8]")), 8);
  EXPECT_EQ(eval(parse("[LAST 2 3 4 5 [MAX 3 9 1 1 7] [MIN 9 5 0 8 2] [MAX 1 5 8 3 5] [MIN 1 0 2 3 5]]")), 0);
}

TEST(ListOpsEval, SumExampleAgreesWithStackMachine) {
  const std::string text = "[SUM [MIN 0 1 [MED 5 2 1] 4] 1 2 [MAX 1 5 4]]";
  const Tokens t = tokenize(text);
  const int expected = oracle::stack_eval(t);
  EXPECT_EQ(expected, 8);  // MED(5,2,1)=2, MIN(0,1,2,4)=0, MAX(1,5,4)=5, 0+1+2+5 = 8
  EXPECT_EQ(eval(parse(t)), expected);
}

TEST(ListOpsEval, OperatorSemantics) {
  EXPECT_EQ(apply(OpKind::Med, {4, 1, 3, 2}), 2);  // lower median of even count
  EXPECT_EQ(apply(OpKind::Med, {9, 1, 5}), 5);
  EXPECT_EQ(apply(OpKind::Sum, {9, 8, 7}), 4);
  EXPECT_EQ(apply(OpKind::First, {3, 9}), 3);
  EXPECT_EQ(apply(OpKind::Last, {3, 9}), 9);
}

TEST(ListOpsSimplify, DocumentedExamples) {
  EXPECT_EQ(to_text(render(simplify_once(parse("[FIRST 2 3 [MAX 1 5 6 1 2] 0 [MIN 1 0 2]]")))), "[FIRST 2 3 6 0 0 ]");
  EXPECT_EQ(to_text(render(simplify_once(parse("[LAST 2 3 [MIN 1 5 6 1 2] 0 [MAX 1 8 2]]")))), "[LAST 2 3 1 0 8 ]");
  EXPECT_EQ(to_text(render(simplify_once(parse("[MAX 3 [LAST 9 5 3 4 5] 4 [FIRST 1 8 6 4 5] 5 9]")))),
            "[MAX 3 5 4 1 5 9 ]");
  const Expr flat = N(OpKind::Max, {L(1), L(2)});
  EXPECT_EQ(simplify_once(flat), flat);
  try {
    simplify_once(L(3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::RootIsLeaf);
  }
}

TEST(ListOpsSpans, Examples) {
  const auto five = tokenize("[LAST 2 3 4 5 [MAX 3 9 1 1 7] [MIN 9 5 0 8 2] [MAX 1 5 8 3 5] [MIN 1 0 2 3 5]]");
  const auto spans = sub_spans(five);
  EXPECT_EQ(spans.size(), 5u);
  const auto one = sub_spans(tokenize("[MAX 1 2 ]"));
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0], (Span{0, 4, 0, 1}));
  try {
    sub_spans(tokenize("[MAX 1 [MIN 2 ]"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnbalancedBrackets);
    EXPECT_EQ(e.index(), 0u);
  }
}

TEST(ListOpsGenerate, LengthsLabelsAndDeterminism) {
  for (auto [lo, hi] : {std::pair{200, 400}, std::pair{20, 50}, std::pair{10, 30}}) {
    const auto spec = spec_of(lo, hi, false, 3);
    const auto a = generate_many(spec, 60);
    const auto b = generate_many(spec, 60);
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_GE(static_cast<int>(a[i].tokens.size()), lo);
      EXPECT_LE(static_cast<int>(a[i].tokens.size()), hi);
      EXPECT_EQ(a[i].label, oracle::stack_eval(a[i].tokens));
      EXPECT_EQ(a[i].tokens, b[i].tokens);
    }
  }
}

TEST(ListOpsGenerate, OperatorSetsAndBounds) {
  const auto spec = spec_of(30, 80, true, 9);
  std::set<std::string> seen;
  for (const auto& s : generate_many(spec, 300)) {
    const Expr e = parse(s.tokens);
    EXPECT_LE(depth(e), spec.max_depth);
    for (std::size_t i = 0; i + 1 < s.tokens.size(); ++i) {
      if (s.tokens[i] == "[") seen.insert(s.tokens[i + 1]);
    }
    std::vector<const Expr*> todo{&e};
    while (!todo.empty()) {
      const Expr* x = todo.back();
      todo.pop_back();
      if (x->is_leaf()) continue;
      EXPECT_GE(static_cast<int>(x->children.size()), spec.arity_min);
      EXPECT_LE(static_cast<int>(x->children.size()), spec.arity_max);
      for (const auto& c : x->children) todo.push_back(&c);
    }
  }
  EXPECT_EQ(seen, (std::set<std::string>{"MAX", "MIN", "FIRST", "LAST"}));
}

TEST(ListOpsGenerate, InfeasibleSpec) {
  try {
    generate_many(spec_of(3, 4, false, 1), 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SpecInfeasible);
  }
  GenSpec bad = spec_of(10, 5, false, 1);
  EXPECT_THROW(bad.validate(), Error);
}

// Properties over many generated expressions.

TEST(ListOpsProperties, RoundTripOracleSimplifyAndSpans) {
  Rng rng(2024);
  const auto spec = spec_of(5, 120, false, 0);
  const SizeTable table(spec);
  for (int i = 0; i < 2000; ++i) {
    const Sample s = generate(spec, table, rng);
    const Expr e = parse(s.tokens);
    ASSERT_EQ(parse(render(e)), e);
    ASSERT_EQ(render(e), s.tokens);
    ASSERT_EQ(eval(e), oracle::stack_eval(s.tokens));
    ASSERT_EQ(eval(simplify_once(e)), eval(e));

    // One span per operator node, nested, with the operator after "[".
    const auto spans = sub_spans(s.tokens);
    std::size_t nodes = 0;
    std::vector<const Expr*> todo{&e};
    while (!todo.empty()) {
      const Expr* x = todo.back();
      todo.pop_back();
      if (x->is_leaf()) continue;
      ++nodes;
      for (const auto& c : x->children) todo.push_back(&c);
    }
    ASSERT_EQ(spans.size(), nodes);
    for (std::size_t a = 0; a < spans.size(); ++a) {
      ASSERT_TRUE(op_from_name(s.tokens[spans[a].op_pos]).has_value());
      ASSERT_EQ(s.tokens[spans[a].end], "]");
      for (std::size_t b = a + 1; b < spans.size(); ++b) {
        const bool disjoint = spans[b].start > spans[a].end;
        const bool nested = spans[b].end <= spans[a].end;
        ASSERT_TRUE(disjoint || nested);
        if (nested && !disjoint) {
          ASSERT_GT(spans[b].depth, spans[a].depth);
        }
      }
    }
  }
}

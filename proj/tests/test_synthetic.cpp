#include "doctest.h"
#include "tpo/error.hpp"
#include "tpo/eval.hpp"
#include "tpo/synthetic.hpp"

using namespace tpo;

namespace {

int positional_diff(const TokenSeq& a, const TokenSeq& b) {
  int d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
  return d;
}

}  // namespace

TEST_CASE("rules") {
  TaskSpec s;
  CHECK(rule_next(s, 3, 15) == 0);
  s.generator = "alternate";
  CHECK(rule_next(s, 4, 9) == 4);
  s.generator = "fibonacci";
  CHECK(rule_next(s, 9, 10) == 3);
  s.generator = "nope";
  CHECK_THROWS_AS(s.validate(), ValidationError);
}

TEST_CASE("generation is deterministic") {
  for (const auto& g : synthetic_generators()) {
    TaskSpec s;
    s.generator = g;
    CHECK(gen_synthetic(s, 100, 7) == gen_synthetic(s, 100, 7));
    CHECK(gen_synthetic(s, 100, 7) != gen_synthetic(s, 100, 8));
  }
}

TEST_CASE("property: corruption counts, rule violations and scores") {
  for (const auto& g : synthetic_generators()) {
    TaskSpec s;
    s.generator = g;
    const auto recs = gen_synthetic(s, 300, 1);
    CHECK(recs.size() == 300);
    for (const auto& r : recs) {
      REQUIRE(r.responses.size() == 3);
      const auto& gold = r.responses[0].tokens;
      const auto& chosen = r.responses[1].tokens;
      const auto& rejected = r.responses[2].tokens;
      CHECK(r.prompt.size() == static_cast<std::size_t>(s.prompt_len));
      CHECK(gold.size() == static_cast<std::size_t>(s.response_len));
      CHECK(positional_diff(gold, chosen) == 1);
      CHECK(positional_diff(gold, rejected) == 3);
      CHECK(rule_violations(s, r.prompt, gold) == 0);
      CHECK(rule_violations(s, r.prompt, chosen) < rule_violations(s, r.prompt, rejected));
      for (Token t : r.prompt) CHECK((t >= 0 && t < s.content_vocab));
      for (const auto* y : {&gold, &chosen, &rejected})
        for (Token t : *y) CHECK((t >= 0 && t < s.content_vocab));
    }
    const auto built = build_triples_base(recs, 0.5);
    CHECK(built.triples.size() == recs.size());
    CHECK(synthetic_triples(s, 300, 1) == built.triples);
  }
}

TEST_CASE("oracle policy separates every generated pair") {
  for (const auto& g : synthetic_generators()) {
    TaskSpec s;
    s.generator = g;
    const auto oracle = make_oracle_policy(s);
    const auto triples = synthetic_triples(s, 200, 4);
    const auto r = reward_accuracy(oracle, to_pairs(triples), RewardKind::tpo, 1.0);
    CHECK(r.accuracy == 1.0);
  }
}

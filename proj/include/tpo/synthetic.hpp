#pragma once

// Seeded synthetic preference tasks. A task is a deterministic continuation
// rule over content tokens; gold follows the rule, chosen and rejected are gold
// with one and three corrupted positions.

#include <cstdint>
#include <string>
#include <vector>

#include "tpo/data.hpp"
#include "tpo/policy.hpp"

namespace tpo {

struct TaskSpec {
  // "increment": next = prev + 1; "alternate": next = token two back;
  // "fibonacci": next = sum of the previous two. All mod content_vocab.
  std::string generator = "increment";
  int content_vocab = 16;
  int prompt_len = 3;
  int response_len = 6;
  int chosen_corruptions = 1;
  int rejected_corruptions = 3;
  double gold_score = 9.0, chosen_score = 8.5, rejected_score = 6.0;

  // Emitted vocabulary: content ids plus a stop id (== content_vocab).
  int policy_vocab() const { return content_vocab + 1; }
  Token stop_token() const { return content_vocab; }
  void validate() const;
};

const std::vector<std::string>& synthetic_generators();

// Rule token given the two preceding ids.
Token rule_next(const TaskSpec& spec, Token two_back, Token one_back);

// Positions j where response[j] differs from the rule applied to the two ids
// preceding it in prompt + response.
int rule_violations(const TaskSpec& spec, const TokenSeq& prompt, const TokenSeq& response);

// n source records with responses in source order gold, chosen, rejected.
// Corruptions are redrawn until chosen breaks the rule strictly fewer times
// than rejected, so the rule-following oracle separates every pair.
std::vector<SourceRecord> gen_synthetic(const TaskSpec& spec, std::size_t n, std::uint64_t seed);

// Convenience: gen_synthetic followed by build_triples_base.
std::vector<PreferenceTriple> synthetic_triples(const TaskSpec& spec, std::size_t n,
                                                std::uint64_t seed);

// Order-2 tabular policy placing `sharpness` extra logit on the rule token in
// every all-content context.
TabularPolicy make_oracle_policy(const TaskSpec& spec, double sharpness = 10.0);

}  // namespace tpo

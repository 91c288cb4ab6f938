#include "tpo/synthetic.hpp"

#include <algorithm>

#include "tpo/error.hpp"
#include "tpo/rng.hpp"

namespace tpo {

const std::vector<std::string>& synthetic_generators() {
  static const std::vector<std::string> names{"increment", "alternate", "fibonacci"};
  return names;
}

void TaskSpec::validate() const {
  const auto& gens = synthetic_generators();
  if (std::find(gens.begin(), gens.end(), generator) == gens.end())
    throw ValidationError("unknown synthetic generator '" + generator +
                          "'; valid: increment alternate fibonacci");
  if (content_vocab < 2) throw ValidationError("task: content_vocab must be >= 2");
  if (prompt_len < 2) throw ValidationError("task: prompt_len must be >= 2");
  if (response_len < 1) throw ValidationError("task: response_len must be >= 1");
  if (chosen_corruptions < 1 || rejected_corruptions <= chosen_corruptions ||
      rejected_corruptions > response_len)
    throw ValidationError(
        "task: need 1 <= chosen_corruptions < rejected_corruptions <= response_len");
  if (!(gold_score - chosen_score >= 0.5 - 1e-9 && chosen_score - rejected_score >= 0.5 - 1e-9))
    throw ValidationError("task: scores must keep 0.5 gaps between gold, chosen and rejected");
}

Token rule_next(const TaskSpec& spec, Token two_back, Token one_back) {
  const int v = spec.content_vocab;
  if (spec.generator == "increment") return static_cast<Token>((one_back + 1) % v);
  if (spec.generator == "alternate") return two_back;
  return static_cast<Token>((two_back + one_back) % v);
}

int rule_violations(const TaskSpec& spec, const TokenSeq& prompt, const TokenSeq& response) {
  TokenSeq all = prompt;
  all.insert(all.end(), response.begin(), response.end());
  int count = 0;
  for (std::size_t j = 0; j < response.size(); ++j) {
    const std::size_t k = prompt.size() + j;
    if (k < 2) continue;
    if (all[k] != rule_next(spec, all[k - 2], all[k - 1])) ++count;
  }
  return count;
}

namespace {

TokenSeq corrupt(const TokenSeq& gold, int count, int vocab, Rng& rng) {
  std::vector<std::size_t> pos(gold.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
  rng.shuffle(pos.begin(), pos.end());
  TokenSeq out = gold;
  for (int c = 0; c < count; ++c) {
    const std::size_t p = pos[static_cast<std::size_t>(c)];
    // Uniform over the vocab minus the gold id.
    auto t = static_cast<Token>(rng.below(static_cast<std::size_t>(vocab - 1)));
    if (t >= gold[p]) ++t;
    out[p] = t;
  }
  return out;
}

}  // namespace

std::vector<SourceRecord> gen_synthetic(const TaskSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  Rng rng(mix_seed(seed, 0x73796e7468ULL));
  std::vector<SourceRecord> out;
  out.reserve(n);
  const auto v = static_cast<std::size_t>(spec.content_vocab);
  for (std::size_t i = 0; i < n; ++i) {
    SourceRecord rec;
    for (int j = 0; j < spec.prompt_len; ++j) rec.prompt.push_back(static_cast<Token>(rng.below(v)));
    TokenSeq history = rec.prompt;
    TokenSeq gold;
    for (int j = 0; j < spec.response_len; ++j) {
      const Token t = rule_next(spec, history[history.size() - 2], history.back());
      gold.push_back(t);
      history.push_back(t);
    }
    TokenSeq chosen, rejected;
    do {
      chosen = corrupt(gold, spec.chosen_corruptions, spec.content_vocab, rng);
      rejected = corrupt(gold, spec.rejected_corruptions, spec.content_vocab, rng);
    } while (rule_violations(spec, rec.prompt, chosen) >=
             rule_violations(spec, rec.prompt, rejected));
    rec.responses.push_back({gold, spec.gold_score, std::nullopt});
    rec.responses.push_back({chosen, spec.chosen_score, std::nullopt});
    rec.responses.push_back({rejected, spec.rejected_score, std::nullopt});
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<PreferenceTriple> synthetic_triples(const TaskSpec& spec, std::size_t n,
                                                std::uint64_t seed) {
  return build_triples_base(gen_synthetic(spec, n, seed)).triples;
}

TabularPolicy make_oracle_policy(const TaskSpec& spec, double sharpness) {
  spec.validate();
  TabularPolicy p(spec.policy_vocab(), 2);
  for (Token a = 0; a < spec.content_vocab; ++a)
    for (Token b = 0; b < spec.content_vocab; ++b) {
      const Token ctx[2] = {a, b};
      p.row(p.context_index(ctx))[static_cast<std::size_t>(rule_next(spec, a, b))] = sharpness;
    }
  return p;
}

}  // namespace tpo

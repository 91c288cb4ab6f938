#include "tpo/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "tpo/error.hpp"
#include "tpo/rng.hpp"

namespace tpo {

using nlohmann::ordered_json;

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string exact(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------- histograms

Histogram histogram(const std::vector<double>& values, const std::vector<double>& edges) {
  if (edges.size() < 2) throw ValidationError("histogram: need at least two edges");
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (!(edges[i] > edges[i - 1])) throw ValidationError("histogram: edges must increase");
  Histogram h{edges, std::vector<std::size_t>(edges.size() - 1, 0)};
  const std::size_t bins = h.counts.size();
  for (double v : values) {
    // First edge strictly greater than v, minus one, is the bin.
    const auto it = std::upper_bound(edges.begin(), edges.end(), v);
    std::size_t b = it == edges.begin() ? 0 : static_cast<std::size_t>(it - edges.begin()) - 1;
    if (b >= bins) b = bins - 1;
    ++h.counts[b];
  }
  return h;
}

std::vector<double> uniform_edges(double lo, double hi, std::size_t bins) {
  if (bins < 1) throw ValidationError("histogram: bins must be >= 1");
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
  std::vector<double> e(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i)
    e[i] = i == bins ? hi : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  return e;
}

Moments moments(const std::vector<double>& values) {
  Moments m;
  if (values.empty()) return m;
  for (double v : values) m.mean += v;
  m.mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - m.mean) * (v - m.mean);
  m.stddev = std::sqrt(ss / static_cast<double>(values.size()));
  return m;
}

// ---------------------------------------------------------------- rewards

double response_reward(const Policy& policy, const Policy* reference, RewardKind kind, double beta,
                       const TokenSeq& prompt, const TokenSeq& response) {
  const double sum = seq_logprob(policy, prompt, response);
  std::optional<double> ref;
  if (kind == RewardKind::dpo) {
    if (reference == nullptr) throw ValidationError("dpo reward kind needs a reference policy");
    ref = seq_logprob(*reference, prompt, response);
  }
  return implicit_reward(kind, sum, static_cast<int>(response.size()), ref, beta);
}

std::vector<double> delta_r_values(const Policy& policy, const std::vector<PreferencePair>& pairs,
                                   RewardKind kind, double beta, const Policy* reference) {
  std::vector<double> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs)
    out.push_back(response_reward(policy, reference, kind, beta, p.prompt, p.chosen) -
                  response_reward(policy, reference, kind, beta, p.prompt, p.rejected));
  return out;
}

double accuracy_from_gaps(const std::vector<double>& gaps) {
  if (gaps.empty()) throw ValidationError("reward accuracy: empty evaluation set");
  double score = 0.0;
  for (double g : gaps) score += g > 0.0 ? 1.0 : (g == 0.0 ? 0.5 : 0.0);
  return score / static_cast<double>(gaps.size());
}

RewardReport reward_accuracy(const Policy& policy, const std::vector<PreferencePair>& pairs,
                             RewardKind kind, double beta, const Policy* reference,
                             const std::vector<double>& edges) {
  if (pairs.empty()) throw ValidationError("reward accuracy: empty evaluation set");
  if (kind == RewardKind::dpo && reference == nullptr)
    throw ValidationError("reward accuracy: dpo kind needs a reference policy");
  RewardReport r;
  r.kind = kind;
  r.beta = beta;
  r.n = pairs.size();
  const auto gaps = delta_r_values(policy, pairs, kind, beta, reference);
  for (double g : gaps) {
    if (g > 0.0) ++r.wins;
    else if (g == 0.0) ++r.ties;
  }
  r.accuracy = accuracy_from_gaps(gaps);
  r.delta_r = moments(gaps);
  if (edges.empty()) {
    const auto [lo, hi] = std::minmax_element(gaps.begin(), gaps.end());
    r.delta_r_histogram = histogram(gaps, uniform_edges(*lo, *hi, 10));
  } else {
    r.delta_r_histogram = histogram(gaps, edges);
  }
  for (const auto& p : pairs) r.mean_chosen_avg_logp += avg_seq_logprob(policy, p.prompt, p.chosen);
  r.mean_chosen_avg_logp /= static_cast<double>(pairs.size());
  return r;
}

DeltaRDistribution delta_r_distribution(const Policy& policy,
                                        const std::vector<PreferencePair>& pairs, RewardKind kind,
                                        double beta, const std::vector<double>& edges,
                                        const Policy* reference) {
  DeltaRDistribution d;
  d.values = delta_r_values(policy, pairs, kind, beta, reference);
  d.moments = moments(d.values);
  d.histogram = histogram(d.values, edges);
  return d;
}

std::vector<double> length_normalized_gaps(const Policy& policy,
                                           const std::vector<PreferencePair>& pairs, double beta) {
  std::vector<double> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs)
    out.push_back(length_normalized_margin(
        seq_logprob(policy, p.prompt, p.chosen), static_cast<int>(p.chosen.size()),
        seq_logprob(policy, p.prompt, p.rejected), static_cast<int>(p.rejected.size()), beta, 0.0));
  return out;
}

// ---------------------------------------------------------------- DAA

DAAReport daa(const std::vector<double>& sft, const std::vector<double>& method,
              const std::vector<std::string>& tasks) {
  if (sft.empty() || sft.size() != method.size())
    throw ValidationError("daa: accuracy lists must be non-empty and of equal length");
  if (!tasks.empty() && tasks.size() != sft.size())
    throw ValidationError("daa: task names do not match the accuracy lists");
  DAAReport r;
  r.tasks = tasks;
  for (std::size_t i = 0; i < sft.size(); ++i) {
    r.sft_mean_accuracy += sft[i];
    r.method_mean_accuracy += method[i];
  }
  r.sft_mean_accuracy /= static_cast<double>(sft.size());
  r.method_mean_accuracy /= static_cast<double>(method.size());
  r.daa = r.method_mean_accuracy - r.sft_mean_accuracy;
  return r;
}

double gold_token_accuracy(const Policy& policy, const std::vector<PreferenceTriple>& data) {
  if (data.empty()) throw ValidationError("gold accuracy: empty dataset");
  std::size_t hits = 0, total = 0;
  std::vector<double> logits(static_cast<std::size_t>(policy.vocab_size()));
  for (const auto& t : data) {
    validate_sequences(policy, t.prompt, t.gold);
    for (std::size_t j = 0; j < t.gold.size(); ++j) {
      policy.logits(context_window(policy, t.prompt, t.gold, j), logits);
      const auto best = std::max_element(logits.begin(), logits.end()) - logits.begin();
      hits += best == t.gold[j] ? 1 : 0;
      ++total;
    }
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(total);
}

// ---------------------------------------------------------------- lengths

LengthStats length_stats(const Policy& policy, const std::vector<TokenSeq>& prompts,
                         const SampleOptions& opts) {
  if (prompts.empty()) throw ValidationError("length stats: need at least one prompt");
  LengthStats s;
  s.n = prompts.size();
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    SampleOptions o = opts;
    o.seed = mix_seed(opts.seed, i);
    s.lengths.push_back(sample(policy, prompts[i], o).size());
  }
  double total = 0.0;
  for (std::size_t l : s.lengths) {
    total += static_cast<double>(l);
    s.max = std::max(s.max, l);
  }
  s.mean = total / static_cast<double>(s.n);
  std::vector<std::size_t> sorted = s.lengths;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t mid = sorted.size() / 2;
  s.median = sorted.size() % 2 == 1
                 ? static_cast<double>(sorted[mid])
                 : 0.5 * static_cast<double>(sorted[mid - 1] + sorted[mid]);
  return s;
}

// ---------------------------------------------------------------- MER optimum

void RewardTable::validate() const {
  if (responses.empty()) throw ValidationError("reward table: empty");
  if (responses.size() != rewards.size())
    throw ValidationError("reward table: responses and rewards differ in size");
  if (responses.size() > kEnumerationGuard)
    throw SizeError("reward table: exceeds the enumeration guard");
  for (double r : rewards)
    if (!std::isfinite(r)) throw ValidationError("reward table: non-finite reward");
}

RewardTable enumerate_table(int vocab, std::size_t length,
                            const std::function<double(const TokenSeq&)>& fn) {
  if (vocab < 1 || length < 1) throw ValidationError("reward table: vocab and length must be >= 1");
  std::size_t states = 1;
  for (std::size_t i = 0; i < length; ++i) {
    states *= static_cast<std::size_t>(vocab);
    if (states > kEnumerationGuard) throw SizeError("reward table: exceeds the enumeration guard");
  }
  RewardTable t;
  TokenSeq seq(length);
  for (std::size_t s = 0; s < states; ++s) {
    std::size_t rem = s;
    for (std::size_t j = length; j-- > 0;) {
      seq[j] = static_cast<Token>(rem % static_cast<std::size_t>(vocab));
      rem /= static_cast<std::size_t>(vocab);
    }
    t.responses.push_back(seq);
    t.rewards.push_back(fn(seq));
  }
  return t;
}

RewardTable random_table(int vocab, std::size_t length, std::uint64_t seed, double lo, double hi) {
  Rng rng(seed);
  return enumerate_table(vocab, length, [&](const TokenSeq&) { return rng.uniform(lo, hi); });
}

OptimalPolicy mer_optimal_policy(const RewardTable& table, double beta) {
  table.validate();
  if (!(beta > 0.0)) throw ValidationError("optimal policy: beta must be > 0");
  OptimalPolicy p;
  std::vector<double> scaled(table.size());
  for (std::size_t i = 0; i < table.size(); ++i) scaled[i] = table.rewards[i] / beta;
  p.log_z = ad::log_sum_exp_value(scaled);
  for (double s : scaled) {
    p.log_probs.push_back(s - p.log_z);
    p.probs.push_back(std::exp(s - p.log_z));
  }
  return p;
}

RoundTrip reward_roundtrip_check(const RewardTable& table, double beta) {
  const OptimalPolicy p = mer_optimal_policy(table, beta);
  RoundTrip rt;
  rt.log_z = p.log_z;
  double offset = 0.0;
  for (std::size_t i = 0; i < table.size(); ++i) {
    const double rebuilt = beta * p.log_probs[i] + beta * p.log_z;
    rt.max_deviation = std::max(rt.max_deviation, std::abs(rebuilt - table.rewards[i]));
    offset += table.rewards[i] - beta * p.log_probs[i];
  }
  offset /= static_cast<double>(table.size());
  for (std::size_t i = 0; i < table.size(); ++i)
    rt.max_deviation_up_to_constant =
        std::max(rt.max_deviation_up_to_constant,
                 std::abs(beta * p.log_probs[i] + offset - table.rewards[i]));
  return rt;
}

EquivalenceReport equivalence_shift_check(const RewardTable& table, double g, double beta,
                                          double tol) {
  return equivalence_shift_check(table, std::vector<double>(table.size(), g), beta, tol);
}

EquivalenceReport equivalence_shift_check(const RewardTable& table,
                                          const std::vector<double>& delta, double beta,
                                          double tol) {
  table.validate();
  if (delta.size() != table.size())
    throw ValidationError("equivalence check: perturbation size does not match the table");
  RewardTable shifted = table;
  for (std::size_t i = 0; i < table.size(); ++i) shifted.rewards[i] += delta[i];
  EquivalenceReport rep;
  for (std::size_t i = 0; i < table.size(); ++i)
    for (std::size_t j = 0; j < table.size(); ++j) {
      if (i == j) continue;
      const double a = bt_preference_prob(table.rewards[i], table.rewards[j]);
      const double b = bt_preference_prob(shifted.rewards[i], shifted.rewards[j]);
      rep.max_preference_diff = std::max(rep.max_preference_diff, std::abs(a - b));
    }
  const auto p = mer_optimal_policy(table, beta);
  const auto q = mer_optimal_policy(shifted, beta);
  for (std::size_t i = 0; i < table.size(); ++i)
    rep.max_policy_diff = std::max(rep.max_policy_diff, std::abs(p.probs[i] - q.probs[i]));
  rep.equivalent = rep.max_preference_diff <= tol && rep.max_policy_diff <= tol;
  return rep;
}

double total_variation(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) throw ValidationError("total variation: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

MerlFitResult merl_fit(const RewardTable& table, int vocab, const MerlFitConfig& cfg) {
  table.validate();
  if (!(cfg.learning_rate > 0.0) || cfg.max_steps < 1)
    throw ValidationError("merl fit: learning_rate must be > 0 and max_steps >= 1");
  const std::size_t length = table.responses.front().size();
  for (const auto& y : table.responses)
    if (y.size() != length) throw ValidationError("merl fit: responses must share one length");

  const auto target = mer_optimal_policy(table, cfg.beta).probs;
  MerlFitResult res;
  res.policy = std::make_unique<TabularPolicy>(vocab, 1, cfg.seed, 0.1);
  const TokenSeq prompt;
  auto current = [&] {
    std::vector<double> probs;
    for (const auto& y : table.responses) probs.push_back(std::exp(seq_logprob(*res.policy, prompt, y)));
    return probs;
  };
  res.probs = current();
  res.total_variation = total_variation(res.probs, target);
  while (res.steps < cfg.max_steps && res.total_variation > cfg.tolerance) {
    ad::Tape tape;
    PolicyGraph graph(*res.policy, tape);
    std::vector<ad::Var> terms;
    for (std::size_t i = 0; i < table.size(); ++i) {
      ad::Var lp = graph.seq_logprob(prompt, table.responses[i]);
      // pi(y) * (beta log pi(y) - r(y))
      terms.push_back(ad::exp(lp) * ad::shift(ad::scale(lp, cfg.beta), -table.rewards[i]));
    }
    ad::Var objective = ad::sum(terms);
    tape.backward(objective);
    const auto grads = tape.gradients(graph.params());
    auto params = res.policy->mutable_parameters();
    for (std::size_t k = 0; k < params.size(); ++k) params[k] -= cfg.learning_rate * grads[k];
    ++res.steps;
    res.probs = current();
    res.total_variation = total_variation(res.probs, target);
  }
  return res;
}

// ---------------------------------------------------------------- trajectories

namespace {

std::vector<const StepLog*> analysed_steps(const std::string& name, const Trajectory& t) {
  if (t.steps.empty()) throw ValidationError("trajectory '" + name + "' has no step logs");
  for (std::size_t i = 1; i < t.steps.size(); ++i)
    if (t.steps[i].step <= t.steps[i - 1].step)
      throw ValidationError("trajectory '" + name + "' has non-monotone step indices at entry " +
                            std::to_string(i));
  std::vector<const StepLog*> pref, all;
  for (const auto& s : t.steps) {
    all.push_back(&s);
    if (s.stage == "preference") pref.push_back(&s);
  }
  return pref.empty() ? all : pref;
}

}  // namespace

ConflictRow conflict_row(const std::string& name, const Trajectory& t) {
  const auto steps = analysed_steps(name, t);
  ConflictRow r;
  r.name = name;
  r.steps = steps.size();
  r.start_chosen = steps.front()->chosen_logp;
  r.end_chosen = steps.back()->chosen_logp;
  r.start_gold = steps.front()->gold_logp;
  r.end_gold = steps.back()->gold_logp;
  return r;
}

std::vector<ConflictRow> conflict_report(const std::map<std::string, Trajectory>& runs) {
  std::vector<ConflictRow> rows;
  for (const auto& [name, t] : runs) rows.push_back(conflict_row(name, t));
  return rows;
}

std::vector<NoiseRow> noise_report(const std::map<std::string, Trajectory>& runs) {
  std::vector<NoiseRow> rows;
  for (const auto& [name, t] : runs) {
    const auto steps = analysed_steps(name, t);
    NoiseRow r;
    r.name = name;
    r.start_gold = steps.front()->gold_logp;
    r.end_gold = steps.back()->gold_logp;
    r.start_reward_gap = steps.front()->reward_gap;
    r.end_reward_gap = steps.back()->reward_gap;
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------- output

ordered_json to_json(const Histogram& h) {
  return ordered_json{{"edges", h.edges}, {"counts", h.counts}};
}

ordered_json to_json(const RewardReport& r) {
  ordered_json j;
  j["reward_kind"] = std::string(reward_kind_name(r.kind));
  j["beta"] = r.beta;
  j["n"] = r.n;
  j["accuracy"] = r.accuracy;
  j["wins"] = r.wins;
  j["ties"] = r.ties;
  j["delta_r_mean"] = r.delta_r.mean;
  j["delta_r_stddev"] = r.delta_r.stddev;
  j["delta_r_histogram"] = to_json(r.delta_r_histogram);
  j["mean_chosen_avg_logp"] = r.mean_chosen_avg_logp;
  return j;
}

ordered_json to_json(const DAAReport& r) {
  ordered_json j;
  j["tasks"] = r.tasks;
  j["sft_mean_accuracy"] = r.sft_mean_accuracy;
  j["method_mean_accuracy"] = r.method_mean_accuracy;
  j["daa"] = r.daa;
  return j;
}

ordered_json to_json(const LengthStats& s) {
  return ordered_json{{"n", s.n}, {"mean", s.mean}, {"median", s.median}, {"max", s.max}};
}

ordered_json to_json(const std::vector<ConflictRow>& rows) {
  ordered_json a = ordered_json::array();
  for (const auto& r : rows)
    a.push_back({{"name", r.name},
                 {"steps", r.steps},
                 {"start_chosen_logp", r.start_chosen},
                 {"end_chosen_logp", r.end_chosen},
                 {"delta_chosen_logp", r.delta_chosen()},
                 {"chosen_decreased", r.delta_chosen() < 0.0},
                 {"start_gold_logp", r.start_gold},
                 {"end_gold_logp", r.end_gold},
                 {"delta_gold_logp", r.delta_gold()},
                 {"gold_increased", r.delta_gold() > 0.0}});
  return a;
}

ordered_json to_json(const std::vector<NoiseRow>& rows) {
  ordered_json a = ordered_json::array();
  for (const auto& r : rows)
    a.push_back({{"name", r.name},
                 {"start_gold_logp", r.start_gold},
                 {"end_gold_logp", r.end_gold},
                 {"delta_gold_logp", r.delta_gold()},
                 {"start_reward_gap", r.start_reward_gap},
                 {"end_reward_gap", r.end_reward_gap}});
  return a;
}

std::string histogram_csv(const Histogram& h) {
  std::string out = "bin,lower,upper,count\n";
  for (std::size_t i = 0; i < h.counts.size(); ++i)
    out += std::to_string(i) + "," + exact(h.edges[i]) + "," + exact(h.edges[i + 1]) + "," +
           std::to_string(h.counts[i]) + "\n";
  return out;
}

std::string reward_markdown(const RewardReport& r, const std::string& title) {
  std::ostringstream md;
  md << "# " << title << "\n\n"
     << "| reward kind | beta | n | accuracy | mean dr | sd dr | mean avg log pi(y_w) |\n"
     << "|---|---|---|---|---|---|---|\n"
     << "| " << reward_kind_name(r.kind) << " | " << num(r.beta) << " | " << r.n << " | "
     << num(r.accuracy) << " | " << num(r.delta_r.mean) << " | " << num(r.delta_r.stddev) << " | "
     << num(r.mean_chosen_avg_logp) << " |\n";
  return md.str();
}

std::string conflict_markdown(const std::vector<ConflictRow>& rows) {
  std::ostringstream md;
  md << "# Likelihood trajectories\n\n"
     << "| run | steps | chosen start | chosen end | d chosen | gold start | gold end | d gold |\n"
     << "|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows)
    md << "| " << r.name << " | " << r.steps << " | " << num(r.start_chosen) << " | "
       << num(r.end_chosen) << " | " << num(r.delta_chosen()) << " | " << num(r.start_gold)
       << " | " << num(r.end_gold) << " | " << num(r.delta_gold()) << " |\n";
  return md.str();
}

std::string noise_markdown(const std::vector<NoiseRow>& rows) {
  std::ostringstream md;
  md << "# Gold likelihood and reward gap\n\n"
     << "| run | gold start | gold end | d gold | gap start | gap end |\n"
     << "|---|---|---|---|---|---|\n";
  for (const auto& r : rows)
    md << "| " << r.name << " | " << num(r.start_gold) << " | " << num(r.end_gold) << " | "
       << num(r.delta_gold()) << " | " << num(r.start_reward_gap) << " | "
       << num(r.end_reward_gap) << " |\n";
  return md.str();
}

std::string daa_markdown(const DAAReport& r) {
  std::ostringstream md;
  md << "# DAA\n\n| SFT mean | method mean | DAA (pp) |\n|---|---|---|\n"
     << "| " << num(r.sft_mean_accuracy) << " | " << num(r.method_mean_accuracy) << " | "
     << num(r.daa) << " |\n";
  return md.str();
}

std::string report_stem(const std::string& method, const std::string& tag, std::uint64_t seed) {
  std::string s = method + "_" + tag + "_seed" + std::to_string(seed);
  for (char& c : s) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                    c == '.' || c == '_' || c == '-';
    if (!ok) c = '_';
  }
  return s;
}

}  // namespace tpo

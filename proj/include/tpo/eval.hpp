#pragma once

// Measurements: reward accuracy, reward-gap histograms, DAA, length
// statistics, the maximum-entropy optimal policy over enumerable responses,
// reward-equivalence checks and trajectory summaries.

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tpo/data.hpp"
#include "tpo/losses.hpp"
#include "tpo/policy.hpp"
#include "tpo/train.hpp"

namespace tpo {

// --------------------------------------------------------------- histograms

struct Histogram {
  std::vector<double> edges;  // strictly increasing, size bins + 1
  std::vector<std::size_t> counts;
};

// Bins are [e_i, e_{i+1}) except the last, which is closed. Values outside
// the edges land in the first or last bin so counts always sum to n.
Histogram histogram(const std::vector<double>& values, const std::vector<double>& edges);
std::vector<double> uniform_edges(double lo, double hi, std::size_t bins);

struct Moments {
  double mean = 0.0, stddev = 0.0;  // population standard deviation
};
Moments moments(const std::vector<double>& values);

// --------------------------------------------------------------- rewards

// Implicit reward of one response under `policy` (and `reference` for the
// dpo kind).
double response_reward(const Policy& policy, const Policy* reference, RewardKind kind,
                       double beta, const TokenSeq& prompt, const TokenSeq& response);

// r(chosen) - r(rejected) per pair.
std::vector<double> delta_r_values(const Policy& policy, const std::vector<PreferencePair>& pairs,
                                   RewardKind kind, double beta, const Policy* reference = nullptr);

// (wins + 0.5 * ties) / n over reward gaps.
double accuracy_from_gaps(const std::vector<double>& gaps);

struct RewardReport {
  RewardKind kind = RewardKind::tpo;
  double beta = 0.0;
  std::size_t n = 0;
  double accuracy = 0.0;
  std::size_t wins = 0, ties = 0;
  Moments delta_r;
  Histogram delta_r_histogram;
  double mean_chosen_avg_logp = 0.0;
};

// Throws ValidationError on an empty set or a missing reference for the dpo
// kind. Without explicit edges the histogram spans [min, max] in 10 bins.
RewardReport reward_accuracy(const Policy& policy, const std::vector<PreferencePair>& pairs,
                             RewardKind kind, double beta, const Policy* reference = nullptr,
                             const std::vector<double>& edges = {});

struct DeltaRDistribution {
  std::vector<double> values;
  Moments moments;
  Histogram histogram;
};
DeltaRDistribution delta_r_distribution(const Policy& policy,
                                        const std::vector<PreferencePair>& pairs, RewardKind kind,
                                        double beta, const std::vector<double>& edges,
                                        const Policy* reference = nullptr);

// Margin argument of the TPO-L / SimPO sigmoid before the margin is
// subtracted: beta/|y_w| log pi(y_w) - beta/|y_l| log pi(y_l), per pair.
std::vector<double> length_normalized_gaps(const Policy& policy,
                                           const std::vector<PreferencePair>& pairs, double beta);

// --------------------------------------------------------------- DAA

struct DAAReport {
  std::vector<std::string> tasks;
  double sft_mean_accuracy = 0.0;
  double method_mean_accuracy = 0.0;
  double daa = 0.0;  // percentage points
};

DAAReport daa(const std::vector<double>& sft, const std::vector<double>& method,
              const std::vector<std::string>& tasks = {});

// Teacher-forced next-token accuracy on gold responses, in percent.
double gold_token_accuracy(const Policy& policy, const std::vector<PreferenceTriple>& data);

// --------------------------------------------------------------- lengths

struct LengthStats {
  std::size_t n = 0;
  double mean = 0.0, median = 0.0;
  std::size_t max = 0;
  std::vector<std::size_t> lengths;
};

// One sample per prompt; prompt i uses seed mix_seed(opts.seed, i).
LengthStats length_stats(const Policy& policy, const std::vector<TokenSeq>& prompts,
                         const SampleOptions& opts);

// --------------------------------------------------------------- MER optimum

struct RewardTable {
  std::vector<TokenSeq> responses;
  std::vector<double> rewards;

  std::size_t size() const { return responses.size(); }
  void validate() const;
};

// All V^L responses of length L in lexicographic order, rewards from `fn`.
RewardTable enumerate_table(int vocab, std::size_t length,
                            const std::function<double(const TokenSeq&)>& fn);
// Rewards uniform in [lo, hi) over all V^L responses.
RewardTable random_table(int vocab, std::size_t length, std::uint64_t seed, double lo = -2.0,
                         double hi = 2.0);

struct OptimalPolicy {
  std::vector<double> probs;      // aligned with the table
  std::vector<double> log_probs;
  double log_z = 0.0;             // log sum exp(r / beta)
};

OptimalPolicy mer_optimal_policy(const RewardTable& table, double beta);

struct RoundTrip {
  double max_deviation = 0.0;                // |beta log pi + beta log Z - r|
  double max_deviation_up_to_constant = 0.0; // beta log pi vs r after removing the mean offset
  double log_z = 0.0;
};
RoundTrip reward_roundtrip_check(const RewardTable& table, double beta);

struct EquivalenceReport {
  double max_preference_diff = 0.0;  // over all ordered response pairs
  double max_policy_diff = 0.0;
  bool equivalent = false;           // both within tolerance
};

// Constant shift r' = r + g.
EquivalenceReport equivalence_shift_check(const RewardTable& table, double g, double beta,
                                          double tol = 1e-12);
// Per-response perturbation r'_i = r_i + delta_i (a negative control when the
// entries differ).
EquivalenceReport equivalence_shift_check(const RewardTable& table,
                                          const std::vector<double>& delta, double beta,
                                          double tol = 1e-12);

double total_variation(const std::vector<double>& p, const std::vector<double>& q);

struct MerlFitConfig {
  double beta = 1.0;
  double learning_rate = 0.5;
  int max_steps = 5000;
  double tolerance = 1e-3;  // stop once total variation drops below
  std::uint64_t seed = 0;
};

struct MerlFitResult {
  int steps = 0;
  double total_variation = 0.0;
  std::vector<double> probs;
  std::unique_ptr<TabularPolicy> policy;
};

// Gradient descent on -sum_y pi(y) [r(y) - beta log pi(y)] for an order-1
// tabular policy over the table's responses (all of one length, empty
// prompt), every term computed by enumeration.
MerlFitResult merl_fit(const RewardTable& table, int vocab, const MerlFitConfig& cfg);

// --------------------------------------------------------------- trajectories

struct ConflictRow {
  std::string name;
  std::size_t steps = 0;
  double start_chosen = 0.0, end_chosen = 0.0;
  double start_gold = 0.0, end_gold = 0.0;
  double delta_chosen() const { return end_chosen - start_chosen; }
  double delta_gold() const { return end_gold - start_gold; }
};

// Uses the preference stage when one is logged, else every step. Throws
// ValidationError naming the trajectory when it is empty or its step indices
// do not strictly increase.
ConflictRow conflict_row(const std::string& name, const Trajectory& t);
std::vector<ConflictRow> conflict_report(const std::map<std::string, Trajectory>& runs);

struct NoiseRow {
  std::string name;
  double start_gold = 0.0, end_gold = 0.0;
  double start_reward_gap = 0.0, end_reward_gap = 0.0;
  double delta_gold() const { return end_gold - start_gold; }
};
std::vector<NoiseRow> noise_report(const std::map<std::string, Trajectory>& runs);

// --------------------------------------------------------------- output

nlohmann::ordered_json to_json(const Histogram& h);
nlohmann::ordered_json to_json(const RewardReport& r);
nlohmann::ordered_json to_json(const DAAReport& r);
nlohmann::ordered_json to_json(const LengthStats& s);
nlohmann::ordered_json to_json(const std::vector<ConflictRow>& rows);
nlohmann::ordered_json to_json(const std::vector<NoiseRow>& rows);

std::string histogram_csv(const Histogram& h);
std::string reward_markdown(const RewardReport& r, const std::string& title);
std::string conflict_markdown(const std::vector<ConflictRow>& rows);
std::string noise_markdown(const std::vector<NoiseRow>& rows);
std::string daa_markdown(const DAAReport& r);

// "<method>_<tag>_seed<seed>" with characters outside [A-Za-z0-9._-] mapped
// to '_'.
std::string report_stem(const std::string& method, const std::string& tag, std::uint64_t seed);

}  // namespace tpo

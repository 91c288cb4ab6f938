#pragma once

// Deterministic training loop: batching, AdamW/SGD, warmup + cosine schedule
// and per-step trajectory logging.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tpo/data.hpp"
#include "tpo/losses.hpp"
#include "tpo/policy.hpp"

namespace tpo {

enum class OptimizerKind { adamw, sgd };
enum class Schedule { cosine, constant };

// sft_only: BC on gold. preference_only: the configured loss from the initial
// policy. tpo_single_step: as preference_only, restricted to tpo / tpo_l.
// two_step: an SFT stage on gold, then the configured loss with the SFT
// result frozen as reference.
enum class RunMode { sft_only, preference_only, tpo_single_step, two_step };

std::string_view run_mode_name(RunMode m);
RunMode parse_run_mode(std::string_view name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adamw;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.0;
};

struct TrainConfig {
  LossConfig loss;
  double learning_rate = 1e-2;
  int batch_size = 16;
  int epochs = 1;
  std::optional<int> max_steps;
  double warmup_fraction = 0.1;
  Schedule schedule = Schedule::cosine;
  std::uint64_t seed = 0;
  OptimizerConfig optimizer;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
  PolicySpec policy;
  RunMode mode = RunMode::preference_only;
  // SFT stage of two_step; unset values fall back to the main ones.
  std::optional<double> sft_learning_rate;
  std::optional<int> sft_epochs;

  void validate() const;
};

// Parses the "train" section of a run configuration. Unknown keys are
// rejected so typos do not silently fall back to defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::ordered_json train_config_to_json(const TrainConfig& cfg);

// Steps for one stage: max_steps when set, else epochs * ceil(n / batch).
int planned_steps(const TrainConfig& cfg, std::size_t dataset_size, int epochs);

// Linear warmup over ceil(warmup_fraction * max_steps) steps, then cosine
// decay to 0 at max_steps (or flat at the peak for the constant schedule).
double lr_at(int step, int max_steps, double peak, double warmup_fraction,
             Schedule schedule = Schedule::cosine);
double lr_at(int step, int max_steps, const TrainConfig& cfg);

struct StepLog {
  int step = 0;
  std::string stage;  // "sft" or "preference"
  double lr = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double gold_logp = 0.0, chosen_logp = 0.0, rejected_logp = 0.0;
  double reward_gap = 0.0;

  bool operator==(const StepLog&) const = default;
};

nlohmann::ordered_json step_to_json(const StepLog& s);
StepLog step_from_json(const nlohmann::json& j);

// Sequence log-likelihoods of a batch recorded on graph's tape; reference
// sums are filled when `reference` is given.
BatchLogProbs batch_logprobs(PolicyGraph& graph, std::span<const PreferenceTriple* const> batch,
                             const ReferencePolicy* reference);

// Mean batch loss under `policy` with parameters replaced by theta.
double batch_loss_value(const Policy& policy, std::span<const double> theta,
                        std::span<const PreferenceTriple* const> batch, const LossConfig& loss,
                        const ReferencePolicy* reference);

// Finite-difference check of the batch loss gradient over every policy
// parameter.
ad::GradCheckResult loss_gradcheck(const Policy& policy,
                                   std::span<const PreferenceTriple* const> batch,
                                   const LossConfig& loss, const ReferencePolicy* reference,
                                   double eps = 1e-5);

struct OptimizerState {
  std::vector<double> m, v;
  int t = 0;
};

// Reward kind whose gap is logged for a method.
RewardKind logged_reward_kind(Method m);

// One optimizer update on `batch`. Log-likelihoods in the StepLog are those of
// the pre-update parameters. Non-finite losses throw std::runtime_error naming
// the batch-local record index.
StepLog train_step(Policy& policy, std::span<const PreferenceTriple* const> batch,
                   const LossConfig& loss, bool sft, const TrainConfig& cfg,
                   OptimizerState& state, int step, int max_steps, double peak_lr,
                   const ReferencePolicy* reference);

struct Trajectory {
  nlohmann::ordered_json config;
  std::string mode;
  std::vector<StepLog> steps;
  std::string final_checksum;
  std::string reference_checksum_before, reference_checksum_after;
};

// Header line then one line per step.
std::string trajectory_to_jsonl(const Trajectory& t);
Trajectory trajectory_from_jsonl(const std::string& text);
void write_trajectory(const std::string& path, const Trajectory& t);
Trajectory read_trajectory(const std::string& path);

struct TrainResult {
  Trajectory trajectory;
  std::unique_ptr<Policy> policy;
  std::unique_ptr<Policy> reference;  // frozen reference used, when any
};

// When `init` is null a fresh policy is built from cfg.policy with a seed
// derived from cfg.seed. Methods needing a reference use a frozen copy of the
// starting policy (the SFT result in two_step mode).
TrainResult run_training(const std::vector<PreferenceTriple>& data, const TrainConfig& cfg,
                         const Policy* init = nullptr);

// Starting policy used by run_training for cfg.
std::unique_ptr<Policy> initial_policy(const TrainConfig& cfg);

}  // namespace tpo

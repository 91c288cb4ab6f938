#pragma once

// Preference-optimization objectives over sequence log-likelihoods.
//
// Every loss comes in a tape form (ad::Var in, ad::Var out) used for
// training, plus scalar helpers for the per-record formulas. Batch losses are
// the arithmetic mean of per-record losses, reduced in record order.

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tpo/autodiff.hpp"

namespace tpo {

enum class Method { tpo, tpo_l, dpo, simpo, cpo, ipo, orpo, kto, slic_hf };

std::string_view method_name(Method m);
// Accepts the canonical names ("tpo", "tpo_l", "dpo", "simpo", "cpo", "ipo",
// "orpo", "kto", "slic_hf"), case-insensitively, with '-' treated as '_'.
// Throws ValidationError listing the valid names.
Method parse_method(std::string_view name);
const std::vector<Method>& all_methods();

bool needs_reference(Method m);  // dpo, ipo, kto
bool uses_gold(Method m);        // tpo, tpo_l
bool is_length_normalized(Method m);  // tpo_l, simpo, orpo

struct LossConfig {
  Method method = Method::tpo;
  double alpha = 1.0;
  double beta = 0.01;
  double gamma = 0.0;

  bool length_normalized() const { return is_length_normalized(method); }
  // beta > 0, alpha >= 0, gamma >= 0, gamma == 0 unless method is tpo_l or simpo.
  void validate() const;
};

// Per-record sequence log-likelihoods for one batch. Reference sums are
// constants (the reference policy is frozen) and are empty when absent.
struct BatchLogProbs {
  std::vector<ad::Var> gold_sum, chosen_sum, rejected_sum;
  std::vector<int> gold_len, chosen_len, rejected_len;
  std::vector<double> chosen_ref, rejected_ref;

  std::size_t size() const { return chosen_sum.size(); }
  bool has_reference() const { return !chosen_ref.empty(); }
  // Sizes must match and lengths be positive. Reference vectors are empty or full.
  void validate() const;
};

// -log sigmoid(beta * (chosen - rejected))
ad::Var preference_term(ad::Var chosen_sum, ad::Var rejected_sum, double beta);
double preference_term(double chosen_sum, double rejected_sum, double beta);

// -log pi(y_gold | x)
ad::Var bc_term(ad::Var gold_sum);
double bc_term(double gold_sum);

// Batch objectives. Method-specific entry points reject a mismatched
// cfg.method with ValidationError.
ad::Var tpo_loss(const BatchLogProbs& batch, const LossConfig& cfg);
ad::Var tpo_l_loss(const BatchLogProbs& batch, const LossConfig& cfg);
ad::Var baseline_loss(Method method, const BatchLogProbs& batch, const LossConfig& cfg);
// Dispatches on cfg.method.
ad::Var loss(const BatchLogProbs& batch, const LossConfig& cfg);
// Per-record terms whose mean is loss(batch, cfg).
std::vector<ad::Var> record_losses(const BatchLogProbs& batch, const LossConfig& cfg);

// Scalar versions of the closed-form per-record losses, for one record.
struct RecordLogProbs {
  double gold_sum = 0.0, chosen_sum = 0.0, rejected_sum = 0.0;
  int gold_len = 1, chosen_len = 1, rejected_len = 1;
  std::optional<double> chosen_ref, rejected_ref;
};
double record_loss(const RecordLogProbs& rec, const LossConfig& cfg);

enum class RewardKind { tpo, dpo, simpo };
std::string_view reward_kind_name(RewardKind k);
RewardKind parse_reward_kind(std::string_view name);

// tpo: beta * sum; dpo: beta * (sum - ref_sum); simpo: beta / len * sum.
double implicit_reward(RewardKind kind, double sum, int len, std::optional<double> ref_sum,
                       double beta);

// sigmoid(reward_w - reward_l)
double bt_preference_prob(double reward_w, double reward_l);

// Argument of the TPO-L / SimPO sigmoid:
// beta/|y_w| * chosen - beta/|y_l| * rejected - gamma.
double length_normalized_margin(double chosen_sum, int chosen_len, double rejected_sum,
                                int rejected_len, double beta, double gamma);

// Closed-form gradient of the TPO per-record loss with respect to
// (gold_sum, chosen_sum, rejected_sum).
struct TpoGradient {
  double gold = 0.0, chosen = 0.0, rejected = 0.0;
};
TpoGradient tpo_closed_form_gradient(double chosen_sum, double rejected_sum, double alpha,
                                     double beta);

}  // namespace tpo

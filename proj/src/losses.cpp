#include "tpo/losses.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <sstream>

#include "tpo/error.hpp"

namespace tpo {

namespace {

constexpr std::array<std::pair<Method, std::string_view>, 9> kMethodNames{{
    {Method::tpo, "tpo"},
    {Method::tpo_l, "tpo_l"},
    {Method::dpo, "dpo"},
    {Method::simpo, "simpo"},
    {Method::cpo, "cpo"},
    {Method::ipo, "ipo"},
    {Method::orpo, "orpo"},
    {Method::kto, "kto"},
    {Method::slic_hf, "slic_hf"},
}};

std::string normalize_name(std::string_view name) {
  std::string s(name);
  for (char& c : s) {
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (c == '-') c = '_';
  }
  return s;
}

}  // namespace

std::string_view method_name(Method m) {
  for (const auto& [method, name] : kMethodNames)
    if (method == m) return name;
  return "unknown";
}

Method parse_method(std::string_view name) {
  const std::string key = normalize_name(name);
  for (const auto& [method, canonical] : kMethodNames)
    if (key == canonical) return method;
  std::ostringstream msg;
  msg << "unknown method '" << name << "'; valid methods:";
  for (const auto& entry : kMethodNames) msg << ' ' << entry.second;
  throw ValidationError(msg.str());
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> methods = [] {
    std::vector<Method> v;
    for (const auto& entry : kMethodNames) v.push_back(entry.first);
    return v;
  }();
  return methods;
}

bool needs_reference(Method m) {
  return m == Method::dpo || m == Method::ipo || m == Method::kto;
}

bool uses_gold(Method m) { return m == Method::tpo || m == Method::tpo_l; }

bool is_length_normalized(Method m) {
  return m == Method::tpo_l || m == Method::simpo || m == Method::orpo;
}

void LossConfig::validate() const {
  if (!(beta > 0.0) || !std::isfinite(beta)) throw ValidationError("loss: beta must be > 0");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ValidationError("loss: alpha must be >= 0");
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ValidationError("loss: gamma must be >= 0");
  if (gamma != 0.0 && method != Method::tpo_l && method != Method::simpo)
    throw ValidationError("loss: gamma applies only to tpo_l and simpo; got gamma=" +
                          std::to_string(gamma) + " for " + std::string(method_name(method)));
}

void BatchLogProbs::validate() const {
  const std::size_t n = chosen_sum.size();
  if (n == 0) throw ValidationError("batch: empty");
  if (rejected_sum.size() != n || chosen_len.size() != n || rejected_len.size() != n)
    throw ValidationError("batch: chosen/rejected fields differ in length");
  if (!gold_sum.empty() && (gold_sum.size() != n || gold_len.size() != n))
    throw ValidationError("batch: gold fields differ in length");
  if (!chosen_ref.empty() && (chosen_ref.size() != n || rejected_ref.size() != n))
    throw ValidationError("batch: reference fields differ in length");
  for (std::size_t i = 0; i < n; ++i) {
    if (chosen_len[i] < 1 || rejected_len[i] < 1 || (!gold_len.empty() && gold_len[i] < 1))
      throw ValidationError("batch: sequence lengths must be >= 1 (record " + std::to_string(i) +
                            ")");
  }
}

ad::Var preference_term(ad::Var chosen_sum, ad::Var rejected_sum, double beta) {
  return -ad::log_logistic(ad::scale(chosen_sum - rejected_sum, beta));
}

double preference_term(double chosen_sum, double rejected_sum, double beta) {
  return -ad::log_logistic_value(beta * (chosen_sum - rejected_sum));
}

ad::Var bc_term(ad::Var gold_sum) { return -gold_sum; }
double bc_term(double gold_sum) { return -gold_sum; }

namespace {

void require_method(const LossConfig& cfg, Method expected) {
  if (cfg.method != expected)
    throw ValidationError("loss: configured method " + std::string(method_name(cfg.method)) +
                          " does not match " + std::string(method_name(expected)));
}

void require_reference(const BatchLogProbs& batch, Method m) {
  if (!batch.has_reference())
    throw ValidationError(std::string(method_name(m)) + " needs reference log-probabilities");
}

void require_gold(const BatchLogProbs& batch, Method m) {
  if (batch.gold_sum.empty())
    throw ValidationError(std::string(method_name(m)) + " needs gold log-probabilities");
}

// -log sigmoid(beta/|y_w| * chosen - beta/|y_l| * rejected - gamma)
ad::Var margin_preference(ad::Var chosen, int chosen_len, ad::Var rejected, int rejected_len,
                          double beta, double gamma) {
  ad::Var arg = ad::scale(chosen, beta / chosen_len) - ad::scale(rejected, beta / rejected_len);
  return -ad::log_logistic(ad::shift(arg, -gamma));
}

// log(p / (1 - p)) for p = exp(avg), avg < 0
ad::Var log_odds(ad::Var avg) { return avg - ad::log(1.0 - ad::exp(avg)); }

std::vector<ad::Var> records_for(Method method, const BatchLogProbs& b, const LossConfig& cfg) {
  b.validate();
  cfg.validate();
  const std::size_t n = b.size();
  const double beta = cfg.beta, alpha = cfg.alpha;
  std::vector<ad::Var> out;
  out.reserve(n);
  switch (method) {
    case Method::tpo:
      require_gold(b, method);
      for (std::size_t i = 0; i < n; ++i)
        out.push_back(preference_term(b.chosen_sum[i], b.rejected_sum[i], beta) +
                      ad::scale(bc_term(b.gold_sum[i]), alpha));
      break;
    case Method::tpo_l:
      require_gold(b, method);
      for (std::size_t i = 0; i < n; ++i)
        out.push_back(margin_preference(b.chosen_sum[i], b.chosen_len[i], b.rejected_sum[i],
                                        b.rejected_len[i], beta, cfg.gamma) +
                      ad::scale(bc_term(b.gold_sum[i]), alpha));
      break;
    case Method::simpo:
      for (std::size_t i = 0; i < n; ++i)
        out.push_back(margin_preference(b.chosen_sum[i], b.chosen_len[i], b.rejected_sum[i],
                                        b.rejected_len[i], beta, cfg.gamma));
      break;
    case Method::cpo:
      for (std::size_t i = 0; i < n; ++i)
        out.push_back(preference_term(b.chosen_sum[i], b.rejected_sum[i], beta) +
                      bc_term(b.chosen_sum[i]));
      break;
    case Method::dpo:
      require_reference(b, method);
      for (std::size_t i = 0; i < n; ++i) {
        ad::Var h = ad::shift(b.chosen_sum[i], -b.chosen_ref[i]) -
                    ad::shift(b.rejected_sum[i], -b.rejected_ref[i]);
        out.push_back(-ad::log_logistic(ad::scale(h, beta)));
      }
      break;
    case Method::ipo:
      require_reference(b, method);
      for (std::size_t i = 0; i < n; ++i) {
        ad::Var h = ad::shift(b.chosen_sum[i], -b.chosen_ref[i]) -
                    ad::shift(b.rejected_sum[i], -b.rejected_ref[i]);
        ad::Var d = ad::shift(h, -1.0 / (2.0 * beta));
        out.push_back(d * d);
      }
      break;
    case Method::orpo:
      for (std::size_t i = 0; i < n; ++i) {
        ad::Var chosen_avg = ad::scale(b.chosen_sum[i], 1.0 / b.chosen_len[i]);
        ad::Var rejected_avg = ad::scale(b.rejected_sum[i], 1.0 / b.rejected_len[i]);
        ad::Var nll = ad::scale(bc_term(b.chosen_sum[i]), 1.0 / b.chosen_len[i]);
        ad::Var odds = -ad::log_logistic(log_odds(chosen_avg) - log_odds(rejected_avg));
        out.push_back(nll + ad::scale(odds, beta));
      }
      break;
    case Method::kto: {
      require_reference(b, method);
      // Reference point: batch mean of the policy/reference log-ratio over all
      // responses, clamped at zero and held constant.
      double z = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        z += (b.chosen_sum[i].value() - b.chosen_ref[i]) +
             (b.rejected_sum[i].value() - b.rejected_ref[i]);
      z = std::max(0.0, z / (2.0 * static_cast<double>(n)));
      for (std::size_t i = 0; i < n; ++i) {
        ad::Var rc = ad::shift(b.chosen_sum[i], -b.chosen_ref[i]);
        ad::Var rr = ad::shift(b.rejected_sum[i], -b.rejected_ref[i]);
        ad::Var desirable = 1.0 - ad::logistic(ad::scale(ad::shift(rc, -z), beta));
        ad::Var undesirable = 1.0 - ad::logistic(ad::scale(z - rr, beta));
        out.push_back(ad::scale(desirable + undesirable, 0.5));
      }
      break;
    }
    case Method::slic_hf:
      for (std::size_t i = 0; i < n; ++i) {
        ad::Var hinge = ad::relu(ad::shift(b.rejected_sum[i] - b.chosen_sum[i], beta));
        out.push_back(hinge + ad::scale(bc_term(b.chosen_sum[i]), alpha));
      }
      break;
  }
  return out;
}

}  // namespace

std::vector<ad::Var> record_losses(const BatchLogProbs& batch, const LossConfig& cfg) {
  return records_for(cfg.method, batch, cfg);
}

ad::Var tpo_loss(const BatchLogProbs& batch, const LossConfig& cfg) {
  require_method(cfg, Method::tpo);
  return ad::mean(records_for(Method::tpo, batch, cfg));
}

ad::Var tpo_l_loss(const BatchLogProbs& batch, const LossConfig& cfg) {
  require_method(cfg, Method::tpo_l);
  return ad::mean(records_for(Method::tpo_l, batch, cfg));
}

ad::Var baseline_loss(Method method, const BatchLogProbs& batch, const LossConfig& cfg) {
  if (uses_gold(method))
    throw ValidationError("baseline_loss: " + std::string(method_name(method)) +
                          " is not a baseline");
  LossConfig c = cfg;
  c.method = method;
  return ad::mean(records_for(method, batch, c));
}

ad::Var loss(const BatchLogProbs& batch, const LossConfig& cfg) {
  return ad::mean(records_for(cfg.method, batch, cfg));
}

double record_loss(const RecordLogProbs& rec, const LossConfig& cfg) {
  ad::Tape tape;
  BatchLogProbs b;
  b.gold_sum = {tape.leaf(rec.gold_sum)};
  b.chosen_sum = {tape.leaf(rec.chosen_sum)};
  b.rejected_sum = {tape.leaf(rec.rejected_sum)};
  b.gold_len = {rec.gold_len};
  b.chosen_len = {rec.chosen_len};
  b.rejected_len = {rec.rejected_len};
  if (rec.chosen_ref && rec.rejected_ref) {
    b.chosen_ref = {*rec.chosen_ref};
    b.rejected_ref = {*rec.rejected_ref};
  }
  return loss(b, cfg).value();
}

std::string_view reward_kind_name(RewardKind k) {
  switch (k) {
    case RewardKind::tpo: return "tpo";
    case RewardKind::dpo: return "dpo";
    case RewardKind::simpo: return "simpo";
  }
  return "unknown";
}

RewardKind parse_reward_kind(std::string_view name) {
  const std::string key = normalize_name(name);
  if (key == "tpo") return RewardKind::tpo;
  if (key == "dpo") return RewardKind::dpo;
  if (key == "simpo") return RewardKind::simpo;
  throw ValidationError("unknown reward kind '" + std::string(name) +
                        "'; valid kinds: tpo dpo simpo");
}

double implicit_reward(RewardKind kind, double sum, int len, std::optional<double> ref_sum,
                       double beta) {
  if (!(beta > 0.0)) throw ValidationError("implicit_reward: beta must be > 0");
  switch (kind) {
    case RewardKind::tpo:
      return beta * sum;
    case RewardKind::dpo:
      if (!ref_sum) throw ValidationError("implicit_reward: dpo kind needs a reference sum");
      return beta * (sum - *ref_sum);
    case RewardKind::simpo:
      if (len < 1) throw ValidationError("implicit_reward: length must be >= 1");
      return beta / len * sum;
  }
  return 0.0;
}

double bt_preference_prob(double reward_w, double reward_l) {
  return ad::logistic_value(reward_w - reward_l);
}

double length_normalized_margin(double chosen_sum, int chosen_len, double rejected_sum,
                                int rejected_len, double beta, double gamma) {
  return beta / chosen_len * chosen_sum - beta / rejected_len * rejected_sum - gamma;
}

TpoGradient tpo_closed_form_gradient(double chosen_sum, double rejected_sum, double alpha,
                                     double beta) {
  const double s = ad::logistic_value(beta * (rejected_sum - chosen_sum));
  return {-alpha, -beta * s, beta * s};
}

}  // namespace tpo

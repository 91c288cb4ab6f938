#include "tpo/train.hpp"

#include <cmath>
#include <map>
#include <numbers>
#include <sstream>

#include "tpo/error.hpp"
#include "tpo/rng.hpp"

namespace tpo {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view run_mode_name(RunMode m) {
  switch (m) {
    case RunMode::sft_only: return "sft_only";
    case RunMode::preference_only: return "preference_only";
    case RunMode::tpo_single_step: return "tpo_single_step";
    case RunMode::two_step: return "two_step";
  }
  return "unknown";
}

RunMode parse_run_mode(std::string_view name) {
  for (RunMode m : {RunMode::sft_only, RunMode::preference_only, RunMode::tpo_single_step,
                    RunMode::two_step})
    if (name == run_mode_name(m)) return m;
  throw ValidationError("unknown mode '" + std::string(name) +
                        "'; valid modes: sft_only preference_only tpo_single_step two_step");
}

void TrainConfig::validate() const {
  loss.validate();
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw ValidationError("train: learning_rate must be >= 0");
  if (batch_size < 1) throw ValidationError("train: batch_size must be >= 1");
  if (epochs < 1) throw ValidationError("train: epochs must be >= 1");
  if (max_steps && *max_steps < 1) throw ValidationError("train: max_steps must be >= 1");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0))
    throw ValidationError("train: warmup_fraction must lie in [0, 1)");
  if (!(grad_clip >= 0.0)) throw ValidationError("train: grad_clip must be >= 0");
  if (optimizer.beta1 < 0.0 || optimizer.beta1 >= 1.0 || optimizer.beta2 < 0.0 ||
      optimizer.beta2 >= 1.0 || !(optimizer.eps > 0.0) || optimizer.weight_decay < 0.0)
    throw ValidationError("train: invalid optimizer settings");
  if (mode == RunMode::tpo_single_step && !uses_gold(loss.method))
    throw ValidationError("train: tpo_single_step mode needs method tpo or tpo_l, got " +
                          std::string(method_name(loss.method)));
  if (sft_learning_rate && !(*sft_learning_rate >= 0.0))
    throw ValidationError("train: sft.learning_rate must be >= 0");
  if (sft_epochs && *sft_epochs < 1) throw ValidationError("train: sft.epochs must be >= 1");
}

// ------------------------------------------------------------ config JSON

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> known, const char* where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw ValidationError(std::string(where) + ": unknown key \"" + it.key() + "\"");
  }
}

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError(std::string("config: key \"") + key + "\" has the wrong type");
  }
}

}  // namespace

TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("train config must be a JSON object");
  reject_unknown(j,
                 {"loss", "learning_rate", "batch_size", "epochs", "max_steps", "warmup_fraction",
                  "schedule", "seed", "optimizer", "grad_clip", "policy", "mode", "sft"},
                 "train");
  TrainConfig c;
  if (j.contains("loss")) {
    const json& l = j.at("loss");
    if (!l.is_object()) throw ValidationError("train.loss must be an object");
    reject_unknown(l, {"method", "alpha", "beta", "gamma"}, "train.loss");
    std::string method = std::string(method_name(c.loss.method));
    read_opt(l, "method", method);
    c.loss.method = parse_method(method);
    read_opt(l, "alpha", c.loss.alpha);
    read_opt(l, "beta", c.loss.beta);
    read_opt(l, "gamma", c.loss.gamma);
  }
  read_opt(j, "learning_rate", c.learning_rate);
  read_opt(j, "batch_size", c.batch_size);
  read_opt(j, "epochs", c.epochs);
  if (j.contains("max_steps") && !j.at("max_steps").is_null()) {
    int m = 0;
    read_opt(j, "max_steps", m);
    c.max_steps = m;
  }
  read_opt(j, "warmup_fraction", c.warmup_fraction);
  std::string schedule = "cosine";
  read_opt(j, "schedule", schedule);
  if (schedule == "cosine") c.schedule = Schedule::cosine;
  else if (schedule == "constant") c.schedule = Schedule::constant;
  else throw ValidationError("train: schedule must be cosine or constant");
  read_opt(j, "seed", c.seed);
  read_opt(j, "grad_clip", c.grad_clip);
  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    if (!o.is_object()) throw ValidationError("train.optimizer must be an object");
    reject_unknown(o, {"kind", "beta1", "beta2", "eps", "weight_decay"}, "train.optimizer");
    std::string kind = "adamw";
    read_opt(o, "kind", kind);
    if (kind == "adamw") c.optimizer.kind = OptimizerKind::adamw;
    else if (kind == "sgd") c.optimizer.kind = OptimizerKind::sgd;
    else throw ValidationError("train.optimizer.kind must be adamw or sgd");
    read_opt(o, "beta1", c.optimizer.beta1);
    read_opt(o, "beta2", c.optimizer.beta2);
    read_opt(o, "eps", c.optimizer.eps);
    read_opt(o, "weight_decay", c.optimizer.weight_decay);
  }
  if (j.contains("policy")) {
    const json& p = j.at("policy");
    if (!p.is_object()) throw ValidationError("train.policy must be an object");
    reject_unknown(p, {"kind", "vocab_size", "context_order", "embed_dim", "hidden_dim", "init_scale"},
                   "train.policy");
    read_opt(p, "kind", c.policy.kind);
    read_opt(p, "vocab_size", c.policy.dims.vocab_size);
    read_opt(p, "context_order", c.policy.dims.context_order);
    read_opt(p, "embed_dim", c.policy.dims.embed_dim);
    read_opt(p, "hidden_dim", c.policy.dims.hidden_dim);
    read_opt(p, "init_scale", c.policy.init_scale);
  }
  if (j.contains("mode")) {
    std::string mode;
    read_opt(j, "mode", mode);
    c.mode = parse_run_mode(mode);
  }
  if (j.contains("sft")) {
    const json& s = j.at("sft");
    if (!s.is_object()) throw ValidationError("train.sft must be an object");
    reject_unknown(s, {"learning_rate", "epochs"}, "train.sft");
    if (s.contains("learning_rate")) {
      double lr = 0.0;
      read_opt(s, "learning_rate", lr);
      c.sft_learning_rate = lr;
    }
    if (s.contains("epochs")) {
      int e = 0;
      read_opt(s, "epochs", e);
      c.sft_epochs = e;
    }
  }
  c.validate();
  return c;
}

ordered_json train_config_to_json(const TrainConfig& c) {
  ordered_json j;
  j["loss"] = {{"method", std::string(method_name(c.loss.method))},
               {"alpha", c.loss.alpha},
               {"beta", c.loss.beta},
               {"gamma", c.loss.gamma}};
  j["learning_rate"] = c.learning_rate;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["max_steps"] = c.max_steps ? ordered_json(*c.max_steps) : ordered_json(nullptr);
  j["warmup_fraction"] = c.warmup_fraction;
  j["schedule"] = c.schedule == Schedule::cosine ? "cosine" : "constant";
  j["seed"] = c.seed;
  j["optimizer"] = {{"kind", c.optimizer.kind == OptimizerKind::adamw ? "adamw" : "sgd"},
                    {"beta1", c.optimizer.beta1},
                    {"beta2", c.optimizer.beta2},
                    {"eps", c.optimizer.eps},
                    {"weight_decay", c.optimizer.weight_decay}};
  j["grad_clip"] = c.grad_clip;
  j["policy"] = {{"kind", c.policy.kind},
                 {"vocab_size", c.policy.dims.vocab_size},
                 {"context_order", c.policy.dims.context_order},
                 {"embed_dim", c.policy.dims.embed_dim},
                 {"hidden_dim", c.policy.dims.hidden_dim},
                 {"init_scale", c.policy.init_scale}};
  j["mode"] = std::string(run_mode_name(c.mode));
  ordered_json sft = ordered_json::object();
  if (c.sft_learning_rate) sft["learning_rate"] = *c.sft_learning_rate;
  if (c.sft_epochs) sft["epochs"] = *c.sft_epochs;
  j["sft"] = sft;
  return j;
}

// ------------------------------------------------------------ schedule

int planned_steps(const TrainConfig& cfg, std::size_t n, int epochs) {
  if (cfg.max_steps) return *cfg.max_steps;
  const auto b = static_cast<std::size_t>(cfg.batch_size);
  return static_cast<int>((n + b - 1) / b) * epochs;
}

double lr_at(int step, int max_steps, double peak, double warmup_fraction, Schedule schedule) {
  if (max_steps < 1 || step < 1 || step > max_steps)
    throw ValidationError("lr_at: step " + std::to_string(step) + " outside [1, " +
                          std::to_string(max_steps) + "]");
  const int warmup = static_cast<int>(std::ceil(warmup_fraction * max_steps));
  if (step <= warmup) return peak * static_cast<double>(step) / warmup;
  if (schedule == Schedule::constant) return peak;
  const double t = static_cast<double>(step - warmup) / (max_steps - warmup);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

double lr_at(int step, int max_steps, const TrainConfig& cfg) {
  return lr_at(step, max_steps, cfg.learning_rate, cfg.warmup_fraction, cfg.schedule);
}

// ------------------------------------------------------------ step logs

ordered_json step_to_json(const StepLog& s) {
  ordered_json j;
  j["step"] = s.step;
  j["stage"] = s.stage;
  j["lr"] = s.lr;
  j["loss"] = s.loss;
  j["grad_norm"] = s.grad_norm;
  j["gold_logp"] = s.gold_logp;
  j["chosen_logp"] = s.chosen_logp;
  j["rejected_logp"] = s.rejected_logp;
  j["reward_gap"] = s.reward_gap;
  return j;
}

StepLog step_from_json(const json& j) {
  StepLog s;
  s.step = j.at("step").get<int>();
  s.stage = j.value("stage", "preference");
  s.lr = j.at("lr").get<double>();
  s.loss = j.at("loss").get<double>();
  s.grad_norm = j.value("grad_norm", 0.0);
  s.gold_logp = j.at("gold_logp").get<double>();
  s.chosen_logp = j.at("chosen_logp").get<double>();
  s.rejected_logp = j.at("rejected_logp").get<double>();
  s.reward_gap = j.value("reward_gap", 0.0);
  return s;
}

RewardKind logged_reward_kind(Method m) {
  switch (m) {
    case Method::dpo:
    case Method::ipo:
    case Method::kto:
      return RewardKind::dpo;
    case Method::simpo:
    case Method::tpo_l:
      return RewardKind::simpo;
    default:
      return RewardKind::tpo;
  }
}

// ------------------------------------------------------------ optimizer

namespace {

void apply_update(std::span<double> params, std::span<const double> grads,
                  const OptimizerConfig& opt, OptimizerState& st, double lr) {
  const std::size_t n = params.size();
  if (opt.kind == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < n; ++i)
      params[i] -= lr * (grads[i] + opt.weight_decay * params[i]);
    return;
  }
  if (st.m.size() != n) {
    st.m.assign(n, 0.0);
    st.v.assign(n, 0.0);
    st.t = 0;
  }
  ++st.t;
  const double c1 = 1.0 - std::pow(opt.beta1, st.t);
  const double c2 = 1.0 - std::pow(opt.beta2, st.t);
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grads[i];
    st.m[i] = opt.beta1 * st.m[i] + (1.0 - opt.beta1) * g;
    st.v[i] = opt.beta2 * st.v[i] + (1.0 - opt.beta2) * g * g;
    const double mhat = st.m[i] / c1;
    const double vhat = st.v[i] / c2;
    params[i] -= lr * (mhat / (std::sqrt(vhat) + opt.eps) + opt.weight_decay * params[i]);
  }
}

}  // namespace

BatchLogProbs batch_logprobs(PolicyGraph& graph, std::span<const PreferenceTriple* const> batch,
                             const ReferencePolicy* reference) {
  BatchLogProbs b;
  for (const PreferenceTriple* t : batch) {
    b.gold_sum.push_back(graph.seq_logprob(t->prompt, t->gold));
    b.chosen_sum.push_back(graph.seq_logprob(t->prompt, t->chosen));
    b.rejected_sum.push_back(graph.seq_logprob(t->prompt, t->rejected));
    b.gold_len.push_back(static_cast<int>(t->gold.size()));
    b.chosen_len.push_back(static_cast<int>(t->chosen.size()));
    b.rejected_len.push_back(static_cast<int>(t->rejected.size()));
    if (reference != nullptr) {
      b.chosen_ref.push_back(seq_logprob(reference->policy(), t->prompt, t->chosen));
      b.rejected_ref.push_back(seq_logprob(reference->policy(), t->prompt, t->rejected));
    }
  }
  return b;
}

namespace {

// Plain sequence log-likelihood with per-context memoization; gold, chosen
// and rejected share most of their contexts.
class CachedScorer {
 public:
  explicit CachedScorer(const Policy& p) : policy_(p), logits_(static_cast<std::size_t>(p.vocab_size())) {}

  double operator()(std::span<const Token> prompt, std::span<const Token> response) {
    for (const auto seq : {prompt, response})
      for (Token t : seq)
        if (t < 0 || t >= policy_.vocab_size()) throw ValidationError("token id out of range");
    double s = 0.0;
    for (std::size_t j = 0; j < response.size(); ++j) {
      auto ctx = context_window(policy_, prompt, response, j);
      auto it = cache_.find(ctx);
      if (it == cache_.end()) {
        policy_.logits(ctx, logits_);
        const double lse = ad::log_sum_exp_value(logits_);
        std::vector<double> lp(logits_);
        for (double& v : lp) v -= lse;
        it = cache_.emplace(std::move(ctx), std::move(lp)).first;
      }
      s += it->second[static_cast<std::size_t>(response[j])];
    }
    return s;
  }

 private:
  const Policy& policy_;
  std::vector<double> logits_;
  std::map<std::vector<Token>, std::vector<double>> cache_;
};

}  // namespace

double batch_loss_value(const Policy& policy, std::span<const double> theta,
                        std::span<const PreferenceTriple* const> batch, const LossConfig& loss_cfg,
                        const ReferencePolicy* reference) {
  auto probe = policy.clone();
  if (theta.size() != probe->parameter_count())
    throw ValidationError("batch_loss_value: parameter count mismatch");
  std::copy(theta.begin(), theta.end(), probe->mutable_parameters().begin());
  ad::Tape tape;
  BatchLogProbs b;
  CachedScorer score(*probe);
  for (const PreferenceTriple* t : batch) {
    b.gold_sum.push_back(tape.leaf(score(t->prompt, t->gold)));
    b.chosen_sum.push_back(tape.leaf(score(t->prompt, t->chosen)));
    b.rejected_sum.push_back(tape.leaf(score(t->prompt, t->rejected)));
    b.gold_len.push_back(static_cast<int>(t->gold.size()));
    b.chosen_len.push_back(static_cast<int>(t->chosen.size()));
    b.rejected_len.push_back(static_cast<int>(t->rejected.size()));
    if (reference != nullptr) {
      b.chosen_ref.push_back(seq_logprob(reference->policy(), t->prompt, t->chosen));
      b.rejected_ref.push_back(seq_logprob(reference->policy(), t->prompt, t->rejected));
    }
  }
  return loss(b, loss_cfg).value();
}

ad::GradCheckResult loss_gradcheck(const Policy& policy,
                                   std::span<const PreferenceTriple* const> batch,
                                   const LossConfig& loss_cfg, const ReferencePolicy* reference,
                                   double eps) {
  ad::GraphFn graph = [&](ad::Tape& tape, std::span<const ad::Var> leaves) {
    PolicyGraph g(policy, tape, leaves);
    return loss(batch_logprobs(g, batch, reference), loss_cfg);
  };
  ad::ValueFn value = [&](std::span<const double> theta) {
    return batch_loss_value(policy, theta, batch, loss_cfg, reference);
  };
  return ad::finite_diff_check(graph, value, policy.parameters(), eps);
}

StepLog train_step(Policy& policy, std::span<const PreferenceTriple* const> batch,
                   const LossConfig& loss_cfg, bool sft, const TrainConfig& cfg,
                   OptimizerState& state, int step, int max_steps, double peak_lr,
                   const ReferencePolicy* reference) {
  if (batch.empty()) throw ValidationError("train_step: empty batch");
  if (!sft && needs_reference(loss_cfg.method) && reference == nullptr)
    throw ValidationError("train_step: " + std::string(method_name(loss_cfg.method)) +
                          " needs a reference policy");
  const std::size_t n = batch.size();
  ad::Tape tape;
  PolicyGraph graph(policy, tape);
  BatchLogProbs b;
  for (std::size_t i = 0; i < n; ++i) {
    try {
      if (sft) {
        // Only gold is read; building the other sequences would perturb the
        // gradient accumulation order through shared context nodes.
        const PreferenceTriple& t = *batch[i];
        b.gold_sum.push_back(graph.seq_logprob(t.prompt, t.gold));
        b.gold_len.push_back(static_cast<int>(t.gold.size()));
      } else {
        const BatchLogProbs one = batch_logprobs(graph, batch.subspan(i, 1), reference);
        b.gold_sum.push_back(one.gold_sum[0]);
        b.chosen_sum.push_back(one.chosen_sum[0]);
        b.rejected_sum.push_back(one.rejected_sum[0]);
        b.gold_len.push_back(one.gold_len[0]);
        b.chosen_len.push_back(one.chosen_len[0]);
        b.rejected_len.push_back(one.rejected_len[0]);
        if (reference != nullptr) {
          b.chosen_ref.push_back(one.chosen_ref[0]);
          b.rejected_ref.push_back(one.rejected_ref[0]);
        }
      }
    } catch (const ad::DomainError& e) {
      std::ostringstream msg;
      msg << "non-finite loss at batch record " << i << " (step " << step << "): " << e.what();
      throw std::runtime_error(msg.str());
    }
  }

  std::vector<ad::Var> terms;
  if (sft) {
    for (ad::Var g : b.gold_sum) terms.push_back(bc_term(g));
  } else {
    terms = record_losses(b, loss_cfg);
  }
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(terms[i].value())) {
      std::ostringstream msg;
      msg << "non-finite loss at batch record " << i << " (step " << step << ")";
      throw std::runtime_error(msg.str());
    }
  ad::Var root = ad::mean(terms);

  StepLog log;
  log.step = step;
  log.stage = sft ? "sft" : "preference";
  log.loss = root.value();
  const RewardKind kind = logged_reward_kind(loss_cfg.method);
  for (std::size_t i = 0; i < n; ++i) {
    const PreferenceTriple& t = *batch[i];
    const double c = sft ? seq_logprob(policy, t.prompt, t.chosen) : b.chosen_sum[i].value();
    const double r = sft ? seq_logprob(policy, t.prompt, t.rejected) : b.rejected_sum[i].value();
    const int cl = static_cast<int>(t.chosen.size()), rl = static_cast<int>(t.rejected.size());
    log.gold_logp += b.gold_sum[i].value();
    log.chosen_logp += c;
    log.rejected_logp += r;
    std::optional<double> cref, rref;
    if (reference != nullptr) {
      cref = seq_logprob(reference->policy(), t.prompt, t.chosen);
      rref = seq_logprob(reference->policy(), t.prompt, t.rejected);
    }
    if (kind != RewardKind::dpo || reference != nullptr)
      log.reward_gap += implicit_reward(kind, c, cl, cref, loss_cfg.beta) -
                        implicit_reward(kind, r, rl, rref, loss_cfg.beta);
  }
  const double dn = static_cast<double>(n);
  log.gold_logp /= dn;
  log.chosen_logp /= dn;
  log.rejected_logp /= dn;
  log.reward_gap /= dn;

  tape.backward(root);
  std::vector<double> grads = tape.gradients(graph.params());
  double norm2 = 0.0;
  for (double g : grads) norm2 += g * g;
  log.grad_norm = std::sqrt(norm2);
  if (cfg.grad_clip > 0.0 && log.grad_norm > cfg.grad_clip) {
    const double s = cfg.grad_clip / log.grad_norm;
    for (double& g : grads) g *= s;
  }
  log.lr = lr_at(step, max_steps, peak_lr, cfg.warmup_fraction, cfg.schedule);
  apply_update(policy.mutable_parameters(), grads, cfg.optimizer, state, log.lr);
  return log;
}

// ------------------------------------------------------------ trajectory

std::string trajectory_to_jsonl(const Trajectory& t) {
  ordered_json header;
  header["type"] = "header";
  header["mode"] = t.mode;
  header["config"] = t.config;
  header["steps"] = t.steps.size();
  header["final_checksum"] = t.final_checksum;
  header["reference_checksum_before"] = t.reference_checksum_before;
  header["reference_checksum_after"] = t.reference_checksum_after;
  std::string out = header.dump() + '\n';
  for (const auto& s : t.steps) out += step_to_json(s).dump() + '\n';
  return out;
}

Trajectory trajectory_from_jsonl(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  Trajectory t;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const ordered_json j = ordered_json::parse(line);
      if (!have_header) {
        if (j.value("type", "") != "header") throw std::runtime_error("missing header line");
        t.mode = j.value("mode", "");
        t.config = j.value("config", ordered_json::object());
        t.final_checksum = j.value("final_checksum", "");
        t.reference_checksum_before = j.value("reference_checksum_before", "");
        t.reference_checksum_after = j.value("reference_checksum_after", "");
        have_header = true;
      } else {
        t.steps.push_back(step_from_json(j));
      }
    } catch (const std::exception& e) {
      throw ValidationError("trajectory line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!have_header) throw ValidationError("trajectory: empty file");
  return t;
}

void write_trajectory(const std::string& path, const Trajectory& t) {
  write_file_atomic(path, trajectory_to_jsonl(t));
}

Trajectory read_trajectory(const std::string& path) {
  return trajectory_from_jsonl(read_file(path));
}

// ------------------------------------------------------------ runs

std::unique_ptr<Policy> initial_policy(const TrainConfig& cfg) {
  PolicySpec spec = cfg.policy;
  spec.seed = mix_seed(cfg.seed, 0x696e6974ULL);
  return make_policy(spec);
}

namespace {

void run_stage(Policy& policy, const std::vector<PreferenceTriple>& data, const TrainConfig& cfg,
               bool sft, int epochs, double peak_lr, const ReferencePolicy* reference,
               std::uint64_t stream, Trajectory& traj) {
  const int max_steps = planned_steps(cfg, data.size(), epochs);
  std::vector<std::size_t> order(data.size());
  OptimizerState state;
  int step = 0;
  const int offset = static_cast<int>(traj.steps.size());
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (std::uint64_t epoch = 0; step < max_steps; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(mix_seed(mix_seed(cfg.seed, stream), epoch));
    rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < order.size() && step < max_steps; start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      std::vector<const PreferenceTriple*> batch;
      for (std::size_t k = start; k < end; ++k) batch.push_back(&data[order[k]]);
      ++step;
      StepLog log =
          train_step(policy, batch, cfg.loss, sft, cfg, state, step, max_steps, peak_lr, reference);
      log.step += offset;
      traj.steps.push_back(std::move(log));
    }
  }
}

}  // namespace

TrainResult run_training(const std::vector<PreferenceTriple>& data, const TrainConfig& cfg,
                         const Policy* init) {
  cfg.validate();
  if (data.empty()) throw ValidationError("run_training: empty dataset");
  TrainResult result;
  result.policy = init != nullptr ? init->clone() : initial_policy(cfg);
  Trajectory& traj = result.trajectory;
  traj.config = train_config_to_json(cfg);
  traj.mode = std::string(run_mode_name(cfg.mode));

  constexpr std::uint64_t kSftStream = 0x736674ULL, kPrefStream = 0x70726566ULL;
  switch (cfg.mode) {
    case RunMode::sft_only:
      run_stage(*result.policy, data, cfg, true, cfg.epochs, cfg.learning_rate, nullptr, kSftStream,
                traj);
      break;
    case RunMode::two_step:
      run_stage(*result.policy, data, cfg, true, cfg.sft_epochs.value_or(cfg.epochs),
                cfg.sft_learning_rate.value_or(cfg.learning_rate), nullptr, kSftStream, traj);
      [[fallthrough]];
    case RunMode::preference_only:
    case RunMode::tpo_single_step: {
      std::optional<ReferencePolicy> ref;
      if (needs_reference(cfg.loss.method)) {
        ref.emplace(*result.policy);
        traj.reference_checksum_before = ref->checksum();
      }
      run_stage(*result.policy, data, cfg, false, cfg.epochs, cfg.learning_rate,
                ref ? &*ref : nullptr, kPrefStream, traj);
      if (ref) {
        traj.reference_checksum_after = checksum(ref->policy());
        result.reference = ref->policy().clone();
      }
      break;
    }
  }
  traj.final_checksum = checksum(*result.policy);
  return result;
}

}  // namespace tpo

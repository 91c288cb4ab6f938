#include "tpo/policy.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "tpo/error.hpp"
#include "tpo/rng.hpp"

namespace tpo {

Policy::Policy(int vocab_size, int context_order, std::uint64_t seed, std::size_t n_params)
    : params_(n_params, 0.0),
      vocab_size_(vocab_size),
      context_order_(context_order),
      seed_(seed) {
  if (vocab_size < 1) throw ValidationError("policy: vocab_size must be >= 1");
  if (context_order < 0) throw ValidationError("policy: context_order must be >= 0");
}

// ---------------------------------------------------------------- tabular

namespace {

std::size_t tabular_rows(int vocab_size, int context_order) {
  std::size_t rows = 1;
  for (int i = 0; i < context_order; ++i) {
    rows *= static_cast<std::size_t>(vocab_size + 1);
    if (rows > kEnumerationGuard) throw SizeError("tabular policy: too many contexts");
  }
  return rows;
}

void fill_uniform(std::span<double> params, std::uint64_t seed, double scale) {
  Rng rng(seed);
  for (double& p : params) p = rng.uniform(-scale, scale);
}

}  // namespace

TabularPolicy::TabularPolicy(int vocab_size, int context_order)
    : Policy(vocab_size, context_order, 0,
             tabular_rows(vocab_size, context_order) * static_cast<std::size_t>(vocab_size)) {}

TabularPolicy::TabularPolicy(int vocab_size, int context_order, std::uint64_t seed,
                             double init_scale)
    : Policy(vocab_size, context_order, seed,
             tabular_rows(vocab_size, context_order) * static_cast<std::size_t>(vocab_size)) {
  fill_uniform(params_, seed, init_scale);
}

std::unique_ptr<Policy> TabularPolicy::clone() const {
  return std::make_unique<TabularPolicy>(*this);
}

std::size_t TabularPolicy::context_count() const {
  return tabular_rows(vocab_size(), context_order());
}

std::size_t TabularPolicy::context_index(std::span<const Token> context) const {
  std::size_t idx = 0;
  for (Token t : context) idx = idx * static_cast<std::size_t>(vocab_size() + 1) + t;
  return idx;
}

std::span<double> TabularPolicy::row(std::size_t ctx) {
  const auto v = static_cast<std::size_t>(vocab_size());
  return std::span<double>(params_).subspan(ctx * v, v);
}

std::span<const double> TabularPolicy::row(std::size_t ctx) const {
  const auto v = static_cast<std::size_t>(vocab_size());
  return std::span<const double>(params_).subspan(ctx * v, v);
}

void TabularPolicy::fill_rows(std::span<const double> logits) {
  if (logits.size() != static_cast<std::size_t>(vocab_size()))
    throw ValidationError("fill_rows: expected vocab_size logits");
  for (std::size_t c = 0; c < context_count(); ++c) {
    auto r = row(c);
    std::copy(logits.begin(), logits.end(), r.begin());
  }
}

void TabularPolicy::logits(std::span<const Token> context, std::span<double> out) const {
  auto r = row(context_index(context));
  std::copy(r.begin(), r.end(), out.begin());
}

void TabularPolicy::logits(ad::Tape&, std::span<const ad::Var> params,
                           std::span<const Token> context, std::vector<ad::Var>& out) const {
  const auto v = static_cast<std::size_t>(vocab_size());
  auto r = params.subspan(context_index(context) * v, v);
  out.assign(r.begin(), r.end());
}

// ------------------------------------------------------------ neural n-gram

std::size_t NeuralNGramPolicy::parameter_count_for(const NeuralDims& d) {
  const auto V = static_cast<std::size_t>(d.vocab_size);
  const auto n = static_cast<std::size_t>(d.context_order);
  const auto e = static_cast<std::size_t>(d.embed_dim);
  const auto h = static_cast<std::size_t>(d.hidden_dim);
  return (V + 1) * e + h * n * e + h + V * h + V;
}

NeuralNGramPolicy::NeuralNGramPolicy(const NeuralDims& dims, std::uint64_t seed,
                                     double init_scale)
    : Policy(dims.vocab_size, dims.context_order, seed, parameter_count_for(dims)), dims_(dims) {
  if (dims.context_order < 1 || dims.embed_dim < 1 || dims.hidden_dim < 1)
    throw ValidationError("neural_ngram: context_order, embed_dim and hidden_dim must be >= 1");
  fill_uniform(params_, seed, init_scale);
}

std::unique_ptr<Policy> NeuralNGramPolicy::clone() const {
  return std::make_unique<NeuralNGramPolicy>(*this);
}

std::size_t NeuralNGramPolicy::hidden_weight_offset() const {
  return static_cast<std::size_t>(dims_.vocab_size + 1) * dims_.embed_dim;
}
std::size_t NeuralNGramPolicy::hidden_bias_offset() const {
  return hidden_weight_offset() +
         static_cast<std::size_t>(dims_.hidden_dim) * dims_.context_order * dims_.embed_dim;
}
std::size_t NeuralNGramPolicy::output_weight_offset() const {
  return hidden_bias_offset() + static_cast<std::size_t>(dims_.hidden_dim);
}
std::size_t NeuralNGramPolicy::output_bias_offset() const {
  return output_weight_offset() + static_cast<std::size_t>(dims_.vocab_size) * dims_.hidden_dim;
}

// The double and tape paths below perform identical arithmetic in identical
// order; finite-difference checks rely on that.
void NeuralNGramPolicy::logits(std::span<const Token> context, std::span<double> out) const {
  const std::size_t e = dims_.embed_dim, h = dims_.hidden_dim, in = context.size() * e;
  const double* p = params_.data();
  thread_local std::vector<double> x, hidden;
  x.resize(in);
  hidden.resize(h);
  const double *emb = p + embedding_offset(), *hw = p + hidden_weight_offset(),
               *hb = p + hidden_bias_offset(), *ow = p + output_weight_offset(),
               *ob = p + output_bias_offset();
  for (std::size_t s = 0; s < context.size(); ++s)
    for (std::size_t k = 0; k < e; ++k) x[s * e + k] = emb[context[s] * e + k];
  for (std::size_t i = 0; i < h; ++i) {
    const double* w = hw + i * in;
    double acc = hb[i];
    for (std::size_t k = 0; k < in; ++k) acc += w[k] * x[k];
    hidden[i] = std::tanh(acc);
  }
  for (std::size_t v = 0; v < static_cast<std::size_t>(dims_.vocab_size); ++v) {
    const double* w = ow + v * h;
    double acc = ob[v];
    for (std::size_t k = 0; k < h; ++k) acc += w[k] * hidden[k];
    out[v] = acc;
  }
}

void NeuralNGramPolicy::logits(ad::Tape&, std::span<const ad::Var> params,
                               std::span<const Token> context, std::vector<ad::Var>& out) const {
  const std::size_t e = dims_.embed_dim, h = dims_.hidden_dim, in = context.size() * e;
  std::vector<ad::Var> x;
  x.reserve(in);
  for (Token t : context)
    for (std::size_t k = 0; k < e; ++k) x.push_back(params[embedding_offset() + t * e + k]);
  std::vector<ad::Var> hidden;
  hidden.reserve(h);
  for (std::size_t i = 0; i < h; ++i) {
    auto w = params.subspan(hidden_weight_offset() + i * in, in);
    hidden.push_back(ad::tanh(ad::affine(w, x, params[hidden_bias_offset() + i])));
  }
  out.clear();
  for (std::size_t v = 0; v < static_cast<std::size_t>(dims_.vocab_size); ++v) {
    auto w = params.subspan(output_weight_offset() + v * h, h);
    out.push_back(ad::affine(w, hidden, params[output_bias_offset() + v]));
  }
}

// ------------------------------------------------------------- scoring

void validate_sequences(const Policy& policy, std::span<const Token> prompt,
                        std::span<const Token> response) {
  const int V = policy.vocab_size();
  auto check = [V](std::span<const Token> seq, const char* what) {
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (seq[i] < 0 || seq[i] >= V) {
        std::ostringstream msg;
        msg << what << " token " << seq[i] << " at position " << i
            << " is outside the vocabulary [0, " << V << ")";
        throw ValidationError(msg.str());
      }
    }
  };
  check(prompt, "prompt");
  check(response, "response");
  if (response.empty()) throw ValidationError("response must contain at least one token");
}

std::vector<Token> context_window(const Policy& policy, std::span<const Token> prompt,
                                  std::span<const Token> response, std::size_t j) {
  const auto n = static_cast<std::size_t>(policy.context_order());
  std::vector<Token> ctx(n, policy.begin_token());
  // position of response[j] in the concatenation prompt ++ response
  const std::size_t pos = prompt.size() + j;
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t back = n - s;  // distance behind pos
    if (back > pos) continue;
    const std::size_t q = pos - back;
    ctx[s] = q < prompt.size() ? prompt[q] : response[q - prompt.size()];
  }
  return ctx;
}

std::vector<double> log_softmax(const Policy& policy, std::span<const Token> context) {
  std::vector<double> out(static_cast<std::size_t>(policy.vocab_size()));
  policy.logits(context, out);
  const double lse = ad::log_sum_exp_value(out);
  for (double& v : out) v = v - lse;
  return out;
}

std::vector<double> token_logprobs(const Policy& policy, std::span<const Token> prompt,
                                   std::span<const Token> response) {
  validate_sequences(policy, prompt, response);
  std::vector<double> out;
  out.reserve(response.size());
  std::vector<double> logits(static_cast<std::size_t>(policy.vocab_size()));
  for (std::size_t j = 0; j < response.size(); ++j) {
    const auto ctx = context_window(policy, prompt, response, j);
    policy.logits(ctx, logits);
    out.push_back(logits[response[j]] - ad::log_sum_exp_value(logits));
  }
  return out;
}

double seq_logprob(const Policy& policy, std::span<const Token> prompt,
                   std::span<const Token> response) {
  double s = 0.0;
  for (double lp : token_logprobs(policy, prompt, response)) s += lp;
  return s;
}

double avg_seq_logprob(const Policy& policy, std::span<const Token> prompt,
                       std::span<const Token> response) {
  return seq_logprob(policy, prompt, response) / static_cast<double>(response.size());
}

double entropy_estimate(const Policy& policy, std::span<const Token> prompt,
                        std::span<const Token> response) {
  return -avg_seq_logprob(policy, prompt, response);
}

TokenSeq sample(const Policy& policy, std::span<const Token> prompt, const SampleOptions& opts) {
  if (opts.max_len < 1) throw ValidationError("sample: max_len must be >= 1");
  const Token probe[1] = {0};
  validate_sequences(policy, prompt, probe);
  Rng rng(opts.seed);
  TokenSeq out;
  std::vector<double> probs;
  while (out.size() < opts.max_len) {
    const auto ctx = context_window(policy, prompt, out, out.size());
    probs = log_softmax(policy, ctx);
    for (double& p : probs) p = std::exp(p);
    const auto tok = static_cast<Token>(rng.categorical(probs));
    out.push_back(tok);
    if (opts.stop_token && tok == *opts.stop_token) break;
  }
  return out;
}

std::map<TokenSeq, double> enumerate_distribution(const Policy& policy,
                                                  std::span<const Token> prompt,
                                                  std::size_t length) {
  if (length < 1) throw ValidationError("enumerate_distribution: length must be >= 1");
  const auto V = static_cast<std::size_t>(policy.vocab_size());
  std::size_t states = 1;
  for (std::size_t i = 0; i < length; ++i) {
    states *= V;
    if (states > kEnumerationGuard) {
      std::ostringstream msg;
      msg << "enumerate_distribution: " << V << "^" << length << " sequences exceed the guard of "
          << kEnumerationGuard;
      throw SizeError(msg.str());
    }
  }
  std::map<TokenSeq, double> out;
  TokenSeq seq(length, 0);
  for (std::size_t s = 0; s < states; ++s) {
    std::size_t rem = s;
    for (std::size_t j = length; j-- > 0;) {
      seq[j] = static_cast<Token>(rem % V);
      rem /= V;
    }
    out.emplace(seq, std::exp(seq_logprob(policy, prompt, seq)));
  }
  return out;
}

// ------------------------------------------------------------- tape path

PolicyGraph::PolicyGraph(const Policy& policy, ad::Tape& tape)
    : policy_(policy), tape_(tape), params_(tape.leaves(policy.parameters())) {}

PolicyGraph::PolicyGraph(const Policy& policy, ad::Tape& tape, std::span<const ad::Var> params)
    : policy_(policy), tape_(tape), params_(params.begin(), params.end()) {
  if (params_.size() != policy.parameter_count())
    throw ValidationError("PolicyGraph: expected one leaf per parameter");
}

const PolicyGraph::Head& PolicyGraph::head(const std::vector<Token>& context) {
  auto it = heads_.find(context);
  if (it != heads_.end()) return it->second;
  Head h;
  policy_.logits(tape_, params_, context, h.logits);
  h.lse = ad::log_sum_exp(h.logits);
  return heads_.emplace(context, std::move(h)).first->second;
}

std::vector<ad::Var> PolicyGraph::token_logprobs(std::span<const Token> prompt,
                                                 std::span<const Token> response) {
  validate_sequences(policy_, prompt, response);
  std::vector<ad::Var> out;
  out.reserve(response.size());
  for (std::size_t j = 0; j < response.size(); ++j) {
    const Head& h = head(context_window(policy_, prompt, response, j));
    out.push_back(h.logits[response[j]] - h.lse);
  }
  return out;
}

ad::Var PolicyGraph::seq_logprob(std::span<const Token> prompt, std::span<const Token> response) {
  return ad::sum(token_logprobs(prompt, response));
}

ad::Var PolicyGraph::avg_seq_logprob(std::span<const Token> prompt,
                                     std::span<const Token> response) {
  return ad::scale(seq_logprob(prompt, response), 1.0 / static_cast<double>(response.size()));
}

// ------------------------------------------------------------- checksums

std::string parameter_checksum(std::span<const double> params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double p : params) {
    std::uint64_t bits;
    std::memcpy(&bits, &p, sizeof bits);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xFF;
      h *= 0x100000001b3ULL;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ReferencePolicy::ReferencePolicy(const Policy& source)
    : frozen_(source.clone()), checksum_(tpo::checksum(*frozen_)) {}

bool ReferencePolicy::intact() const { return tpo::checksum(*frozen_) == checksum_; }

std::unique_ptr<Policy> make_policy(const PolicySpec& spec) {
  if (spec.kind == "neural_ngram")
    return std::make_unique<NeuralNGramPolicy>(spec.dims, spec.seed, spec.init_scale);
  if (spec.kind == "tabular")
    return std::make_unique<TabularPolicy>(spec.dims.vocab_size, spec.dims.context_order,
                                           spec.seed, spec.init_scale);
  throw ValidationError("unknown policy kind '" + spec.kind + "' (valid: neural_ngram, tabular)");
}

// ------------------------------------------------------------- checkpoints

std::string policy_to_json(const Policy& policy) {
  nlohmann::json j;
  j["format"] = "tpolab-policy";
  j["version"] = 1;
  j["kind"] = policy.kind();
  j["vocab_size"] = policy.vocab_size();
  j["context_order"] = policy.context_order();
  if (const auto* neural = dynamic_cast<const NeuralNGramPolicy*>(&policy)) {
    j["embed_dim"] = neural->dims().embed_dim;
    j["hidden_dim"] = neural->dims().hidden_dim;
  }
  j["seed"] = policy.seed();
  j["parameters"] = std::vector<double>(policy.parameters().begin(), policy.parameters().end());
  return j.dump();
}

std::unique_ptr<Policy> policy_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint: ") + e.what());
  }
  if (j.value("format", "") != "tpolab-policy")
    throw ValidationError("checkpoint: not a tpolab policy file");
  try {
    const std::string kind = j.at("kind").get<std::string>();
    const auto params = j.at("parameters").get<std::vector<double>>();
    PolicySpec spec;
    spec.kind = kind;
    spec.seed = j.at("seed").get<std::uint64_t>();
    spec.init_scale = 0.0;
    spec.dims.vocab_size = j.at("vocab_size").get<int>();
    spec.dims.context_order = j.at("context_order").get<int>();
    if (kind == "neural_ngram") {
      spec.dims.embed_dim = j.at("embed_dim").get<int>();
      spec.dims.hidden_dim = j.at("hidden_dim").get<int>();
    }
    auto policy = make_policy(spec);
    if (params.size() != policy->parameter_count())
      throw ValidationError("checkpoint: parameter count does not match dimensions");
    std::copy(params.begin(), params.end(), policy->mutable_parameters().begin());
    return policy;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const Policy& policy, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out << policy_to_json(policy) << '\n';
  if (!out) throw std::runtime_error("failed writing checkpoint " + path);
}

std::unique_ptr<Policy> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return policy_from_json(ss.str());
}

}  // namespace tpo

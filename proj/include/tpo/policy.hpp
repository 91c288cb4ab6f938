#pragma once

// Autoregressive token policies pi(y_j | x, y_<j).
//
// Token ids in [0, vocab_size) can be emitted. One extra id, begin_token() ==
// vocab_size, is context-only: it pads the left of windows that reach before
// the start of prompt + response. Prompt tokens condition the policy but never
// contribute log-probability terms.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tpo/autodiff.hpp"

namespace tpo {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

class Policy {
 public:
  virtual ~Policy() = default;

  int vocab_size() const { return vocab_size_; }
  Token begin_token() const { return vocab_size_; }
  int context_order() const { return context_order_; }
  std::uint64_t seed() const { return seed_; }

  std::span<const double> parameters() const { return params_; }
  std::span<double> mutable_parameters() { return params_; }
  std::size_t parameter_count() const { return params_.size(); }

  virtual std::string kind() const = 0;
  virtual std::unique_ptr<Policy> clone() const = 0;

  // Next-token logits for a window of exactly context_order() ids in [0, V].
  virtual void logits(std::span<const Token> context, std::span<double> out) const = 0;
  // Same computation recorded on a tape; `params` are leaves mirroring
  // parameters().
  virtual void logits(ad::Tape& tape, std::span<const ad::Var> params,
                      std::span<const Token> context, std::vector<ad::Var>& out) const = 0;

 protected:
  Policy(int vocab_size, int context_order, std::uint64_t seed, std::size_t n_params);

  std::vector<double> params_;

 private:
  int vocab_size_;
  int context_order_;
  std::uint64_t seed_;
};

// One row of vocab_size logits per context; contexts are indexed as base-(V+1)
// numbers over their ids.
class TabularPolicy final : public Policy {
 public:
  // All-zero logits (uniform distribution).
  TabularPolicy(int vocab_size, int context_order);
  // Logits uniform in [-init_scale, init_scale].
  TabularPolicy(int vocab_size, int context_order, std::uint64_t seed, double init_scale = 0.1);

  std::string kind() const override { return "tabular"; }
  std::unique_ptr<Policy> clone() const override;

  std::size_t context_count() const;
  std::size_t context_index(std::span<const Token> context) const;
  std::span<double> row(std::size_t context_index);
  std::span<const double> row(std::size_t context_index) const;

  // Same logits for every context.
  void fill_rows(std::span<const double> logits);

  void logits(std::span<const Token> context, std::span<double> out) const override;
  void logits(ad::Tape& tape, std::span<const ad::Var> params, std::span<const Token> context,
              std::vector<ad::Var>& out) const override;
};

struct NeuralDims {
  int vocab_size = 17;  // 16 content ids + a stop id; begin id is 17
  int context_order = 2;
  int embed_dim = 8;
  int hidden_dim = 32;
};

// Embedding lookup for each context slot, concatenated, one tanh hidden layer,
// linear output layer.
class NeuralNGramPolicy final : public Policy {
 public:
  NeuralNGramPolicy(const NeuralDims& dims, std::uint64_t seed, double init_scale = 0.1);

  std::string kind() const override { return "neural_ngram"; }
  std::unique_ptr<Policy> clone() const override;
  const NeuralDims& dims() const { return dims_; }

  void logits(std::span<const Token> context, std::span<double> out) const override;
  void logits(ad::Tape& tape, std::span<const ad::Var> params, std::span<const Token> context,
              std::vector<ad::Var>& out) const override;

  // Offsets into the flat parameter vector.
  std::size_t embedding_offset() const { return 0; }
  std::size_t hidden_weight_offset() const;
  std::size_t hidden_bias_offset() const;
  std::size_t output_weight_offset() const;
  std::size_t output_bias_offset() const;

  static std::size_t parameter_count_for(const NeuralDims& dims);

 private:
  NeuralDims dims_;
};

// Checks ids against the policy's vocabulary; throws ValidationError naming
// the offending position. Responses must be non-empty.
void validate_sequences(const Policy& policy, std::span<const Token> prompt,
                        std::span<const Token> response);

// Window of context_order() ids preceding response[j], left-padded with
// begin_token().
std::vector<Token> context_window(const Policy& policy, std::span<const Token> prompt,
                                  std::span<const Token> response, std::size_t j);

std::vector<double> log_softmax(const Policy& policy, std::span<const Token> context);

std::vector<double> token_logprobs(const Policy& policy, std::span<const Token> prompt,
                                   std::span<const Token> response);
double seq_logprob(const Policy& policy, std::span<const Token> prompt,
                   std::span<const Token> response);
double avg_seq_logprob(const Policy& policy, std::span<const Token> prompt,
                       std::span<const Token> response);
// -(1/|y|) sum_j log pi(y_j | x, y_<j)
double entropy_estimate(const Policy& policy, std::span<const Token> prompt,
                        std::span<const Token> response);

struct SampleOptions {
  std::size_t max_len = 8;
  std::uint64_t seed = 0;
  std::optional<Token> stop_token;
};

// Ancestral sampling. The stop token, when drawn, is kept as the last element.
TokenSeq sample(const Policy& policy, std::span<const Token> prompt, const SampleOptions& opts);

inline constexpr std::size_t kEnumerationGuard = 1'000'000;

// Probability of every length-L response, keyed lexicographically. Throws
// SizeError when V^L exceeds kEnumerationGuard.
std::map<TokenSeq, double> enumerate_distribution(const Policy& policy,
                                                  std::span<const Token> prompt, std::size_t length);

// Policy bound to a tape: parameters become leaves and every scoring call
// records differentiable nodes. Per-context output heads are memoised, so
// repeated contexts in a batch share one subgraph.
class PolicyGraph {
 public:
  PolicyGraph(const Policy& policy, ad::Tape& tape);
  // Uses caller-provided leaves, one per parameter, instead of the policy's
  // current values.
  PolicyGraph(const Policy& policy, ad::Tape& tape, std::span<const ad::Var> params);

  const Policy& policy() const { return policy_; }
  ad::Tape& tape() { return tape_; }
  std::span<const ad::Var> params() const { return params_; }

  std::vector<ad::Var> token_logprobs(std::span<const Token> prompt,
                                      std::span<const Token> response);
  ad::Var seq_logprob(std::span<const Token> prompt, std::span<const Token> response);
  ad::Var avg_seq_logprob(std::span<const Token> prompt, std::span<const Token> response);

 private:
  struct Head {
    std::vector<ad::Var> logits;
    ad::Var lse;
  };
  const Head& head(const std::vector<Token>& context);

  const Policy& policy_;
  ad::Tape& tape_;
  std::vector<ad::Var> params_;
  std::map<std::vector<Token>, Head> heads_;
};

// FNV-1a over the parameter bit patterns, as 16 hex digits.
std::string parameter_checksum(std::span<const double> params);
inline std::string checksum(const Policy& policy) {
  return parameter_checksum(policy.parameters());
}

// Frozen deep copy used as pi_ref.
class ReferencePolicy {
 public:
  explicit ReferencePolicy(const Policy& source);

  const Policy& policy() const { return *frozen_; }
  const std::string& checksum() const { return checksum_; }
  bool intact() const;

 private:
  std::shared_ptr<const Policy> frozen_;
  std::string checksum_;
};

struct PolicySpec {
  std::string kind = "neural_ngram";
  NeuralDims dims;
  std::uint64_t seed = 0;
  double init_scale = 0.1;
};

std::unique_ptr<Policy> make_policy(const PolicySpec& spec);

// Checkpoints: one JSON document holding the model header plus the flat
// parameter array. Doubles are written in shortest round-trip form, so a
// save/load cycle reproduces every bit.
std::string policy_to_json(const Policy& policy);
std::unique_ptr<Policy> policy_from_json(const std::string& text);
void save_checkpoint(const Policy& policy, const std::string& path);
std::unique_ptr<Policy> load_checkpoint(const std::string& path);

}  // namespace tpo

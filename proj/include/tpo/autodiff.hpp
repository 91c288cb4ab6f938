#pragma once

// Scalar reverse-mode automatic differentiation on a define-by-run tape.
//
// Every node lives in a Tape and is addressed by a Var handle. Nodes are
// appended in creation order, so parents always precede children and a single
// reverse sweep over the tape visits nodes in a valid topological order.
// Reductions run left to right; results are bit-reproducible for a fixed
// graph.

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tpo::ad {

enum class Op : std::uint8_t {
  leaf,
  add,
  sub,
  mul,
  div,
  neg,
  exp,
  log,
  tanh,
  logistic,
  log_logistic,
  log_sum_exp,
  sum,
  mean,
  scale,
  shift,
  relu,
  affine,
};

const char* op_name(Op op);

// Thrown when a primitive is evaluated outside its domain.
class DomainError : public std::domain_error {
 public:
  DomainError(Op op, const std::string& detail);
  Op op() const { return op_; }

 private:
  Op op_;
};

class Tape;

// Handle to a node. Cheap to copy; valid as long as its tape is alive and has
// not been cleared.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  double value() const;
  double grad() const;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(double value);
  // Leaves for a whole parameter vector, in order.
  std::vector<Var> leaves(std::span<const double> values);

  double value(Var v) const { return values_[v.id]; }
  double grad(Var v) const { return grads_[v.id]; }
  Op op(Var v) const { return ops_[v.id]; }
  std::size_t size() const { return values_.size(); }
  std::size_t edge_count() const { return edge_parent_.size(); }

  // Zeroes every adjoint, seeds root with 1 and sweeps backwards. Calling it
  // twice gives the same adjoints.
  void backward(Var root);
  void zero_grad();
  std::vector<double> gradients(std::span<const Var> vars) const;

  void clear();

  // Appends a node; parents.size() == partials.size(). Used by primitives.
  Var push(Op op, double value, std::span<const std::uint32_t> parents,
           std::span<const double> partials);
  Var push1(Op op, double value, Var a, double da);
  Var push2(Op op, double value, Var a, double da, Var b, double db);

 private:
  std::vector<double> values_;
  std::vector<double> grads_;
  std::vector<Op> ops_;
  std::vector<std::uint32_t> edge_begin_{0};
  std::vector<std::uint32_t> edge_parent_;
  std::vector<double> edge_partial_;
};

// Primitives. Binary ops require both operands on the same tape.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var logistic(Var a);
// log(sigmoid(a)) without overflow for large |a|.
Var log_logistic(Var a);
Var log_sum_exp(std::span<const Var> xs);
Var sum(std::span<const Var> xs);
Var mean(std::span<const Var> xs);
Var scale(Var a, double c);
Var shift(Var a, double c);
Var relu(Var a);
// bias + sum_i weights[i] * inputs[i]
Var affine(std::span<const Var> weights, std::span<const Var> inputs, Var bias);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator+(Var a, double c) { return shift(a, c); }
inline Var operator+(double c, Var a) { return shift(a, c); }
inline Var operator-(Var a, double c) { return shift(a, -c); }
inline Var operator-(double c, Var a) { return shift(neg(a), c); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator/(Var a, double c) { return scale(a, 1.0 / c); }

// Plain-double forms of the numerically delicate primitives, shared by the
// tape and by value-only code paths so both agree bit for bit.
double log_logistic_value(double z);
double logistic_value(double z);
double log_sum_exp_value(std::span<const double> xs);

// Builds the objective on a tape from parameter leaves.
using GraphFn = std::function<Var(Tape&, std::span<const Var>)>;
// Evaluates the same objective without a tape.
using ValueFn = std::function<double(std::span<const double>)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

// Central-difference gradient check. Relative error per coordinate is
// |analytic - numeric| / max(1, |analytic|). Throws std::runtime_error naming
// the coordinate if any evaluation is non-finite.
GradCheckResult finite_diff_check(const GraphFn& graph, std::span<const double> theta,
                                  double eps = 1e-5);
// Same, but the central differences use `value` instead of rebuilding the
// graph. `value` must compute the same function as `graph`.
GradCheckResult finite_diff_check(const GraphFn& graph, const ValueFn& value,
                                  std::span<const double> theta, double eps = 1e-5);

}  // namespace tpo::ad

#include "tpo/autodiff.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <sstream>

namespace tpo::ad {

const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::neg: return "neg";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::tanh: return "tanh";
    case Op::logistic: return "logistic";
    case Op::log_logistic: return "log_logistic";
    case Op::log_sum_exp: return "log_sum_exp";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::scale: return "scale";
    case Op::shift: return "shift";
    case Op::relu: return "relu";
    case Op::affine: return "affine";
  }
  return "unknown";
}

DomainError::DomainError(Op op, const std::string& detail)
    : std::domain_error(std::string(op_name(op)) + ": " + detail), op_(op) {}

double Var::value() const { return tape->value(*this); }
double Var::grad() const { return tape->grad(*this); }

Var Tape::leaf(double value) { return push(Op::leaf, value, {}, {}); }

std::vector<Var> Tape::leaves(std::span<const double> values) {
  std::vector<Var> out;
  out.reserve(values.size());
  for (double v : values) out.push_back(leaf(v));
  return out;
}

Var Tape::push(Op op, double value, std::span<const std::uint32_t> parents,
               std::span<const double> partials) {
  assert(parents.size() == partials.size());
  const auto id = static_cast<std::uint32_t>(values_.size());
  values_.push_back(value);
  grads_.push_back(0.0);
  ops_.push_back(op);
  edge_parent_.insert(edge_parent_.end(), parents.begin(), parents.end());
  edge_partial_.insert(edge_partial_.end(), partials.begin(), partials.end());
  edge_begin_.push_back(static_cast<std::uint32_t>(edge_parent_.size()));
  return Var{this, id};
}

Var Tape::push1(Op op, double value, Var a, double da) {
  const std::uint32_t p[1] = {a.id};
  const double d[1] = {da};
  return push(op, value, p, d);
}

Var Tape::push2(Op op, double value, Var a, double da, Var b, double db) {
  const std::uint32_t p[2] = {a.id, b.id};
  const double d[2] = {da, db};
  return push(op, value, p, d);
}

void Tape::zero_grad() { std::fill(grads_.begin(), grads_.end(), 0.0); }

void Tape::backward(Var root) {
  zero_grad();
  grads_[root.id] = 1.0;
  for (std::uint32_t i = root.id + 1; i-- > 0;) {
    const double g = grads_[i];
    if (g == 0.0) continue;
    for (std::uint32_t e = edge_begin_[i]; e < edge_begin_[i + 1]; ++e)
      grads_[edge_parent_[e]] += g * edge_partial_[e];
  }
}

std::vector<double> Tape::gradients(std::span<const Var> vars) const {
  std::vector<double> out;
  out.reserve(vars.size());
  for (Var v : vars) out.push_back(grads_[v.id]);
  return out;
}

void Tape::clear() {
  values_.clear();
  grads_.clear();
  ops_.clear();
  edge_begin_.assign(1, 0);
  edge_parent_.clear();
  edge_partial_.clear();
}

namespace {

Tape& same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape)
    throw std::invalid_argument("operands recorded on different tapes");
  return *a.tape;
}

Tape& tape_of(std::span<const Var> xs, Op op) {
  if (xs.empty()) throw DomainError(op, "empty input");
  return *xs.front().tape;
}

}  // namespace

double log_logistic_value(double z) {
  if (z >= 0.0) return -std::log1p(std::exp(-z));
  return z - std::log1p(std::exp(z));
}

double logistic_value(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double log_sum_exp_value(std::span<const double> xs) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : xs) m = std::max(m, x);
  if (std::isinf(m)) return m;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

Var add(Var a, Var b) {
  return same_tape(a, b).push2(Op::add, a.value() + b.value(), a, 1.0, b, 1.0);
}

Var sub(Var a, Var b) {
  return same_tape(a, b).push2(Op::sub, a.value() - b.value(), a, 1.0, b, -1.0);
}

Var mul(Var a, Var b) {
  const double x = a.value(), y = b.value();
  return same_tape(a, b).push2(Op::mul, x * y, a, y, b, x);
}

Var div(Var a, Var b) {
  const double x = a.value(), y = b.value();
  if (y == 0.0) throw DomainError(Op::div, "zero denominator");
  return same_tape(a, b).push2(Op::div, x / y, a, 1.0 / y, b, -x / (y * y));
}

Var neg(Var a) { return a.tape->push1(Op::neg, -a.value(), a, -1.0); }

Var exp(Var a) {
  const double e = std::exp(a.value());
  return a.tape->push1(Op::exp, e, a, e);
}

Var log(Var a) {
  const double x = a.value();
  if (!(x > 0.0)) {
    std::ostringstream msg;
    msg << "non-positive input " << x;
    throw DomainError(Op::log, msg.str());
  }
  return a.tape->push1(Op::log, std::log(x), a, 1.0 / x);
}

Var tanh(Var a) {
  const double t = std::tanh(a.value());
  return a.tape->push1(Op::tanh, t, a, 1.0 - t * t);
}

Var logistic(Var a) {
  const double s = logistic_value(a.value());
  return a.tape->push1(Op::logistic, s, a, s * (1.0 - s));
}

Var log_logistic(Var a) {
  const double z = a.value();
  // d/dz log sigmoid(z) = sigmoid(-z)
  return a.tape->push1(Op::log_logistic, log_logistic_value(z), a, logistic_value(-z));
}

Var log_sum_exp(std::span<const Var> xs) {
  Tape& t = tape_of(xs, Op::log_sum_exp);
  std::vector<double> vals;
  vals.reserve(xs.size());
  for (Var x : xs) vals.push_back(x.value());
  const double lse = log_sum_exp_value(vals);
  if (!std::isfinite(lse)) throw DomainError(Op::log_sum_exp, "non-finite result");
  std::vector<std::uint32_t> parents;
  std::vector<double> partials;
  parents.reserve(xs.size());
  partials.reserve(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    parents.push_back(xs[i].id);
    partials.push_back(std::exp(vals[i] - lse));
  }
  return t.push(Op::log_sum_exp, lse, parents, partials);
}

Var sum(std::span<const Var> xs) {
  Tape& t = tape_of(xs, Op::sum);
  double s = 0.0;
  std::vector<std::uint32_t> parents;
  parents.reserve(xs.size());
  for (Var x : xs) {
    s += x.value();
    parents.push_back(x.id);
  }
  const std::vector<double> partials(xs.size(), 1.0);
  return t.push(Op::sum, s, parents, partials);
}

Var mean(std::span<const Var> xs) {
  Tape& t = tape_of(xs, Op::mean);
  double s = 0.0;
  std::vector<std::uint32_t> parents;
  parents.reserve(xs.size());
  for (Var x : xs) {
    s += x.value();
    parents.push_back(x.id);
  }
  const double n = static_cast<double>(xs.size());
  const std::vector<double> partials(xs.size(), 1.0 / n);
  return t.push(Op::mean, s / n, parents, partials);
}

Var scale(Var a, double c) { return a.tape->push1(Op::scale, c * a.value(), a, c); }

Var shift(Var a, double c) { return a.tape->push1(Op::shift, a.value() + c, a, 1.0); }

Var relu(Var a) {
  const double x = a.value();
  return a.tape->push1(Op::relu, x > 0.0 ? x : 0.0, a, x > 0.0 ? 1.0 : 0.0);
}

Var affine(std::span<const Var> weights, std::span<const Var> inputs, Var bias) {
  if (weights.size() != inputs.size())
    throw DomainError(Op::affine, "weight/input size mismatch");
  Tape& t = *bias.tape;
  const std::size_t n = weights.size();
  std::vector<std::uint32_t> parents;
  std::vector<double> partials;
  parents.reserve(2 * n + 1);
  partials.reserve(2 * n + 1);
  double acc = bias.value();
  for (std::size_t i = 0; i < n; ++i) {
    const double w = weights[i].value(), x = inputs[i].value();
    acc += w * x;
    parents.push_back(weights[i].id);
    partials.push_back(x);
    parents.push_back(inputs[i].id);
    partials.push_back(w);
  }
  parents.push_back(bias.id);
  partials.push_back(1.0);
  return t.push(Op::affine, acc, parents, partials);
}

GradCheckResult finite_diff_check(const GraphFn& graph, std::span<const double> theta,
                                  double eps) {
  ValueFn value = [&graph](std::span<const double> p) {
    Tape t;
    auto leaves = t.leaves(p);
    return graph(t, leaves).value();
  };
  return finite_diff_check(graph, value, theta, eps);
}

GradCheckResult finite_diff_check(const GraphFn& graph, const ValueFn& value,
                                  std::span<const double> theta, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_check: eps must be positive");
  GradCheckResult result;
  {
    Tape t;
    auto leaves = t.leaves(theta);
    Var root = graph(t, leaves);
    if (!std::isfinite(root.value()))
      throw std::runtime_error("finite_diff_check: non-finite objective at theta");
    t.backward(root);
    result.analytic = t.gradients(leaves);
  }
  std::vector<double> probe(theta.begin(), theta.end());
  result.numeric.resize(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = value(probe);
    probe[i] = orig - eps;
    const double down = value(probe);
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      std::ostringstream msg;
      msg << "finite_diff_check: non-finite objective when perturbing coordinate " << i;
      throw std::runtime_error(msg.str());
    }
    result.numeric[i] = (up - down) / (2.0 * eps);
    const double a = result.analytic[i];
    const double rel = std::abs(a - result.numeric[i]) / std::max(1.0, std::abs(a));
    if (i == 0 || rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_index = i;
    }
  }
  return result;
}

}  // namespace tpo::ad

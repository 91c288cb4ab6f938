#include <cmath>
#include <numbers>

#include "doctest.h"
#include "tpo/error.hpp"
#include "tpo/losses.hpp"
#include "tpo/rng.hpp"

using namespace tpo;

namespace {

// Independent scalar oracle written from the closed forms.
double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double nls(double z) { return softplus(-z); }  // -log sigmoid(z)
double sig(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct Rec {
  double g, c, r, cref, rref;
  int gl, cl, rl;
};

double oracle(const Rec& x, const LossConfig& k, double kto_z0) {
  const double a = k.alpha, b = k.beta, gm = k.gamma;
  switch (k.method) {
    case Method::tpo: return nls(b * (x.c - x.r)) + a * (-x.g);
    case Method::tpo_l: return nls(b / x.cl * x.c - b / x.rl * x.r - gm) + a * (-x.g);
    case Method::simpo: return nls(b / x.cl * x.c - b / x.rl * x.r - gm);
    case Method::cpo: return nls(b * (x.c - x.r)) - x.c;
    case Method::dpo: return nls(b * ((x.c - x.cref) - (x.r - x.rref)));
    case Method::ipo: {
      const double h = (x.c - x.cref) - (x.r - x.rref) - 1.0 / (2.0 * b);
      return h * h;
    }
    case Method::orpo: {
      const double ca = x.c / x.cl, ra = x.r / x.rl;
      const double lc = ca - std::log(-std::expm1(ca)), lr = ra - std::log(-std::expm1(ra));
      return -ca + b * nls(lc - lr);
    }
    case Method::kto: {
      const double rc = x.c - x.cref, rr = x.r - x.rref;
      return ((1.0 - sig(b * (rc - kto_z0))) + (1.0 - sig(b * (kto_z0 - rr)))) / 2.0;
    }
    case Method::slic_hf: return std::max(0.0, b - x.c + x.r) - a * x.c;
  }
  return 0.0;
}

Rec random_rec(Rng& rng) {
  Rec x;
  x.gl = 1 + static_cast<int>(rng.below(8));
  x.cl = 1 + static_cast<int>(rng.below(8));
  x.rl = 1 + static_cast<int>(rng.below(8));
  x.g = -rng.uniform(0.05, 3.0) * x.gl;
  x.c = -rng.uniform(0.05, 3.0) * x.cl;
  x.r = -rng.uniform(0.05, 3.0) * x.rl;
  x.cref = -rng.uniform(0.05, 3.0) * x.cl;
  x.rref = -rng.uniform(0.05, 3.0) * x.rl;
  return x;
}

LossConfig random_cfg(Rng& rng, Method m) {
  LossConfig k;
  k.method = m;
  k.alpha = rng.uniform(0.0, 2.0);
  k.beta = rng.uniform(0.01, 3.0);
  k.gamma = (m == Method::tpo_l || m == Method::simpo) ? rng.uniform(0.0, 2.0) : 0.0;
  return k;
}

BatchLogProbs make_batch(ad::Tape& t, const std::vector<Rec>& recs, bool with_ref) {
  BatchLogProbs b;
  for (const auto& x : recs) {
    b.gold_sum.push_back(t.leaf(x.g));
    b.chosen_sum.push_back(t.leaf(x.c));
    b.rejected_sum.push_back(t.leaf(x.r));
    b.gold_len.push_back(x.gl);
    b.chosen_len.push_back(x.cl);
    b.rejected_len.push_back(x.rl);
    if (with_ref) {
      b.chosen_ref.push_back(x.cref);
      b.rejected_ref.push_back(x.rref);
    }
  }
  return b;
}

}  // namespace

TEST_CASE("preference and BC terms") {
  CHECK(preference_term(-3.0, -3.0, 0.7) == doctest::Approx(std::numbers::ln2).epsilon(1e-15));
  CHECK(preference_term(-1.0, -2.0, 1.0) == doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-14));
  CHECK(preference_term(-1.0, -2.0, 1.0) == doctest::Approx(0.313262).epsilon(1e-6));
  CHECK(bc_term(0.0) == 0.0);
  CHECK(bc_term(-0.5) == 0.5);
  CHECK(bc_term(-3 * std::log(4.0)) == doctest::Approx(4.158883).epsilon(1e-6));
}

TEST_CASE("scalar worked values") {
  RecordLogProbs r;
  r.gold_sum = 0.0;
  r.chosen_sum = r.rejected_sum = -2.0;
  CHECK(record_loss(r, {Method::tpo, 1.0, 0.3, 0.0}) == doctest::Approx(std::numbers::ln2).epsilon(1e-15));

  r = {-0.5, -1.0, -2.0, 1, 1, 1, std::nullopt, std::nullopt};
  CHECK(record_loss(r, {Method::tpo, 1.0, 1.0, 0.0}) == doctest::Approx(0.813262).epsilon(1e-6));
  CHECK(record_loss(r, {Method::tpo, 0.0, 1.0, 0.0}) == preference_term(-1.0, -2.0, 1.0));

  r = {-0.5, -4.0, -6.0, 1, 4, 3, std::nullopt, std::nullopt};
  const double tl = record_loss(r, {Method::tpo_l, 1.0, 1.0, 0.5});
  CHECK(tl == doctest::Approx(std::log1p(std::exp(-0.5)) + 0.5).epsilon(1e-14));
  CHECK(tl == doctest::Approx(0.974077).epsilon(1e-6));
  CHECK(record_loss(r, {Method::tpo_l, 0.0, 1.0, 0.5}) ==
        record_loss(r, {Method::simpo, 0.0, 1.0, 0.5}));

  r = {0.0, -1.0, -2.0, 1, 1, 1, std::nullopt, std::nullopt};
  CHECK(record_loss(r, {Method::cpo, 0.0, 1.0, 0.0}) == doctest::Approx(1.313262).epsilon(1e-6));
  r = {0.0, -1.0, -2.0, 1, 1, 1, -1.0, -2.0};
  CHECK(record_loss(r, {Method::dpo, 0.0, 0.9, 0.0}) == doctest::Approx(std::numbers::ln2).epsilon(1e-15));
  r = {0.0, -1.0, -3.0, 1, 1, 1, std::nullopt, std::nullopt};
  CHECK(record_loss(r, {Method::slic_hf, 0.0, 1.5, 0.0}) == 0.0);
}

TEST_CASE("property: every method matches the independent oracle") {
  Rng rng(2024);
  for (Method m : all_methods()) {
    for (int trial = 0; trial < 200; ++trial) {
      const LossConfig k = random_cfg(rng, m);
      const std::size_t n = 1 + rng.below(6);
      std::vector<Rec> recs;
      for (std::size_t i = 0; i < n; ++i) recs.push_back(random_rec(rng));
      double z0 = 0.0;
      if (m == Method::kto) {
        for (const auto& x : recs) z0 += (x.c - x.cref) + (x.r - x.rref);
        z0 = std::max(0.0, z0 / (2.0 * static_cast<double>(n)));
      }
      double expect = 0.0;
      for (const auto& x : recs) expect += oracle(x, k, z0);
      expect /= static_cast<double>(n);
      ad::Tape t;
      const auto b = make_batch(t, recs, needs_reference(m));
      const double got = loss(b, k).value();
      CHECK_MESSAGE(std::abs(got - expect) <= 1e-12 * std::max(1.0, std::abs(expect)),
                    method_name(m) << " trial " << trial);
    }
  }
}

TEST_CASE("property: equivalence identities") {
  Rng rng(77);
  for (int trial = 0; trial < 1000; ++trial) {
    Rec x = random_rec(rng);
    const double beta = rng.uniform(0.01, 3.0);
    // TPO with gold = chosen and alpha = 1 is CPO.
    RecordLogProbs r{x.c, x.c, x.r, x.cl, x.cl, x.rl, std::nullopt, std::nullopt};
    CHECK(std::abs(record_loss(r, {Method::tpo, 1.0, beta, 0.0}) -
                   record_loss(r, {Method::cpo, 0.0, beta, 0.0})) <= 1e-12);
    const double gamma = rng.uniform(0.0, 2.0);
    RecordLogProbs s{x.g, x.c, x.r, x.gl, x.cl, x.rl, std::nullopt, std::nullopt};
    CHECK(std::abs(record_loss(s, {Method::tpo_l, 0.0, beta, gamma}) -
                   record_loss(s, {Method::simpo, 0.0, beta, gamma})) <= 1e-12);
    RecordLogProbs d{x.g, x.c, x.r, x.gl, x.cl, x.rl, x.c, x.r};
    CHECK(std::abs(record_loss(d, {Method::dpo, 0.0, beta, 0.0}) - std::numbers::ln2) <= 1e-12);
    CHECK(std::abs(preference_term(x.c, x.c, beta) - std::numbers::ln2) <= 1e-12);
  }
}

TEST_CASE("property: closed-form TPO gradient matches the tape") {
  Rng rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    const Rec x = random_rec(rng);
    const double alpha = rng.uniform(0.0, 2.0), beta = rng.uniform(0.01, 5.0);
    const TpoGradient cf = tpo_closed_form_gradient(x.c, x.r, alpha, beta);
    const double s = sig(beta * (x.r - x.c));
    CHECK(std::abs(cf.gold + alpha) <= 1e-15);
    CHECK(std::abs(cf.chosen + beta * s) <= 1e-10);
    CHECK(std::abs(cf.rejected - beta * s) <= 1e-10);
    ad::Tape t;
    const auto b = make_batch(t, {x}, false);
    const ad::Var root = tpo_loss(b, {Method::tpo, alpha, beta, 0.0});
    t.backward(root);
    CHECK(std::abs(b.gold_sum[0].grad() - cf.gold) <= 1e-10);
    CHECK(std::abs(b.chosen_sum[0].grad() - cf.chosen) <= 1e-10);
    CHECK(std::abs(b.rejected_sum[0].grad() - cf.rejected) <= 1e-10);
  }
}

TEST_CASE("rewards and Bradley-Terry") {
  CHECK(implicit_reward(RewardKind::tpo, -2.0, 3, std::nullopt, 0.5) == -1.0);
  CHECK(implicit_reward(RewardKind::dpo, -2.0, 3, -2.0, 0.5) == 0.0);
  CHECK(implicit_reward(RewardKind::simpo, -4.0, 4, std::nullopt, 2.0) == -2.0);
  CHECK_THROWS_AS(implicit_reward(RewardKind::dpo, -2.0, 3, std::nullopt, 0.5), ValidationError);
  CHECK(bt_preference_prob(1.2, 1.2) == 0.5);
  CHECK(bt_preference_prob(1.0, 0.0) == doctest::Approx(0.731059).epsilon(1e-6));
  CHECK(std::abs(bt_preference_prob(0.3 + 17.3, -0.4 + 17.3) - bt_preference_prob(0.3, -0.4)) <= 1e-12);
  CHECK(length_normalized_margin(-4, 4, -6, 3, 1.0, 0.5) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("validation and names") {
  CHECK(parse_method("TPO-L") == Method::tpo_l);
  CHECK(parse_method("slic-hf") == Method::slic_hf);
  CHECK_THROWS_AS(parse_method("rlhf"), ValidationError);
  for (Method m : all_methods()) CHECK(parse_method(method_name(m)) == m);
  CHECK_THROWS_AS((LossConfig{Method::tpo, 1.0, 0.0, 0.0}.validate()), ValidationError);
  CHECK_THROWS_AS((LossConfig{Method::tpo, -1.0, 0.1, 0.0}.validate()), ValidationError);
  CHECK_THROWS_AS((LossConfig{Method::dpo, 0.0, 0.1, 0.5}.validate()), ValidationError);

  ad::Tape t;
  const auto no_ref = make_batch(t, {Rec{-1, -1, -2, -1, -2, 1, 1, 1}}, false);
  CHECK_THROWS_AS(loss(no_ref, {Method::dpo, 0.0, 0.1, 0.0}), ValidationError);
  CHECK_THROWS_AS(tpo_loss(no_ref, {Method::dpo, 0.0, 0.1, 0.0}), ValidationError);
  CHECK_THROWS_AS(baseline_loss(Method::tpo, no_ref, {Method::tpo, 1.0, 0.1, 0.0}), ValidationError);
  BatchLogProbs empty;
  CHECK_THROWS_AS(loss(empty, LossConfig{}), ValidationError);
}

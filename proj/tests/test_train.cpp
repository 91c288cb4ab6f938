#include <algorithm>
#include <cmath>
#include <numbers>

#include "doctest.h"
#include "tpo/error.hpp"
#include "tpo/presets.hpp"
#include "tpo/synthetic.hpp"
#include "tpo/train.hpp"

using namespace tpo;

namespace {

double mean_gold(const Policy& p, const std::vector<PreferenceTriple>& d) {
  double s = 0.0;
  for (const auto& t : d) s += seq_logprob(p, t.prompt, t.gold);
  return s / static_cast<double>(d.size());
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  // warmup = ceil(0.1 * 100) = 10 steps
  CHECK(lr_at(10, 100, 5e-7, 0.1) == 5e-7);
  CHECK(lr_at(5, 100, 5e-7, 0.1) == doctest::Approx(2.5e-7).epsilon(1e-15));
  CHECK(std::abs(lr_at(100, 100, 5e-7, 0.1)) <= 1e-12);
  const double expect = 5e-7 * 0.5 * (1 + std::cos(std::numbers::pi * 45.0 / 90.0));
  CHECK(lr_at(55, 100, 5e-7, 0.1) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(lr_at(55, 100, 5e-7, 0.1) == doctest::Approx(2.5e-7).epsilon(1e-12));
  CHECK(lr_at(70, 100, 1.0, 0.1, Schedule::constant) == 1.0);
  CHECK_THROWS_AS(lr_at(0, 100, 1.0, 0.1), ValidationError);
  CHECK_THROWS_AS(lr_at(101, 100, 1.0, 0.1), ValidationError);
  // Property: monotone up to the warmup end, then monotone down.
  for (int max = 1; max <= 60; ++max) {
    const int w = static_cast<int>(std::ceil(0.1 * max));
    for (int s = 2; s <= max; ++s) {
      if (s <= w) CHECK(lr_at(s, max, 1.0, 0.1) >= lr_at(s - 1, max, 1.0, 0.1));
      else CHECK(lr_at(s, max, 1.0, 0.1) <= lr_at(s - 1, max, 1.0, 0.1));
    }
  }
}

TEST_CASE("train_step contracts") {
  const auto data = synthetic_triples(TaskSpec{}, 8, 0);
  TrainConfig cfg = desk_preset("tpo");
  auto policy = initial_policy(cfg);
  std::vector<const PreferenceTriple*> batch{&data[0], &data[1]};
  OptimizerState st;

  const std::string before = checksum(*policy);
  const StepLog log = train_step(*policy, batch, cfg.loss, false, cfg, st, 1, 10, 0.0, nullptr);
  CHECK(checksum(*policy) == before);
  CHECK(log.step == 1);
  CHECK(log.lr == 0.0);
  CHECK(std::isfinite(log.loss));
  CHECK(log.gold_logp == doctest::Approx((seq_logprob(*policy, data[0].prompt, data[0].gold) +
                                          seq_logprob(*policy, data[1].prompt, data[1].gold)) /
                                         2)
                             .epsilon(1e-12));

  // alpha = 0 with chosen == rejected: the two likelihood gradients cancel.
  PreferenceTriple same = data[0];
  same.rejected = same.chosen;
  std::vector<const PreferenceTriple*> one{&same};
  TrainConfig sgd = cfg;
  sgd.optimizer.kind = OptimizerKind::sgd;
  sgd.loss.alpha = 0.0;
  OptimizerState st2;
  const StepLog z = train_step(*policy, one, sgd.loss, false, sgd, st2, 1, 1, 0.1, nullptr);
  CHECK(z.grad_norm == 0.0);
  CHECK(checksum(*policy) == before);

  TrainConfig dpo = desk_preset("dpo");
  CHECK_THROWS_AS(train_step(*policy, batch, dpo.loss, false, dpo, st, 1, 10, 0.1, nullptr),
                  ValidationError);
}

TEST_CASE("non-finite loss names the record") {
  const auto data = synthetic_triples(TaskSpec{}, 8, 0);
  TrainConfig cfg = desk_preset("tpo");
  auto policy = initial_policy(cfg);
  for (double& p : policy->mutable_parameters()) p = std::nan("");
  try {
    run_training(data, cfg, policy.get());
    FAIL("expected a runtime error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("batch record 0") != std::string::npos);
  }
}

TEST_CASE("determinism and trajectory round-trip") {
  const auto data = synthetic_triples(TaskSpec{}, 64, 2);
  TrainConfig cfg = desk_preset("tpo");
  cfg.epochs = 1;
  const auto a = run_training(data, cfg);
  const auto b = run_training(data, cfg);
  CHECK(a.trajectory.final_checksum == b.trajectory.final_checksum);
  CHECK(trajectory_to_jsonl(a.trajectory) == trajectory_to_jsonl(b.trajectory));
  CHECK(a.trajectory.steps.size() == 4);
  const Trajectory back = trajectory_from_jsonl(trajectory_to_jsonl(a.trajectory));
  CHECK(back.steps == a.trajectory.steps);
  CHECK(back.final_checksum == a.trajectory.final_checksum);
  cfg.seed = 1;
  CHECK(run_training(data, cfg).trajectory.final_checksum != a.trajectory.final_checksum);
}

TEST_CASE("sft_only reads gold sequences only") {
  auto data = synthetic_triples(TaskSpec{}, 48, 3);
  TrainConfig cfg = desk_preset("sft");
  cfg.epochs = 1;
  const auto a = run_training(data, cfg);
  for (auto& t : data) {
    t.chosen = TokenSeq{0};
    t.rejected = TokenSeq{1, 1};
  }
  const auto b = run_training(data, cfg);
  CHECK(a.trajectory.final_checksum == b.trajectory.final_checksum);
  for (const auto& s : a.trajectory.steps) CHECK(s.stage == "sft");
  CHECK(a.reference == nullptr);
}

TEST_CASE("two_step runs SFT then the preference stage with a frozen reference") {
  const auto data = synthetic_triples(TaskSpec{}, 64, 4);
  TrainConfig cfg = desk_preset("dpo");
  cfg.mode = RunMode::two_step;
  cfg.epochs = 1;
  cfg.sft_epochs = 2;
  const auto r = run_training(data, cfg);
  const auto& steps = r.trajectory.steps;
  REQUIRE(steps.size() == 12);
  for (std::size_t i = 0; i < steps.size(); ++i) {
    CHECK(steps[i].step == static_cast<int>(i + 1));
    CHECK(steps[i].stage == (i < 8 ? "sft" : "preference"));
  }
  CHECK(!r.trajectory.reference_checksum_before.empty());
  CHECK(r.trajectory.reference_checksum_before == r.trajectory.reference_checksum_after);
  REQUIRE(r.reference != nullptr);
  CHECK(checksum(*r.reference) == r.trajectory.reference_checksum_before);
}

TEST_CASE("loss falls over 50 steps on the default task (median of 5 seeds)") {
  const auto data = synthetic_triples(TaskSpec{}, 500, 0);
  std::vector<double> drops;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TrainConfig cfg = desk_preset("tpo");
    cfg.seed = seed;
    cfg.max_steps = 50;
    const auto r = run_training(data, cfg);
    REQUIRE(r.trajectory.steps.size() == 50);
    drops.push_back(r.trajectory.steps.front().loss - r.trajectory.steps.back().loss);
  }
  CHECK(median(drops) > 0.0);
}

TEST_CASE("tpo_single_step raises gold likelihood") {
  const auto data = synthetic_triples(TaskSpec{}, 200, 5);
  TrainConfig cfg = desk_preset("tpo");
  const auto init = initial_policy(cfg);
  const auto r = run_training(data, cfg, init.get());
  CHECK(mean_gold(*r.policy, data) > mean_gold(*init, data));
}

TEST_CASE("config JSON") {
  const TrainConfig c = desk_preset("tpo_l");
  const auto j = nlohmann::json::parse(train_config_to_json(c).dump());
  const TrainConfig back = train_config_from_json(j);
  CHECK(train_config_to_json(back) == train_config_to_json(c));
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"learnign_rate", 0.1}}), ValidationError);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"batch_size", 0}}), ValidationError);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"batch_size", "big"}}), ValidationError);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"mode", "tpo_single_step"},
                                                        {"loss", {{"method", "dpo"}}}}),
                  ValidationError);
  CHECK_THROWS_AS(parse_run_mode("rl"), ValidationError);
}

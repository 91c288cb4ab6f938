// Acceptance gate: one PASS/FAIL line per criterion; exit status is the
// number of failed criteria.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tpo/data.hpp"
#include "tpo/eval.hpp"
#include "tpo/losses.hpp"
#include "tpo/presets.hpp"
#include "tpo/rng.hpp"
#include "tpo/synthetic.hpp"
#include "tpo/train.hpp"

using namespace tpo;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean_logp(const Policy& p, const std::vector<PreferenceTriple>& d,
                 TokenSeq PreferenceTriple::*field) {
  double s = 0.0;
  for (const auto& t : d) s += seq_logprob(p, t.prompt, t.*field);
  return s / static_cast<double>(d.size());
}

double stddev(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Default task: training split (seed 0) and a held-out evaluation split.
const std::vector<PreferenceTriple>& train_split() {
  static const auto d = synthetic_triples(TaskSpec{}, 500, 0);
  return d;
}
const std::vector<PreferenceTriple>& eval_split() {
  static const auto d = synthetic_triples(TaskSpec{}, 500, 1);
  return d;
}

// ---------------------------------------------------------------- AC1

Outcome ac1() {
  double worst_fd = 0.0, worst_cf = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(mix_seed(seed, 0xac1));
    LossConfig k{Method::tpo, rng.uniform(0.0, 2.0), rng.uniform(0.005, 2.0), 0.0};
    PolicySpec ps;
    ps.seed = seed;
    ps.init_scale = rng.uniform(0.05, 0.5);
    const auto policy = make_policy(ps);
    const auto data = synthetic_triples(TaskSpec{}, 32, seed);
    std::vector<const PreferenceTriple*> batch;
    for (int i = 0; i < 4; ++i) batch.push_back(&data[rng.below(data.size())]);
    worst_fd = std::max(worst_fd, loss_gradcheck(*policy, batch, k, nullptr, 1e-5).max_rel_error);

    // Gradient with respect to the three sequence log-likelihoods.
    ad::Tape tape;
    PolicyGraph g(*policy, tape);
    const BatchLogProbs b = batch_logprobs(g, batch, nullptr);
    tape.backward(tpo_loss(b, k));
    for (std::size_t i = 0; i < b.size(); ++i) {
      const double s = sigmoid(k.beta * (b.rejected_sum[i].value() - b.chosen_sum[i].value()));
      const double n = static_cast<double>(b.size());
      const double expect[3] = {-k.alpha / n, -k.beta * s / n, k.beta * s / n};
      const double got[3] = {b.gold_sum[i].grad(), b.chosen_sum[i].grad(), b.rejected_sum[i].grad()};
      // A sequence repeated within the batch (gold == chosen, say) would share
      // a node; synthetic triples never repeat within a record.
      for (int j = 0; j < 3; ++j) worst_cf = std::max(worst_cf, std::abs(got[j] - expect[j]));
      const TpoGradient cf = tpo_closed_form_gradient(b.chosen_sum[i].value(),
                                                      b.rejected_sum[i].value(), k.alpha, k.beta);
      worst_cf = std::max({worst_cf, std::abs(cf.gold * 1.0 / n - expect[0]),
                           std::abs(cf.chosen / n - expect[1]), std::abs(cf.rejected / n - expect[2])});
    }
  }
  return {worst_fd <= 1e-5 && worst_cf <= 1e-10,
          "max finite-diff rel err " + fmt("%.3g", worst_fd) + " (<= 1e-5), closed-form err " +
              fmt("%.3g", worst_cf) + " (<= 1e-10)"};
}

// ---------------------------------------------------------------- AC2

Outcome ac2() {
  Rng rng(0xac2);
  double e_cpo = 0, e_simpo = 0, e_dpo = 0, e_pref = 0;
  for (int i = 0; i < 1000; ++i) {
    const int cl = 1 + static_cast<int>(rng.below(10)), rl = 1 + static_cast<int>(rng.below(10));
    const double c = -rng.uniform(0.01, 4.0) * cl, r = -rng.uniform(0.01, 4.0) * rl;
    const double g = -rng.uniform(0.01, 4.0) * 5;
    const double beta = rng.uniform(0.01, 5.0), gamma = rng.uniform(0.0, 3.0);
    RecordLogProbs a{c, c, r, cl, cl, rl, std::nullopt, std::nullopt};
    e_cpo = std::max(e_cpo, std::abs(record_loss(a, {Method::tpo, 1.0, beta, 0.0}) -
                                     record_loss(a, {Method::cpo, 0.0, beta, 0.0})));
    RecordLogProbs s{g, c, r, 5, cl, rl, std::nullopt, std::nullopt};
    e_simpo = std::max(e_simpo, std::abs(record_loss(s, {Method::tpo_l, 0.0, beta, gamma}) -
                                         record_loss(s, {Method::simpo, 0.0, beta, gamma})));
    RecordLogProbs d{g, c, r, 5, cl, rl, c, r};
    e_dpo = std::max(e_dpo, std::abs(record_loss(d, {Method::dpo, 0.0, beta, 0.0}) - std::numbers::ln2));
    e_pref = std::max(e_pref, std::abs(preference_term(c, c, beta) - std::numbers::ln2));
  }
  const double worst = std::max({e_cpo, e_simpo, e_dpo, e_pref});
  return {worst <= 1e-12, "TPO=CPO " + fmt("%.2g", e_cpo) + ", TPO-L=SimPO " + fmt("%.2g", e_simpo) +
                              ", DPO=ln2 " + fmt("%.2g", e_dpo) + ", pref=ln2 " + fmt("%.2g", e_pref) +
                              " (all <= 1e-12)"};
}

// ---------------------------------------------------------------- AC3

Outcome ac3() {
  double worst_rt = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto t = random_table(2, 3, seed);  // 8 entries
    const double beta = 0.1 + 2.0 * Rng(seed).uniform();
    worst_rt = std::max(worst_rt, reward_roundtrip_check(t, beta).max_deviation);
  }
  double worst_tv = 0.0;
  int worst_steps = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto table = random_table(2, 2, 100 + seed);
    MerlFitConfig cfg;
    cfg.seed = seed;
    const auto r = merl_fit(table, 2, cfg);
    // Independent check of the fitted distribution against the closed form.
    const auto op = mer_optimal_policy(table, cfg.beta);
    double tv = 0.0;
    for (std::size_t i = 0; i < op.probs.size(); ++i) tv += 0.5 * std::abs(op.probs[i] - r.probs[i]);
    worst_tv = std::max(worst_tv, tv);
    worst_steps = std::max(worst_steps, r.steps);
  }
  return {worst_rt <= 1e-10 && worst_tv <= 1e-3 && worst_steps <= 5000,
          "round-trip dev " + fmt("%.2g", worst_rt) + " (<= 1e-10), MERL fit TV " + fmt("%.2g", worst_tv) +
              " (<= 1e-3) in <= " + std::to_string(worst_steps) + " steps (<= 5000)"};
}

// ---------------------------------------------------------------- AC4

Outcome ac4() {
  double worst_pref = 0.0, worst_pol = 0.0;
  int detected = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(mix_seed(seed, 0xac4));
    const auto t = random_table(2 + static_cast<int>(rng.below(3)), 1 + rng.below(2), seed);
    const double g = rng.uniform(-20.0, 20.0), beta = rng.uniform(0.1, 3.0);
    const auto e = equivalence_shift_check(t, g, beta);
    worst_pref = std::max(worst_pref, e.max_preference_diff);
    worst_pol = std::max(worst_pol, e.max_policy_diff);
    std::vector<double> delta(t.size(), g);
    delta[rng.below(delta.size())] += rng.uniform(0.1, 1.0);
    detected += !equivalence_shift_check(t, delta, beta).equivalent;
  }
  return {worst_pref <= 1e-12 && worst_pol <= 1e-12 && detected == 100,
          "max BT diff " + fmt("%.2g", worst_pref) + ", max policy diff " + fmt("%.2g", worst_pol) +
              " (<= 1e-12); negative control detected " + std::to_string(detected) + "/100"};
}

// ---------------------------------------------------------------- AC5

Outcome ac5() {
  const TrainConfig cfg = desk_preset("tpo");
  const auto init = initial_policy(cfg);
  const auto r = run_training(train_split(), cfg, init.get());
  const auto pairs = to_pairs(eval_split());
  const double a0 = reward_accuracy(*init, pairs, RewardKind::tpo, cfg.loss.beta).accuracy;
  const double a1 = reward_accuracy(*r.policy, pairs, RewardKind::tpo, cfg.loss.beta).accuracy;
  const double dg = mean_logp(*r.policy, eval_split(), &PreferenceTriple::gold) -
                    mean_logp(*init, eval_split(), &PreferenceTriple::gold);
  return {a0 <= 0.6 && a1 >= 0.9 && dg > 0.0,
          "accuracy " + fmt("%.3f", a0) + " (<= 0.6) -> " + fmt("%.3f", a1) + " (>= 0.9), gold logp delta " +
              fmt("%+.3f", dg) + " (> 0)"};
}

// ---------------------------------------------------------------- AC6

Outcome ac6() {
  const auto data = read_triples(std::string(TPO_FIXTURE_DIR) + "/synthetic_increment_n500_seed0.jsonl");
  std::size_t distinct = 0;
  for (const auto& t : data) distinct += t.gold != t.chosen;
  std::vector<double> d_chosen_cpo, d_gold_tpo;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TrainConfig cpo = desk_preset("cpo");
    cpo.seed = seed;
    auto init = initial_policy(cpo);
    auto r = run_training(data, cpo, init.get());
    d_chosen_cpo.push_back(mean_logp(*r.policy, data, &PreferenceTriple::chosen) -
                           mean_logp(*init, data, &PreferenceTriple::chosen));
    TrainConfig tpo = desk_preset("tpo");
    tpo.seed = seed;
    init = initial_policy(tpo);
    r = run_training(data, tpo, init.get());
    d_gold_tpo.push_back(mean_logp(*r.policy, data, &PreferenceTriple::gold) -
                         mean_logp(*init, data, &PreferenceTriple::gold));
  }
  const double mc = median(d_chosen_cpo), mg = median(d_gold_tpo);
  return {distinct == data.size() && mc < 0.0 && mg > 0.0,
          "gold != chosen in " + std::to_string(distinct) + "/" + std::to_string(data.size()) +
              " records; CPO median delta log pi(y_w) " + fmt("%+.3f", mc) +
              " (< 0), TPO median delta log pi(y_gold) " + fmt("%+.3f", mg) + " (> 0)"};
}

// ---------------------------------------------------------------- AC7

Outcome ac7() {
  const auto clean_pairs = to_pairs(eval_split());
  std::map<double, std::vector<double>> tpo_dgold, tpo_acc, dpo_acc;
  for (double p : {0.0, 1.0}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      auto noisy = train_split();
      inject_label_noise(noisy, p, seed);

      TrainConfig tpo = desk_preset("tpo");
      tpo.seed = seed;
      auto init = initial_policy(tpo);
      auto r = run_training(noisy, tpo, init.get());
      tpo_dgold[p].push_back(mean_logp(*r.policy, eval_split(), &PreferenceTriple::gold) -
                             mean_logp(*init, eval_split(), &PreferenceTriple::gold));
      tpo_acc[p].push_back(reward_accuracy(*r.policy, clean_pairs, RewardKind::tpo, tpo.loss.beta).accuracy);

      TrainConfig dpo = desk_preset("dpo");
      dpo.seed = seed;
      init = initial_policy(dpo);
      r = run_training(noisy, dpo, init.get());
      dpo_acc[p].push_back(
          reward_accuracy(*r.policy, clean_pairs, RewardKind::dpo, dpo.loss.beta, r.reference.get()).accuracy);
    }
  }
  const double g1 = median(tpo_dgold[1.0]), d1 = median(dpo_acc[1.0]);
  const double t0 = median(tpo_acc[0.0]), d0 = median(dpo_acc[0.0]);
  return {g1 > 0.0 && d1 <= 0.5 && t0 > 0.9 && d0 > 0.9,
          "p=1: TPO gold delta " + fmt("%+.3f", g1) + " (> 0), DPO clean acc " + fmt("%.3f", d1) +
              " (<= 0.5); p=0: TPO acc " + fmt("%.3f", t0) + ", DPO acc " + fmt("%.3f", d0) + " (> 0.9)"};
}

// ---------------------------------------------------------------- AC8

Outcome ac8() {
  const double beta = 1.0;
  const std::vector<double> gammas{0.0, 1.0, 2.0, 4.0};
  const auto pairs = to_pairs(eval_split());
  // Column 0 is the trained base policy, then one column per gamma.
  std::vector<std::vector<double>> sd(gammas.size() + 1);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TrainConfig base_cfg = desk_preset("tpo");
    base_cfg.seed = seed;
    const auto base = run_training(train_split(), base_cfg);
    sd[0].push_back(stddev(length_normalized_gaps(*base.policy, pairs, beta)));
    for (std::size_t k = 0; k < gammas.size(); ++k) {
      TrainConfig cfg = desk_preset("tpo_l");
      cfg.seed = seed;
      cfg.loss.beta = beta;
      cfg.loss.gamma = gammas[k];
      const auto r = run_training(train_split(), cfg, base.policy.get());
      sd[k + 1].push_back(stddev(length_normalized_gaps(*r.policy, pairs, beta)));
    }
  }
  std::vector<double> med;
  for (const auto& col : sd) med.push_back(median(col));
  int nondecreasing = 0;
  for (std::size_t i = 1; i < med.size(); ++i) nondecreasing += med[i] >= med[i - 1];
  std::string series = fmt("%.3f", med[0]);
  for (std::size_t k = 0; k < gammas.size(); ++k)
    series += " -> " + fmt("%.3f", med[k + 1]) + " (g=" + fmt("%g", gammas[k]) + ")";
  return {nondecreasing >= 3, "median sd " + series + "; nondecreasing " +
                                  std::to_string(nondecreasing) + "/4 (>= 3)"};
}

// ---------------------------------------------------------------- AC9

Outcome ac9() {
  const std::string dir = TPO_FIXTURE_DIR;
  const auto built = build_triples_base(read_sources(dir + "/base10_sources.jsonl"), 0.5);
  const auto expected = read_triples(dir + "/base10_expected.jsonl");
  const bool exact = built.triples == expected && built.report.emitted == 7 && built.report.skipped == 3;

  auto to_text = [](const std::vector<PreferenceTriple>& d) {
    std::string s;
    for (const auto& t : d) s += triple_to_json(t) + "\n";
    return s;
  };
  auto data = synthetic_triples(TaskSpec{}, 300, 9);
  const std::string before = to_text(data);
  inject_label_noise(data, 1.0, 1);
  const bool changed = to_text(data) != before;
  inject_label_noise(data, 1.0, 2);
  const bool involution = changed && to_text(data) == before;

  Rng rng(0xac9);
  std::vector<PreferenceTriple> random;
  for (int i = 0; i < 500; ++i) {
    PreferenceTriple t = data[rng.below(data.size())];
    t.meta.scores = {rng.uniform(-1e9, 1e9), rng.uniform() * 1e-300, -rng.uniform()};
    random.push_back(t);
  }
  const auto tmp = fs::temp_directory_path() / "tpo_acceptance_ac9.jsonl";
  write_triples(tmp.string(), random);
  const bool roundtrip = read_triples(tmp.string()) == random;
  std::vector<SourceRecord> sources = gen_synthetic(TaskSpec{}, 100, 3);
  sources[0].responses[0].rank = 2;
  write_sources(tmp.string(), sources);
  const bool src_roundtrip = read_sources(tmp.string()) == sources;
  fs::remove(tmp);
  return {exact && involution && roundtrip && src_roundtrip,
          std::string("fixture ") + (exact ? "exact" : "MISMATCH") + " (7 emitted, 3 skipped), noise involution " +
              (involution ? "byte-exact" : "BROKEN") + ", JSONL round-trip " +
              (roundtrip && src_roundtrip ? "lossless" : "LOSSY")};
}

// ---------------------------------------------------------------- AC10

int sh(const std::string& cmd) {
  const int raw = std::system((cmd + " >/dev/null 2>&1").c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string text = read_file(e.path().string());
    const std::string rel = fs::relative(e.path(), dir).string();
    if (rel.find("manifest.json") != std::string::npos) {
      // Wall-clock duration is the only field allowed to differ.
      auto j = nlohmann::ordered_json::parse(text);
      j.erase("duration_seconds");
      text = j.dump();
    }
    files[rel] = text;
  }
  return files;
}

Outcome ac10() {
  const fs::path root = fs::temp_directory_path() / "tpo_acceptance_ac10";
  fs::remove_all(root);
  const std::string exe = TPO_LAB_EXE;
  const std::string fixtures = TPO_FIXTURE_DIR;
  std::vector<std::string> differing;
  int failures = 0;
  for (const char* run : {"a", "b"}) {
    // Identical paths per run so manifests can be compared byte for byte.
    const fs::path d = root / "work";
    fs::remove_all(d);
    fs::create_directories(d);
    const std::string w = d.string();
    nlohmann::ordered_json cfg{{"preset", "tpo"},
                               {"train", {{"epochs", 1}}},
                               {"data", {{"path", "data.jsonl"}}},
                               {"noise", {{"fraction", 0.25}, {"seed", 3}}}};
    write_file_atomic(w + "/cfg.json", cfg.dump(2) + "\n");
    failures += sh(exe + " synth --task increment --n 200 --seed 5 --out " + w + "/data.jsonl") != 0;
    failures += sh(exe + " build-data --rule base --margin 0.5 --noise-frac 0.5 --seed 2 --in " + fixtures +
                   "/base10_sources.jsonl --out " + w + "/built.jsonl") != 0;
    failures += sh(exe + " train --config " + w + "/cfg.json --out " + w + "/run --seed 4") != 0;
    failures += sh(exe + " eval --policy " + w + "/run/policy.json --dataset " + w +
                   "/data.jsonl --reward simpo --beta 2 --seed 4 --out " + w + "/eval") != 0;
    failures += sh(exe + " gradcheck --seed 4 --out " + w + "/grad") != 0;
    failures += sh(exe + " report --trajectories x=" + w + "/run/trajectory.jsonl --out " + w + "/report") != 0;
    fs::rename(d, root / run);
  }
  const auto a = tree(root / "a"), b = tree(root / "b");
  for (const auto& [k, v] : a) {
    const auto it = b.find(k);
    if (it == b.end() || it->second != v) differing.push_back(k);
  }
  if (a.size() != b.size()) differing.push_back("<file sets differ>");
  fs::remove_all(root);
  std::string detail = std::to_string(a.size()) + " files across 6 subcommands, " +
                       std::to_string(differing.size()) + " differ";
  for (const auto& f : differing) detail += " [" + f + "]";
  if (failures) detail += ", " + std::to_string(failures) + " commands failed";
  return {failures == 0 && differing.empty() && a.size() >= 15, detail};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
    double limit_s;  // 0: no runtime bound
  };
  const std::vector<Criterion> criteria{
      {"AC1 gradient identity", ac1, 5.0},
      {"AC2 equivalence identities", ac2, 1.0},
      {"AC3 optimal-policy consistency", ac3, 30.0},
      {"AC4 equivalence-class lemmas", ac4, 0.0},
      {"AC5 learning at desk scale", ac5, 60.0},
      {"AC6 conflict reproduction", ac6, 0.0},
      {"AC7 noise robustness direction", ac7, 0.0},
      {"AC8 margin monotonicity", ac8, 0.0},
      {"AC9 data pipeline exactness", ac9, 1.0},
      {"AC10 CLI determinism", ac10, 0.0},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::string timing = fmt("%.2fs", secs);
    if (c.limit_s > 0) {
      timing += fmt(" (< %gs)", c.limit_s);
      if (secs >= c.limit_s) {
        o.pass = false;
        o.detail += "; runtime limit exceeded";
      }
    }
    std::printf("%s %s: %s; %s\n", o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str(), timing.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed;
}

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "tpo/cli.hpp"
#include "tpo/data.hpp"
#include "tpo/error.hpp"
#include "tpo/eval.hpp"
#include "tpo/losses.hpp"
#include "tpo/presets.hpp"
#include "tpo/synthetic.hpp"
#include "tpo/train.hpp"

namespace py = pybind11;
using namespace tpo;

namespace {

// Records cross the boundary as JSONL text, the same format the CLI reads.
std::vector<PreferenceTriple> parse_triples(const std::string& text) {
  std::vector<PreferenceTriple> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(triple_from_json(line));
  return out;
}

std::string dump_triples(const std::vector<PreferenceTriple>& data) {
  std::string s;
  for (const auto& t : data) s += triple_to_json(t) + "\n";
  return s;
}

TrainConfig config_for(const std::string& preset, const std::string& overrides) {
  auto j = nlohmann::json::parse(train_config_to_json(desk_preset(preset)).dump());
  if (!overrides.empty()) j.merge_patch(nlohmann::json::parse(overrides));
  return train_config_from_json(j);
}

}  // namespace

PYBIND11_MODULE(tpolab, m) {
  m.doc() = "Desk-scale preference optimization lab";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);

  m.def(
      "record_loss",
      [](const std::string& method, double gold, double chosen, double rejected, double alpha,
         double beta, double gamma, int gold_len, int chosen_len, int rejected_len,
         std::optional<double> chosen_ref, std::optional<double> rejected_ref) {
        RecordLogProbs r{gold, chosen, rejected, gold_len, chosen_len, rejected_len, chosen_ref,
                         rejected_ref};
        return record_loss(r, {parse_method(method), alpha, beta, gamma});
      },
      py::arg("method"), py::arg("gold"), py::arg("chosen"), py::arg("rejected"),
      py::arg("alpha") = 1.0, py::arg("beta") = 0.01, py::arg("gamma") = 0.0,
      py::arg("gold_len") = 1, py::arg("chosen_len") = 1, py::arg("rejected_len") = 1,
      py::arg("chosen_ref") = py::none(), py::arg("rejected_ref") = py::none(),
      "Per-record loss from sequence log-likelihood sums.");

  m.def(
      "tpo_gradient",
      [](double chosen, double rejected, double alpha, double beta) {
        const auto g = tpo_closed_form_gradient(chosen, rejected, alpha, beta);
        return py::make_tuple(g.gold, g.chosen, g.rejected);
      },
      py::arg("chosen"), py::arg("rejected"), py::arg("alpha"), py::arg("beta"),
      "(d/dgold, d/dchosen, d/drejected) of the TPO record loss.");

  py::enum_<Schedule>(m, "Schedule")
      .value("cosine", Schedule::cosine)
      .value("constant", Schedule::constant);
  m.def("lr_at", py::overload_cast<int, int, double, double, Schedule>(&lr_at), py::arg("step"),
        py::arg("max_steps"), py::arg("peak"), py::arg("warmup_fraction"),
        py::arg("schedule") = Schedule::cosine);

  m.def("desk_presets", &desk_preset_names);
  m.def(
      "desk_preset", [](const std::string& name) { return train_config_to_json(desk_preset(name)).dump(); },
      py::arg("name"), "Preset training config as JSON text.");

  m.def(
      "synthetic",
      [](const std::string& generator, std::size_t n, std::uint64_t seed) {
        TaskSpec s;
        s.generator = generator;
        return dump_triples(synthetic_triples(s, n, seed));
      },
      py::arg("generator") = "increment", py::arg("n") = 500, py::arg("seed") = 0,
      "Synthetic preference triples as JSONL.");

  m.def(
      "inject_noise",
      [](const std::string& jsonl, double p, std::uint64_t seed) {
        auto d = parse_triples(jsonl);
        inject_label_noise(d, p, seed);
        return dump_triples(d);
      },
      py::arg("jsonl"), py::arg("p"), py::arg("seed"));

  m.def(
      "train",
      [](const std::string& jsonl, const std::string& preset, std::uint64_t seed,
         const std::string& overrides) {
        TrainConfig cfg = config_for(preset, overrides);
        cfg.seed = seed;
        const auto data = parse_triples(jsonl);
        TrainResult r;
        {
          py::gil_scoped_release unlock;
          r = run_training(data, cfg);
        }
        py::dict out;
        out["policy"] = policy_to_json(*r.policy);
        out["trajectory"] = trajectory_to_jsonl(r.trajectory);
        out["checksum"] = r.trajectory.final_checksum;
        return out;
      },
      py::arg("jsonl"), py::arg("preset") = "tpo", py::arg("seed") = 0, py::arg("overrides") = "",
      "Train from JSONL triples; returns policy JSON, trajectory JSONL and checksum.");

  m.def(
      "evaluate",
      [](const std::string& policy_json, const std::string& jsonl, const std::string& reward,
         double beta) {
        const auto policy = policy_from_json(policy_json);
        const auto r =
            reward_accuracy(*policy, to_pairs(parse_triples(jsonl)), parse_reward_kind(reward), beta);
        return to_json(r).dump();
      },
      py::arg("policy"), py::arg("jsonl"), py::arg("reward") = "tpo", py::arg("beta") = 1.0,
      "Reward-accuracy report as JSON text.");

  m.def(
      "gradcheck",
      [](const std::string& preset, std::uint64_t seed, double eps) {
        const TrainConfig cfg = desk_preset(preset);
        const auto data = synthetic_triples(TaskSpec{}, 4, seed);
        std::vector<const PreferenceTriple*> batch;
        for (const auto& t : data) batch.push_back(&t);
        auto policy = initial_policy(cfg);
        std::unique_ptr<ReferencePolicy> ref;
        if (needs_reference(cfg.loss.method)) ref = std::make_unique<ReferencePolicy>(*policy);
        return loss_gradcheck(*policy, batch, cfg.loss, ref.get(), eps).max_rel_error;
      },
      py::arg("preset") = "tpo", py::arg("seed") = 0, py::arg("eps") = 1e-5,
      "Max relative finite-difference error of the loss gradient.");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release unlock;
          code = cli::dispatch(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run a tpo-lab subcommand; returns (exit code, stdout, stderr).");
}

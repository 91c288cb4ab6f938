#include "tpo/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "tpo/error.hpp"
#include "tpo/eval.hpp"
#include "tpo/presets.hpp"
#include "tpo/rng.hpp"

namespace tpo {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return it.key() == k; }))
      throw ValidationError(where + ": unknown key \"" + it.key() + "\"");
  }
}

template <class T>
T get_as(const json& j, const char* key, const std::string& where, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError(where + "." + key + " has the wrong type");
  }
}

std::string resolve(const std::string& base, const std::string& p) {
  fs::path path(p);
  if (path.is_absolute() || base.empty()) return path.string();
  return (fs::path(base) / path).lexically_normal().string();
}

DataSource parse_data_source(const json& j, const std::string& base, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + " must be an object");
  reject_unknown(j, {"path", "synthetic"}, where);
  DataSource d;
  if (j.contains("path") == j.contains("synthetic"))
    throw ValidationError(where + " needs exactly one of \"path\" or \"synthetic\"");
  if (j.contains("path")) {
    d.path = resolve(base, get_as<std::string>(j, "path", where, ""));
    return d;
  }
  const json& s = j.at("synthetic");
  const std::string sw = where + ".synthetic";
  if (!s.is_object()) throw ValidationError(sw + " must be an object");
  reject_unknown(s, {"generator", "n", "seed", "content_vocab", "prompt_len", "response_len"}, sw);
  d.task.generator = get_as<std::string>(s, "generator", sw, d.task.generator);
  d.task.content_vocab = get_as<int>(s, "content_vocab", sw, d.task.content_vocab);
  d.task.prompt_len = get_as<int>(s, "prompt_len", sw, d.task.prompt_len);
  d.task.response_len = get_as<int>(s, "response_len", sw, d.task.response_len);
  d.n = get_as<std::size_t>(s, "n", sw, d.n);
  d.seed = get_as<std::uint64_t>(s, "seed", sw, d.seed);
  d.task.validate();
  if (d.n == 0) throw ValidationError(sw + ".n must be >= 1");
  return d;
}

ordered_json data_source_json(const DataSource& d) {
  if (d.path) return {{"path", *d.path}};
  return {{"synthetic",
           {{"generator", d.task.generator},
            {"n", d.n},
            {"seed", d.seed},
            {"content_vocab", d.task.content_vocab},
            {"prompt_len", d.task.prompt_len},
            {"response_len", d.task.response_len}}}};
}

ordered_json resolved_json(const RunConfig& c) {
  ordered_json j;
  j["preset"] = c.preset ? ordered_json(*c.preset) : ordered_json(nullptr);
  j["train"] = train_config_to_json(c.train);
  j["data"] = data_source_json(c.data);
  j["noise"] = {{"fraction", c.noise_fraction},
                {"seed", c.noise_seed.value_or(c.train.seed)}};
  ordered_json e;
  e["data"] = c.eval_data ? data_source_json(*c.eval_data) : ordered_json(nullptr);
  e["reward"] = std::string(reward_kind_name(c.reward.value_or(logged_reward_kind(c.train.loss.method))));
  e["beta"] = c.reward_beta.value_or(c.train.loss.beta);
  e["bins"] = c.bins;
  j["eval"] = e;
  return j;
}

std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Checksums of the files a command wrote, keyed by their path relative to dir.
ordered_json output_checksums(const std::string& dir, const std::vector<std::string>& files) {
  ordered_json j = ordered_json::object();
  for (const auto& f : files) j[f] = file_checksum((fs::path(dir) / f).string());
  return j;
}

void write_manifest(const std::string& path, ordered_json m) {
  write_file_atomic(path, m.dump(2) + "\n");
}

double mean_gold_logp(const Policy& policy, const std::vector<PreferenceTriple>& data) {
  double s = 0.0;
  for (const auto& t : data) s += seq_logprob(policy, t.prompt, t.gold);
  return data.empty() ? 0.0 : s / static_cast<double>(data.size());
}

double mean_chosen_logp(const Policy& policy, const std::vector<PreferenceTriple>& data) {
  double s = 0.0;
  for (const auto& t : data) s += seq_logprob(policy, t.prompt, t.chosen);
  return data.empty() ? 0.0 : s / static_cast<double>(data.size());
}

std::vector<double> shared_edges(const std::vector<double>& a, const std::vector<double>& b,
                                 int bins) {
  double lo = 0.0, hi = 0.0;
  bool first = true;
  for (const auto* v : {&a, &b})
    for (double x : *v) {
      lo = first ? x : std::min(lo, x);
      hi = first ? x : std::max(hi, x);
      first = false;
    }
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
  return uniform_edges(lo, hi, static_cast<std::size_t>(bins));
}

struct EvalOutputs {
  ordered_json json;
  std::string csv;
  std::string md;
};

// Initial-versus-final reward report for a trained policy.
EvalOutputs train_report(const RunConfig& cfg, const Policy& init, const Policy& final_policy,
                         const Policy* reference, const std::vector<PreferenceTriple>& eval_set) {
  const RewardKind kind = cfg.reward.value_or(logged_reward_kind(cfg.train.loss.method));
  const double beta = cfg.reward_beta.value_or(cfg.train.loss.beta);
  const Policy* ref = kind == RewardKind::dpo ? (reference ? reference : &init) : nullptr;
  const auto pairs = to_pairs(eval_set);
  const auto edges = shared_edges(delta_r_values(init, pairs, kind, beta, ref),
                                  delta_r_values(final_policy, pairs, kind, beta, ref), cfg.bins);
  const RewardReport r0 = reward_accuracy(init, pairs, kind, beta, ref, edges);
  const RewardReport r1 = reward_accuracy(final_policy, pairs, kind, beta, ref, edges);
  const double g0 = mean_gold_logp(init, eval_set), g1 = mean_gold_logp(final_policy, eval_set);
  const double c0 = mean_chosen_logp(init, eval_set), c1 = mean_chosen_logp(final_policy, eval_set);
  const double a0 = gold_token_accuracy(init, eval_set);
  const double a1 = gold_token_accuracy(final_policy, eval_set);

  EvalOutputs o;
  o.json["method"] = std::string(method_name(cfg.train.loss.method));
  o.json["mode"] = std::string(run_mode_name(cfg.train.mode));
  o.json["seed"] = cfg.train.seed;
  o.json["dataset"] = (cfg.eval_data ? *cfg.eval_data : cfg.data).tag();
  o.json["n"] = eval_set.size();
  o.json["reward_initial"] = to_json(r0);
  o.json["reward_final"] = to_json(r1);
  o.json["gold_logp"] = {{"initial", g0}, {"final", g1}, {"delta", g1 - g0}};
  o.json["chosen_logp"] = {{"initial", c0}, {"final", c1}, {"delta", c1 - c0}};
  o.json["gold_token_accuracy"] = {{"initial", a0}, {"final", a1}};

  std::ostringstream csv;
  csv << "bin_lo,bin_hi,initial,final\n";
  char buf[160];
  for (std::size_t i = 0; i < r1.delta_r_histogram.counts.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%zu,%zu\n", edges[i], edges[i + 1],
                  r0.delta_r_histogram.counts[i], r1.delta_r_histogram.counts[i]);
    csv << buf;
  }
  o.csv = csv.str();

  std::ostringstream md;
  md << "# " << method_name(cfg.train.loss.method) << " / " << run_mode_name(cfg.train.mode)
     << " / seed " << cfg.train.seed << "\n\n";
  md << reward_markdown(r0, "Initial policy") << "\n" << reward_markdown(r1, "Final policy") << "\n";
  md << "| quantity | initial | final |\n|---|---|---|\n";
  std::snprintf(buf, sizeof buf, "| mean gold log-likelihood | %.6g | %.6g |\n", g0, g1);
  md << buf;
  std::snprintf(buf, sizeof buf, "| mean chosen log-likelihood | %.6g | %.6g |\n", c0, c1);
  md << buf;
  std::snprintf(buf, sizeof buf, "| gold token accuracy (%%) | %.6g | %.6g |\n", a0, a1);
  md << buf;
  o.md = md.str();
  return o;
}

}  // namespace

std::string DataSource::tag() const {
  if (path) return fs::path(*path).stem().string();
  return task.generator + "_n" + std::to_string(n) + "_d" + std::to_string(seed);
}

RunConfig parse_run_config(const std::string& text, const std::string& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  reject_unknown(j, {"preset", "train", "data", "noise", "eval"}, "config");

  RunConfig c;
  c.text = text;
  c.base_dir = base_dir;
  if (j.contains("preset")) c.preset = get_as<std::string>(j, "preset", "config", "");
  json train = json::parse(train_config_to_json(desk_preset(c.preset.value_or("tpo"))).dump());
  if (j.contains("train")) {
    if (!j.at("train").is_object()) throw ValidationError("config.train must be an object");
    train.merge_patch(j.at("train"));
  }
  c.train = train_config_from_json(train);

  if (!j.contains("data")) throw ValidationError("config: missing \"data\"");
  c.data = parse_data_source(j.at("data"), base_dir, "config.data");

  if (j.contains("noise")) {
    const json& n = j.at("noise");
    if (!n.is_object()) throw ValidationError("config.noise must be an object");
    reject_unknown(n, {"fraction", "seed"}, "config.noise");
    c.noise_fraction = get_as<double>(n, "fraction", "config.noise", 0.0);
    if (n.contains("seed")) c.noise_seed = get_as<std::uint64_t>(n, "seed", "config.noise", 0);
    if (!(c.noise_fraction >= 0.0 && c.noise_fraction <= 1.0))
      throw ValidationError("config.noise.fraction must lie in [0, 1]");
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    if (!e.is_object()) throw ValidationError("config.eval must be an object");
    reject_unknown(e, {"data", "reward", "beta", "bins"}, "config.eval");
    if (e.contains("data") && !e.at("data").is_null())
      c.eval_data = parse_data_source(e.at("data"), base_dir, "config.eval.data");
    if (e.contains("reward"))
      c.reward = parse_reward_kind(get_as<std::string>(e, "reward", "config.eval", "tpo"));
    if (e.contains("beta")) c.reward_beta = get_as<double>(e, "beta", "config.eval", 1.0);
    c.bins = get_as<int>(e, "bins", "config.eval", c.bins);
    if (c.bins < 1) throw ValidationError("config.eval.bins must be >= 1");
    if (c.reward_beta && !(*c.reward_beta > 0.0))
      throw ValidationError("config.eval.beta must be > 0");
  }
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception&) {
    throw ValidationError("cannot read config file '" + path + "'");
  }
  return parse_run_config(text, fs::path(path).parent_path().string());
}

std::vector<PreferenceTriple> load_data(const DataSource& src) {
  if (src.path) return read_triples(*src.path);
  return synthetic_triples(src.task, src.n, src.seed);
}

std::string file_checksum(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "' for checksum");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[4096];
  while (in) {
    in.read(buf, sizeof buf);
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return hex64(h);
}

RunOutputs run_train_command(const RunConfig& cfg, const std::string& config_path,
                             const std::string& out_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<PreferenceTriple> clean = load_data(cfg.data);
  if (clean.empty()) throw ValidationError("training data is empty");
  std::vector<PreferenceTriple> data = clean;
  std::vector<std::size_t> flipped;
  if (cfg.noise_fraction > 0.0)
    flipped = inject_label_noise(data, cfg.noise_fraction, cfg.noise_seed.value_or(cfg.train.seed));
  const std::vector<PreferenceTriple> eval_set = cfg.eval_data ? load_data(*cfg.eval_data) : clean;
  if (eval_set.empty()) throw ValidationError("eval data is empty");

  const auto init = initial_policy(cfg.train);
  TrainResult result = run_training(data, cfg.train, init.get());

  fs::create_directories(fs::path(out_dir) / "reports");
  RunOutputs out{out_dir, {}};
  auto put = [&](const std::string& rel, const std::string& text) {
    write_file_atomic((fs::path(out_dir) / rel).string(), text);
    out.files.push_back(rel);
  };
  put("config.json", cfg.text);
  put("trajectory.jsonl", trajectory_to_jsonl(result.trajectory));
  put("policy.json", policy_to_json(*result.policy) + "\n");
  if (result.reference) put("reference.json", policy_to_json(*result.reference) + "\n");

  const std::string stem =
      report_stem(std::string(method_name(cfg.train.loss.method)),
                  std::string(run_mode_name(cfg.train.mode)) + "_" + cfg.data.tag(), cfg.train.seed);
  EvalOutputs rep = train_report(cfg, *init, *result.policy, result.reference.get(), eval_set);
  rep.json["noise"] = {{"fraction", cfg.noise_fraction}, {"flipped", flipped.size()}};
  rep.json["final_checksum"] = result.trajectory.final_checksum;
  put("reports/" + stem + ".json", rep.json.dump(2) + "\n");
  put("reports/" + stem + ".csv", rep.csv);
  put("reports/" + stem + ".md", rep.md);

  ordered_json m;
  m["command"] = "train";
  m["config_path"] = config_path;
  m["config_text"] = cfg.text;
  m["resolved_config"] = resolved_json(cfg);
  m["seed"] = cfg.train.seed;
  ordered_json inputs = ordered_json::object();
  if (!config_path.empty() && fs::exists(config_path)) inputs[config_path] = file_checksum(config_path);
  if (cfg.data.path) inputs[*cfg.data.path] = file_checksum(*cfg.data.path);
  if (cfg.eval_data && cfg.eval_data->path)
    inputs[*cfg.eval_data->path] = file_checksum(*cfg.eval_data->path);
  m["inputs"] = inputs;
  m["outputs"] = output_checksums(out_dir, out.files);
  m["duration_seconds"] = seconds_since(t0);
  write_manifest((fs::path(out_dir) / "manifest.json").string(), m);
  out.files.push_back("manifest.json");
  return out;
}

namespace cli {

namespace {

std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      seeds.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ValidationError("--seeds: '" + item + "' is not a seed");
    }
  }
  if (seeds.empty()) throw ValidationError("--seeds: empty list");
  return seeds;
}

std::string join_args(int argc, const char* const* argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
  return s;
}

struct BuildDataArgs {
  std::string rule = "base";
  double margin = kDefaultMargin;
  int chosen_rank = 2;
  double noise_frac = 0.0;
  std::uint64_t seed = 0;
  std::string in, out;
};

int cmd_build_data(const BuildDataArgs& a, const std::string& command, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto sources = read_sources(a.in);
  BuildResult r;
  if (a.rule == "base") r = build_triples_base(sources, a.margin);
  else if (a.rule == "equal-score") r = build_triples_equal_score(sources, a.margin);
  else r = build_triples_instruct(sources, a.chosen_rank);
  std::vector<std::size_t> flipped;
  if (a.noise_frac > 0.0) flipped = inject_label_noise(r.triples, a.noise_frac, a.seed);
  write_triples(a.out, r.triples);

  ordered_json report;
  report["rule"] = a.rule;
  report["input"] = r.report.input;
  report["emitted"] = r.report.emitted;
  report["skipped"] = r.report.skipped;
  report["reasons"] = r.report.reasons;
  report["noise_flipped"] = flipped;
  out << report.dump(2) << "\n";

  ordered_json m;
  m["command"] = command;
  m["resolved_config"] = {{"rule", a.rule}, {"margin", a.margin}, {"chosen_rank", a.chosen_rank},
                          {"noise_frac", a.noise_frac}};
  m["seed"] = a.seed;
  m["inputs"] = {{a.in, file_checksum(a.in)}};
  m["outputs"] = {{a.out, file_checksum(a.out)}};
  m["report"] = report;
  m["duration_seconds"] = seconds_since(t0);
  write_manifest(a.out + ".manifest.json", m);
  return 0;
}

struct SynthArgs {
  TaskSpec task;
  std::size_t n = 500;
  std::uint64_t seed = 0;
  std::string out;
  bool sources = false;
};

int cmd_synth(const SynthArgs& a, const std::string& command, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  a.task.validate();
  if (a.n == 0) throw ValidationError("--n must be >= 1");
  std::size_t count = 0;
  if (a.sources) {
    const auto recs = gen_synthetic(a.task, a.n, a.seed);
    write_sources(a.out, recs);
    count = recs.size();
  } else {
    const auto triples = synthetic_triples(a.task, a.n, a.seed);
    write_triples(a.out, triples);
    count = triples.size();
  }
  ordered_json m;
  m["command"] = command;
  m["resolved_config"] = {{"task", a.task.generator},
                          {"n", a.n},
                          {"content_vocab", a.task.content_vocab},
                          {"prompt_len", a.task.prompt_len},
                          {"response_len", a.task.response_len},
                          {"format", a.sources ? "sources" : "triples"}};
  m["seed"] = a.seed;
  m["inputs"] = ordered_json::object();
  m["outputs"] = {{a.out, file_checksum(a.out)}};
  m["duration_seconds"] = seconds_since(t0);
  write_manifest(a.out + ".manifest.json", m);
  out << "wrote " << count << " records to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string config, out, mode, seeds;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  RunConfig base = load_run_config(a.config);
  if (!a.mode.empty()) {
    base.train.mode = parse_run_mode(a.mode);
    base.train.validate();
  }
  if (a.seed) base.train.seed = *a.seed;
  if (a.seeds.empty()) {
    const RunOutputs r = run_train_command(base, a.config, a.out);
    out << "wrote " << r.files.size() << " files to " << r.dir << "\n";
    return 0;
  }
  const auto seeds = parse_seed_list(a.seeds);
  if (a.jobs < 1) throw ValidationError("--jobs must be >= 1");
  std::vector<std::string> failures(seeds.size());
  std::vector<bool> validation(seeds.size(), false);
  std::size_t next = 0;
  std::mutex mu;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= seeds.size()) return;
        i = next++;
      }
      RunConfig c = base;
      c.train.seed = seeds[i];
      try {
        run_train_command(c, a.config,
                          (fs::path(a.out) / ("seed" + std::to_string(seeds[i]))).string());
      } catch (const ValidationError& e) {
        failures[i] = e.what();
        validation[i] = true;
      } catch (const std::exception& e) {
        failures[i] = e.what();
      }
    }
  };
  const int n_threads = std::min<int>(a.jobs, static_cast<int>(seeds.size()));
  std::vector<std::thread> pool;
  for (int t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  int code = 0;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (failures[i].empty()) {
      out << "seed " << seeds[i] << ": ok\n";
    } else {
      err << "seed " << seeds[i] << ": " << failures[i] << "\n";
      code = std::max(code, validation[i] ? 1 : 2);
    }
  }
  return code;
}

struct EvalArgs {
  std::string policy, dataset, reward = "tpo", reference, out, edges, tag;
  double beta = 1.0;
  int bins = 10;
  std::uint64_t seed = 0;
};

std::vector<double> parse_edges(const std::string& s) {
  std::vector<double> edges;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      edges.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ValidationError("--edges: '" + item + "' is not a number");
    }
  }
  return edges;
}

int cmd_eval(const EvalArgs& a, const std::string& command, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  const RewardKind kind = parse_reward_kind(a.reward);
  if (!(a.beta > 0.0)) throw ValidationError("--beta must be > 0");
  const auto policy = load_checkpoint(a.policy);
  std::unique_ptr<Policy> reference;
  if (!a.reference.empty()) reference = load_checkpoint(a.reference);
  if (kind == RewardKind::dpo && !reference)
    throw ValidationError("--reward dpo needs --reference");
  const auto data = read_triples(a.dataset);
  const auto pairs = to_pairs(data);
  if (pairs.empty()) throw ValidationError("dataset '" + a.dataset + "' is empty");
  std::vector<double> edges = a.edges.empty() ? std::vector<double>{} : parse_edges(a.edges);
  if (edges.empty()) {
    const auto gaps = delta_r_values(*policy, pairs, kind, a.beta, reference.get());
    edges = shared_edges(gaps, gaps, a.bins);
  }
  const RewardReport r = reward_accuracy(*policy, pairs, kind, a.beta, reference.get(), edges);
  ordered_json j;
  j["policy"] = a.policy;
  j["dataset"] = a.dataset;
  j["reward"] = to_json(r);
  j["mean_gold_logp"] = mean_gold_logp(*policy, data);
  j["mean_chosen_logp"] = mean_chosen_logp(*policy, data);
  j["gold_token_accuracy"] = gold_token_accuracy(*policy, data);

  if (a.out.empty()) {
    out << j.dump(2) << "\n";
    return 0;
  }
  const std::string tag = a.tag.empty() ? fs::path(a.dataset).stem().string() : a.tag;
  const std::string stem = report_stem("eval_" + a.reward, tag, a.seed);
  fs::create_directories(fs::path(a.out) / "reports");
  std::vector<std::string> files;
  auto put = [&](const std::string& rel, const std::string& text) {
    write_file_atomic((fs::path(a.out) / rel).string(), text);
    files.push_back(rel);
  };
  put("reports/" + stem + ".json", j.dump(2) + "\n");
  put("reports/" + stem + ".csv", histogram_csv(r.delta_r_histogram));
  put("reports/" + stem + ".md", reward_markdown(r, "Reward accuracy: " + tag));
  ordered_json m;
  m["command"] = command;
  m["resolved_config"] = {{"reward", a.reward}, {"beta", a.beta}, {"edges", edges}};
  m["seed"] = a.seed;
  ordered_json inputs{{a.policy, file_checksum(a.policy)}, {a.dataset, file_checksum(a.dataset)}};
  if (!a.reference.empty()) inputs[a.reference] = file_checksum(a.reference);
  m["inputs"] = inputs;
  m["outputs"] = output_checksums(a.out, files);
  m["duration_seconds"] = seconds_since(t0);
  write_manifest((fs::path(a.out) / "manifest.json").string(), m);
  out << "accuracy " << r.accuracy << " over " << r.n << " pairs\n";
  return 0;
}

struct GradcheckArgs {
  std::string config, out;
  double eps = 1e-5, tol = 1e-5;
  std::uint64_t seed = 0;
  int batch = 4;
};

int cmd_gradcheck(const GradcheckArgs& a, const std::string& command, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg;
  if (!a.config.empty()) {
    cfg = load_run_config(a.config);
  } else {
    cfg = parse_run_config(R"({"preset": "tpo", "data": {"synthetic": {"n": 16}}})");
  }
  cfg.train.seed = a.seed;
  if (a.batch < 1) throw ValidationError("--batch must be >= 1");
  if (!(a.eps > 0.0)) throw ValidationError("--eps must be > 0");
  const auto data = load_data(cfg.data);
  if (data.empty()) throw ValidationError("gradcheck data is empty");
  // Random batch drawn from the data with the run seed.
  Rng rng(mix_seed(a.seed, 0x67726164));
  std::vector<const PreferenceTriple*> batch;
  for (int i = 0; i < a.batch; ++i) batch.push_back(&data[rng.below(data.size())]);
  const auto policy = initial_policy(cfg.train);
  std::unique_ptr<ReferencePolicy> ref;
  if (needs_reference(cfg.train.loss.method)) ref = std::make_unique<ReferencePolicy>(*policy);
  const ad::GradCheckResult r =
      loss_gradcheck(*policy, batch, cfg.train.loss, ref.get(), a.eps);
  const bool ok = r.max_rel_error <= a.tol;
  ordered_json j;
  j["method"] = std::string(method_name(cfg.train.loss.method));
  j["parameters"] = r.analytic.size();
  j["batch"] = a.batch;
  j["eps"] = a.eps;
  j["tol"] = a.tol;
  j["max_rel_error"] = r.max_rel_error;
  j["worst_index"] = r.worst_index;
  j["passed"] = ok;
  out << j.dump(2) << "\n";
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_file_atomic((fs::path(a.out) / "gradcheck.json").string(), j.dump(2) + "\n");
    ordered_json m;
    m["command"] = command;
    m["resolved_config"] = resolved_json(cfg);
    m["seed"] = a.seed;
    m["inputs"] = a.config.empty() ? ordered_json::object()
                                   : ordered_json{{a.config, file_checksum(a.config)}};
    m["outputs"] = output_checksums(a.out, {"gradcheck.json"});
    m["duration_seconds"] = seconds_since(t0);
    write_manifest((fs::path(a.out) / "manifest.json").string(), m);
  }
  return ok ? 0 : 2;
}

struct ReportArgs {
  std::vector<std::string> trajectories;
  std::string out;
};

int cmd_report(const ReportArgs& a, const std::string& command, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  std::map<std::string, Trajectory> runs;
  ordered_json inputs = ordered_json::object();
  for (const auto& spec : a.trajectories) {
    const auto eq = spec.find('=');
    std::string name, path;
    if (eq == std::string::npos) {
      path = spec;
      const fs::path p(spec);
      name = p.filename() == "trajectory.jsonl" ? p.parent_path().filename().string()
                                                : p.stem().string();
    } else {
      name = spec.substr(0, eq);
      path = spec.substr(eq + 1);
    }
    if (name.empty()) throw ValidationError("--trajectories: empty run name in '" + spec + "'");
    if (runs.count(name)) throw ValidationError("--trajectories: duplicate run name '" + name + "'");
    try {
      runs[name] = read_trajectory(path);
    } catch (const ValidationError&) {
      throw;
    } catch (const std::exception& e) {
      throw ValidationError("cannot read trajectory '" + path + "': " + e.what());
    }
    inputs[path] = file_checksum(path);
  }
  const auto conflict = conflict_report(runs);
  const auto noise = noise_report(runs);
  fs::create_directories(fs::path(a.out) / "reports");
  std::vector<std::string> files;
  auto put = [&](const std::string& rel, const std::string& text) {
    write_file_atomic((fs::path(a.out) / rel).string(), text);
    files.push_back(rel);
  };
  put("reports/conflict.json", to_json(conflict).dump(2) + "\n");
  put("reports/conflict.md", conflict_markdown(conflict));
  put("reports/noise.json", to_json(noise).dump(2) + "\n");
  put("reports/noise.md", noise_markdown(noise));
  ordered_json m;
  m["command"] = command;
  m["resolved_config"] = {{"runs", a.trajectories}};
  m["seed"] = 0;
  m["inputs"] = inputs;
  m["outputs"] = output_checksums(a.out, files);
  m["duration_seconds"] = seconds_since(t0);
  write_manifest((fs::path(a.out) / "manifest.json").string(), m);
  out << conflict_markdown(conflict) << "\n" << noise_markdown(noise);
  return 0;
}

}  // namespace

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Desk-scale preference optimization lab", "tpo-lab"};
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  BuildDataArgs bd;
  auto* build = app.add_subcommand("build-data", "Build preference triples from scored responses");
  build->add_option("--rule", bd.rule, "Selection rule")
      ->check(CLI::IsMember({"base", "equal-score", "instruct"}))
      ->capture_default_str();
  build->add_option("--margin", bd.margin, "Minimum score gap")->capture_default_str();
  build->add_option("--chosen-rank", bd.chosen_rank, "Rank used as chosen (instruct rule)")
      ->capture_default_str();
  build->add_option("--noise-frac", bd.noise_frac, "Fraction of chosen/rejected swaps")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  build->add_option("--seed", bd.seed, "Noise seed")->capture_default_str();
  build->add_option("--in", bd.in, "Source records (JSONL)")->required()->check(CLI::ExistingFile);
  build->add_option("--out", bd.out, "Output triples (JSONL)")->required();

  SynthArgs sy;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic task");
  synth->add_option("--task", sy.task.generator, "Generator")
      ->check(CLI::IsMember(synthetic_generators()))
      ->capture_default_str();
  synth->add_option("--n", sy.n, "Number of prompts")->capture_default_str();
  synth->add_option("--seed", sy.seed, "Generator seed")->capture_default_str();
  synth->add_option("--prompt-len", sy.task.prompt_len, "Prompt length")->capture_default_str();
  synth->add_option("--response-len", sy.task.response_len, "Response length")
      ->capture_default_str();
  synth->add_flag("--sources", sy.sources, "Write scored source records instead of triples");
  synth->add_option("--out", sy.out, "Output path (JSONL)")->required();

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train a policy from a run config");
  train->add_option("--config", tr.config, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--mode", tr.mode, "Override the run mode")
      ->check(CLI::IsMember({"sft_only", "preference_only", "tpo_single_step", "two_step"}));
  train->add_option("--out", tr.out, "Run directory")->required();
  train->add_option("--seed", tr.seed, "Override the training seed");
  train->add_option("--seeds", tr.seeds, "Comma-separated seed sweep; runs go to <out>/seed<k>")
      ->excludes("--seed");
  train->add_option("--jobs", tr.jobs, "Parallel runs for --seeds")->capture_default_str();

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Reward accuracy of a checkpoint");
  eval->add_option("--policy", ev.policy, "Policy checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--dataset", ev.dataset, "Triples (JSONL)")->required()->check(CLI::ExistingFile);
  eval->add_option("--reward", ev.reward, "Implicit reward")
      ->check(CLI::IsMember({"tpo", "dpo", "simpo"}))
      ->capture_default_str();
  eval->add_option("--beta", ev.beta, "Reward scale")->capture_default_str();
  eval->add_option("--reference", ev.reference, "Reference checkpoint (dpo reward)")
      ->check(CLI::ExistingFile);
  eval->add_option("--bins", ev.bins, "Histogram bins")->check(CLI::PositiveNumber)->capture_default_str();
  eval->add_option("--edges", ev.edges, "Comma-separated histogram edges")->excludes("--bins");
  eval->add_option("--tag", ev.tag, "Report tag (default: dataset stem)");
  eval->add_option("--seed", ev.seed, "Seed recorded in the report name")->capture_default_str();
  eval->add_option("--out", ev.out, "Run directory; prints JSON when omitted");

  GradcheckArgs gc;
  auto* grad = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  grad->add_option("--config", gc.config, "Run config (default: tpo preset)")->check(CLI::ExistingFile);
  grad->add_option("--eps", gc.eps, "Finite-difference step")->capture_default_str();
  grad->add_option("--tol", gc.tol, "Maximum relative error")->capture_default_str();
  grad->add_option("--seed", gc.seed, "Policy and batch seed")->capture_default_str();
  grad->add_option("--batch", gc.batch, "Batch size")->capture_default_str();
  grad->add_option("--out", gc.out, "Directory for gradcheck.json and manifest.json");

  ReportArgs rp;
  auto* report = app.add_subcommand("report", "Conflict and noise summaries over trajectories");
  report->add_option("--trajectories", rp.trajectories, "name=path or path (repeatable)")
      ->required()
      ->expected(1, -1);
  report->add_option("--out", rp.out, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    const auto subs = app.get_subcommands();
    err << "error: " << e.what() << "\n\n" << (subs.empty() ? app.help() : subs.front()->help());
    return 1;
  }

  const std::string command = join_args(argc, argv);
  try {
    if (*build) return cmd_build_data(bd, command, out);
    if (*synth) return cmd_synth(sy, command, out);
    if (*train) return cmd_train(tr, out, err);
    if (*eval) return cmd_eval(ev, command, out);
    if (*grad) return cmd_gradcheck(gc, command, out);
    if (*report) return cmd_report(rp, command, out);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const SizeError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << "\n";
    return 2;
  }
  err << app.help();
  return 1;
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv;
  argv.push_back("tpo-lab");
  for (const auto& a : args) argv.push_back(a.c_str());
  return dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace cli
}  // namespace tpo

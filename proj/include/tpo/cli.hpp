#pragma once

// Run configuration files and the tpo-lab command dispatcher.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tpo/data.hpp"
#include "tpo/losses.hpp"
#include "tpo/synthetic.hpp"
#include "tpo/train.hpp"

namespace tpo {

// Either a triples JSONL file or a synthetic task.
struct DataSource {
  std::optional<std::string> path;  // resolved against the config directory
  TaskSpec task;
  std::size_t n = 500;
  std::uint64_t seed = 0;

  std::string tag() const;
};

struct RunConfig {
  std::string text;      // file contents, echoed verbatim into outputs
  std::string base_dir;  // directory relative paths resolve against
  std::optional<std::string> preset;
  TrainConfig train;
  DataSource data;
  std::optional<DataSource> eval_data;
  double noise_fraction = 0.0;
  std::optional<std::uint64_t> noise_seed;  // defaults to the train seed
  std::optional<RewardKind> reward;  // defaults to the method's own kind
  std::optional<double> reward_beta; // defaults to the loss beta
  int bins = 10;
};

// {"preset": name?, "train": {...}, "data": {...}, "noise": {...}, "eval": {...}}.
// "train" keys override the preset, which defaults to the desk "tpo" preset.
RunConfig parse_run_config(const std::string& text, const std::string& base_dir = ".");
RunConfig load_run_config(const std::string& path);

std::vector<PreferenceTriple> load_data(const DataSource& src);

// FNV-1a 64 over file bytes, as 16 hex digits.
std::string file_checksum(const std::string& path);

struct RunOutputs {
  std::string dir;
  std::vector<std::string> files;  // relative to dir, in write order
};

// Trains per cfg (mode and seed overrides applied by the caller) and writes
// config.json, trajectory.jsonl, policy.json, reference.json (when a
// reference was used), reports/ and manifest.json under out_dir.
RunOutputs run_train_command(const RunConfig& cfg, const std::string& config_path,
                             const std::string& out_dir);

namespace cli {

// Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cli
}  // namespace tpo

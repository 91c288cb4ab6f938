#include "tpo/presets.hpp"

#include "tpo/error.hpp"

namespace tpo {

const std::vector<std::string>& desk_preset_names() {
  static const std::vector<std::string> names{"sft",  "tpo", "tpo_l", "dpo", "simpo",
                                              "cpo",  "ipo", "orpo",  "kto", "slic_hf"};
  return names;
}

TrainConfig desk_preset(const std::string& name) {
  TrainConfig c;
  c.learning_rate = 1e-2;
  c.batch_size = 16;
  c.epochs = 3;
  c.loss = LossConfig{};
  if (name == "sft") {
    c.mode = RunMode::sft_only;
  } else if (name == "tpo") {
    c.loss = {Method::tpo, 1.0, 0.01, 0.0};
    c.mode = RunMode::tpo_single_step;
  } else if (name == "tpo_l") {
    c.loss = {Method::tpo_l, 1.0, 1.0, 0.5};
    c.mode = RunMode::tpo_single_step;
    c.epochs = 1;
  } else if (name == "dpo") {
    c.loss = {Method::dpo, 0.0, 1.0, 0.0};
    c.mode = RunMode::preference_only;
  } else if (name == "simpo") {
    c.loss = {Method::simpo, 0.0, 2.0, 1.0};
    c.mode = RunMode::preference_only;
  } else if (name == "cpo") {
    c.loss = {Method::cpo, 0.0, 0.1, 0.0};
    c.mode = RunMode::preference_only;
  } else if (name == "ipo") {
    c.loss = {Method::ipo, 0.0, 0.5, 0.0};
    c.mode = RunMode::preference_only;
  } else if (name == "orpo") {
    c.loss = {Method::orpo, 0.0, 0.1, 0.0};
    c.mode = RunMode::preference_only;
  } else if (name == "kto") {
    c.loss = {Method::kto, 0.0, 0.5, 0.0};
    c.mode = RunMode::preference_only;
  } else if (name == "slic_hf") {
    c.loss = {Method::slic_hf, 0.1, 1.0, 0.0};
    c.mode = RunMode::preference_only;
  } else {
    std::string valid;
    for (const auto& n : desk_preset_names()) valid += " " + n;
    throw ValidationError("unknown preset '" + name + "'; valid presets:" + valid);
  }
  c.validate();
  return c;
}

const std::vector<PublishedPreset>& published_presets() {
  // One row per (size, model, method); a "TPO/TPO-L" cell pair splits into
  // two rows.
  static const std::vector<PublishedPreset> rows{
      {"5K", "Llama-3-Base", Method::tpo, 1.0, 0.01, 0.0, 5e-7, 32},
      {"5K", "Llama-3-Base", Method::tpo_l, 1.0, 0.01, 0.5, 5e-7, 32},
      {"5K", "Mistral-v0.3-Base", Method::tpo, 1.0, 0.01, 0.0, 5e-7, 32},
      {"5K", "Mistral-v0.3-Base", Method::tpo_l, 0.05, 2.0, 1.6, 5e-7, 32},
      {"10K", "Llama-3-Base", Method::tpo, 1.0, 0.01, 0.0, 5e-7, 32},
      {"10K", "Llama-3-Base", Method::tpo_l, 1.0, 0.01, 3.0, 5e-7, 32},
      {"10K", "Mistral-v0.3-Base", Method::tpo, 1.0, 0.01, 0.0, 5e-7, 32},
      {"10K", "Mistral-v0.3-Base", Method::tpo_l, 0.05, 2.0, 1.6, 5e-7, 32},
      {"20K", "Llama-3-Base", Method::tpo, 1.0, 0.01, 0.0, 5e-7, 128},
      {"20K", "Llama-3-Base", Method::tpo_l, 1.0, 0.01, 1.5, 5e-7, 128},
      {"20K", "Mistral-v0.3-Base", Method::tpo, 1.0, 0.01, 0.0, 5e-7, 128},
      {"20K", "Mistral-v0.3-Base", Method::tpo_l, 1.0, 2.0, 1.6, 5e-7, 128},
      {"40K", "Llama-3-Base", Method::tpo, 1.0, 0.01, 0.0, 5e-7, 64},
      {"40K", "Llama-3-Base", Method::tpo_l, 1.0, 0.01, 10.0, 5e-7, 64},
      {"40K", "Mistral-v0.3-Base", Method::tpo, 1.0, 0.01, 0.0, 5e-7, 64},
      {"40K", "Mistral-v0.3-Base", Method::tpo_l, 0.05, 2.0, 1.6, 5e-7, 64},
      {"60K", "Llama-3-Instruct", Method::tpo, 0.05, 0.01, 0.0, 1e-6, 256},
      {"60K", "Llama-3-Instruct", Method::tpo_l, 0.05, 10.0, 3.0, 1e-6, 256},
      {"60K", "Mistral-v0.2-Instruct", Method::tpo, 0.05, 0.01, 0.0, 1e-6, 256},
      {"60K", "Mistral-v0.2-Instruct", Method::tpo_l, 0.05, 2.5, 0.3, 1e-6, 256},
  };
  return rows;
}

std::optional<PublishedPreset> find_published_preset(const std::string& training_size,
                                                     const std::string& model, Method method) {
  for (const auto& p : published_presets())
    if (p.training_size == training_size && p.model == model && p.method == method) return p;
  return std::nullopt;
}

TrainConfig to_train_config(const PublishedPreset& p) {
  TrainConfig c;
  c.loss = {p.method, p.alpha, p.beta, p.gamma};
  c.learning_rate = p.learning_rate;
  c.batch_size = p.batch_size;
  c.warmup_fraction = 0.1;
  c.schedule = Schedule::cosine;
  c.mode = RunMode::tpo_single_step;
  c.validate();
  return c;
}

}  // namespace tpo

#pragma once

// Named training configurations.
//
// Desk presets are tuned for the synthetic tasks and finish in about a second.
// Published presets carry the learning rates, batch sizes and loss weights
// reported for the large-model runs; they validate but are not meant to be
// trained at desk scale.

#include <optional>
#include <string>
#include <vector>

#include "tpo/train.hpp"

namespace tpo {

// Names: sft, tpo, tpo_l, dpo, simpo, cpo, ipo, orpo, kto, slic_hf.
const std::vector<std::string>& desk_preset_names();
TrainConfig desk_preset(const std::string& name);

struct PublishedPreset {
  std::string training_size;  // "5K", "10K", "20K", "40K", "60K"
  std::string model;
  Method method = Method::tpo;
  double alpha = 1.0;
  double beta = 0.01;
  double gamma = 0.0;
  double learning_rate = 5e-7;
  int batch_size = 32;
};

const std::vector<PublishedPreset>& published_presets();
std::optional<PublishedPreset> find_published_preset(const std::string& training_size,
                                                     const std::string& model, Method method);
// Loss weights, learning rate and batch size from a published row, with the
// cosine schedule and 10% warmup; everything else at desk defaults.
TrainConfig to_train_config(const PublishedPreset& p);

}  // namespace tpo

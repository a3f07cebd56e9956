#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dsai/common.hpp"

namespace dsai {

// Architecture hyperparameters plus the structural ablation switches.
// Defaults are the fixed reference configuration.
struct ModelConfig {
  std::size_t input_channels = 22;
  std::size_t input_samples = 1000;
  std::size_t n_classes = 4;

  std::size_t f1 = 16;
  std::size_t depth_multiplier = 2;
  std::size_t temporal_kernel1 = 64;
  std::size_t temporal_kernel2 = 16;
  std::size_t pool1 = 4;
  std::size_t pool2 = 8;
  std::size_t embed_dim = 40;
  std::size_t n_heads = 4;
  std::size_t ffn_ratio = 2;
  std::size_t attn_layers = 1;
  std::vector<std::size_t> fine_kernels{3, 7};
  std::vector<std::size_t> coarse_kernels{11, 15};
  std::size_t expansion_ratio = 4;
  std::size_t groups = 4;
  Real dropout = 0.25;
  Real residual_init = 1.0;
  Real interaction_init = 1.0;

  bool fine_branch = true;
  bool coarse_branch = true;
  bool intra_attention = true;
  bool inter_attention = true;
  bool positional_encoding = true;
  bool reinjection = true;
  std::string aggregation = "adaptive";  // adaptive | mean

  std::size_t f2() const { return f1 * depth_multiplier; }
  std::size_t n_tokens() const { return (input_samples / pool1) / pool2; }
  std::size_t n_branches() const {
    return (fine_branch ? 1u : 0u) + (coarse_branch ? 1u : 0u);
  }
};

struct TrainConfig {
  std::size_t batch_size = 32;
  Real learning_rate = 1e-3;
  std::size_t max_epochs = 30;
  Real weight_decay = 1e-4;
  bool decoupled_decay = false;
  std::size_t seeds = 5;
  std::uint64_t base_seed = 0;
  std::string protocol = "kfold";  // kfold | loso
  std::size_t folds = 4;
  Real val_fraction = 0.2;
};

struct DataConfig {
  bool zscore = true;
  std::size_t window = 0;  // 0 keeps whole trials
  Real overlap = 0.0;
};

struct Config {
  ModelConfig arch;
  TrainConfig train;
  DataConfig data;
};

// Parses the sectioned key = value text ([arch], [train], [data], [ablation]).
// Unknown sections or keys are rejected.
Config parse_config(const std::string& text);
Config load_config_file(const std::string& path);

// Applies one "section.key=value" override.
void apply_override(Config& cfg, const std::string& assignment);

// Canonical text form: every key in fixed order, values normalized.
// parse_config(serialize_config(c)) reproduces c exactly.
std::string serialize_config(const Config& cfg);

std::uint64_t config_hash(const Config& cfg);

// Checks every structural invariant; throws ConfigError with the offending
// key and value in the message.
void validate(const Config& cfg);

// Flips the enabled flag of one branch ("fine" or "coarse"). Applying twice
// restores the original config.
ModelConfig toggle_branch(ModelConfig cfg, const std::string& branch);

}  // namespace dsai

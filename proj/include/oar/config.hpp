#pragma once

#include <string>

#include "oar/data.hpp"
#include "oar/model.hpp"
#include "oar/train.hpp"

namespace oar {

/// Everything the pipelines need, loadable from a flat `key = value` file.
/// Unknown keys are hard errors so a misspelled hyperparameter cannot
/// silently fall back to a default.
struct RunConfig {
  int grid_h = 8;
  int grid_w = 8;
  int vocab = 64;
  int cond_vocab = 16;
  int cond_len = 4;
  int dim = 128;
  int depth = 4;
  int heads = 4;
  Real dropout = 0.2;
  Real img_loss_weight = 7.0;
  Real lr = 3e-4;
  int batch = 16;
  int epochs_random = 10;
  int epochs_finetune = 5;
  Real plateau_factor = 0.8;
  int plateau_patience = 3;
  Real lambda = 0.0;
  int topk = 0;
  std::string score_domain = "log_prob";
  std::string policy = "ordered";
  std::uint64_t seed = 0;
  std::string data_path;
  std::string ckpt_path;
  std::string out_dir = ".";

  ModelConfig model_config() const;
  TrainConfig train_config(OrderPolicy order_policy, int epochs) const;
  DecodePolicy decode_policy() const;
};

/// Parses `key = value` lines; `#` starts a comment, blank lines ignored.
/// Later assignments override earlier ones. Throws std::invalid_argument on
/// unknown keys or malformed values.
RunConfig parse_config(std::istream& in);
RunConfig load_config(const std::string& path);
void apply_override(RunConfig& config, const std::string& key,
                    const std::string& value);

}  // namespace oar

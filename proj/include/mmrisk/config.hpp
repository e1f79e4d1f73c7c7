#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "mmrisk/data.hpp"
#include "mmrisk/model.hpp"
#include "mmrisk/train.hpp"

namespace mmrisk {

// Carries every problem found in one validation pass.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> issues);
  const std::vector<std::string>& issues() const { return issues_; }

 private:
  std::vector<std::string> issues_;
};

// JSON document with sections data / model / pretrain / finetune / eval,
// mapping one-to-one onto the module configs. Unknown keys are rejected.
struct CliConfig {
  // data
  SyntheticConfig synthetic;  // synthetic.subjects unused; counts below
  int pretrain_subjects = 2000;
  int downstream_subjects = 600;
  // model
  ModelConfig model;  // tabular_input_dim filled from the schema
  // stages
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  // eval
  int gradcam_stage = -1;  // -1 = last trunk stage
  int gradcam_subjects = 4;
  int probe_folds = 5;
};

CliConfig parse_cli_config(const std::string& json_text);
CliConfig load_cli_config(const std::string& path);

// Fully resolved config (defaults filled in), deterministic key order.
std::string resolved_config_json(const CliConfig& cfg);

}  // namespace mmrisk

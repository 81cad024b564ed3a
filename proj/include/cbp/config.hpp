#pragma once

// Run configuration read from flat `key = value` text. Blank lines and lines
// starting with '#' are ignored; unknown keys are rejected.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "cbp/interactivity.hpp"
#include "cbp/predictor.hpp"
#include "cbp/scenario.hpp"

namespace cbp {

enum class PruneStrategy { mi, distance };
std::string to_string(PruneStrategy s);
PruneStrategy parse_prune_strategy(const std::string& s);  // throws ConfigError("prune.strategy")

struct RunConfig {
  std::uint64_t seed = 1;
  std::string dataset;        // JSONL scenes; default <out_dir>/scenes.jsonl
  std::string eval_dataset;   // optional; default is the test split of `dataset`
  std::string checkpoint;     // default <out_dir>/model.json
  std::string out_dir = "out";

  SimConfig sim;
  PredictorConfig model;
  TrainConfig train;
  bool resume = false;        // start training from `checkpoint`
  std::array<double, 3> split = {0.8, 0.1, 0.1};

  MiOptions estimator;
  double bin_width = 0.25;          // nats, MI histogram
  std::size_t max_eval_scenes = 0;  // 0 = all
  std::size_t top_n = 20;
  std::vector<std::size_t> prune_keep = {1, 2, 3, 4};
  std::vector<PruneStrategy> prune_strategies = {PruneStrategy::mi, PruneStrategy::distance};

  std::string dataset_path() const;
  std::string checkpoint_path() const;
  // Model shape follows the simulator horizon.
  PredictorConfig model_config() const;
  void validate() const;
};

// Raw key/value pairs in file order; duplicate keys keep the last value.
std::map<std::string, std::string> parse_key_values(std::istream& in);

// Applies one key. Throws ConfigError naming the key on unknown keys or bad values.
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);

RunConfig parse_run_config(std::istream& in);
RunConfig load_run_config(const std::string& path);

// Documented keys, in the order they appear in the README.
std::vector<std::string> known_config_keys();

}  // namespace cbp

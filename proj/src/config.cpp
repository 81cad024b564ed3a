#include "cbp/config.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "cbp/errors.hpp"

namespace cbp {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0' || errno == ERANGE || !std::isfinite(d)) {
    throw ConfigError(key, "expected a number, got '" + v + "'");
  }
  return d;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  if (v.empty() || v[0] == '-') throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
  const unsigned long long u = std::strtoull(v.c_str(), &end, 10);
  if (*end != '\0' || errno == ERANGE) throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
  return u;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key, "expected true or false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

const std::vector<std::pair<std::string, Setter>>& setters() {
  static const std::vector<std::pair<std::string, Setter>> table = [] {
    std::vector<std::pair<std::string, Setter>> t;
    auto str = [&t](const char* k, std::string RunConfig::*f) {
      t.emplace_back(k, [f](RunConfig& c, const std::string&, const std::string& v) { c.*f = v; });
    };
    auto dbl = [&t](const char* k, auto get) {
      t.emplace_back(k, [get](RunConfig& c, const std::string& key, const std::string& v) { get(c) = to_double(key, v); });
    };
    auto uns = [&t](const char* k, auto get) {
      t.emplace_back(k, [get](RunConfig& c, const std::string& key, const std::string& v) {
        get(c) = static_cast<std::remove_reference_t<decltype(get(c))>>(to_uint(key, v));
      });
    };
    auto bln = [&t](const char* k, auto get) {
      t.emplace_back(k, [get](RunConfig& c, const std::string& key, const std::string& v) { get(c) = to_bool(key, v); });
    };

    uns("seed", [](RunConfig& c) -> std::uint64_t& { return c.seed; });
    str("dataset", &RunConfig::dataset);
    str("eval_dataset", &RunConfig::eval_dataset);
    str("checkpoint", &RunConfig::checkpoint);
    str("out_dir", &RunConfig::out_dir);

    uns("sim.scene_count", [](RunConfig& c) -> std::size_t& { return c.sim.scene_count; });
    uns("sim.past_steps", [](RunConfig& c) -> std::size_t& { return c.sim.past_steps; });
    uns("sim.future_steps", [](RunConfig& c) -> std::size_t& { return c.sim.future_steps; });
    dbl("sim.dt", [](RunConfig& c) -> double& { return c.sim.dt; });
    uns("sim.max_agents", [](RunConfig& c) -> std::size_t& { return c.sim.max_agents; });
    dbl("sim.mix.car_follow", [](RunConfig& c) -> double& { return c.sim.mix.car_follow; });
    dbl("sim.mix.cut_in", [](RunConfig& c) -> double& { return c.sim.mix.cut_in; });
    dbl("sim.mix.yield_turn", [](RunConfig& c) -> double& { return c.sim.mix.yield_turn; });
    dbl("sim.mix.independent", [](RunConfig& c) -> double& { return c.sim.mix.independent; });
    dbl("sim.mix.confounded_stop", [](RunConfig& c) -> double& { return c.sim.mix.confounded_stop; });
    dbl("sim.accel_noise_sigma", [](RunConfig& c) -> double& { return c.sim.accel_noise_sigma; });
    dbl("sim.leader_accel_sigma", [](RunConfig& c) -> double& { return c.sim.leader_accel_sigma; });
    dbl("sim.reaction_delay", [](RunConfig& c) -> double& { return c.sim.reaction_delay; });
    dbl("sim.v_max", [](RunConfig& c) -> double& { return c.sim.v_max; });
    dbl("sim.lane_width", [](RunConfig& c) -> double& { return c.sim.lane_width; });
    dbl("sim.lateral_wander_sigma", [](RunConfig& c) -> double& { return c.sim.lateral_wander_sigma; });
    uns("sim.max_distractors", [](RunConfig& c) -> std::size_t& { return c.sim.max_distractors; });
    dbl("sim.closing_fraction", [](RunConfig& c) -> double& { return c.sim.closing_fraction; });
    bln("sim.prune_layout", [](RunConfig& c) -> bool& { return c.sim.prune_layout; });

    uns("model.modes", [](RunConfig& c) -> std::size_t& { return c.model.modes; });
    uns("model.degree", [](RunConfig& c) -> std::size_t& { return c.model.degree; });
    uns("model.encoder_width", [](RunConfig& c) -> std::size_t& { return c.model.encoder_width; });
    uns("model.trunk_width", [](RunConfig& c) -> std::size_t& { return c.model.trunk_width; });
    dbl("model.feature_scale", [](RunConfig& c) -> double& { return c.model.feature_scale; });
    dbl("model.velocity_scale", [](RunConfig& c) -> double& { return c.model.velocity_scale; });
    dbl("model.deviation_scale", [](RunConfig& c) -> double& { return c.model.deviation_scale; });
    dbl("model.output_scale", [](RunConfig& c) -> double& { return c.model.output_scale; });
    dbl("model.min_sigma", [](RunConfig& c) -> double& { return c.model.min_sigma; });
    dbl("model.max_sigma", [](RunConfig& c) -> double& { return c.model.max_sigma; });

    t.emplace_back("train.optimizer", [](RunConfig& c, const std::string& key, const std::string& v) {
      if (v == "momentum") c.train.optimizer = Optimizer::momentum;
      else if (v == "adam") c.train.optimizer = Optimizer::adam;
      else throw ConfigError(key, "expected momentum or adam, got '" + v + "'");
    });
    dbl("train.learning_rate", [](RunConfig& c) -> double& { return c.train.learning_rate; });
    dbl("train.momentum", [](RunConfig& c) -> double& { return c.train.momentum; });
    dbl("train.adam_beta2", [](RunConfig& c) -> double& { return c.train.adam_beta2; });
    uns("train.batch_size", [](RunConfig& c) -> std::size_t& { return c.train.batch_size; });
    uns("train.epochs", [](RunConfig& c) -> std::size_t& { return c.train.epochs; });
    dbl("train.conditional_fraction", [](RunConfig& c) -> double& { return c.train.conditional_fraction; });
    dbl("train.overlap_weight", [](RunConfig& c) -> double& { return c.train.loss.overlap_weight; });
    dbl("train.overlap_alpha", [](RunConfig& c) -> double& { return c.train.loss.overlap_alpha; });
    dbl("train.grad_clip", [](RunConfig& c) -> double& { return c.train.grad_clip; });
    uns("train.val_limit", [](RunConfig& c) -> std::size_t& { return c.train.val_limit; });
    bln("train.resume", [](RunConfig& c) -> bool& { return c.resume; });
    dbl("split.train", [](RunConfig& c) -> double& { return c.split[0]; });
    dbl("split.val", [](RunConfig& c) -> double& { return c.split[1]; });
    dbl("split.test", [](RunConfig& c) -> double& { return c.split[2]; });

    uns("score.samples", [](RunConfig& c) -> std::size_t& { return c.estimator.samples; });
    uns("score.top_modes", [](RunConfig& c) -> std::size_t& { return c.estimator.top_modes; });
    bln("score.renormalize", [](RunConfig& c) -> bool& { return c.estimator.renormalize; });
    dbl("score.bin_width", [](RunConfig& c) -> double& { return c.bin_width; });
    uns("score.max_scenes", [](RunConfig& c) -> std::size_t& { return c.max_eval_scenes; });
    uns("mine.top_n", [](RunConfig& c) -> std::size_t& { return c.top_n; });

    t.emplace_back("prune.keep", [](RunConfig& c, const std::string& key, const std::string& v) {
      c.prune_keep.clear();
      for (const auto& item : split_list(v)) c.prune_keep.push_back(static_cast<std::size_t>(to_uint(key, item)));
    });
    t.emplace_back("prune.strategy", [](RunConfig& c, const std::string&, const std::string& v) {
      c.prune_strategies.clear();
      for (const auto& item : split_list(v)) {
        if (item == "both") {
          c.prune_strategies = {PruneStrategy::mi, PruneStrategy::distance};
        } else {
          c.prune_strategies.push_back(parse_prune_strategy(item));
        }
      }
    });
    return t;
  }();
  return table;
}

}  // namespace

std::string to_string(PruneStrategy s) { return s == PruneStrategy::mi ? "mi" : "distance"; }

PruneStrategy parse_prune_strategy(const std::string& s) {
  if (s == "mi") return PruneStrategy::mi;
  if (s == "distance") return PruneStrategy::distance;
  throw ConfigError("prune.strategy", "expected mi, distance or both, got '" + s + "'");
}

std::string RunConfig::dataset_path() const {
  return dataset.empty() ? (std::filesystem::path(out_dir) / "scenes.jsonl").string() : dataset;
}

std::string RunConfig::checkpoint_path() const {
  return checkpoint.empty() ? (std::filesystem::path(out_dir) / "model.json").string() : checkpoint;
}

PredictorConfig RunConfig::model_config() const {
  PredictorConfig m = model;
  m.past_steps = sim.past_steps;
  m.future_steps = sim.future_steps;
  m.dt = sim.dt;
  return m;
}

void RunConfig::validate() const {
  sim.validate();
  model_config().validate();
  train.validate();
  if (estimator.samples < 2) throw ConfigError("score.samples", "must be at least 2");
  if (estimator.top_modes < 1) throw ConfigError("score.top_modes", "must be at least 1");
  if (!(bin_width > 0.0)) throw ConfigError("score.bin_width", "must be positive");
  for (double f : split) {
    if (!(f > 0.0)) throw ConfigError("split", "every split fraction must be positive");
  }
  if (std::abs(split[0] + split[1] + split[2] - 1.0) > 1e-9) throw ConfigError("split", "fractions must sum to 1");
  if (prune_keep.empty()) throw ConfigError("prune.keep", "needs at least one value");
  if (prune_strategies.empty()) throw ConfigError("prune.strategy", "needs at least one strategy");
  if (out_dir.empty()) throw ConfigError("out_dir", "must not be empty");
}

std::map<std::string, std::string> parse_key_values(std::istream& in) {
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string s = trim(line);
    if (s.empty() || s[0] == '#') continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(number), "expected 'key = value'");
    }
    const std::string key = trim(s.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(number), "empty key");
    out[key] = trim(s.substr(eq + 1));
  }
  return out;
}

void apply_setting(RunConfig& config, const std::string& key, const std::string& value) {
  for (const auto& [k, set] : setters()) {
    if (k == key) {
      set(config, key, value);
      return;
    }
  }
  throw ConfigError(key, "unknown key");
}

RunConfig parse_run_config(std::istream& in) {
  RunConfig c;
  for (const auto& [k, v] : parse_key_values(in)) apply_setting(c, k, v);
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config", "cannot open " + path);
  return parse_run_config(in);
}

std::vector<std::string> known_config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, set] : setters()) keys.push_back(k);
  return keys;
}

}  // namespace cbp

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <string>

#include "json.hpp"

#include "cbp/errors.hpp"
#include "cbp/metrics.hpp"
#include "cbp/predictor.hpp"
#include "cbp/random.hpp"

namespace cbp {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate", "must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum", "must lie in [0, 1)");
  if (batch_size < 1) throw ConfigError("train.batch_size", "must be at least 1");
  if (!(conditional_fraction >= 0.0 && conditional_fraction <= 1.0)) {
    throw ConfigError("train.conditional_fraction", "must lie in [0, 1]");
  }
  if (!(loss.overlap_weight >= 0.0)) throw ConfigError("train.overlap_weight", "must be non-negative");
  if (!(loss.overlap_alpha > 0.0)) throw ConfigError("train.overlap_alpha", "must be positive");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw ConfigError("train.adam_beta2", "must lie in [0, 1)");
  if (!(adam_epsilon > 0.0)) throw ConfigError("train.adam_epsilon", "must be positive");
  if (!(grad_clip > 0.0)) throw ConfigError("train.grad_clip", "must be positive");
}

EpochLog evaluate(const PredictorParams& params, const std::vector<Scene>& scenes, std::size_t limit,
                  std::uint64_t seed) {
  EpochLog log;
  const std::size_t n = std::min(limit, scenes.size());
  std::size_t count = 0;
  for (std::size_t s = 0; s < n; ++s) {
    const Scene& scene = scenes[s];
    if (scene.agents.size() < 2) continue;
    Rng rng(derive_seed(seed, scene.scene_id));
    std::uniform_int_distribution<std::size_t> pick(0, scene.agents.size() - 1);
    const AgentTrack& q = scene.agents[pick(rng)];
    const ConditionalQuery query{q.agent_id, q.future};
    for (const auto& a : scene.agents) {
      if (a.agent_id == q.agent_id) continue;
      const auto marg = predict(params, scene, a.agent_id, std::nullopt);
      const auto cond = predict(params, scene, a.agent_id, query);
      log.val_nll_marginal -= log_likelihood(marg, a.future);
      log.val_nll_conditional -= log_likelihood(cond, a.future);
      log.val_wade_marginal += wade(marg, a.future);
      log.val_wade_conditional += wade(cond, a.future);
      ++count;
    }
  }
  if (count > 0) {
    const double c = static_cast<double>(count);
    log.val_nll_marginal /= c;
    log.val_nll_conditional /= c;
    log.val_wade_marginal /= c;
    log.val_wade_conditional /= c;
  }
  return log;
}

TrainResult train(const PredictorParams& init, const std::vector<Scene>& train_scenes,
                  const std::vector<Scene>& val_scenes, const TrainConfig& config) {
  config.validate();
  TrainResult result{init, {}};
  PredictorParams& params = result.params;
  const std::uint64_t eval_seed = derive_seed(config.seed, 0xe7a1);
  result.log.push_back(evaluate(params, val_scenes, config.val_limit, eval_seed));
  if (config.epochs == 0 || train_scenes.empty()) return result;

  const std::size_t n = train_scenes.size();
  const std::size_t batches = (n + config.batch_size - 1) / config.batch_size;
  const double total_steps = static_cast<double>(batches * config.epochs);
  Eigen::VectorXd velocity = Eigen::VectorXd::Zero(params.weights().size());
  Eigen::VectorXd second = Eigen::VectorXd::Zero(params.weights().size());
  Eigen::VectorXd grad(params.weights().size());
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(config.seed, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0.0;

    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * config.batch_size;
      const std::size_t hi = std::min(n, lo + config.batch_size);
      grad.setZero();
      double batch_loss = 0.0;
      for (std::size_t i = lo; i < hi; ++i) {
        const Scene& scene = train_scenes[order[i]];
        Rng rng(derive_seed(config.seed, epoch, scene.scene_id));
        std::uniform_int_distribution<std::size_t> pick(0, scene.agents.size() - 1);
        std::bernoulli_distribution conditional(config.conditional_fraction);
        const int query_id = scene.agents[pick(rng)].agent_id;
        std::optional<int> query;
        if (conditional(rng)) query = query_id;
        const auto r = scene_loss(params, scene, query, config.loss);
        if (!std::isfinite(r.loss) || !r.grad.allFinite()) {
          throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(b));
        }
        batch_loss += r.loss;
        grad += r.grad;
      }
      const double m = static_cast<double>(hi - lo);
      grad /= m;
      epoch_loss += batch_loss;
      const double norm = grad.norm();
      if (norm > config.grad_clip) grad *= config.grad_clip / norm;

      const double lr = config.learning_rate * 0.5 *
                        (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total_steps));
      ++step;
      if (config.optimizer == Optimizer::momentum) {
        velocity = config.momentum * velocity - lr * grad;
        params.weights() += velocity;
      } else {
        velocity = config.momentum * velocity + (1.0 - config.momentum) * grad;
        second = config.adam_beta2 * second + (1.0 - config.adam_beta2) * grad.cwiseAbs2();
        const double c1 = 1.0 - std::pow(config.momentum, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(config.adam_beta2, static_cast<double>(step));
        params.weights().array() -=
            lr * (velocity.array() / c1) / ((second.array() / c2).sqrt() + config.adam_epsilon);
      }
      if (!params.all_finite()) {
        throw TrainingError("non-finite parameters at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(b));
      }
    }

    EpochLog row = evaluate(params, val_scenes, config.val_limit, eval_seed);
    row.epoch = epoch;
    row.train_loss = epoch_loss / static_cast<double>(n);
    result.log.push_back(row);
  }
  return result;
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::json config_json(const PredictorConfig& c) {
  return {{"past_steps", c.past_steps},       {"future_steps", c.future_steps},
          {"dt", c.dt},                       {"modes", c.modes},
          {"degree", c.degree},               {"encoder_width", c.encoder_width},
          {"trunk_width", c.trunk_width},     {"feature_scale", c.feature_scale},
          {"velocity_scale", c.velocity_scale}, {"deviation_scale", c.deviation_scale}, {"output_scale", c.output_scale},
          {"min_sigma", c.min_sigma},         {"max_sigma", c.max_sigma}};
}

PredictorConfig config_from_json(const nlohmann::json& j) {
  PredictorConfig c;
  c.past_steps = j.at("past_steps").get<std::size_t>();
  c.future_steps = j.at("future_steps").get<std::size_t>();
  c.dt = j.at("dt").get<double>();
  c.modes = j.at("modes").get<std::size_t>();
  c.degree = j.at("degree").get<std::size_t>();
  c.encoder_width = j.at("encoder_width").get<std::size_t>();
  c.trunk_width = j.at("trunk_width").get<std::size_t>();
  c.feature_scale = j.at("feature_scale").get<double>();
  c.velocity_scale = j.at("velocity_scale").get<double>();
  c.deviation_scale = j.at("deviation_scale").get<double>();
  c.output_scale = j.at("output_scale").get<double>();
  c.min_sigma = j.at("min_sigma").get<double>();
  c.max_sigma = j.at("max_sigma").get<double>();
  return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const PredictorParams& params) {
  const auto& w = params.weights();
  nlohmann::json j;
  j["schema"] = kCheckpointSchema;
  j["config"] = config_json(params.config());
  j["weights"] = std::vector<double>(w.data(), w.data() + w.size());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out << j.dump() << '\n';
}

PredictorParams load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError("checkpoint " + path + " is not valid JSON: " + e.what());
  }
  if (j.value("schema", std::string{}) != kCheckpointSchema) {
    throw ArgumentError("checkpoint " + path + " has an unknown schema");
  }
  const auto c = config_from_json(j.at("config"));
  const auto v = j.at("weights").get<std::vector<double>>();
  Eigen::VectorXd w = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  return PredictorParams(c, std::move(w));
}

PredictorParams load_checkpoint(const std::string& path, const PredictorConfig& expected) {
  auto p = load_checkpoint(path);
  if (!(p.config() == expected)) {
    throw DimensionError("checkpoint " + path + " was trained with a different model shape");
  }
  return p;
}

}  // namespace cbp

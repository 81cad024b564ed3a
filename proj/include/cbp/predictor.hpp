#pragma once

// Conditional behavior predictor.
//
// For every target agent the model encodes, in the target's lane-aligned frame
// (origin at its current position, axes rotated by a multiple of 90 degrees
// to its heading):
//   - its own past track (MLP),
//   - every other agent's past track (shared MLP, max-pooled),
//   - an optional conditional query plan (MLP, linear output).
// The three embeddings are concatenated (the query slot is all zeros for a
// marginal prediction) and passed through a two-layer trunk to a linear head
// producing K mode logits, per-mode polynomial coefficients for x and y, and
// per-mode per-step log standard deviations. Mode means are a constant-velocity
// rollout of the target's current velocity plus the polynomials evaluated at
// t*dt for t = 1..T.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cbp/scenario.hpp"
#include "cbp/trajectory.hpp"

namespace cbp {

struct PredictorConfig {
  std::size_t past_steps = 10;
  std::size_t future_steps = 30;
  double dt = 0.2;
  std::size_t modes = 6;
  std::size_t degree = 3;          // polynomial degree, at most 10
  std::size_t encoder_width = 64;
  std::size_t trunk_width = 128;
  double feature_scale = 20.0;     // m, divides input positions
  double velocity_scale = 10.0;    // m/s, divides input velocities
  double deviation_scale = 5.0;    // m, divides query offsets from constant velocity
  double output_scale = 10.0;      // m, unit of the polynomial coefficients
  double min_sigma = 1e-3;         // m
  double max_sigma = 50.0;         // m

  void validate() const;
  std::size_t self_inputs() const { return 4 * past_steps + 1; }
  // Past track and lane offset, then the plan offsets and a flag when the neighbor is the query agent.
  std::size_t neighbor_inputs() const { return 4 * past_steps + 2 + 2 * future_steps; }
  std::size_t query_inputs() const { return 4 * future_steps + 5; }
  std::size_t head_outputs() const { return modes + 2 * modes * (degree + 1) + 2 * modes * future_steps; }

  friend bool operator==(const PredictorConfig&, const PredictorConfig&) = default;
};

// Offsets of every weight block inside the flat parameter vector.
struct DenseSlot {
  std::size_t weight = 0;  // rows x cols, column-major
  std::size_t bias = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

struct ParamLayout {
  DenseSlot self1, self2, nbr1, nbr2, query1, query2, trunk1, trunk2, head;
  std::size_t size = 0;

  static ParamLayout for_config(const PredictorConfig& c);
};

class PredictorParams {
 public:
  explicit PredictorParams(PredictorConfig config);  // all zeros
  PredictorParams(PredictorConfig config, Eigen::VectorXd weights);

  // He-initialized hidden layers; small head weights with mode biases spread
  // over forward speeds so the winner-take-all assignment starts diverse.
  static PredictorParams initialize(const PredictorConfig& config, std::uint64_t seed);

  const PredictorConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }
  const Eigen::VectorXd& weights() const { return weights_; }
  Eigen::VectorXd& weights() { return weights_; }
  std::size_t size() const { return layout_.size; }

  bool all_finite() const { return weights_.allFinite(); }

 private:
  PredictorConfig config_;
  ParamLayout layout_;
  Eigen::VectorXd weights_;
};

struct ConditionalQuery {
  int agent_id = -1;
  Trajectory plan;
};
using OptionalQuery = std::optional<ConditionalQuery>;

// Lane-aligned frame: origin plus a rotation by quarter_turns * 90 degrees.
struct AgentFrame {
  Point2 origin;
  int quarter_turns = 0;

  Point2 to_local(Point2 world) const;
  Point2 to_world(Point2 local) const;
  Point2 vector_to_local(Point2 v) const;
  Point2 vector_to_world(Point2 v) const;
};

AgentFrame frame_of(const AgentTrack& track);

struct TargetInputs {
  AgentFrame frame;
  Point2 velocity;  // current velocity in the local frame
  Eigen::VectorXd self;
  Eigen::MatrixXd neighbors;  // one column per other agent
  std::optional<Eigen::VectorXd> query;
};

// Checks the query against the scene and the target (ArgumentError, LookupError, DimensionError).
TargetInputs build_inputs(const PredictorConfig& config, const Scene& scene, int target_id,
                          const OptionalQuery& query);

TrajectoryGMM predict(const PredictorParams& params, const Scene& scene, int target_id,
                      const OptionalQuery& query);

// Query encoder output for a plan given in the target's frame inputs.
Eigen::VectorXd encode_query(const PredictorParams& params, const Eigen::VectorXd& query_inputs);
// Prediction with the query slot of the trunk input set to `embedding`.
TrajectoryGMM predict_with_query_embedding(const PredictorParams& params, const Scene& scene,
                                           int target_id, const Eigen::VectorXd& embedding);

struct LossAndGrad {
  double loss = 0.0;
  Eigen::VectorXd grad;  // same layout as PredictorParams::weights()
};

// -[log pi_k* + sum_t log N(gt_t | mode k*)] where k* minimizes the summed
// per-step distance between mode mean and ground truth (lowest index on ties).
LossAndGrad nll_loss(const PredictorParams& params, const Scene& scene, int target_id,
                     const OptionalQuery& query, const Trajectory& gt);

std::size_t closest_mode(const TrajectoryGMM& dist, const Trajectory& gt);

struct OverlapResult {
  double loss = 0.0;
  // d loss / d mean, indexed [mode][t] with x,y components.
  std::vector<std::vector<Point2>> grad_means_a;
  std::vector<std::vector<Point2>> grad_means_b;
  std::vector<double> grad_probs_a;
  std::vector<double> grad_probs_b;
};

// sum_i sum_j pi_a_i pi_b_j max_t exp(-|mu_a_i_t - mu_b_j_t|^2 / alpha); the max
// is hard and its subgradient goes to the lowest maximizing t.
OverlapResult overlap_loss(const TrajectoryGMM& dist_a, const TrajectoryGMM& dist_b, double alpha);

struct LossWeights {
  double overlap_weight = 0.1;
  double overlap_alpha = 4.0;  // m^2
};

// Training objective for one scene and one (optional) query agent whose
// ground-truth future is the plan: mean NLL over every other agent plus
// overlap_weight times the mean overlap over pairs of predicted agents.
LossAndGrad scene_loss(const PredictorParams& params, const Scene& scene,
                       std::optional<int> query_agent, const LossWeights& weights);

// ---------------------------------------------------------------------------

enum class Optimizer { momentum, adam };

struct TrainConfig {
  Optimizer optimizer = Optimizer::adam;
  double learning_rate = 1e-3;
  double momentum = 0.9;           // heavy-ball coefficient; beta1 for adam
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t batch_size = 16;
  std::size_t epochs = 40;
  double conditional_fraction = 0.95;  // samples that receive the query's ground truth
  LossWeights loss;
  double grad_clip = 10.0;             // global gradient norm bound
  std::size_t val_limit = 200;         // validation scenes evaluated per epoch
  std::uint64_t seed = 1;

  void validate() const;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_nll_marginal = 0.0;
  double val_nll_conditional = 0.0;
  double val_wade_marginal = 0.0;
  double val_wade_conditional = 0.0;
};

struct TrainResult {
  PredictorParams params;
  std::vector<EpochLog> log;
};

// Mini-batch gradient descent (heavy-ball momentum or adam) with a cosine-decayed step size.
// Row 0 of the log evaluates the initial parameters. Throws TrainingError on a
// non-finite loss, naming the epoch and batch.
TrainResult train(const PredictorParams& init, const std::vector<Scene>& train_scenes,
                  const std::vector<Scene>& val_scenes, const TrainConfig& config);

// Validation metrics without any update; used for row 0 and every epoch.
EpochLog evaluate(const PredictorParams& params, const std::vector<Scene>& scenes,
                  std::size_t limit, std::uint64_t seed);

// Checkpoint: JSON container with the model config and the flat weights.
inline constexpr const char* kCheckpointSchema = "cbp.checkpoint.v1";
void save_checkpoint(const std::string& path, const PredictorParams& params);
PredictorParams load_checkpoint(const std::string& path);
// Rejects a checkpoint whose shapes differ from `expected`.
PredictorParams load_checkpoint(const std::string& path, const PredictorConfig& expected);

}  // namespace cbp

#pragma once

// Influence between agents measured on predicted distributions.
//
//   delta_ll    log p(s_B | s_A) - log p(s_B) at the ground truth
//   kl_mc       Monte Carlo KL(cond || marg) with samples drawn from cond
//   mutual info sum_k w_k KL(p(S_B | mu_k^A) || p(S_B)) over the most likely
//               marginal modes of the query agent, w_k from their probabilities

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cbp/predictor.hpp"
#include "cbp/scenario.hpp"
#include "cbp/trajectory.hpp"

namespace cbp {

double delta_ll(const TrajectoryGMM& cond, const TrajectoryGMM& marg, const Trajectory& gt_target);

struct KlEstimate {
  double kl = 0.0;
  double stderr_kl = 0.0;
  double min_log_ratio = 0.0;
  double max_log_ratio = 0.0;
};

// Requires samples >= 2 and equal horizons.
KlEstimate kl_mc(const TrajectoryGMM& cond, const TrajectoryGMM& marg, std::size_t samples,
                 std::uint64_t rng_seed);

struct MiOptions {
  std::size_t samples = 1000;  // inner samples per query mode
  std::size_t top_modes = 6;
  bool renormalize = true;     // weights divided by the summed top-mode probability
};

struct ModeTerm {
  std::size_t mode = 0;       // index in the query agent's marginal mixture
  double query_prob = 0.0;    // raw marginal probability
  double weight = 0.0;        // weight applied to the KL term
  double kl = 0.0;
  double stderr_kl = 0.0;
};

struct EstimatorDiagnostics {
  double min_log_ratio = 0.0;
  double max_log_ratio = 0.0;
  double effective_modes = 0.0;  // (sum w)^2 / sum w^2 over the query modes
};

struct InteractivityReport {
  std::uint64_t scene_id = 0;
  std::optional<ScenarioKind> scenario_kind;
  int query_id = -1;
  int target_id = -1;
  double mi_estimate = 0.0;
  double mi_stderr = 0.0;  // sqrt(sum_k w_k^2 se_k^2)
  std::vector<ModeTerm> per_mode_terms;
  std::size_t mc_samples = 0;
  EstimatorDiagnostics diagnostics;
  // Filled when the scene carries ground-truth futures.
  std::optional<double> delta_ll;
  std::optional<double> delta_wade;
  std::optional<double> query_marginal_ll;  // log p(s_A) under the query's marginal
};

using ConditionalFn = std::function<TrajectoryGMM(const Trajectory& plan)>;

// Estimator core, independent of the model: conditional(plan) returns the
// target's distribution given that the query follows `plan`.
InteractivityReport mutual_information(const TrajectoryGMM& query_marginal, const TrajectoryGMM& target_marginal,
                                       const ConditionalFn& conditional, const MiOptions& options,
                                       std::uint64_t rng_seed);

InteractivityReport mutual_information(const PredictorParams& params, const Scene& scene, int query_id,
                                       int target_id, const MiOptions& options, std::uint64_t rng_seed);

// Every ordered pair, query-major in scene agent order. Pair seeds are derived
// from rng_seed and the two agent ids.
std::vector<InteractivityReport> pairwise_scores(const PredictorParams& params, const Scene& scene,
                                                 const MiOptions& options, std::uint64_t rng_seed);

inline constexpr const char* kInteractivitySchema = "cbp.interactivity.v1";
// Header comment with the schema, then one row per report.
void write_interactivity_csv(std::ostream& out, const std::vector<InteractivityReport>& reports);
std::vector<std::string> interactivity_columns();

}  // namespace cbp

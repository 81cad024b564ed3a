#pragma once

// Displacement metrics over the most likely modes of a TrajectoryGMM.
//
// Quantile rule: for sorted values x[0..n-1] and level p in [0,1], the
// quantile is x[floor(h)] + (h - floor(h)) * (x[floor(h)+1] - x[floor(h)])
// with h = (n-1)*p (linear interpolation between order statistics).

#include <cstddef>
#include <map>
#include <span>
#include <string>

#include "cbp/trajectory.hpp"

namespace cbp {

struct TopModeOptions {
  std::size_t top_m = 6;
  // Divide the selected probabilities by their sum. When false the raw
  // probabilities of the selected modes are used as weights.
  bool renormalize = true;
};

double wade(const TrajectoryGMM& dist, const Trajectory& gt, const TopModeOptions& opts = {});
double min_ade(const TrajectoryGMM& dist, const Trajectory& gt, const TopModeOptions& opts = {});

// Marginal minus conditional wADE; positive when conditioning reduced the error.
double delta_wade(const TrajectoryGMM& marg, const TrajectoryGMM& cond, const Trajectory& gt,
                  const TopModeOptions& opts = {});

struct MetricSummary {
  std::string name;
  double mean = 0.0;
  double stderr_mean = 0.0;
  std::size_t count = 0;
  std::map<int, double> percentiles;  // keys: 10,20,30,40,60,70,80,90
};

double quantile(std::span<const double> values, double p);
MetricSummary aggregate(std::span<const double> values, const std::string& name);

// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

}  // namespace cbp

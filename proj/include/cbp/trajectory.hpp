#pragma once

// Trajectories and K-mode Gaussian mixtures over fixed-horizon trajectories.
//
// A TrajectoryGMM assigns one mixture weight per mode, shared by every
// waypoint of that mode, and an independent axis-aligned Gaussian per
// waypoint:
//
//   p(s) = sum_k pi_k prod_t N(s_t | mu_t^k, diag(sx_t^k^2, sy_t^k^2))
//
// All densities are evaluated in log space.

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace cbp {

struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point2&, const Point2&) = default;
};

inline Point2 operator+(Point2 a, Point2 b) { return {a.x + b.x, a.y + b.y}; }
inline Point2 operator-(Point2 a, Point2 b) { return {a.x - b.x, a.y - b.y}; }
double distance(Point2 a, Point2 b);

// Fixed-horizon sequence of positions, one per time step of length dt.
class Trajectory {
 public:
  Trajectory() = default;
  // Throws ArgumentError on empty states, non-positive dt or non-finite coordinates.
  Trajectory(std::vector<Point2> states, double dt);

  std::size_t horizon() const { return states_.size(); }
  double dt() const { return dt_; }
  const std::vector<Point2>& states() const { return states_; }
  const Point2& operator[](std::size_t t) const { return states_[t]; }

  Trajectory translated(Point2 offset) const;

  friend bool operator==(const Trajectory&, const Trajectory&) = default;

 private:
  std::vector<Point2> states_;
  double dt_ = 0.2;
};

// Axis-aligned Gaussian over one waypoint, parameterized by standard deviations.
struct WaypointGaussian {
  Point2 mean;
  double sigma_x = 1.0;
  double sigma_y = 1.0;

  Eigen::Matrix2d covariance() const;
  double log_density(Point2 p) const;

  friend bool operator==(const WaypointGaussian&, const WaypointGaussian&) = default;
};

struct TrajectoryMode {
  double prob = 1.0;
  std::vector<WaypointGaussian> waypoints;
};

class TrajectoryGMM {
 public:
  // Validates the mixture: K >= 1, equal horizons, probabilities in (0, 1]
  // summing to one within 1e-9, finite means, positive finite deviations.
  explicit TrajectoryGMM(std::vector<TrajectoryMode> modes);

  // Single-mode distribution with the given means and a shared isotropic deviation.
  static TrajectoryGMM unimodal(const std::vector<Point2>& means, double sigma);

  std::size_t horizon() const { return modes_.front().waypoints.size(); }
  std::size_t mode_count() const { return modes_.size(); }
  const std::vector<TrajectoryMode>& modes() const { return modes_; }
  const TrajectoryMode& mode(std::size_t k) const { return modes_[k]; }

  // Mean trajectory of mode k.
  Trajectory mode_mean(std::size_t k, double dt) const;

  TrajectoryGMM translated(Point2 offset) const;

 private:
  std::vector<TrajectoryMode> modes_;
};

double log_sum_exp(const std::vector<double>& values);

// Per-mode log pi_k + sum_t log N(s_t | mode k); the mixture log density is their log-sum-exp.
std::vector<double> mode_log_joint(const TrajectoryGMM& dist, const std::vector<Point2>& states);

double log_likelihood(const TrajectoryGMM& dist, const Trajectory& traj);
double log_likelihood(const TrajectoryGMM& dist, const std::vector<Point2>& states);

// Draws n trajectories: categorical mode choice, then independent waypoint draws.
std::vector<Trajectory> sample(const TrajectoryGMM& dist, std::uint64_t rng_seed, std::size_t n,
                               double dt = 0.2);

struct RankedMode {
  double prob;
  std::size_t index;
};

// The m most probable modes in descending probability; ties go to the lower index.
std::vector<RankedMode> most_likely_modes(const TrajectoryGMM& dist, std::size_t m);

}  // namespace cbp

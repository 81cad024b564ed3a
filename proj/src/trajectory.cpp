#include "cbp/trajectory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "cbp/errors.hpp"

namespace cbp {
namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kProbSumTolerance = 1e-9;

bool finite(Point2 p) { return std::isfinite(p.x) && std::isfinite(p.y); }

void check_sigma(double s) {
  if (!(s > 0.0) || !std::isfinite(s)) {
    throw NumericDomainError("waypoint covariance is not positive definite (sigma=" +
                             std::to_string(s) + ")");
  }
}

}  // namespace

double distance(Point2 a, Point2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

Trajectory::Trajectory(std::vector<Point2> states, double dt) : states_(std::move(states)), dt_(dt) {
  if (states_.empty()) throw ArgumentError("trajectory needs at least one state");
  if (!(dt_ > 0.0) || !std::isfinite(dt_)) throw ArgumentError("trajectory dt must be positive");
  for (const auto& p : states_) {
    if (!finite(p)) throw ArgumentError("trajectory has a non-finite coordinate");
  }
}

Trajectory Trajectory::translated(Point2 offset) const {
  std::vector<Point2> out = states_;
  for (auto& p : out) p = p + offset;
  return Trajectory(std::move(out), dt_);
}

Eigen::Matrix2d WaypointGaussian::covariance() const {
  Eigen::Matrix2d c = Eigen::Matrix2d::Zero();
  c(0, 0) = sigma_x * sigma_x;
  c(1, 1) = sigma_y * sigma_y;
  return c;
}

double WaypointGaussian::log_density(Point2 p) const {
  const double zx = (p.x - mean.x) / sigma_x;
  const double zy = (p.y - mean.y) / sigma_y;
  return -kLog2Pi - std::log(sigma_x) - std::log(sigma_y) - 0.5 * (zx * zx + zy * zy);
}

TrajectoryGMM::TrajectoryGMM(std::vector<TrajectoryMode> modes) : modes_(std::move(modes)) {
  if (modes_.empty()) throw ArgumentError("mixture needs at least one mode");
  const std::size_t horizon = modes_.front().waypoints.size();
  if (horizon == 0) throw DimensionError("mixture horizon must be at least 1");
  double total = 0.0;
  for (const auto& m : modes_) {
    if (m.waypoints.size() != horizon) throw DimensionError("mixture modes have unequal horizons");
    if (!(m.prob > 0.0) || m.prob > 1.0 + kProbSumTolerance || !std::isfinite(m.prob)) {
      throw NumericDomainError("mode probability outside (0, 1]");
    }
    total += m.prob;
    for (const auto& w : m.waypoints) {
      if (!finite(w.mean)) throw NumericDomainError("non-finite waypoint mean");
      check_sigma(w.sigma_x);
      check_sigma(w.sigma_y);
    }
  }
  if (std::abs(total - 1.0) > kProbSumTolerance) {
    throw NumericDomainError("mode probabilities sum to " + std::to_string(total));
  }
}

TrajectoryGMM TrajectoryGMM::unimodal(const std::vector<Point2>& means, double sigma) {
  TrajectoryMode mode;
  mode.prob = 1.0;
  for (const auto& m : means) mode.waypoints.push_back({m, sigma, sigma});
  return TrajectoryGMM({mode});
}

Trajectory TrajectoryGMM::mode_mean(std::size_t k, double dt) const {
  std::vector<Point2> pts;
  pts.reserve(horizon());
  for (const auto& w : modes_.at(k).waypoints) pts.push_back(w.mean);
  return Trajectory(std::move(pts), dt);
}

TrajectoryGMM TrajectoryGMM::translated(Point2 offset) const {
  auto modes = modes_;
  for (auto& m : modes) {
    for (auto& w : m.waypoints) w.mean = w.mean + offset;
  }
  return TrajectoryGMM(std::move(modes));
}

double log_sum_exp(const std::vector<double>& values) {
  if (values.empty()) return -std::numeric_limits<double>::infinity();
  const double hi = *std::max_element(values.begin(), values.end());
  if (!std::isfinite(hi)) return hi;
  double acc = 0.0;
  for (double v : values) acc += std::exp(v - hi);
  return hi + std::log(acc);
}

std::vector<double> mode_log_joint(const TrajectoryGMM& dist, const std::vector<Point2>& states) {
  if (states.size() != dist.horizon()) {
    throw DimensionError("trajectory horizon " + std::to_string(states.size()) +
                         " does not match distribution horizon " + std::to_string(dist.horizon()));
  }
  std::vector<double> out;
  out.reserve(dist.mode_count());
  for (const auto& m : dist.modes()) {
    double lj = std::log(m.prob);
    for (std::size_t t = 0; t < states.size(); ++t) lj += m.waypoints[t].log_density(states[t]);
    out.push_back(lj);
  }
  return out;
}

double log_likelihood(const TrajectoryGMM& dist, const std::vector<Point2>& states) {
  return log_sum_exp(mode_log_joint(dist, states));
}

double log_likelihood(const TrajectoryGMM& dist, const Trajectory& traj) {
  return log_likelihood(dist, traj.states());
}

std::vector<Trajectory> sample(const TrajectoryGMM& dist, std::uint64_t rng_seed, std::size_t n,
                               double dt) {
  std::mt19937_64 rng(rng_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<double> cumulative;
  cumulative.reserve(dist.mode_count());
  double acc = 0.0;
  for (const auto& m : dist.modes()) cumulative.push_back(acc += m.prob);

  std::vector<Trajectory> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = unit(rng) * acc;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
    const std::size_t k =
        std::min<std::size_t>(static_cast<std::size_t>(it - cumulative.begin()), dist.mode_count() - 1);
    const auto& mode = dist.mode(k);
    std::vector<Point2> pts;
    pts.reserve(mode.waypoints.size());
    for (const auto& w : mode.waypoints) {
      const double zx = normal(rng);
      const double zy = normal(rng);
      pts.push_back({w.mean.x + w.sigma_x * zx, w.mean.y + w.sigma_y * zy});
    }
    out.emplace_back(std::move(pts), dt);
  }
  return out;
}

std::vector<RankedMode> most_likely_modes(const TrajectoryGMM& dist, std::size_t m) {
  if (m < 1 || m > dist.mode_count()) {
    throw ArgumentError("requested " + std::to_string(m) + " modes from a " +
                        std::to_string(dist.mode_count()) + "-mode mixture");
  }
  std::vector<RankedMode> ranked;
  ranked.reserve(dist.mode_count());
  for (std::size_t k = 0; k < dist.mode_count(); ++k) ranked.push_back({dist.mode(k).prob, k});
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const RankedMode& a, const RankedMode& b) { return a.prob > b.prob; });
  ranked.resize(m);
  return ranked;
}

}  // namespace cbp

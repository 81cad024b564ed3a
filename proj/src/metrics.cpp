#include "cbp/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "cbp/errors.hpp"

namespace cbp {
namespace {

void check_horizon(const TrajectoryGMM& dist, const Trajectory& gt) {
  if (gt.horizon() != dist.horizon()) {
    throw DimensionError("ground truth horizon " + std::to_string(gt.horizon()) +
                         " != prediction horizon " + std::to_string(dist.horizon()));
  }
}

double mode_ade(const TrajectoryMode& mode, const Trajectory& gt) {
  double acc = 0.0;
  for (std::size_t t = 0; t < gt.horizon(); ++t) acc += distance(gt[t], mode.waypoints[t].mean);
  return acc / static_cast<double>(gt.horizon());
}

std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t q = i; q <= j; ++q) r[idx[q]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double wade(const TrajectoryGMM& dist, const Trajectory& gt, const TopModeOptions& opts) {
  check_horizon(dist, gt);
  const auto top = most_likely_modes(dist, std::min(opts.top_m, dist.mode_count()));
  double weight_sum = 0.0;
  for (const auto& r : top) weight_sum += r.prob;
  const double norm = opts.renormalize ? weight_sum : 1.0;
  double acc = 0.0;
  for (const auto& r : top) acc += (r.prob / norm) * mode_ade(dist.mode(r.index), gt);
  return acc;
}

double min_ade(const TrajectoryGMM& dist, const Trajectory& gt, const TopModeOptions& opts) {
  check_horizon(dist, gt);
  const auto top = most_likely_modes(dist, std::min(opts.top_m, dist.mode_count()));
  double best = std::numeric_limits<double>::infinity();
  for (const auto& r : top) best = std::min(best, mode_ade(dist.mode(r.index), gt));
  return best;
}

double delta_wade(const TrajectoryGMM& marg, const TrajectoryGMM& cond, const Trajectory& gt,
                  const TopModeOptions& opts) {
  return wade(marg, gt, opts) - wade(cond, gt, opts);
}

double quantile(std::span<const double> values, double p) {
  if (values.empty()) throw ArgumentError("quantile of an empty sample");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double h = static_cast<double>(sorted.size() - 1) * std::clamp(p, 0.0, 1.0);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

MetricSummary aggregate(std::span<const double> values, const std::string& name) {
  if (values.empty()) throw ArgumentError("cannot aggregate an empty sample for " + name);
  MetricSummary s;
  s.name = name;
  s.count = values.size();
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(s.count);
  if (s.count > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    const double sd = std::sqrt(ss / static_cast<double>(s.count - 1));
    s.stderr_mean = sd / std::sqrt(static_cast<double>(s.count));
  }
  for (int p : {10, 20, 30, 40, 60, 70, 80, 90}) s.percentiles[p] = quantile(values, p / 100.0);
  return s;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("spearman inputs differ in length");
  if (a.size() < 2) throw ArgumentError("spearman needs at least two points");
  const auto ra = ranks(a);
  const auto rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double mean = (n + 1.0) / 2.0;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - mean) * (rb[i] - mean);
    saa += (ra[i] - mean) * (ra[i] - mean);
    sbb += (rb[i] - mean) * (rb[i] - mean);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace cbp

#include "cbp/interactivity.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <random>
#include <string>

#include "cbp/errors.hpp"
#include "cbp/metrics.hpp"
#include "cbp/random.hpp"

namespace cbp {
namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

// Mixture log-density with the per-mode constants precomputed.
class MixtureEvaluator {
 public:
  explicit MixtureEvaluator(const TrajectoryGMM& g) : K_(g.mode_count()), T_(g.horizon()) {
    base_.resize(K_);
    mx_.resize(K_ * T_);
    my_.resize(K_ * T_);
    ix_.resize(K_ * T_);
    iy_.resize(K_ * T_);
    for (std::size_t k = 0; k < K_; ++k) {
      const auto& m = g.mode(k);
      double b = std::log(m.prob);
      for (std::size_t t = 0; t < T_; ++t) {
        const auto& w = m.waypoints[t];
        b -= kLog2Pi + std::log(w.sigma_x) + std::log(w.sigma_y);
        mx_[k * T_ + t] = w.mean.x;
        my_[k * T_ + t] = w.mean.y;
        ix_[k * T_ + t] = 1.0 / w.sigma_x;
        iy_[k * T_ + t] = 1.0 / w.sigma_y;
      }
      base_[k] = b;
    }
    scratch_.resize(K_);
  }

  double operator()(const std::vector<Point2>& s) {
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K_; ++k) {
      double q = 0.0;
      for (std::size_t t = 0; t < T_; ++t) {
        const double zx = (s[t].x - mx_[k * T_ + t]) * ix_[k * T_ + t];
        const double zy = (s[t].y - my_[k * T_ + t]) * iy_[k * T_ + t];
        q += zx * zx + zy * zy;
      }
      scratch_[k] = base_[k] - 0.5 * q;
      hi = std::max(hi, scratch_[k]);
    }
    if (!std::isfinite(hi)) return hi;
    double acc = 0.0;
    for (double v : scratch_) acc += std::exp(v - hi);
    return hi + std::log(acc);
  }

 private:
  std::size_t K_, T_;
  std::vector<double> base_, mx_, my_, ix_, iy_, scratch_;
};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string{}; }

}  // namespace

double delta_ll(const TrajectoryGMM& cond, const TrajectoryGMM& marg, const Trajectory& gt_target) {
  return log_likelihood(cond, gt_target) - log_likelihood(marg, gt_target);
}

KlEstimate kl_mc(const TrajectoryGMM& cond, const TrajectoryGMM& marg, std::size_t samples,
                 std::uint64_t rng_seed) {
  if (samples < 2) throw ArgumentError("kl_mc needs at least 2 samples");
  if (cond.horizon() != marg.horizon()) throw DimensionError("kl_mc needs equal horizons");
  const std::size_t T = cond.horizon();
  MixtureEvaluator log_cond(cond), log_marg(marg);

  Rng rng(rng_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> cumulative;
  double acc = 0.0;
  for (const auto& m : cond.modes()) cumulative.push_back(acc += m.prob);

  KlEstimate r;
  r.min_log_ratio = std::numeric_limits<double>::infinity();
  r.max_log_ratio = -std::numeric_limits<double>::infinity();
  double mean = 0.0, m2 = 0.0;
  std::vector<Point2> s(T);
  for (std::size_t i = 0; i < samples; ++i) {
    const double u = unit(rng) * acc;
    const auto k = std::min<std::size_t>(
        static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin()),
        cond.mode_count() - 1);
    const auto& mode = cond.mode(k);
    for (std::size_t t = 0; t < T; ++t) {
      const auto& w = mode.waypoints[t];
      const double zx = normal(rng);
      const double zy = normal(rng);
      s[t] = {w.mean.x + w.sigma_x * zx, w.mean.y + w.sigma_y * zy};
    }
    const double lm = log_marg(s);
    if (!std::isfinite(lm)) throw NumericDomainError("marginal assigns zero density to a conditional sample");
    const double x = log_cond(s) - lm;
    r.min_log_ratio = std::min(r.min_log_ratio, x);
    r.max_log_ratio = std::max(r.max_log_ratio, x);
    // Welford update.
    const double d = x - mean;
    mean += d / static_cast<double>(i + 1);
    m2 += d * (x - mean);
  }
  const double n = static_cast<double>(samples);
  r.kl = mean;
  r.stderr_kl = std::sqrt(m2 / (n - 1.0) / n);
  return r;
}

InteractivityReport mutual_information(const TrajectoryGMM& query_marginal, const TrajectoryGMM& target_marginal,
                                       const ConditionalFn& conditional, const MiOptions& options,
                                       std::uint64_t rng_seed) {
  if (options.samples < 2) throw ArgumentError("mutual information needs at least 2 samples per mode");
  if (options.top_modes < 1) throw ArgumentError("mutual information needs at least one query mode");
  const auto top = most_likely_modes(query_marginal, std::min(options.top_modes, query_marginal.mode_count()));
  double total = 0.0;
  for (const auto& r : top) total += r.prob;
  const double norm = options.renormalize ? total : 1.0;

  InteractivityReport rep;
  rep.mc_samples = options.samples;
  rep.diagnostics.min_log_ratio = std::numeric_limits<double>::infinity();
  rep.diagnostics.max_log_ratio = -std::numeric_limits<double>::infinity();
  double var = 0.0, w_sum = 0.0, w_sq = 0.0;
  for (const auto& r : top) {
    const Trajectory plan = query_marginal.mode_mean(r.index, 0.2);
    const TrajectoryGMM cond = conditional(plan);
    const auto kl = kl_mc(cond, target_marginal, options.samples, derive_seed(rng_seed, r.index));
    ModeTerm term{r.index, r.prob, r.prob / norm, kl.kl, kl.stderr_kl};
    rep.mi_estimate += term.weight * kl.kl;
    var += term.weight * term.weight * kl.stderr_kl * kl.stderr_kl;
    w_sum += term.weight;
    w_sq += term.weight * term.weight;
    rep.diagnostics.min_log_ratio = std::min(rep.diagnostics.min_log_ratio, kl.min_log_ratio);
    rep.diagnostics.max_log_ratio = std::max(rep.diagnostics.max_log_ratio, kl.max_log_ratio);
    rep.per_mode_terms.push_back(term);
  }
  rep.mi_stderr = std::sqrt(var);
  rep.diagnostics.effective_modes = w_sq > 0.0 ? w_sum * w_sum / w_sq : 0.0;
  if (!std::isfinite(rep.mi_estimate)) throw NumericDomainError("non-finite mutual information estimate");
  return rep;
}

InteractivityReport mutual_information(const PredictorParams& params, const Scene& scene, int query_id,
                                       int target_id, const MiOptions& options, std::uint64_t rng_seed) {
  if (query_id == target_id) throw ArgumentError("query and target must differ");
  const AgentTrack& query = scene.agent(query_id);
  const AgentTrack& target = scene.agent(target_id);
  const auto marg_a = predict(params, scene, query_id, std::nullopt);
  const auto marg_b = predict(params, scene, target_id, std::nullopt);
  const double dt = params.config().dt;
  auto cond = [&](const Trajectory& plan) {
    return predict(params, scene, target_id, ConditionalQuery{query_id, Trajectory(plan.states(), dt)});
  };
  auto rep = mutual_information(marg_a, marg_b, cond, options, rng_seed);
  rep.scene_id = scene.scene_id;
  rep.scenario_kind = scene.kind;
  rep.query_id = query_id;
  rep.target_id = target_id;

  if (target.future.horizon() == marg_b.horizon() && query.future.horizon() == marg_a.horizon()) {
    const auto cond_gt = predict(params, scene, target_id, ConditionalQuery{query_id, query.future});
    rep.delta_ll = delta_ll(cond_gt, marg_b, target.future);
    rep.delta_wade = delta_wade(marg_b, cond_gt, target.future);
    rep.query_marginal_ll = log_likelihood(marg_a, query.future);
  }
  return rep;
}

std::vector<InteractivityReport> pairwise_scores(const PredictorParams& params, const Scene& scene,
                                                 const MiOptions& options, std::uint64_t rng_seed) {
  if (scene.agents.size() < 2) throw ArgumentError("pairwise scores need at least two agents");
  std::vector<InteractivityReport> out;
  for (const auto& a : scene.agents) {
    for (const auto& b : scene.agents) {
      if (a.agent_id == b.agent_id) continue;
      const auto seed = derive_seed(rng_seed, static_cast<std::uint64_t>(a.agent_id),
                                    static_cast<std::uint64_t>(b.agent_id));
      out.push_back(mutual_information(params, scene, a.agent_id, b.agent_id, options, seed));
    }
  }
  return out;
}

std::vector<std::string> interactivity_columns() {
  return {"scene_id", "query_id", "target_id", "mi", "stderr", "delta_ll", "delta_wade", "M",
          "scenario_kind", "query_marginal_ll"};
}

void write_interactivity_csv(std::ostream& out, const std::vector<InteractivityReport>& reports) {
  out << "# schema=" << kInteractivitySchema << '\n';
  const auto cols = interactivity_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  for (const auto& r : reports) {
    out << r.scene_id << ',' << r.query_id << ',' << r.target_id << ',' << fmt(r.mi_estimate) << ','
        << fmt(r.mi_stderr) << ',' << fmt(r.delta_ll) << ',' << fmt(r.delta_wade) << ',' << r.mc_samples << ','
        << (r.scenario_kind ? to_string(*r.scenario_kind) : std::string{}) << ',' << fmt(r.query_marginal_ll)
        << '\n';
  }
}

}  // namespace cbp

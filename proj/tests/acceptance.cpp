// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Thresholds and sample sizes are fixed below; the training recipe matches the
// defaults a user gets from `cbp train` apart from the scene count.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cbp/harness.hpp"
#include "cbp/interactivity.hpp"
#include "cbp/metrics.hpp"
#include "cbp/predictor.hpp"
#include "cbp/random.hpp"
#include "cbp/scenario.hpp"
#include "support.hpp"

using namespace cbp;
using Clock = std::chrono::steady_clock;

namespace {

// Pinned tolerances.
constexpr std::size_t kKlSamples = 10000;
constexpr std::size_t kMiSamples = 20000;
constexpr double kMiRelTol = 0.05;
constexpr double kGradTol = 1e-4;
constexpr std::size_t kGradConfigs = 24;
constexpr double kMinRelGain = 0.05;
constexpr double kSigmas = 2.0;
constexpr double kMinSpearman = 0.3;
constexpr double kMedianOverP95 = 0.2;
constexpr double kMinIndependentShare = 0.5;

// Budgets in seconds.
constexpr double kOracleBudget = 30.0;
constexpr double kGradBudget = 60.0;
constexpr double kTrainEvalBudget = 20.0 * 60.0;
constexpr double kInvariantBudget = 5.0 * 60.0;

// Recipe for the trained model.
constexpr std::size_t kTrainScenes = 20000;
constexpr std::size_t kEvalScenes = 400;
constexpr std::size_t kScoreScenes = 300;
constexpr std::size_t kPruneScenes = 200;
constexpr std::size_t kScoreSamples = 400;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::printf("[%s] %d %s: %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

TrajectoryGMM one_step(std::vector<double> probs, std::vector<Point2> means, double sigma = 1.0) {
  std::vector<TrajectoryMode> modes;
  for (std::size_t k = 0; k < probs.size(); ++k) modes.push_back({probs[k], {{means[k], sigma, sigma}}});
  return TrajectoryGMM(modes);
}

double normal_pdf(double x, double mu) {
  return std::exp(-0.5 * (x - mu) * (x - mu)) / std::sqrt(2.0 * std::numbers::pi);
}

// KL(N(mu,1) || 0.5 N(-c,1) + 0.5 N(c,1)) along x by the trapezoid rule; the y
// factor is identical on both sides and drops out.
double kl_to_pair(double mu, double c) {
  const double lo = -c - 20.0, hi = c + 20.0, h = 1e-3;
  const auto n = static_cast<long>((hi - lo) / h);
  double acc = 0.0;
  for (long i = 0; i <= n; ++i) {
    const double x = lo + h * static_cast<double>(i);
    const double p = normal_pdf(x, mu);
    const double q = 0.5 * normal_pdf(x, -c) + 0.5 * normal_pdf(x, c);
    const double f = p > 0.0 ? p * std::log(p / q) : 0.0;
    acc += (i == 0 || i == n) ? 0.5 * f : f;
  }
  return acc * h;
}

void estimator_oracles() {
  const auto t0 = Clock::now();
  bool ok = true;
  std::ostringstream d;

  const auto base = one_step({1.0}, {{0.0, 0.0}});
  const auto shifted = one_step({1.0}, {{1.0, 0.0}});
  const auto wide = one_step({1.0}, {{0.0, 0.0}}, std::sqrt(2.0));
  const auto shift = kl_mc(shifted, base, kKlSamples, 101);
  const auto scale = kl_mc(wide, base, kKlSamples, 102);
  const double shift_truth = 0.5;
  const double scale_truth = 1.0 - std::log(2.0);
  ok &= std::abs(shift.kl - shift_truth) < 3.0 * shift.stderr_kl;
  ok &= std::abs(scale.kl - scale_truth) < 3.0 * scale.stderr_kl;
  d << fmt("shift %.4f vs %.4f (se %.4f); scale %.4f vs %.4f (se %.4f)", shift.kl, shift_truth,
           shift.stderr_kl, scale.kl, scale_truth, scale.stderr_kl);

  const double c = 3.0;
  const auto query = one_step({0.5, 0.5}, {{-1.0, 0.0}, {1.0, 0.0}});
  const auto target = one_step({0.5, 0.5}, {{-c, 0.0}, {c, 0.0}});
  auto cond = [&](const Trajectory& plan) { return one_step({1.0}, {{plan[0].x < 0 ? -c : c, 0.0}}); };
  const auto mi = mutual_information(query, target, cond, MiOptions{kMiSamples, 6, true}, 103);
  const double truth = 0.5 * kl_to_pair(-c, c) + 0.5 * kl_to_pair(c, c);
  const double rel = std::abs(mi.mi_estimate - truth) / truth;
  ok &= rel < kMiRelTol;
  d << fmt("; MI %.4f vs quadrature %.4f (log 2 = %.4f), rel err %.3f", mi.mi_estimate, truth, std::log(2.0), rel);

  const double secs = seconds_since(t0);
  ok &= secs < kOracleBudget;
  d << fmt("; %.1f s", secs);
  report(1, "estimator vs oracle", ok, d.str());
}

void gradient_check() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::size_t done = 0;
  for (std::size_t i = 0; i < kGradConfigs; ++i) {
    PredictorConfig c = testing::tiny_model(2 + i % 3, 3 + i % 4);
    c.modes = 1 + i % 3;
    c.degree = 1 + (i / 3) % 3;
    c.encoder_width = 3 + i % 4;
    c.trunk_width = 4 + (i * 7) % 5;
    SimConfig sim = testing::tiny_sim(c.past_steps, c.future_steps);
    sim.max_agents = 3 + i % 3;
    const auto kind = kAllScenarioKinds[i % kAllScenarioKinds.size()];
    const Scene s = generate_scene(sim, kind, i, 77);
    const auto p = PredictorParams::initialize(c, 500 + i);
    std::optional<int> q;
    if (i % 4 != 3) q = s.agents[i % s.agents.size()].agent_id;
    const LossWeights w{0.1 * double(1 + i % 5), 4.0 + 20.0 * double(i % 3)};
    const auto r = scene_loss(p, s, q, w);
    const auto fd = testing::numeric_gradient(p, [&](const PredictorParams& x) { return scene_loss(x, s, q, w).loss; },
                                              1e-5);
    worst = std::max(worst, testing::relative_error(r.grad, fd));
    ++done;
  }
  const double secs = seconds_since(t0);
  report(2, "gradient vs central differences", worst < kGradTol && done >= 20 && secs < kGradBudget,
         fmt("%zu configs, worst relative error %.2e (< %.0e); %.1f s", done, worst, kGradTol, secs));
}

// Mean of paired values with a scene-clustered standard error.
struct Clustered {
  double mean = 0.0;
  double se = 0.0;
  std::size_t n = 0;
};

Clustered clustered(const std::vector<std::vector<double>>& groups) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& g : groups) {
    for (double v : g) total += v;
    n += g.size();
  }
  Clustered out;
  out.n = n;
  if (n == 0) return out;
  out.mean = total / double(n);
  double ss = 0.0;
  std::size_t s = 0;
  for (const auto& g : groups) {
    if (g.empty()) continue;
    double r = 0.0;
    for (double v : g) r += v - out.mean;
    ss += r * r;
    ++s;
  }
  if (s > 1) out.se = std::sqrt(ss * double(s) / double(s - 1)) / double(n);
  return out;
}

struct Trained {
  PredictorParams params;
  double train_secs = 0.0;
};

Trained train_model() {
  const auto t0 = Clock::now();
  SimConfig sim;
  sim.scene_count = kTrainScenes;
  const auto train_set = generate_dataset(sim, 1);
  SimConfig vs = sim;
  vs.scene_count = 100;
  const auto val_set = generate_dataset(vs, 3);
  PredictorConfig pc;
  TrainConfig tc;
  tc.val_limit = 100;
  auto res = train(PredictorParams::initialize(pc, 3), train_set, val_set, tc);
  const auto& last = res.log.back();
  std::printf("  trained on %zu scenes, %zu epochs: val wADE marginal %.3f conditional %.3f (%.0f s)\n",
              train_set.size(), tc.epochs, last.val_wade_marginal, last.val_wade_conditional, seconds_since(t0));
  return {res.params, seconds_since(t0)};
}

std::vector<Scene> interactive_eval_set() {
  SimConfig es;
  es.scene_count = kEvalScenes;
  es.mix = {0.4, 0.35, 0.25, 0.0, 0.0};
  return generate_dataset(es, 2);
}

void conditioning_helps(const Trained& model, const std::vector<Scene>& scenes) {
  const auto t0 = Clock::now();
  std::vector<std::vector<double>> marg(scenes.size()), cond(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const Scene& scene = scenes[s];
    for (const auto& target : scene.agents) {
      const auto m = predict(model.params, scene, target.agent_id, std::nullopt);
      const double wm = wade(m, target.future);
      for (const auto& q : scene.agents) {
        if (q.agent_id == target.agent_id) continue;
        const auto c = predict(model.params, scene, target.agent_id, ConditionalQuery{q.agent_id, q.future});
        marg[s].push_back(wm);
        cond[s].push_back(wade(c, target.future));
      }
    }
  }
  const auto m = clustered(marg);
  const auto c = clustered(cond);
  const double gap = m.mean - c.mean;
  const double se = std::sqrt(m.se * m.se + c.se * c.se);
  const double rel = gap / m.mean;
  const double secs = model.train_secs + seconds_since(t0);
  const bool ok = rel >= kMinRelGain && gap > kSigmas * se && secs < kTrainEvalBudget;
  report(3, "conditioning helps", ok,
         fmt("%zu scenes, %zu pairs: wADE6 marginal %.3f conditional %.3f, gain %.1f%% (>= %.0f%%), "
             "gap %.3f vs 2 se %.3f; train+eval %.0f s",
             scenes.size(), m.n, m.mean, c.mean, 100.0 * rel, 100.0 * kMinRelGain, gap, kSigmas * se, secs));
}

std::vector<InteractivityReport> score_mixed(const Trained& model, double& independent_share) {
  SimConfig ms;
  ms.scene_count = kScoreScenes;
  const auto scenes = generate_dataset(ms, 4);
  std::size_t pairs = 0, independent = 0;
  for (const auto& s : scenes) {
    for (const auto& a : s.agents) {
      for (const auto& b : s.agents) {
        if (a.agent_id == b.agent_id) continue;
        ++pairs;
        if (!s.causally_linked(a.agent_id, b.agent_id)) ++independent;
      }
    }
  }
  independent_share = double(independent) / double(pairs);
  MiOptions opt;
  opt.samples = kScoreSamples;
  return score_scenes(model.params, scenes, opt, 5);
}

// Scored on the held-out interactive set; the mixed set's correlation is printed alongside.
void surprise(const std::vector<InteractivityReport>& reports, const std::vector<InteractivityReport>& mixed) {
  auto columns = [](const std::vector<InteractivityReport>& rs, std::vector<double>& mi, std::vector<double>& dw) {
    for (const auto& r : rs) {
      mi.push_back(r.mi_estimate);
      dw.push_back(*r.delta_wade);
    }
  };
  std::vector<double> mi, dw, mixed_mi, mixed_dw;
  columns(reports, mi, dw);
  columns(mixed, mixed_mi, mixed_dw);
  const double rho = spearman(mi, dw);
  std::vector<std::size_t> order(mi.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return mi[a] > mi[b]; });
  std::vector<double> top;
  for (std::size_t i = 0; i < std::max<std::size_t>(1, order.size() / 10); ++i) top.push_back(dw[order[i]]);
  const auto all = aggregate(dw, "delta_wade");
  const auto dec = aggregate(top, "top_decile");
  const bool ok = rho > kMinSpearman && dec.mean - all.mean >= kSigmas * dec.stderr_mean;
  report(4, "interactivity predicts surprise", ok,
         fmt("%zu interactive-set pairs: Spearman %.3f (> %.1f); top-decile dwADE %.3f vs mean %.3f, 2 se %.3f; "
             "mixed set Spearman %.3f",
             mi.size(), rho, kMinSpearman, dec.mean, all.mean, kSigmas * dec.stderr_mean,
             spearman(mixed_mi, mixed_dw)));
}

void histogram_shape(const std::vector<InteractivityReport>& reports, double independent_share) {
  std::vector<double> mi;
  for (const auto& r : reports) mi.push_back(r.mi_estimate);
  const double med = quantile(mi, 0.5);
  const double p95 = quantile(mi, 0.95);
  const bool ok = independent_share >= kMinIndependentShare && p95 > 0.0 && med < kMedianOverP95 * p95;
  report(5, "MI histogram concentrated near zero", ok,
         fmt("%zu pairs, %.0f%% independent: median %.4f, p95 %.4f, ratio %.3f (< %.2f)", mi.size(),
             100.0 * independent_share, med, p95, p95 > 0 ? med / p95 : 0.0, kMedianOverP95));
}

void pruning(const Trained& model) {
  SimConfig ps;
  ps.scene_count = kPruneScenes;
  ps.mix = {1.0, 0.0, 0.0, 0.0, 0.0};
  ps.prune_layout = true;
  const auto scenes = generate_dataset(ps, 6);
  RunConfig rc;
  rc.sim = ps;
  rc.prune_keep = {1};
  rc.estimator.samples = kScoreSamples;
  const auto summary = prune_scenes(model.params, scenes, rc);

  std::map<std::pair<std::uint64_t, int>, std::map<PruneStrategy, double>> by_scene;
  for (const auto& r : summary.scenes) by_scene[{r.scene_id, int(r.condition)}][r.strategy] = r.delta();
  std::map<int, std::vector<double>> diffs;
  for (const auto& [key, v] : by_scene) diffs[key.second].push_back(v.at(PruneStrategy::distance) - v.at(PruneStrategy::mi));

  std::ostringstream d;
  bool ok = false;
  for (const auto& row : summary.rows) {
    d << fmt("%s/%s dwADE6 %.3f (se %.3f); ", to_string(row.strategy).c_str(), to_string(row.condition).c_str(),
             row.mean_delta, row.stderr_delta);
  }
  for (const auto& [cond, v] : diffs) {
    const auto a = aggregate(v, "gap");
    d << fmt("%s gap %.3f vs 2 se %.3f; ", to_string(PruneCondition(cond)).c_str(), a.mean, kSigmas * a.stderr_mean);
    if (PruneCondition(cond) == PruneCondition::removed) ok = a.mean > 0.0 && a.mean >= kSigmas * a.stderr_mean;
  }
  d << fmt("%zu scenes", scenes.size());
  report(6, "MI top-1 pruning beats distance", ok, d.str());
}

void invariants(const Trained& model, const std::vector<InteractivityReport>& reports) {
  const auto t0 = Clock::now();
  std::vector<std::string> broken;
  auto expect = [&](bool cond, const std::string& what) {
    if (!cond) broken.push_back(what);
  };

  // Normalization on a 6-sigma grid.
  {
    const auto g = one_step({0.35, 0.65}, {{-1.5, 0.5}, {2.0, -1.0}}, 0.8);
    const double lo = -1.5 - 6 * 0.8, hi = 2.0 + 6 * 0.8, h = 0.01;
    const auto n = static_cast<int>((hi - lo) / h);
    double mass = 0.0;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        mass += std::exp(log_likelihood(g, std::vector<Point2>{{lo + (i + 0.5) * h, lo + (j + 0.5) * h}}));
      }
    }
    expect(std::abs(mass * h * h - 1.0) < 1e-3, "normalization");
  }

  SimConfig es;
  es.scene_count = 40;
  const auto scenes = generate_dataset(es, 8);
  const Point2 off{250.0, -75.0};
  std::mt19937_64 rng(9);
  for (const auto& s : scenes) {
    const Scene moved = s.translated(off);
    for (const auto& a : s.agents) {
      const auto g = predict(model.params, s, a.agent_id, std::nullopt);
      const auto gm = predict(model.params, moved, a.agent_id, std::nullopt);
      expect(std::abs(log_likelihood(gm, a.future.translated(off)) - log_likelihood(g, a.future)) < 1e-6,
             "translation invariance");
      auto modes = g.modes();
      std::shuffle(modes.begin(), modes.end(), rng);
      const TrajectoryGMM perm(modes);
      expect(std::abs(log_likelihood(perm, a.future) - log_likelihood(g, a.future)) < 1e-9, "mode permutation");
      expect(std::abs(wade(perm, a.future) - wade(g, a.future)) < 1e-9, "mode permutation (wADE)");
      expect(min_ade(g, a.future) <= wade(g, a.future) + 1e-12, "min_ade6 <= wade6");
    }
  }

  std::size_t negative = 0;
  for (const auto& r : reports) negative += r.mi_estimate < -3.0 * r.mi_stderr;
  expect(negative == 0, "MI >= -3 se");

  // Byte-for-byte repeatability of data, training and scoring.
  {
    SimConfig sc;
    sc.scene_count = 25;
    std::ostringstream a, b;
    write_dataset(a, generate_dataset(sc, 11), sc, 11);
    write_dataset(b, generate_dataset(sc, 11), sc, 11);
    expect(a.str() == b.str(), "dataset determinism");

    const auto small = generate_dataset(sc, 11);
    TrainConfig tc;
    tc.epochs = 2;
    tc.val_limit = 5;
    const auto init = PredictorParams::initialize(PredictorConfig{}, 4);
    const auto r1 = train(init, small, small, tc);
    const auto r2 = train(init, small, small, tc);
    expect((r1.params.weights().array() == r2.params.weights().array()).all(), "training determinism");

    MiOptions opt;
    opt.samples = 200;
    std::ostringstream c1, c2;
    write_interactivity_csv(c1, score_scenes(model.params, {small.begin(), small.begin() + 5}, opt, 12));
    write_interactivity_csv(c2, score_scenes(model.params, {small.begin(), small.begin() + 5}, opt, 12));
    expect(c1.str() == c2.str(), "scoring determinism");
  }

  const double secs = seconds_since(t0);
  expect(secs < kInvariantBudget, "time budget");
  std::sort(broken.begin(), broken.end());
  broken.erase(std::unique(broken.begin(), broken.end()), broken.end());
  std::string detail = fmt("%zu MI pairs checked, %.1f s", reports.size(), secs);
  for (const auto& b : broken) detail += "; broken: " + b;
  report(7, "invariant suite", broken.empty(), detail);
}

}  // namespace

int main() {
  estimator_oracles();
  gradient_check();
  const auto model = train_model();
  const auto eval_set = interactive_eval_set();
  conditioning_helps(model, eval_set);
  MiOptions opt;
  opt.samples = kScoreSamples;
  auto t0 = Clock::now();
  const auto interactive = score_scenes(model.params, eval_set, opt, 5);
  std::printf("  scored %zu interactive pairs in %.0f s\n", interactive.size(), seconds_since(t0));
  double independent_share = 0.0;
  t0 = Clock::now();
  const auto mixed = score_mixed(model, independent_share);
  std::printf("  scored %zu mixed pairs in %.0f s\n", mixed.size(), seconds_since(t0));
  surprise(interactive, mixed);
  histogram_shape(mixed, independent_share);
  pruning(model);
  auto all = interactive;
  all.insert(all.end(), mixed.begin(), mixed.end());
  invariants(model, all);
  std::printf("%d of 7 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}

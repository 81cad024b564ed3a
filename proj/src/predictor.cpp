#include "cbp/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "cbp/errors.hpp"
#include "cbp/random.hpp"

namespace cbp {
namespace {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using CMat = Eigen::Map<const Mat>;
using CVec = Eigen::Map<const Vec>;
using MMat = Eigen::Map<Mat>;
using MVec = Eigen::Map<Vec>;

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kProbFloor = 1e-12;

Point2 rotate_quarters(Point2 v, int quarters) {
  switch (((quarters % 4) + 4) % 4) {
    case 1: return {-v.y, v.x};
    case 2: return {-v.x, -v.y};
    case 3: return {v.y, -v.x};
    default: return v;
  }
}

CMat weight(const PredictorParams& p, const DenseSlot& s) {
  return CMat(p.weights().data() + s.weight, static_cast<Eigen::Index>(s.rows),
              static_cast<Eigen::Index>(s.cols));
}
CVec bias(const PredictorParams& p, const DenseSlot& s) {
  return CVec(p.weights().data() + s.bias, static_cast<Eigen::Index>(s.rows));
}
MMat weight_grad(Vec& g, const DenseSlot& s) {
  return MMat(g.data() + s.weight, static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols));
}
MVec bias_grad(Vec& g, const DenseSlot& s) {
  return MVec(g.data() + s.bias, static_cast<Eigen::Index>(s.rows));
}

// Leaky, so units pushed negative by an early large step can still recover.
constexpr double kLeak = 0.1;

template <typename Expr>
auto relu(const Eigen::MatrixBase<Expr>& x) {
  return (x.array() > 0.0).select(x, kLeak * x).eval();
}
Vec relu_mask(const Vec& act) { return (act.array() > 0.0).select(Vec::Ones(act.size()), kLeak); }
Mat relu_mask(const Mat& act) {
  return (act.array() > 0.0).select(Mat::Ones(act.rows(), act.cols()), kLeak);
}

struct Forward {
  Vec self_h1, self_e;
  Mat nbr_in, nbr_h1, nbr_h2;
  std::vector<Eigen::Index> nbr_arg;  // winning column per pooled unit
  Vec nbr_e;
  bool has_query = false;
  bool query_from_embedding = false;
  Vec query_in, query_h1, query_e;
  Vec trunk_in, trunk_h1, trunk_h2, out;
  Vec self_in;
};

Forward run_forward(const PredictorParams& p, const TargetInputs& in,
                    const std::optional<Vec>& query_embedding = std::nullopt) {
  const auto& L = p.layout();
  const auto enc = static_cast<Eigen::Index>(p.config().encoder_width);
  Forward f;
  f.self_in = in.self;
  f.self_h1 = relu(weight(p, L.self1) * in.self + bias(p, L.self1));
  f.self_e = relu(weight(p, L.self2) * f.self_h1 + bias(p, L.self2));

  f.nbr_e = Vec::Zero(enc);
  if (in.neighbors.cols() > 0) {
    f.nbr_in = in.neighbors;
    f.nbr_h1 = relu((weight(p, L.nbr1) * in.neighbors).colwise() + bias(p, L.nbr1));
    f.nbr_h2 = relu((weight(p, L.nbr2) * f.nbr_h1).colwise() + bias(p, L.nbr2));
    f.nbr_arg.resize(static_cast<std::size_t>(enc));
    for (Eigen::Index r = 0; r < enc; ++r) {
      Eigen::Index best = 0;
      for (Eigen::Index c = 1; c < f.nbr_h2.cols(); ++c) {
        if (f.nbr_h2(r, c) > f.nbr_h2(r, best)) best = c;
      }
      f.nbr_arg[static_cast<std::size_t>(r)] = best;
      f.nbr_e(r) = f.nbr_h2(r, best);
    }
  }

  f.query_e = Vec::Zero(enc);
  if (query_embedding) {
    f.query_from_embedding = true;
    f.query_e = *query_embedding;
  } else if (in.query) {
    f.has_query = true;
    f.query_in = *in.query;
    f.query_h1 = relu(weight(p, L.query1) * f.query_in + bias(p, L.query1));
    f.query_e = weight(p, L.query2) * f.query_h1 + bias(p, L.query2);
  }

  f.trunk_in.resize(3 * enc);
  f.trunk_in << f.self_e, f.nbr_e, f.query_e;
  f.trunk_h1 = relu(weight(p, L.trunk1) * f.trunk_in + bias(p, L.trunk1));
  f.trunk_h2 = relu(weight(p, L.trunk2) * f.trunk_h1 + bias(p, L.trunk2));
  f.out = weight(p, L.head) * f.trunk_h2 + bias(p, L.head);
  return f;
}

void run_backward(const PredictorParams& p, const Forward& f, const Vec& d_out, Vec& g) {
  const auto& L = p.layout();
  const auto enc = static_cast<Eigen::Index>(p.config().encoder_width);

  weight_grad(g, L.head).noalias() += d_out * f.trunk_h2.transpose();
  bias_grad(g, L.head) += d_out;
  Vec d = (weight(p, L.head).transpose() * d_out).cwiseProduct(relu_mask(f.trunk_h2));

  weight_grad(g, L.trunk2).noalias() += d * f.trunk_h1.transpose();
  bias_grad(g, L.trunk2) += d;
  d = (weight(p, L.trunk2).transpose() * d).cwiseProduct(relu_mask(f.trunk_h1));

  weight_grad(g, L.trunk1).noalias() += d * f.trunk_in.transpose();
  bias_grad(g, L.trunk1) += d;
  const Vec d_in = weight(p, L.trunk1).transpose() * d;

  Vec d_self = d_in.segment(0, enc).cwiseProduct(relu_mask(f.self_e));
  weight_grad(g, L.self2).noalias() += d_self * f.self_h1.transpose();
  bias_grad(g, L.self2) += d_self;
  d_self = (weight(p, L.self2).transpose() * d_self).cwiseProduct(relu_mask(f.self_h1));
  weight_grad(g, L.self1).noalias() += d_self * f.self_in.transpose();
  bias_grad(g, L.self1) += d_self;

  if (f.nbr_h2.cols() > 0) {
    Mat d_h2 = Mat::Zero(f.nbr_h2.rows(), f.nbr_h2.cols());
    const Vec d_pool = d_in.segment(enc, enc);
    for (Eigen::Index r = 0; r < enc; ++r) d_h2(r, f.nbr_arg[static_cast<std::size_t>(r)]) = d_pool(r);
    d_h2 = d_h2.cwiseProduct(relu_mask(f.nbr_h2));
    weight_grad(g, L.nbr2).noalias() += d_h2 * f.nbr_h1.transpose();
    bias_grad(g, L.nbr2) += d_h2.rowwise().sum();
    Mat d_h1 = (weight(p, L.nbr2).transpose() * d_h2).cwiseProduct(relu_mask(f.nbr_h1));
    weight_grad(g, L.nbr1).noalias() += d_h1 * f.nbr_in.transpose();
    bias_grad(g, L.nbr1) += d_h1.rowwise().sum();
  }

  if (f.has_query) {
    const Vec d_q = d_in.segment(2 * enc, enc);
    weight_grad(g, L.query2).noalias() += d_q * f.query_h1.transpose();
    bias_grad(g, L.query2) += d_q;
    const Vec d_h1 = (weight(p, L.query2).transpose() * d_q).cwiseProduct(relu_mask(f.query_h1));
    weight_grad(g, L.query1).noalias() += d_h1 * f.query_in.transpose();
    bias_grad(g, L.query1) += d_h1;
  }
}

// Head output layout.
struct HeadIndex {
  std::size_t K, D, T;
  std::size_t logit(std::size_t k) const { return k; }
  std::size_t coef(std::size_t k, std::size_t axis, std::size_t d) const {
    return K + (k * 2 + axis) * (D + 1) + d;
  }
  std::size_t log_sigma(std::size_t k, std::size_t t, std::size_t axis) const {
    return K + 2 * K * (D + 1) + (k * T + t) * 2 + axis;
  }
};

HeadIndex head_index(const PredictorConfig& c) { return {c.modes, c.degree, c.future_steps}; }

// basis(t, d) = (tau_t / tau_H)^d with tau_t = (t+1) dt.
Mat poly_basis(const PredictorConfig& c) {
  Mat b(static_cast<Eigen::Index>(c.future_steps), static_cast<Eigen::Index>(c.degree + 1));
  const double horizon = static_cast<double>(c.future_steps) * c.dt;
  for (std::size_t t = 0; t < c.future_steps; ++t) {
    const double u = static_cast<double>(t + 1) * c.dt / horizon;
    double pw = 1.0;
    for (std::size_t d = 0; d <= c.degree; ++d) {
      b(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(d)) = pw;
      pw *= u;
    }
  }
  return b;
}

// Decoded head in the target's local frame.
struct Head {
  Vec probs;
  Mat mean_x, mean_y;          // K x T
  Mat log_sig_x, log_sig_y;    // K x T, clamped
  Mat active_x, active_y;      // 1 where the log-sigma clamp is inactive
};

// Means are a constant-velocity rollout of `velocity` plus the polynomial.
Head decode(const PredictorConfig& c, const Vec& out, const Mat& basis, Point2 velocity) {
  const auto hi = head_index(c);
  const auto K = static_cast<Eigen::Index>(c.modes);
  const auto T = static_cast<Eigen::Index>(c.future_steps);
  const auto D1 = static_cast<Eigen::Index>(c.degree + 1);
  Head h;
  Vec logits = out.head(K);
  const double mx = logits.maxCoeff();
  h.probs = (logits.array() - mx).exp();
  h.probs /= h.probs.sum();
  if (h.probs.minCoeff() < kProbFloor) {
    h.probs = h.probs.cwiseMax(kProbFloor);
    h.probs /= h.probs.sum();
  }
  h.mean_x.resize(K, T);
  h.mean_y.resize(K, T);
  h.log_sig_x.resize(K, T);
  h.log_sig_y.resize(K, T);
  h.active_x.resize(K, T);
  h.active_y.resize(K, T);
  const double lo = std::log(c.min_sigma);
  const double up = std::log(c.max_sigma);
  for (Eigen::Index k = 0; k < K; ++k) {
    const auto ks = static_cast<std::size_t>(k);
    const Vec cx = out.segment(static_cast<Eigen::Index>(hi.coef(ks, 0, 0)), D1);
    const Vec cy = out.segment(static_cast<Eigen::Index>(hi.coef(ks, 1, 0)), D1);
    h.mean_x.row(k) = (c.output_scale * basis * cx).transpose();
    h.mean_y.row(k) = (c.output_scale * basis * cy).transpose();
    for (Eigen::Index t = 0; t < T; ++t) {
      const double tau = static_cast<double>(t + 1) * c.dt;
      h.mean_x(k, t) += velocity.x * tau;
      h.mean_y(k, t) += velocity.y * tau;
    }
    for (Eigen::Index t = 0; t < T; ++t) {
      const auto ts = static_cast<std::size_t>(t);
      const double rx = out(static_cast<Eigen::Index>(hi.log_sigma(ks, ts, 0)));
      const double ry = out(static_cast<Eigen::Index>(hi.log_sigma(ks, ts, 1)));
      h.log_sig_x(k, t) = std::clamp(rx, lo, up);
      h.log_sig_y(k, t) = std::clamp(ry, lo, up);
      h.active_x(k, t) = (rx > lo && rx < up) ? 1.0 : 0.0;
      h.active_y(k, t) = (ry > lo && ry < up) ? 1.0 : 0.0;
    }
  }
  return h;
}

TrajectoryGMM to_gmm(const Head& h, const AgentFrame& frame) {
  std::vector<TrajectoryMode> modes;
  const bool swap = (frame.quarter_turns % 2) != 0;
  for (Eigen::Index k = 0; k < h.probs.size(); ++k) {
    TrajectoryMode m;
    m.prob = h.probs(k);
    for (Eigen::Index t = 0; t < h.mean_x.cols(); ++t) {
      WaypointGaussian w;
      w.mean = frame.to_world({h.mean_x(k, t), h.mean_y(k, t)});
      const double sx = std::exp(h.log_sig_x(k, t));
      const double sy = std::exp(h.log_sig_y(k, t));
      w.sigma_x = swap ? sy : sx;
      w.sigma_y = swap ? sx : sy;
      m.waypoints.push_back(w);
    }
    modes.push_back(std::move(m));
  }
  return TrajectoryGMM(std::move(modes));
}

// Gradient of the head output from gradients on local means and on mode probabilities.
void add_mean_prob_grad(const PredictorConfig& c, const Head& h, const Mat& basis, const Mat& d_mx,
                        const Mat& d_my, const Vec& d_probs, Vec& d_out) {
  const auto hi = head_index(c);
  const auto D1 = static_cast<Eigen::Index>(c.degree + 1);
  for (Eigen::Index k = 0; k < h.probs.size(); ++k) {
    const auto ks = static_cast<std::size_t>(k);
    d_out.segment(static_cast<Eigen::Index>(hi.coef(ks, 0, 0)), D1) +=
        c.output_scale * basis.transpose() * d_mx.row(k).transpose();
    d_out.segment(static_cast<Eigen::Index>(hi.coef(ks, 1, 0)), D1) +=
        c.output_scale * basis.transpose() * d_my.row(k).transpose();
  }
  const double avg = h.probs.dot(d_probs);
  for (Eigen::Index k = 0; k < h.probs.size(); ++k) {
    d_out(static_cast<Eigen::Index>(hi.logit(static_cast<std::size_t>(k)))) +=
        h.probs(k) * (d_probs(k) - avg);
  }
}

struct NllTerm {
  double loss = 0.0;
  Vec d_out;
};

NllTerm nll_term(const PredictorConfig& c, const Head& h, const AgentFrame& frame,
                 const Trajectory& gt) {
  const auto K = h.probs.size();
  const auto T = h.mean_x.cols();
  std::vector<Point2> local;
  for (const auto& p : gt.states()) local.push_back(frame.to_local(p));

  Eigen::Index best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < K; ++k) {
    double d = 0.0;
    for (Eigen::Index t = 0; t < T; ++t) {
      const auto& g = local[static_cast<std::size_t>(t)];
      d += std::hypot(g.x - h.mean_x(k, t), g.y - h.mean_y(k, t));
    }
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }

  const auto hi = head_index(c);
  NllTerm r;
  r.d_out = Vec::Zero(static_cast<Eigen::Index>(c.head_outputs()));
  r.loss = -std::log(h.probs(best));
  for (Eigen::Index j = 0; j < K; ++j) {
    r.d_out(static_cast<Eigen::Index>(hi.logit(static_cast<std::size_t>(j)))) =
        h.probs(j) - (j == best ? 1.0 : 0.0);
  }
  Mat d_mx = Mat::Zero(K, T), d_my = Mat::Zero(K, T);
  const auto bs = static_cast<std::size_t>(best);
  for (Eigen::Index t = 0; t < T; ++t) {
    const auto ts = static_cast<std::size_t>(t);
    const auto& g = local[ts];
    const double ex = g.x - h.mean_x(best, t);
    const double ey = g.y - h.mean_y(best, t);
    const double ivx = std::exp(-2.0 * h.log_sig_x(best, t));
    const double ivy = std::exp(-2.0 * h.log_sig_y(best, t));
    r.loss += kLog2Pi + h.log_sig_x(best, t) + h.log_sig_y(best, t) +
              0.5 * (ex * ex * ivx + ey * ey * ivy);
    d_mx(best, t) = -ex * ivx;
    d_my(best, t) = -ey * ivy;
    r.d_out(static_cast<Eigen::Index>(hi.log_sigma(bs, ts, 0))) = h.active_x(best, t) * (1.0 - ex * ex * ivx);
    r.d_out(static_cast<Eigen::Index>(hi.log_sigma(bs, ts, 1))) = h.active_y(best, t) * (1.0 - ey * ey * ivy);
  }
  const auto D1 = static_cast<Eigen::Index>(c.degree + 1);
  const Mat basis = poly_basis(c);
  r.d_out.segment(static_cast<Eigen::Index>(hi.coef(bs, 0, 0)), D1) +=
      c.output_scale * basis.transpose() * d_mx.row(best).transpose();
  r.d_out.segment(static_cast<Eigen::Index>(hi.coef(bs, 1, 0)), D1) +=
      c.output_scale * basis.transpose() * d_my.row(best).transpose();
  return r;
}

void check_past(const PredictorConfig& c, const AgentTrack& a) {
  if (a.past.size() != c.past_steps) {
    throw DimensionError("agent " + std::to_string(a.agent_id) + " has " + std::to_string(a.past.size()) +
                         " past states, model expects " + std::to_string(c.past_steps));
  }
}

void write_track(const PredictorConfig& c, const AgentFrame& frame, const AgentTrack& a, double lane_feature,
                 Eigen::Ref<Vec> out) {
  Eigen::Index i = 0;
  for (const auto& s : a.past) {
    const Point2 p = frame.to_local(s.position());
    const Point2 v = frame.vector_to_local({s.vx, s.vy});
    out(i++) = p.x / c.feature_scale;
    out(i++) = p.y / c.feature_scale;
    out(i++) = v.x / c.velocity_scale;
    out(i++) = v.y / c.velocity_scale;
  }
  out(i) = lane_feature;
}

}  // namespace

// ---------------------------------------------------------------------------

void PredictorConfig::validate() const {
  if (past_steps < 1) throw ConfigError("model.past_steps", "must be at least 1");
  if (future_steps < 1) throw ConfigError("model.future_steps", "must be at least 1");
  if (!(dt > 0.0)) throw ConfigError("model.dt", "must be positive");
  if (modes < 1) throw ConfigError("model.modes", "must be at least 1");
  if (degree < 1 || degree > 10) throw ConfigError("model.degree", "must lie in [1, 10]");
  if (encoder_width < 1) throw ConfigError("model.encoder_width", "must be positive");
  if (trunk_width < 1) throw ConfigError("model.trunk_width", "must be positive");
  if (!(feature_scale > 0.0)) throw ConfigError("model.feature_scale", "must be positive");
  if (!(velocity_scale > 0.0)) throw ConfigError("model.velocity_scale", "must be positive");
  if (!(deviation_scale > 0.0)) throw ConfigError("model.deviation_scale", "must be positive");
  if (!(output_scale > 0.0)) throw ConfigError("model.output_scale", "must be positive");
  if (!(min_sigma > 0.0) || !(max_sigma > min_sigma)) {
    throw ConfigError("model.min_sigma", "need 0 < min_sigma < max_sigma");
  }
}

ParamLayout ParamLayout::for_config(const PredictorConfig& c) {
  ParamLayout l;
  std::size_t at = 0;
  auto slot = [&at](std::size_t rows, std::size_t cols) {
    DenseSlot s{at, at + rows * cols, rows, cols};
    at += rows * cols + rows;
    return s;
  };
  const std::size_t e = c.encoder_width;
  const std::size_t w = c.trunk_width;
  l.self1 = slot(e, c.self_inputs());
  l.self2 = slot(e, e);
  l.nbr1 = slot(e, c.neighbor_inputs());
  l.nbr2 = slot(e, e);
  l.query1 = slot(e, c.query_inputs());
  l.query2 = slot(e, e);
  l.trunk1 = slot(w, 3 * e);
  l.trunk2 = slot(w, w);
  l.head = slot(c.head_outputs(), w);
  l.size = at;
  return l;
}

PredictorParams::PredictorParams(PredictorConfig config)
    : config_(std::move(config)), layout_(ParamLayout::for_config(config_)),
      weights_(Vec::Zero(static_cast<Eigen::Index>(layout_.size))) {
  config_.validate();
}

PredictorParams::PredictorParams(PredictorConfig config, Eigen::VectorXd weights)
    : config_(std::move(config)), layout_(ParamLayout::for_config(config_)), weights_(std::move(weights)) {
  config_.validate();
  if (static_cast<std::size_t>(weights_.size()) != layout_.size) {
    throw DimensionError("weight vector has " + std::to_string(weights_.size()) + " entries, config needs " +
                         std::to_string(layout_.size));
  }
}

PredictorParams PredictorParams::initialize(const PredictorConfig& config, std::uint64_t seed) {
  PredictorParams p(config);
  Rng rng(seed);
  auto fill = [&](const DenseSlot& s, double gain) {
    std::normal_distribution<double> n(0.0, gain / std::sqrt(static_cast<double>(s.cols)));
    for (std::size_t i = 0; i < s.rows * s.cols; ++i) p.weights_(static_cast<Eigen::Index>(s.weight + i)) = n(rng);
  };
  const auto& L = p.layout_;
  const double he = std::sqrt(2.0);
  for (const auto* s : {&L.self1, &L.self2, &L.nbr1, &L.nbr2, &L.query1, &L.trunk1, &L.trunk2}) fill(*s, he);
  fill(L.query2, 1.0);
  fill(L.head, 0.1);

  // Mode k starts as a constant acceleration between -3 and +1.5 m/s^2.
  const auto hi = head_index(config);
  const double horizon = static_cast<double>(config.future_steps) * config.dt;
  for (std::size_t k = 0; k < config.modes; ++k) {
    const double accel =
        config.modes > 1 ? -3.0 + 4.5 * static_cast<double>(k) / static_cast<double>(config.modes - 1) : 0.0;
    const auto at = static_cast<Eigen::Index>(L.head.bias + hi.coef(k, 0, config.degree >= 2 ? 2 : 1));
    p.weights_(at) = 0.5 * accel * horizon * horizon / config.output_scale;  // offset reached at the horizon
    // Deviations start at 0.3 m + 0.4 m per second of lookahead.
    for (std::size_t t = 0; t < config.future_steps; ++t) {
      const double sigma = std::clamp(0.3 + 0.4 * static_cast<double>(t + 1) * config.dt, config.min_sigma,
                                      config.max_sigma);
      for (std::size_t axis = 0; axis < 2; ++axis) {
        p.weights_(static_cast<Eigen::Index>(L.head.bias + hi.log_sigma(k, t, axis))) = std::log(sigma);
      }
    }
  }
  return p;
}

Point2 AgentFrame::to_local(Point2 world) const { return rotate_quarters(world - origin, -quarter_turns); }
Point2 AgentFrame::to_world(Point2 local) const { return rotate_quarters(local, quarter_turns) + origin; }
Point2 AgentFrame::vector_to_local(Point2 v) const { return rotate_quarters(v, -quarter_turns); }
Point2 AgentFrame::vector_to_world(Point2 v) const { return rotate_quarters(v, quarter_turns); }

AgentFrame frame_of(const AgentTrack& track) {
  AgentFrame f;
  f.origin = track.current_position();
  const auto& now = track.past.back();
  Point2 dir{now.vx, now.vy};
  if (std::hypot(dir.x, dir.y) < 0.5) dir = now.position() - track.past.front().position();
  if (std::hypot(dir.x, dir.y) >= 0.5) {
    const double turns = std::atan2(dir.y, dir.x) / (0.5 * std::numbers::pi);
    f.quarter_turns = static_cast<int>(((std::lround(turns) % 4) + 4) % 4);
  }
  return f;
}

TargetInputs build_inputs(const PredictorConfig& c, const Scene& scene, int target_id,
                          const OptionalQuery& query) {
  const AgentTrack& target = scene.agent(target_id);
  check_past(c, target);
  if (query) {
    if (query->agent_id == target_id) throw ArgumentError("query agent equals the target agent");
    scene.agent(query->agent_id);
    if (query->plan.horizon() != c.future_steps) {
      throw DimensionError("query plan horizon " + std::to_string(query->plan.horizon()) +
                           " != model horizon " + std::to_string(c.future_steps));
    }
  }
  TargetInputs in;
  in.frame = frame_of(target);
  in.velocity = in.frame.vector_to_local({target.past.back().vx, target.past.back().vy});
  in.self.resize(static_cast<Eigen::Index>(c.self_inputs()));
  write_track(c, in.frame, target, 0.25 * target.lane_index, in.self);

  in.neighbors = Mat::Zero(static_cast<Eigen::Index>(c.neighbor_inputs()),
                           static_cast<Eigen::Index>(scene.agents.size() - 1));
  Eigen::Index col = 0;
  Eigen::Index query_col = -1;
  for (const auto& a : scene.agents) {
    if (a.agent_id == target_id) continue;
    check_past(c, a);
    if (query && a.agent_id == query->agent_id) query_col = col;
    write_track(c, in.frame, a, 0.25 * (a.lane_index - target.lane_index), in.neighbors.col(col++));
  }

  if (query) {
    // Plan positions, then the plan's offset from the query agent's own
    // constant-velocity path, both in the target frame, then where the query
    // agent is right now relative to the target.
    const AgentTrack& qa = scene.agent(query->agent_id);
    const auto& now = qa.past.back();
    const auto T = static_cast<Eigen::Index>(c.future_steps);
    Vec q(static_cast<Eigen::Index>(c.query_inputs()));
    for (Eigen::Index t = 0; t < T; ++t) {
      const Point2 p = query->plan.states()[static_cast<std::size_t>(t)];
      const Point2 l = in.frame.to_local(p);
      const double tau = static_cast<double>(t + 1) * c.dt;
      const Point2 dev = in.frame.vector_to_local(p - Point2{now.x + now.vx * tau, now.y + now.vy * tau});
      q(2 * t) = l.x / c.feature_scale;
      q(2 * t + 1) = l.y / c.feature_scale;
      q(2 * T + 2 * t) = dev.x / c.deviation_scale;
      q(2 * T + 2 * t + 1) = dev.y / c.deviation_scale;
    }
    const Point2 rel = in.frame.to_local(now.position());
    const Point2 vel = in.frame.vector_to_local({now.vx, now.vy});
    q(4 * T) = rel.x / c.feature_scale;
    q(4 * T + 1) = rel.y / c.feature_scale;
    q(4 * T + 2) = vel.x / c.velocity_scale;
    q(4 * T + 3) = vel.y / c.velocity_scale;
    q(4 * T + 4) = static_cast<double>(qa.lane_index - target.lane_index);

    const auto base = static_cast<Eigen::Index>(4 * c.past_steps + 1);
    in.neighbors.col(query_col).segment(base, 2 * T) = q.segment(2 * T, 2 * T);
    in.neighbors(base + 2 * T, query_col) = 1.0;
    in.query = std::move(q);
  }
  return in;
}

TrajectoryGMM predict(const PredictorParams& params, const Scene& scene, int target_id,
                      const OptionalQuery& query) {
  const auto in = build_inputs(params.config(), scene, target_id, query);
  const auto f = run_forward(params, in);
  return to_gmm(decode(params.config(), f.out, poly_basis(params.config()), in.velocity), in.frame);
}

Eigen::VectorXd encode_query(const PredictorParams& params, const Eigen::VectorXd& query_inputs) {
  const auto& L = params.layout();
  const Vec h1 = relu(weight(params, L.query1) * query_inputs + bias(params, L.query1));
  return weight(params, L.query2) * h1 + bias(params, L.query2);
}

TrajectoryGMM predict_with_query_embedding(const PredictorParams& params, const Scene& scene,
                                           int target_id, const Eigen::VectorXd& embedding) {
  if (static_cast<std::size_t>(embedding.size()) != params.config().encoder_width) {
    throw DimensionError("query embedding width mismatch");
  }
  const auto in = build_inputs(params.config(), scene, target_id, std::nullopt);
  const auto f = run_forward(params, in, embedding);
  return to_gmm(decode(params.config(), f.out, poly_basis(params.config()), in.velocity), in.frame);
}

std::size_t closest_mode(const TrajectoryGMM& dist, const Trajectory& gt) {
  if (gt.horizon() != dist.horizon()) throw DimensionError("ground truth horizon mismatch");
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < dist.mode_count(); ++k) {
    double d = 0.0;
    for (std::size_t t = 0; t < gt.horizon(); ++t) d += distance(gt[t], dist.mode(k).waypoints[t].mean);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

LossAndGrad nll_loss(const PredictorParams& params, const Scene& scene, int target_id,
                     const OptionalQuery& query, const Trajectory& gt) {
  const auto& c = params.config();
  if (gt.horizon() != c.future_steps) throw DimensionError("ground truth horizon mismatch");
  const auto in = build_inputs(c, scene, target_id, query);
  const auto f = run_forward(params, in);
  const auto head = decode(c, f.out, poly_basis(c), in.velocity);
  const auto term = nll_term(c, head, in.frame, gt);
  LossAndGrad r;
  r.loss = term.loss;
  r.grad = Vec::Zero(static_cast<Eigen::Index>(params.size()));
  run_backward(params, f, term.d_out, r.grad);
  return r;
}

OverlapResult overlap_loss(const TrajectoryGMM& dist_a, const TrajectoryGMM& dist_b, double alpha) {
  if (dist_a.horizon() != dist_b.horizon()) throw DimensionError("overlap needs equal horizons");
  if (!(alpha > 0.0)) throw ArgumentError("overlap alpha must be positive");
  const std::size_t T = dist_a.horizon();
  OverlapResult r;
  r.grad_means_a.assign(dist_a.mode_count(), std::vector<Point2>(T));
  r.grad_means_b.assign(dist_b.mode_count(), std::vector<Point2>(T));
  r.grad_probs_a.assign(dist_a.mode_count(), 0.0);
  r.grad_probs_b.assign(dist_b.mode_count(), 0.0);
  for (std::size_t i = 0; i < dist_a.mode_count(); ++i) {
    const auto& ma = dist_a.mode(i);
    for (std::size_t j = 0; j < dist_b.mode_count(); ++j) {
      const auto& mb = dist_b.mode(j);
      double best = -1.0;
      std::size_t best_t = 0;
      for (std::size_t t = 0; t < T; ++t) {
        const Point2 d = ma.waypoints[t].mean - mb.waypoints[t].mean;
        const double e = std::exp(-(d.x * d.x + d.y * d.y) / alpha);
        if (e > best) {
          best = e;
          best_t = t;
        }
      }
      const double w = ma.prob * mb.prob;
      r.loss += w * best;
      r.grad_probs_a[i] += mb.prob * best;
      r.grad_probs_b[j] += ma.prob * best;
      const Point2 d = ma.waypoints[best_t].mean - mb.waypoints[best_t].mean;
      const double s = w * best * (-2.0 / alpha);
      r.grad_means_a[i][best_t] = r.grad_means_a[i][best_t] + Point2{s * d.x, s * d.y};
      r.grad_means_b[j][best_t] = r.grad_means_b[j][best_t] - Point2{s * d.x, s * d.y};
    }
  }
  return r;
}

LossAndGrad scene_loss(const PredictorParams& params, const Scene& scene, std::optional<int> query_agent,
                       const LossWeights& weights) {
  const auto& c = params.config();
  const Mat basis = poly_basis(c);
  OptionalQuery query;
  if (query_agent) query = ConditionalQuery{*query_agent, scene.agent(*query_agent).future};

  struct Target {
    TargetInputs in;
    Forward fwd;
    Head head;
    Vec d_out;
  };
  std::vector<Target> targets;
  for (const auto& a : scene.agents) {
    if (query_agent && a.agent_id == *query_agent) continue;
    Target t;
    t.in = build_inputs(c, scene, a.agent_id, query);
    t.fwd = run_forward(params, t.in);
    t.head = decode(c, t.fwd.out, basis, t.in.velocity);
    targets.push_back(std::move(t));
  }

  LossAndGrad r;
  r.grad = Vec::Zero(static_cast<Eigen::Index>(params.size()));
  if (targets.empty()) return r;

  std::size_t ti = 0;
  const double nll_scale = 1.0 / static_cast<double>(targets.size());
  for (const auto& a : scene.agents) {
    if (query_agent && a.agent_id == *query_agent) continue;
    auto& t = targets[ti++];
    auto term = nll_term(c, t.head, t.in.frame, a.future);
    r.loss += nll_scale * term.loss;
    t.d_out = nll_scale * term.d_out;
  }

  const std::size_t n = targets.size();
  if (n >= 2 && weights.overlap_weight > 0.0) {
    const double scale = weights.overlap_weight / static_cast<double>(n * (n - 1) / 2);
    std::vector<TrajectoryGMM> world;
    for (const auto& t : targets) world.push_back(to_gmm(t.head, t.in.frame));
    const auto K = static_cast<Eigen::Index>(c.modes);
    const auto T = static_cast<Eigen::Index>(c.future_steps);
    std::vector<Mat> dmx(n, Mat::Zero(K, T)), dmy(n, Mat::Zero(K, T));
    std::vector<Vec> dp(n, Vec::Zero(K));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const auto ov = overlap_loss(world[i], world[j], weights.overlap_alpha);
        r.loss += scale * ov.loss;
        auto accumulate = [&](std::size_t who, const std::vector<std::vector<Point2>>& gm,
                              const std::vector<double>& gp) {
          for (Eigen::Index k = 0; k < K; ++k) {
            dp[who](k) += scale * gp[static_cast<std::size_t>(k)];
            for (Eigen::Index t = 0; t < T; ++t) {
              const Point2 g = gm[static_cast<std::size_t>(k)][static_cast<std::size_t>(t)];
              const Point2 local = targets[who].in.frame.vector_to_local(g);
              dmx[who](k, t) += scale * local.x;
              dmy[who](k, t) += scale * local.y;
            }
          }
        };
        accumulate(i, ov.grad_means_a, ov.grad_probs_a);
        accumulate(j, ov.grad_means_b, ov.grad_probs_b);
      }
    }
    for (std::size_t i = 0; i < n; ++i) add_mean_prob_grad(c, targets[i].head, basis, dmx[i], dmy[i], dp[i], targets[i].d_out);
  }

  for (const auto& t : targets) run_backward(params, t.fwd, t.d_out, r.grad);
  return r;
}

}  // namespace cbp

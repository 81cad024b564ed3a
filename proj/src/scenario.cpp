#include "cbp/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "cbp/errors.hpp"

namespace cbp {
namespace {

constexpr double kHardBrake = 8.0;
constexpr double kWanderTau = 1.5;       // s
constexpr double kWanderMinSpeed = 0.5;  // m/s

// Longitudinal history along a path: s[k], v[k] per state, a[k] applied between k and k+1.
struct PathMotion {
  std::vector<double> s, v, a;

  PathMotion(double s0, double v0) : s{s0}, v{v0} {}

  long last() const { return static_cast<long>(s.size()) - 1; }
  double s_at(long k) const { return s[static_cast<std::size_t>(std::clamp(k, 0L, last()))]; }
  double v_at(long k) const { return v[static_cast<std::size_t>(std::clamp(k, 0L, last()))]; }
  double a_at(long k) const {
    if (k < 0 || k >= static_cast<long>(a.size())) return 0.0;
    return a[static_cast<std::size_t>(k)];
  }

  void step(double accel, double dt, double v_max) {
    const double vn = std::clamp(v.back() + accel * dt, 0.0, v_max);
    a.push_back((vn - v.back()) / dt);
    v.push_back(vn);
    s.push_back(s.back() + vn * dt);
  }
};

// Leader state as perceived delay steps ago, dead-reckoned to the present.
struct Perceived {
  double s;
  double v;
  double a;
};

Perceived perceive(const PathMotion& leader, long k, int delay, double dt) {
  const long seen = std::max(0L, k - delay);
  const double v = leader.v_at(seen);
  return {leader.s_at(seen) + v * static_cast<double>(k - seen) * dt, v, leader.a_at(k - delay)};
}

double follower_law(const IdmParams& p, double own_s, double own_v, const Perceived& leader,
                    double feedforward) {
  const double gap = leader.s - own_s - kVehicleLength;
  const double a = idm_acceleration(p, own_v, gap, own_v - leader.v) + feedforward * leader.a;
  return std::clamp(a, -kHardBrake, p.max_accel);
}

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double gauss(Rng& rng, double sigma) {
  if (sigma <= 0.0) return 0.0;
  return std::normal_distribution<double>(0.0, sigma)(rng);
}

bool coin(Rng& rng, double p) { return std::bernoulli_distribution(p)(rng); }

IdmParams draw_idm(Rng& rng, double desired_speed) {
  IdmParams p;
  p.desired_speed = desired_speed;
  p.max_accel = uniform(rng, 1.0, 2.0);
  p.comfort_decel = uniform(rng, 1.5, 2.5);
  p.time_headway = uniform(rng, 1.0, 1.6);
  p.jam_distance = uniform(rng, 2.0, 3.0);
  return p;
}

// Scripted constant-acceleration segment for free-driving agents.
struct Event {
  long start = -1;
  long end = -1;
  double accel = 0.0;
  double at(long k) const { return (k >= start && k < end) ? accel : 0.0; }
};

// Positions and velocities of one agent over the whole rollout.
struct AgentPath {
  std::vector<Point2> pos;
  std::vector<Point2> vel;
  int lane = 0;
  RoleTag role = RoleTag::independent;
};

AgentPath straight_path(const PathMotion& m, double lane_y, int lane, RoleTag role) {
  AgentPath p;
  p.lane = lane;
  p.role = role;
  for (std::size_t k = 0; k < m.s.size(); ++k) {
    p.pos.push_back({m.s[k], lane_y});
    p.vel.push_back({m.v[k], 0.0});
  }
  return p;
}

class SceneBuilder {
 public:
  SceneBuilder(const SimConfig& c, ScenarioKind kind, std::uint64_t id, std::uint64_t seed)
      : config_(c) {
    scene_.scene_id = id;
    scene_.kind = kind;
    scene_.rng_seed = seed;
    scene_.dt = c.dt;
  }

  void add(const AgentPath& path) {
    AgentTrack t;
    t.agent_id = static_cast<int>(scene_.agents.size());
    t.lane_index = path.lane;
    t.role = path.role;
    const std::size_t h = config_.past_steps;
    const std::size_t n = h + config_.future_steps;
    const auto w = wander(path, n, t.agent_id);
    std::vector<Point2> pos(n), vel(n);
    for (std::size_t k = 0; k < n; ++k) {
      const Point2 v = path.vel[k];
      const double speed = std::hypot(v.x, v.y);
      const Point2 normal = speed > 1e-9 ? Point2{-v.y / speed, v.x / speed} : Point2{0.0, 1.0};
      const std::size_t lo = k == 0 ? 0 : k - 1, hi = std::min(k + 1, n - 1);
      const double wdot = (w[hi] - w[lo]) / (static_cast<double>(hi - lo) * config_.dt);
      pos[k] = {path.pos[k].x + w[k] * normal.x, path.pos[k].y + w[k] * normal.y};
      vel[k] = {v.x + wdot * normal.x, v.y + wdot * normal.y};
    }
    for (std::size_t k = 0; k < h; ++k) t.past.push_back({pos[k].x, pos[k].y, vel[k].x, vel[k].y});
    std::vector<Point2> fut(pos.begin() + static_cast<long>(h), pos.end());
    t.future = Trajectory(std::move(fut), config_.dt);
    scene_.agents.push_back(std::move(t));
  }

  Scene& scene() { return scene_; }

 private:
  // Lane-keeping wander: OU offset across the direction of travel, held while
  // the agent is (nearly) stopped. Own stream so the scripted draws are untouched.
  std::vector<double> wander(const AgentPath& path, std::size_t n, int agent_id) const {
    std::vector<double> w(n, 0.0);
    const double sd = config_.lateral_wander_sigma;
    if (sd == 0.0) return w;
    Rng rng(derive_seed(scene_.rng_seed, 0x5EED0000ULL + static_cast<std::uint64_t>(agent_id)));
    const double phi = std::exp(-config_.dt / kWanderTau);
    w[0] = gauss(rng, sd);
    for (std::size_t k = 1; k < n; ++k) {
      const double step = gauss(rng, sd * std::sqrt(1.0 - phi * phi));
      const Point2 v = path.vel[k];
      w[k] = std::hypot(v.x, v.y) < kWanderMinSpeed ? w[k - 1] : phi * w[k - 1] + step;
    }
    return w;
  }

  const SimConfig& config_;
  Scene scene_;
};

struct Ctx {
  const SimConfig& c;
  Rng& rng;
  std::size_t steps;   // total states
  long now;            // index of the current state
  double past_time;    // seconds from state 0 to now
  int delay;

  double lane_y(int lane) const { return lane * c.lane_width; }
};

// Independent driver: IDM free-road term, white throttle noise, optional scripted event.
struct FreeDriver {
  IdmParams idm;
  PathMotion motion;
  double sigma;
  Event event;

  double accel(long k, Rng& rng, double noise) const {
    return std::clamp(idm_free_acceleration(idm, motion.v.back()) + gauss(rng, sigma) + event.at(k) +
                          gauss(rng, noise),
                      -kHardBrake, idm.max_accel + 2.0);
  }
};

FreeDriver make_free_driver(Ctx& x, double x_now, double speed, bool with_event) {
  FreeDriver d{draw_idm(x.rng, speed + uniform(x.rng, -1.0, 2.0)),
               PathMotion(x_now - speed * x.past_time, speed), x.c.leader_accel_sigma, {}};
  if (with_event && coin(x.rng, 0.3)) {
    const double dt = x.c.dt;
    d.event.start = x.now + static_cast<long>(std::lround(uniform(x.rng, 0.0, 3.5) / dt));
    d.event.end = d.event.start + static_cast<long>(std::lround(uniform(x.rng, 1.0, 2.5) / dt));
    d.event.accel = coin(x.rng, 0.7) ? -uniform(x.rng, 1.5, 3.5) : uniform(x.rng, 0.8, 1.5);
  }
  return d;
}

// Distractors in lanes other than `busy`, placed around x_ref at the current time.
std::vector<FreeDriver> make_distractors(Ctx& x, std::size_t count, std::vector<int>& lanes_out,
                                         const std::vector<int>& free_lanes, double x_ref,
                                         double max_offset) {
  std::vector<int> lanes = free_lanes;
  std::shuffle(lanes.begin(), lanes.end(), x.rng);
  count = std::min(count, lanes.size());
  std::vector<FreeDriver> out;
  for (std::size_t i = 0; i < count; ++i) {
    const double speed = uniform(x.rng, 8.0, 15.0);
    out.push_back(make_free_driver(x, x_ref + uniform(x.rng, -max_offset, max_offset), speed, true));
    lanes_out.push_back(lanes[i]);
  }
  return out;
}

std::size_t distractor_budget(const SimConfig& c, std::size_t used) {
  return used >= c.max_agents ? 0 : std::min(c.max_distractors, c.max_agents - used);
}

void run_free(Ctx& x, std::vector<FreeDriver>& drivers, long k) {
  std::vector<double> acc;
  for (auto& d : drivers) acc.push_back(d.accel(k, x.rng, x.c.accel_noise_sigma));
  for (std::size_t i = 0; i < drivers.size(); ++i) drivers[i].motion.step(acc[i], x.c.dt, x.c.v_max);
}

void emit_distractors(SceneBuilder& b, Ctx& x, const std::vector<FreeDriver>& ds,
                      const std::vector<int>& lanes) {
  for (std::size_t i = 0; i < ds.size(); ++i) {
    b.add(straight_path(ds[i].motion, x.lane_y(lanes[i]), lanes[i], RoleTag::independent));
  }
}

// ---------------------------------------------------------------------------

bool car_follow_attempt(SceneBuilder& b, Ctx& x) {
  const auto& c = x.c;
  const double dt = c.dt;
  const int chain_lane = 1;
  const bool closing = c.prune_layout || coin(x.rng, c.closing_fraction);

  // Leader: free driving with white throttle noise and no restoring term.
  const double v_lead = closing ? uniform(x.rng, 8.0, 12.0) : uniform(x.rng, 8.0, 15.0);
  std::vector<IdmParams> idm;
  std::vector<double> feedforward;
  std::vector<PathMotion> chain;
  std::vector<double> speeds;

  double x_now = 0.0;
  chain.emplace_back(x_now - v_lead * x.past_time, v_lead);
  speeds.push_back(v_lead);
  idm.push_back(draw_idm(x.rng, v_lead));
  feedforward.push_back(0.0);

  const std::size_t followers =
      (c.prune_layout || c.max_agents < 3 || !coin(x.rng, 0.4)) ? 1 : 2;
  for (std::size_t f = 0; f < followers; ++f) {
    const double prev_v = speeds.back();
    double v = 0.0;
    double gap = 0.0;
    IdmParams p;
    if (closing && f == 0) {
      v = prev_v + uniform(x.rng, 2.0, 5.0);
      p = draw_idm(x.rng, v + uniform(x.rng, 2.0, 4.0));
      gap = c.prune_layout ? uniform(x.rng, 24.0, 32.0) : uniform(x.rng, 20.0, 38.0);
    } else {
      v = std::max(1.0, prev_v + uniform(x.rng, -1.0, 1.5));
      p = draw_idm(x.rng, std::max(v, prev_v) + uniform(x.rng, 3.0, 6.0));
      gap = idm_equilibrium_gap(p, prev_v) * uniform(x.rng, 0.85, 1.5);
    }
    x_now -= gap + kVehicleLength;
    chain.emplace_back(x_now - v * x.past_time, v);
    speeds.push_back(v);
    idm.push_back(p);
    feedforward.push_back(uniform(x.rng, 0.8, 1.0));
  }
  const double follower_x_now = x_now;

  std::vector<int> lanes;
  std::size_t n_distract = 0;
  if (c.prune_layout) {
    n_distract = 3;
  } else {
    const std::size_t budget = distractor_budget(c, chain.size());
    n_distract = std::uniform_int_distribution<std::size_t>(0, budget)(x.rng);
  }
  auto distractors =
      make_distractors(x, n_distract, lanes, {0, 2, 3}, follower_x_now, c.prune_layout ? 14.0 : 25.0);

  for (long k = 0; k + 1 < static_cast<long>(x.steps); ++k) {
    std::vector<double> acc(chain.size());
    acc[0] = std::clamp(gauss(x.rng, c.leader_accel_sigma) + gauss(x.rng, c.accel_noise_sigma),
                        -kHardBrake, 3.0);
    for (std::size_t i = 1; i < chain.size(); ++i) {
      const auto seen = perceive(chain[i - 1], k, x.delay, dt);
      acc[i] = follower_law(idm[i], chain[i].s.back(), chain[i].v.back(), seen, feedforward[i]) +
               gauss(x.rng, c.accel_noise_sigma);
    }
    for (std::size_t i = 0; i < chain.size(); ++i) chain[i].step(acc[i], dt, c.v_max);
    run_free(x, distractors, k);
  }

  for (std::size_t i = 0; i < chain.size(); ++i) {
    RoleTag role = i == 0 ? RoleTag::leader : RoleTag::follower;
    if (c.prune_layout && i == 1) role = RoleTag::av;
    b.add(straight_path(chain[i], x.lane_y(chain_lane), chain_lane, role));
  }
  emit_distractors(b, x, distractors, lanes);

  if (c.prune_layout) {
    // The leader must be farther from the av than every distractor right now.
    const auto& scene = b.scene();
    const Point2 av = scene.agents[1].current_position();
    const double lead_d = distance(av, scene.agents[0].current_position());
    for (std::size_t i = 2; i < scene.agents.size(); ++i) {
      if (distance(av, scene.agents[i].current_position()) >= lead_d - 1.0) return false;
    }
  }
  return true;
}

void cut_in(SceneBuilder& b, Ctx& x) {
  const auto& c = x.c;
  const double dt = c.dt;
  const int own_lane = 0;
  const int cut_lane = 1;

  const double v_f = uniform(x.rng, 10.0, 15.0);
  IdmParams pf = draw_idm(x.rng, v_f + uniform(x.rng, 0.0, 2.0));
  PathMotion follower(-v_f * x.past_time, v_f);
  const double ff = uniform(x.rng, 0.8, 1.0);

  const double v_c = v_f - uniform(x.rng, 1.5, 4.0);
  const double lead = uniform(x.rng, 8.0, 18.0) + kVehicleLength;
  IdmParams pc = draw_idm(x.rng, v_c);
  PathMotion cutter(lead - v_c * x.past_time, v_c);

  const bool cuts = coin(x.rng, 0.5);
  const long cut_start = x.now + static_cast<long>(std::lround(uniform(x.rng, 0.2, 2.0) / dt));
  const long cut_len = static_cast<long>(std::lround(uniform(x.rng, 2.0, 3.0) / dt));
  const double y_from = x.lane_y(cut_lane);
  const double y_to = x.lane_y(own_lane);
  auto lateral = [&](long k) {
    if (!cuts || k <= cut_start) return y_from;
    const double u = std::min(1.0, static_cast<double>(k - cut_start) / static_cast<double>(cut_len));
    return y_from + (y_to - y_from) * 0.5 * (1.0 - std::cos(std::numbers::pi * u));
  };

  std::vector<int> lanes;
  const std::size_t budget = distractor_budget(c, 2);
  auto distractors = make_distractors(x, std::uniform_int_distribution<std::size_t>(0, std::min<std::size_t>(budget, 2))(x.rng),
                                      lanes, {2, 3}, 0.0, 25.0);

  for (long k = 0; k + 1 < static_cast<long>(x.steps); ++k) {
    const long seen = std::max(0L, k - x.delay);
    const bool in_lane = std::abs(lateral(seen) - y_to) < 0.75 * c.lane_width;
    double af = 0.0;
    if (in_lane && cutter.s_at(seen) > follower.s.back()) {
      af = follower_law(pf, follower.s.back(), follower.v.back(), perceive(cutter, k, x.delay, dt), ff);
    } else {
      af = std::clamp(idm_free_acceleration(pf, follower.v.back()), -kHardBrake, pf.max_accel);
    }
    af += gauss(x.rng, c.accel_noise_sigma);
    const double ac = idm_free_acceleration(pc, cutter.v.back()) + gauss(x.rng, 0.2) +
                      gauss(x.rng, c.accel_noise_sigma);
    follower.step(af, dt, c.v_max);
    cutter.step(ac, dt, c.v_max);
    run_free(x, distractors, k);
  }

  b.add(straight_path(follower, y_to, own_lane, RoleTag::follower));
  AgentPath cp = straight_path(cutter, y_from, cut_lane, RoleTag::leader);
  for (std::size_t k = 0; k < cp.pos.size(); ++k) {
    const long kk = static_cast<long>(k);
    cp.pos[k].y = lateral(kk);
    const long prev = std::max(0L, kk - 1);
    const long next = std::min(static_cast<long>(cp.pos.size()) - 1, kk + 1);
    cp.vel[k].y = (lateral(next) - lateral(prev)) / (static_cast<double>(next - prev) * dt);
  }
  b.add(cp);
  emit_distractors(b, x, distractors, lanes);
}

void yield_turn(SceneBuilder& b, Ctx& x) {
  const auto& c = x.c;
  const double dt = c.dt;
  const double radius = c.lane_width;
  const double conflict_x = 0.0;

  // A: straight through, lane 0, heading +x. Latent intent: proceed or stop short.
  const double v_a = uniform(x.rng, 8.0, 12.0);
  const double d_a = uniform(x.rng, 18.0, 38.0);
  IdmParams pa = draw_idm(x.rng, v_a);
  PathMotion a(conflict_x - d_a - v_a * x.past_time, v_a);
  const bool a_stops = coin(x.rng, 0.5);
  const long stop_start = x.now + std::uniform_int_distribution<long>(0, 5)(x.rng);
  const double stop_x = conflict_x - 6.0;

  // B: oncoming in lane 1, turning left across lane 0; s measured along its path.
  const double v_b = uniform(x.rng, 4.0, 7.0);
  IdmParams pb = draw_idm(x.rng, uniform(x.rng, 6.0, 9.0));
  const double s_turn = uniform(x.rng, 8.0, 18.0) + v_b * x.past_time;
  PathMotion bm(0.0, v_b);
  const double x_start = conflict_x + radius + s_turn;
  bool go = false;

  std::vector<int> lanes;
  const std::size_t budget = distractor_budget(c, 2);
  auto distractors = make_distractors(x, std::uniform_int_distribution<std::size_t>(0, std::min<std::size_t>(budget, 1))(x.rng),
                                      lanes, {2}, conflict_x - 20.0, 20.0);

  for (long k = 0; k + 1 < static_cast<long>(x.steps); ++k) {
    double aa = 0.0;
    if (a_stops && k >= stop_start) {
      const double remaining = std::max(1.0, stop_x - a.s.back());
      aa = -std::min(6.0, a.v.back() * a.v.back() / (2.0 * remaining));
    } else {
      aa = idm_free_acceleration(pa, a.v.back()) + gauss(x.rng, 0.2);
    }
    aa += gauss(x.rng, c.accel_noise_sigma);

    const long seen = std::max(0L, k - x.delay);
    if (!go) {
      const bool passed = a.s_at(seen) > conflict_x + 2.0;
      const bool braking = a.a_at(seen - 1) < -0.8 || a.v_at(seen) < 1.0;
      go = passed || braking;
    }
    double ab = 0.0;
    if (go) {
      ab = idm_free_acceleration(pb, bm.v.back());
    } else {
      const double gap = s_turn + pb.jam_distance - bm.s.back();
      ab = idm_acceleration(pb, bm.v.back(), gap, bm.v.back());
    }
    ab = std::clamp(ab, -kHardBrake, pb.max_accel) + gauss(x.rng, c.accel_noise_sigma);

    a.step(aa, dt, c.v_max);
    bm.step(ab, dt, c.v_max);
    run_free(x, distractors, k);
  }

  b.add(straight_path(a, x.lane_y(0), 0, RoleTag::leader));

  AgentPath bp;
  bp.lane = 1;
  bp.role = RoleTag::follower;
  const double arc = 0.5 * std::numbers::pi * radius;
  const Point2 center{conflict_x + radius, x.lane_y(1) - radius};
  for (std::size_t k = 0; k < bm.s.size(); ++k) {
    const double s = bm.s[k];
    const double v = bm.v[k];
    if (s < s_turn) {
      bp.pos.push_back({x_start - s, x.lane_y(1)});
      bp.vel.push_back({-v, 0.0});
    } else if (s < s_turn + arc) {
      const double phi = 0.5 * std::numbers::pi + (s - s_turn) / radius;
      bp.pos.push_back({center.x + radius * std::cos(phi), center.y + radius * std::sin(phi)});
      bp.vel.push_back({-v * std::sin(phi), v * std::cos(phi)});
    } else {
      bp.pos.push_back({conflict_x, center.y - (s - s_turn - arc)});
      bp.vel.push_back({0.0, -v});
    }
  }
  b.add(bp);
  emit_distractors(b, x, distractors, lanes);
}

void independent(SceneBuilder& b, Ctx& x) {
  const auto& c = x.c;
  const std::size_t n =
      std::uniform_int_distribution<std::size_t>(2, std::min<std::size_t>(4, c.max_agents))(x.rng);
  std::vector<int> lanes;
  auto drivers = make_distractors(x, n, lanes, {0, 1, 2, 3}, 0.0, 30.0);
  for (long k = 0; k + 1 < static_cast<long>(x.steps); ++k) run_free(x, drivers, k);
  emit_distractors(b, x, drivers, lanes);
}

void confounded_stop(SceneBuilder& b, Ctx& x) {
  const auto& c = x.c;
  const double dt = c.dt;
  const long stop_k = x.now + static_cast<long>(std::lround(uniform(x.rng, 0.4, 3.0) / dt));
  b.scene().scripted_stop_time = static_cast<double>(stop_k - x.now) * dt;

  struct Braker {
    PathMotion m;
    double decel;
  };
  std::vector<Braker> agents;
  for (int lane = 0; lane < 2; ++lane) {
    const double v = uniform(x.rng, 8.0, 14.0);
    agents.push_back({PathMotion(uniform(x.rng, -8.0, 8.0) - v * x.past_time, v), uniform(x.rng, 2.0, 4.0)});
  }
  std::vector<int> lanes;
  const std::size_t budget = distractor_budget(c, 2);
  auto distractors = make_distractors(x, std::uniform_int_distribution<std::size_t>(0, std::min<std::size_t>(budget, 1))(x.rng),
                                      lanes, {2, 3}, 0.0, 25.0);

  for (long k = 0; k + 1 < static_cast<long>(x.steps); ++k) {
    std::vector<double> acc;
    for (auto& ag : agents) {
      const double base = k >= stop_k ? -ag.decel : 0.0;
      acc.push_back(base + gauss(x.rng, 0.1) + gauss(x.rng, c.accel_noise_sigma));
    }
    for (std::size_t i = 0; i < agents.size(); ++i) agents[i].m.step(acc[i], dt, c.v_max);
    run_free(x, distractors, k);
  }
  for (int lane = 0; lane < 2; ++lane) {
    b.add(straight_path(agents[static_cast<std::size_t>(lane)].m, x.lane_y(lane), lane,
                        RoleTag::independent));
  }
  emit_distractors(b, x, distractors, lanes);
}

}  // namespace

// ---------------------------------------------------------------------------

std::string to_string(ScenarioKind kind) {
  switch (kind) {
    case ScenarioKind::car_follow: return "car_follow";
    case ScenarioKind::cut_in: return "cut_in";
    case ScenarioKind::yield_turn: return "yield_turn";
    case ScenarioKind::independent: return "independent";
    case ScenarioKind::confounded_stop: return "confounded_stop";
  }
  return "unknown";
}

std::string to_string(RoleTag role) {
  switch (role) {
    case RoleTag::leader: return "leader";
    case RoleTag::follower: return "follower";
    case RoleTag::independent: return "independent";
    case RoleTag::av: return "av";
  }
  return "unknown";
}

ScenarioKind parse_scenario_kind(const std::string& s) {
  for (auto k : kAllScenarioKinds) {
    if (to_string(k) == s) return k;
  }
  throw ArgumentError("unknown scenario kind '" + s + "'");
}

RoleTag parse_role_tag(const std::string& s) {
  for (auto r : {RoleTag::leader, RoleTag::follower, RoleTag::independent, RoleTag::av}) {
    if (to_string(r) == s) return r;
  }
  throw ArgumentError("unknown role tag '" + s + "'");
}

const AgentTrack& Scene::agent(int agent_id) const { return agents[index_of(agent_id)]; }

std::size_t Scene::index_of(int agent_id) const {
  for (std::size_t i = 0; i < agents.size(); ++i) {
    if (agents[i].agent_id == agent_id) return i;
  }
  throw LookupError("scene " + std::to_string(scene_id) + " has no agent " + std::to_string(agent_id));
}

std::vector<int> Scene::agent_ids() const {
  std::vector<int> ids;
  for (const auto& a : agents) ids.push_back(a.agent_id);
  return ids;
}

bool Scene::causally_linked(int a, int b) const {
  if (a == b) return false;
  return agent(a).role != RoleTag::independent && agent(b).role != RoleTag::independent;
}

std::optional<int> Scene::av_id() const {
  for (const auto& a : agents) {
    if (a.role == RoleTag::av) return a.agent_id;
  }
  return std::nullopt;
}

Scene Scene::with_agents(const std::vector<int>& keep_ids) const {
  Scene out = *this;
  out.agents.clear();
  for (const auto& a : agents) {
    if (std::find(keep_ids.begin(), keep_ids.end(), a.agent_id) != keep_ids.end()) out.agents.push_back(a);
  }
  return out;
}

Scene Scene::translated(Point2 offset) const {
  Scene out = *this;
  for (auto& a : out.agents) {
    for (auto& p : a.past) {
      p.x += offset.x;
      p.y += offset.y;
    }
    a.future = a.future.translated(offset);
  }
  return out;
}

double ScenarioMix::weight(ScenarioKind kind) const {
  switch (kind) {
    case ScenarioKind::car_follow: return car_follow;
    case ScenarioKind::cut_in: return cut_in;
    case ScenarioKind::yield_turn: return yield_turn;
    case ScenarioKind::independent: return independent;
    case ScenarioKind::confounded_stop: return confounded_stop;
  }
  return 0.0;
}

double ScenarioMix::total() const {
  return car_follow + cut_in + yield_turn + independent + confounded_stop;
}

void SimConfig::validate() const {
  if (past_steps < 2) throw ConfigError("past_steps", "must be at least 2");
  if (future_steps < 1) throw ConfigError("future_steps", "must be at least 1");
  if (!(dt > 0.0)) throw ConfigError("dt", "must be positive");
  if (max_agents < 2) throw ConfigError("max_agents", "must be at least 2");
  for (auto k : kAllScenarioKinds) {
    if (mix.weight(k) < 0.0) throw ConfigError("mix." + to_string(k), "must be non-negative");
  }
  if (std::abs(mix.total() - 1.0) > 1e-9) {
    throw ConfigError("mix", "proportions sum to " + std::to_string(mix.total()) + ", expected 1");
  }
  if (accel_noise_sigma < 0.0) throw ConfigError("accel_noise_sigma", "must be non-negative");
  if (leader_accel_sigma < 0.0) throw ConfigError("leader_accel_sigma", "must be non-negative");
  if (reaction_delay < 0.0) throw ConfigError("reaction_delay", "must be non-negative");
  if (!(v_max > 0.0)) throw ConfigError("v_max", "must be positive");
  if (!(lane_width > 0.0)) throw ConfigError("lane_width", "must be positive");
  if (!(lateral_wander_sigma >= 0.0)) throw ConfigError("lateral_wander_sigma", "must be non-negative");
  if (closing_fraction < 0.0 || closing_fraction > 1.0) {
    throw ConfigError("closing_fraction", "must lie in [0, 1]");
  }
  if (prune_layout && max_agents < 5) throw ConfigError("max_agents", "pruning layout needs 5 agents");
}

int SimConfig::delay_steps() const { return static_cast<int>(std::lround(reaction_delay / dt)); }

double idm_free_acceleration(const IdmParams& p, double speed) {
  const double r = speed / p.desired_speed;
  return p.max_accel * (1.0 - r * r * r * r);
}

double idm_acceleration(const IdmParams& p, double speed, double gap, double closing_speed) {
  const double desired =
      p.jam_distance + std::max(0.0, speed * p.time_headway +
                                         speed * closing_speed /
                                             (2.0 * std::sqrt(p.max_accel * p.comfort_decel)));
  const double g = std::max(gap, 0.1);
  return idm_free_acceleration(p, speed) - p.max_accel * (desired / g) * (desired / g);
}

double idm_equilibrium_gap(const IdmParams& p, double speed) {
  const double r = speed / p.desired_speed;
  const double free = 1.0 - r * r * r * r;
  if (free <= 0.0) throw ArgumentError("no equilibrium gap at or above the desired speed");
  return (p.jam_distance + speed * p.time_headway) / std::sqrt(free);
}

CarFollowRollout simulate_car_follow_pair(const IdmParams& follower, double leader_speed,
                                          double follower_speed, double gap, double leader_sigma,
                                          double noise_sigma, double feedforward,
                                          std::size_t steps, double dt, int delay_steps,
                                          std::uint64_t seed) {
  Rng rng(seed);
  PathMotion lead(gap + kVehicleLength, leader_speed);
  PathMotion foll(0.0, follower_speed);
  CarFollowRollout out;
  for (long k = 0; k + 1 < static_cast<long>(steps); ++k) {
    const double al = gauss(rng, leader_sigma) + gauss(rng, noise_sigma);
    const double af = follower_law(follower, foll.s.back(), foll.v.back(),
                                   perceive(lead, k, delay_steps, dt), feedforward) +
                      gauss(rng, noise_sigma);
    out.gap.push_back(lead.s.back() - foll.s.back() - kVehicleLength);
    lead.step(al, dt, 1e9);
    foll.step(af, dt, 1e9);
  }
  out.leader_accel = lead.a;
  out.follower_accel = foll.a;
  return out;
}

std::vector<double> longitudinal_accelerations(const AgentTrack& track, double dt) {
  std::vector<Point2> pos;
  for (const auto& p : track.past) pos.push_back(p.position());
  for (const auto& p : track.future.states()) pos.push_back(p);
  const auto& now = track.past.back();
  const double speed = std::hypot(now.vx, now.vy);
  const Point2 dir = speed > 1e-9 ? Point2{now.vx / speed, now.vy / speed} : Point2{1.0, 0.0};
  std::vector<double> out;
  for (std::size_t i = 1; i + 1 < pos.size(); ++i) {
    const double ax = (pos[i + 1].x - 2.0 * pos[i].x + pos[i - 1].x) / (dt * dt);
    const double ay = (pos[i + 1].y - 2.0 * pos[i].y + pos[i - 1].y) / (dt * dt);
    out.push_back(ax * dir.x + ay * dir.y);
  }
  return out;
}

Scene generate_scene(const SimConfig& config, ScenarioKind kind, std::uint64_t scene_id,
                     std::uint64_t master_seed) {
  const std::uint64_t seed = derive_seed(master_seed, scene_id);
  Rng rng(seed);
  const std::size_t steps = config.past_steps + config.future_steps;
  Ctx ctx{config, rng, steps, static_cast<long>(config.past_steps) - 1,
          static_cast<double>(config.past_steps - 1) * config.dt, config.delay_steps()};
  for (int attempt = 0;; ++attempt) {
    SceneBuilder b(config, kind, scene_id, seed);
    switch (kind) {
      case ScenarioKind::car_follow:
        if (!car_follow_attempt(b, ctx) && attempt < 200) continue;
        break;
      case ScenarioKind::cut_in: cut_in(b, ctx); break;
      case ScenarioKind::yield_turn: yield_turn(b, ctx); break;
      case ScenarioKind::independent: independent(b, ctx); break;
      case ScenarioKind::confounded_stop: confounded_stop(b, ctx); break;
    }
    return std::move(b.scene());
  }
}

std::vector<std::size_t> kind_counts(const ScenarioMix& mix, std::size_t total) {
  const double sum = mix.total();
  std::vector<std::size_t> counts;
  std::vector<std::pair<double, std::size_t>> rema;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < kAllScenarioKinds.size(); ++i) {
    const double ideal = static_cast<double>(total) * mix.weight(kAllScenarioKinds[i]) / sum;
    const auto base = static_cast<std::size_t>(std::floor(ideal));
    counts.push_back(base);
    assigned += base;
    rema.emplace_back(ideal - static_cast<double>(base), i);
  }
  std::stable_sort(rema.begin(), rema.end(), [](auto& a, auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < total; ++i, ++assigned) ++counts[rema[i % rema.size()].second];
  return counts;
}

std::vector<Scene> generate_dataset(const SimConfig& config, std::uint64_t rng_seed) {
  config.validate();
  const auto counts = kind_counts(config.mix, config.scene_count);
  std::vector<ScenarioKind> kinds;
  for (std::size_t i = 0; i < counts.size(); ++i) kinds.insert(kinds.end(), counts[i], kAllScenarioKinds[i]);
  Rng order(derive_seed(rng_seed, 0xC0FFEEULL));
  std::shuffle(kinds.begin(), kinds.end(), order);
  std::vector<Scene> scenes;
  scenes.reserve(kinds.size());
  for (std::size_t i = 0; i < kinds.size(); ++i) scenes.push_back(generate_scene(config, kinds[i], i, rng_seed));
  return scenes;
}

DatasetSplit split_dataset(const std::vector<Scene>& scenes, std::array<double, 3> fractions,
                           std::uint64_t rng_seed) {
  double fsum = 0.0;
  for (std::size_t j = 0; j < 3; ++j) {
    if (!(fractions[j] > 0.0)) throw ConfigError("split_fractions", "every fraction must be positive");
    fsum += fractions[j];
  }
  if (std::abs(fsum - 1.0) > 1e-9) throw ConfigError("split_fractions", "fractions must sum to 1");
  const std::size_t n = scenes.size();
  if (n < fractions.size()) throw ConfigError("split_fractions", "fewer scenes than splits");

  // Global split sizes by largest remainder.
  std::array<std::size_t, 3> target{};
  {
    std::array<std::pair<double, std::size_t>, 3> rem{};
    std::size_t got = 0;
    for (std::size_t j = 0; j < 3; ++j) {
      const double ideal = fractions[j] * static_cast<double>(n);
      target[j] = static_cast<std::size_t>(std::floor(ideal));
      got += target[j];
      rem[j] = {ideal - static_cast<double>(target[j]), j};
    }
    std::stable_sort(rem.begin(), rem.end(), [](auto& a, auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; got < n; ++i, ++got) ++target[rem[i % 3].second];
    for (std::size_t j = 0; j < 3; ++j) {
      if (target[j] == 0) throw ConfigError("split_fractions", "a split would be empty");
    }
  }

  // Strata in kind order, shuffled within.
  Rng rng(rng_seed);
  std::vector<std::vector<std::size_t>> strata;
  for (auto kind : kAllScenarioKinds) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; ++i) {
      if (scenes[i].kind == kind) idx.push_back(i);
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    if (!idx.empty()) strata.push_back(std::move(idx));
  }

  // Floors per cell, then distribute the leftovers: one extra per cell first,
  // largest fractional part first, respecting row and column totals.
  const std::size_t ns = strata.size();
  std::vector<std::array<std::size_t, 3>> cell(ns);
  std::vector<std::size_t> row_rem(ns);
  std::array<std::size_t, 3> col_rem = target;
  struct Frac {
    double f;
    std::size_t s, j;
  };
  std::vector<Frac> fracs;
  for (std::size_t s = 0; s < ns; ++s) {
    std::size_t used = 0;
    for (std::size_t j = 0; j < 3; ++j) {
      const double ideal = fractions[j] * static_cast<double>(strata[s].size());
      cell[s][j] = static_cast<std::size_t>(std::floor(ideal));
      used += cell[s][j];
      col_rem[j] -= std::min(col_rem[j], cell[s][j]);
      fracs.push_back({ideal - std::floor(ideal), s, j});
    }
    row_rem[s] = strata[s].size() - used;
  }
  std::stable_sort(fracs.begin(), fracs.end(), [](const Frac& a, const Frac& b) { return a.f > b.f; });
  for (const auto& f : fracs) {
    if (row_rem[f.s] > 0 && col_rem[f.j] > 0) {
      ++cell[f.s][f.j];
      --row_rem[f.s];
      --col_rem[f.j];
    }
  }
  for (std::size_t s = 0; s < ns; ++s) {
    for (std::size_t j = 0; j < 3 && row_rem[s] > 0; ++j) {
      const std::size_t take = std::min(row_rem[s], col_rem[j]);
      cell[s][j] += take;
      row_rem[s] -= take;
      col_rem[j] -= take;
    }
  }

  std::array<std::vector<std::size_t>, 3> picks;
  for (std::size_t s = 0; s < ns; ++s) {
    std::size_t pos = 0;
    for (std::size_t j = 0; j < 3; ++j) {
      for (std::size_t q = 0; q < cell[s][j]; ++q) picks[j].push_back(strata[s][pos++]);
    }
  }
  DatasetSplit out;
  std::array<std::vector<Scene>*, 3> dst{&out.train, &out.val, &out.test};
  for (std::size_t j = 0; j < 3; ++j) {
    std::sort(picks[j].begin(), picks[j].end());
    for (auto i : picks[j]) dst[j]->push_back(scenes[i]);
  }
  return out;
}

}  // namespace cbp

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "cbp/errors.hpp"
#include "cbp/scenario.hpp"
#include "doctest.h"

using namespace cbp;

namespace {

SimConfig only(ScenarioKind kind, std::size_t count) {
  SimConfig c;
  c.scene_count = count;
  c.mix = ScenarioMix{0, 0, 0, 0, 0};
  switch (kind) {
    case ScenarioKind::car_follow: c.mix.car_follow = 1; break;
    case ScenarioKind::cut_in: c.mix.cut_in = 1; break;
    case ScenarioKind::yield_turn: c.mix.yield_turn = 1; break;
    case ScenarioKind::independent: c.mix.independent = 1; break;
    case ScenarioKind::confounded_stop: c.mix.confounded_stop = 1; break;
  }
  return c;
}

double corr(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// R^2 of regressing y[t] on x[t - lag], pooled over scenes.
double lagged_r2(const std::vector<std::vector<double>>& ys, const std::vector<std::vector<double>>& xs,
                 int lag) {
  std::vector<double> y, x;
  for (std::size_t s = 0; s < ys.size(); ++s) {
    for (std::size_t t = static_cast<std::size_t>(lag); t < ys[s].size(); ++t) {
      y.push_back(ys[s][t]);
      x.push_back(xs[s][t - static_cast<std::size_t>(lag)]);
    }
  }
  const double r = corr(x, y);
  return r * r;
}

}  // namespace

TEST_CASE("idm equilibrium: constant-speed leader leaves the follower unaccelerated") {
  IdmParams p;
  p.desired_speed = 18.0;
  const double v = 12.0;
  const double gap = idm_equilibrium_gap(p, v);
  CHECK(idm_acceleration(p, v, gap, 0.0) == doctest::Approx(0.0).epsilon(1e-12));
  const auto roll = simulate_car_follow_pair(p, v, v, gap, 0.0, 0.0, 0.9, 40, 0.2, 2, 1);
  for (double a : roll.follower_accel) CHECK(std::abs(a) < 1e-9);
}

TEST_CASE("generate_dataset is deterministic and byte-identical on disk") {
  SimConfig c;
  c.scene_count = 40;
  std::ostringstream a, b;
  write_dataset(a, generate_dataset(c, 7), c, 7);
  write_dataset(b, generate_dataset(c, 7), c, 7);
  CHECK(a.str() == b.str());
  std::ostringstream other;
  write_dataset(other, generate_dataset(c, 8), c, 8);
  CHECK(a.str() != other.str());

  std::istringstream in(a.str());
  const auto back = read_dataset(in);
  REQUIRE(back.size() == 40);
  std::ostringstream again;
  write_dataset(again, back, c, 7);
  CHECK(again.str() == a.str());
}

TEST_CASE("scene invariants hold across every kind") {
  SimConfig c;
  c.scene_count = 300;
  const auto scenes = generate_dataset(c, 11);
  const auto counts = kind_counts(c.mix, 300);
  std::map<ScenarioKind, std::size_t> seen;
  for (const auto& s : scenes) {
    ++seen[s.kind];
    REQUIRE(s.agents.size() >= 2);
    REQUIRE(s.agents.size() <= c.max_agents);
    std::set<int> ids;
    for (const auto& a : s.agents) {
      ids.insert(a.agent_id);
      REQUIRE(a.past.size() == c.past_steps);
      REQUIRE(a.future.horizon() == c.future_steps);
      std::vector<Point2> pos;
      for (const auto& p : a.past) pos.push_back(p.position());
      for (const auto& p : a.future.states()) pos.push_back(p);
      for (std::size_t i = 1; i < pos.size(); ++i) {
        REQUIRE(distance(pos[i], pos[i - 1]) <= c.v_max * c.dt + 1e-9);
      }
      for (const auto& p : a.past) REQUIRE(std::hypot(p.vx, p.vy) >= 0.0);
    }
    CHECK(ids.size() == s.agents.size());
    CHECK_FALSE(s.av_id().has_value());
  }
  for (std::size_t i = 0; i < kAllScenarioKinds.size(); ++i) CHECK(seen[kAllScenarioKinds[i]] == counts[i]);
}

TEST_CASE("speeds along the lane direction are never negative") {
  const auto scenes = generate_dataset(only(ScenarioKind::confounded_stop, 100), 5);
  for (const auto& s : scenes) {
    for (const auto& a : s.agents) {
      for (const auto& p : a.past) CHECK(p.vx >= 0.0);
      for (std::size_t t = 1; t < a.future.horizon(); ++t) CHECK(a.future[t].x >= a.future[t - 1].x - 1e-12);
    }
  }
}

TEST_CASE("independent agents have uncorrelated accelerations") {
  const auto scenes = generate_dataset(only(ScenarioKind::independent, 1000), 3);
  // Center per time step across scenes, then pool.
  const std::size_t len = scenes[0].agents[0].past.size() + scenes[0].agents[0].future.horizon() - 2;
  std::vector<std::vector<double>> a(scenes.size()), b(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    a[s] = longitudinal_accelerations(scenes[s].agents[0], scenes[s].dt);
    b[s] = longitudinal_accelerations(scenes[s].agents[1], scenes[s].dt);
  }
  std::vector<double> xa, xb;
  for (std::size_t t = 0; t < len; ++t) {
    double ma = 0, mb = 0;
    for (std::size_t s = 0; s < scenes.size(); ++s) {
      ma += a[s][t];
      mb += b[s][t];
    }
    ma /= static_cast<double>(scenes.size());
    mb /= static_cast<double>(scenes.size());
    for (std::size_t s = 0; s < scenes.size(); ++s) {
      xa.push_back(a[s][t] - ma);
      xb.push_back(b[s][t] - mb);
    }
  }
  const double r = corr(xa, xb);
  MESSAGE("independent correlation " << r);
  CHECK(std::abs(r) < 0.05);
}

TEST_CASE("car_follow causal asymmetry: follower responds to the delayed leader") {
  SimConfig c = only(ScenarioKind::car_follow, 250);
  const auto scenes = generate_dataset(c, 21);
  std::vector<std::vector<double>> lead, foll;
  for (const auto& s : scenes) {
    lead.push_back(longitudinal_accelerations(s.agents[0], s.dt));
    foll.push_back(longitudinal_accelerations(s.agents[1], s.dt));
  }
  const int tau = c.delay_steps();
  const double forward = lagged_r2(foll, lead, tau);
  const double reverse = lagged_r2(lead, foll, tau);
  MESSAGE("forward R2 " << forward << " reverse R2 " << reverse);
  CHECK(forward > 0.5);
  CHECK(reverse < 0.1);
}

TEST_CASE("confounded_stop agents only share the scripted stop") {
  SimConfig c = only(ScenarioKind::confounded_stop, 300);
  const auto scenes = generate_dataset(c, 4);
  std::vector<double> ra, rb;
  for (const auto& s : scenes) {
    REQUIRE(s.scripted_stop_time.has_value());
    const auto a = longitudinal_accelerations(s.agents[0], s.dt);
    const auto b = longitudinal_accelerations(s.agents[1], s.dt);
    // Entry i is the acceleration applied at state i (between i and i+1) per the
    // semi-implicit scheme, so the braking phase starts at the scripted index.
    const long now = static_cast<long>(s.agents[0].past.size()) - 1;
    const long stop = now + std::lround(*s.scripted_stop_time / s.dt);
    auto residuals = [&](const std::vector<double>& acc, const AgentTrack& tr, std::vector<double>& out,
                         std::vector<char>& keep) {
      // Phase means: cruising before the stop, braking while moving; stopped steps dropped.
      double m0 = 0, m1 = 0;
      int n0 = 0, n1 = 0;
      std::vector<int> phase(acc.size(), -1);
      std::vector<Point2> pos;
      for (const auto& p : tr.past) pos.push_back(p.position());
      for (const auto& p : tr.future.states()) pos.push_back(p);
      for (std::size_t i = 0; i < acc.size(); ++i) {
        const long k = static_cast<long>(i) + 1;
        const bool moving = pos[i + 2].x - pos[i + 1].x > 1e-9;
        if (k < stop) {
          phase[i] = 0;
          m0 += acc[i];
          ++n0;
        } else if (k > stop && moving) {
          phase[i] = 1;
          m1 += acc[i];
          ++n1;
        }
      }
      m0 /= std::max(n0, 1);
      m1 /= std::max(n1, 1);
      out.assign(acc.size(), 0.0);
      keep.assign(acc.size(), 0);
      for (std::size_t i = 0; i < acc.size(); ++i) {
        if (phase[i] < 0) continue;
        out[i] = acc[i] - (phase[i] == 0 ? m0 : m1);
        keep[i] = 1;
      }
    };
    std::vector<double> xa, xb;
    std::vector<char> ka, kb;
    residuals(a, s.agents[0], xa, ka);
    residuals(b, s.agents[1], xb, kb);
    for (std::size_t i = 0; i < xa.size(); ++i) {
      if (ka[i] && kb[i]) {
        ra.push_back(xa[i]);
        rb.push_back(xb[i]);
      }
    }
  }
  const double r = corr(ra, rb);
  MESSAGE("confounded residual correlation " << r);
  CHECK(std::abs(r) < 0.1);
}

TEST_CASE("pruning layout: av follows a leader that is farther than three distractors") {
  SimConfig c = only(ScenarioKind::car_follow, 60);
  c.prune_layout = true;
  const auto scenes = generate_dataset(c, 9);
  for (const auto& s : scenes) {
    REQUIRE(s.av_id().has_value());
    int avs = 0;
    for (const auto& a : s.agents) avs += a.role == RoleTag::av;
    CHECK(avs == 1);
    const Point2 av = s.agent(*s.av_id()).current_position();
    std::vector<std::pair<double, RoleTag>> d;
    for (const auto& a : s.agents) {
      if (a.role != RoleTag::av) d.emplace_back(distance(av, a.current_position()), a.role);
    }
    std::sort(d.begin(), d.end(), [](auto& x, auto& y) { return x.first < y.first; });
    REQUIRE(d.size() == 4);
    CHECK(d[3].second == RoleTag::leader);
  }
}

TEST_CASE("config validation names the field") {
  SimConfig c;
  c.mix.car_follow = 0.2;  // sums to 0.9
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "mix");
  }
  SimConfig d;
  d.dt = 0.0;
  CHECK_THROWS_AS(d.validate(), ConfigError);
}

TEST_CASE("split_dataset") {
  SimConfig c;
  c.scene_count = 10;
  const auto scenes = generate_dataset(c, 1);

  SUBCASE("exact proportions") {
    const auto s = split_dataset(scenes, {0.8, 0.1, 0.1}, 3);
    CHECK(s.train.size() == 8);
    CHECK(s.val.size() == 1);
    CHECK(s.test.size() == 1);
    std::set<std::uint64_t> ids;
    for (const auto* part : {&s.train, &s.val, &s.test}) {
      for (const auto& sc : *part) ids.insert(sc.scene_id);
    }
    CHECK(ids.size() == 10);
  }
  SUBCASE("zero fraction rejected") {
    CHECK_THROWS_AS(split_dataset(scenes, {1.0, 0.0, 0.0}, 3), ConfigError);
  }
  SUBCASE("too few scenes") {
    std::vector<Scene> two(scenes.begin(), scenes.begin() + 2);
    CHECK_THROWS_AS(split_dataset(two, {0.6, 0.2, 0.2}, 3), ConfigError);
  }
  SUBCASE("stratified within one scene of the global proportion") {
    SimConfig big;
    big.scene_count = 237;
    const auto many = generate_dataset(big, 2);
    const auto s = split_dataset(many, {0.7, 0.15, 0.15}, 5);
    CHECK(s.train.size() + s.val.size() + s.test.size() == 237);
    std::map<ScenarioKind, double> total, train;
    for (const auto& sc : many) total[sc.kind] += 1;
    for (const auto& sc : s.train) train[sc.kind] += 1;
    for (auto [kind, n] : total) CHECK(std::abs(train[kind] - 0.7 * n) <= 1.0);
  }
}

#pragma once

// Synthetic multi-agent highway scenes with a known causal structure.
//
// Every scene is rolled out for past_steps + future_steps states at a fixed
// dt. State index past_steps-1 is "now"; the future trajectory holds the
// following future_steps positions. Longitudinal motion uses an IDM
// car-following law driven by the leader state seen reaction_delay seconds
// ago plus a delayed acceleration feed-forward term, integrated with
// semi-implicit Euler (v += a dt; x += v dt), so second differences of
// positions recover the applied acceleration exactly.

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cbp/random.hpp"
#include "cbp/trajectory.hpp"

namespace cbp {

enum class ScenarioKind { car_follow, cut_in, yield_turn, independent, confounded_stop };
enum class RoleTag { leader, follower, independent, av };

inline constexpr std::array<ScenarioKind, 5> kAllScenarioKinds = {
    ScenarioKind::car_follow, ScenarioKind::cut_in, ScenarioKind::yield_turn,
    ScenarioKind::independent, ScenarioKind::confounded_stop};

std::string to_string(ScenarioKind kind);
std::string to_string(RoleTag role);
ScenarioKind parse_scenario_kind(const std::string& s);
RoleTag parse_role_tag(const std::string& s);

struct PastState {
  double x = 0.0;
  double y = 0.0;
  double vx = 0.0;
  double vy = 0.0;

  Point2 position() const { return {x, y}; }
  friend bool operator==(const PastState&, const PastState&) = default;
};

struct AgentTrack {
  int agent_id = 0;
  int lane_index = 0;
  std::vector<PastState> past;  // oldest first; past.back() is the current state
  Trajectory future;
  RoleTag role = RoleTag::independent;

  Point2 current_position() const { return past.back().position(); }
};

struct Scene {
  std::uint64_t scene_id = 0;
  ScenarioKind kind = ScenarioKind::independent;
  std::uint64_t rng_seed = 0;
  double dt = 0.2;
  std::vector<AgentTrack> agents;
  // Seconds after the current state at which confounded_stop agents start braking.
  std::optional<double> scripted_stop_time;

  const AgentTrack& agent(int agent_id) const;  // throws LookupError
  std::size_t index_of(int agent_id) const;     // throws LookupError
  std::vector<int> agent_ids() const;
  // Ids of agents that take part in the scripted interaction (role != independent).
  bool causally_linked(int a, int b) const;
  std::optional<int> av_id() const;

  // Same scene restricted to the listed agents.
  Scene with_agents(const std::vector<int>& keep_ids) const;
  Scene translated(Point2 offset) const;
};

struct ScenarioMix {
  double car_follow = 0.30;
  double cut_in = 0.20;
  double yield_turn = 0.15;
  double independent = 0.25;
  double confounded_stop = 0.10;

  double weight(ScenarioKind kind) const;
  double total() const;
};

struct SimConfig {
  std::size_t past_steps = 10;
  std::size_t future_steps = 30;
  double dt = 0.2;
  std::size_t max_agents = 8;
  std::size_t scene_count = 1000;
  ScenarioMix mix;
  double accel_noise_sigma = 0.05;   // m/s^2, every agent
  double leader_accel_sigma = 0.8;   // m/s^2, white throttle noise of free-driving agents
  double reaction_delay = 0.4;       // s
  double v_max = 30.0;               // m/s
  double lane_width = 3.5;           // m
  double lateral_wander_sigma = 0.15;  // m, stationary sd of the lane-keeping offset
  std::size_t max_distractors = 3;   // independent agents added to interactive scenes
  double closing_fraction = 0.35;    // car_follow scenes that start far behind a slower leader
  // Every car_follow scene uses the pruning layout: an av-tagged follower whose
  // leader is farther away than three independent distractors.
  bool prune_layout = false;

  // Throws ConfigError naming the offending field.
  void validate() const;
  int delay_steps() const;
};

std::vector<Scene> generate_dataset(const SimConfig& config, std::uint64_t rng_seed);
Scene generate_scene(const SimConfig& config, ScenarioKind kind, std::uint64_t scene_id,
                     std::uint64_t master_seed);
// Per-kind scene counts by largest remainder over the mix proportions.
std::vector<std::size_t> kind_counts(const ScenarioMix& mix, std::size_t total);

struct DatasetSplit {
  std::vector<Scene> train;
  std::vector<Scene> val;
  std::vector<Scene> test;
};

// Stratified by scenario kind; global sizes follow the largest-remainder rule
// and every kind's share of each split is within one scene of its ideal.
DatasetSplit split_dataset(const std::vector<Scene>& scenes, std::array<double, 3> fractions,
                           std::uint64_t rng_seed);

// IDM car-following law.
struct IdmParams {
  double desired_speed = 15.0;  // m/s
  double max_accel = 1.5;       // m/s^2
  double comfort_decel = 2.0;   // m/s^2
  double time_headway = 1.2;    // s
  double jam_distance = 2.0;    // m
};

inline constexpr double kVehicleLength = 5.0;

// closing_speed = own speed - leader speed; gap is bumper to bumper.
double idm_acceleration(const IdmParams& p, double speed, double gap, double closing_speed);
double idm_free_acceleration(const IdmParams& p, double speed);
double idm_equilibrium_gap(const IdmParams& p, double speed);

struct CarFollowRollout {
  std::vector<double> leader_accel;
  std::vector<double> follower_accel;
  std::vector<double> gap;
};

// Two-vehicle rollout with the same follower law the generator uses.
CarFollowRollout simulate_car_follow_pair(const IdmParams& follower, double leader_speed,
                                          double follower_speed, double gap, double leader_sigma,
                                          double noise_sigma, double feedforward,
                                          std::size_t steps, double dt, int delay_steps,
                                          std::uint64_t seed);

// Accelerations along the direction of travel recovered from the full position
// sequence (past then future): entry i corresponds to state i+1.
std::vector<double> longitudinal_accelerations(const AgentTrack& track, double dt);

// JSON Lines dataset: header record on line 1, one scene per following line.
inline constexpr const char* kSceneSchema = "cbp.scenes.v1";
void write_dataset(std::ostream& out, const std::vector<Scene>& scenes, const SimConfig& config,
                   std::uint64_t seed);
std::vector<Scene> read_dataset(std::istream& in);
void save_dataset(const std::string& path, const std::vector<Scene>& scenes,
                  const SimConfig& config, std::uint64_t seed);
std::vector<Scene> load_dataset(const std::string& path);

}  // namespace cbp

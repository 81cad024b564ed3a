#include <fstream>
#include <sstream>

#include "cbp/errors.hpp"
#include "cbp/scenario.hpp"
#include "json.hpp"

namespace cbp {
namespace {

using nlohmann::json;

json scene_to_json(const Scene& s) {
  json agents = json::array();
  for (const auto& a : s.agents) {
    json past = json::array();
    for (const auto& p : a.past) past.push_back({p.x, p.y, p.vx, p.vy});
    json fut = json::array();
    for (const auto& p : a.future.states()) fut.push_back({p.x, p.y});
    agents.push_back({{"agent_id", a.agent_id},
                      {"lane_index", a.lane_index},
                      {"role", to_string(a.role)},
                      {"past", std::move(past)},
                      {"future", std::move(fut)}});
  }
  json j = {{"scene_id", s.scene_id},
            {"kind", to_string(s.kind)},
            {"rng_seed", s.rng_seed},
            {"dt", s.dt},
            {"agents", std::move(agents)}};
  j["scripted_stop_time"] = s.scripted_stop_time ? json(*s.scripted_stop_time) : json(nullptr);
  return j;
}

Scene scene_from_json(const json& j) {
  Scene s;
  s.scene_id = j.at("scene_id").get<std::uint64_t>();
  s.kind = parse_scenario_kind(j.at("kind").get<std::string>());
  s.rng_seed = j.at("rng_seed").get<std::uint64_t>();
  s.dt = j.at("dt").get<double>();
  if (j.contains("scripted_stop_time") && !j["scripted_stop_time"].is_null()) {
    s.scripted_stop_time = j["scripted_stop_time"].get<double>();
  }
  for (const auto& ja : j.at("agents")) {
    AgentTrack a;
    a.agent_id = ja.at("agent_id").get<int>();
    a.lane_index = ja.at("lane_index").get<int>();
    a.role = parse_role_tag(ja.at("role").get<std::string>());
    for (const auto& p : ja.at("past")) a.past.push_back({p.at(0), p.at(1), p.at(2), p.at(3)});
    std::vector<Point2> fut;
    for (const auto& p : ja.at("future")) fut.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    a.future = Trajectory(std::move(fut), s.dt);
    s.agents.push_back(std::move(a));
  }
  return s;
}

}  // namespace

void write_dataset(std::ostream& out, const std::vector<Scene>& scenes, const SimConfig& config,
                   std::uint64_t seed) {
  json header = {{"schema", kSceneSchema},
                 {"count", scenes.size()},
                 {"seed", seed},
                 {"past_steps", config.past_steps},
                 {"future_steps", config.future_steps},
                 {"dt", config.dt}};
  out << header.dump() << '\n';
  for (const auto& s : scenes) out << scene_to_json(s).dump() << '\n';
}

std::vector<Scene> read_dataset(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ArgumentError("dataset is empty");
  const json header = json::parse(line);
  if (header.value("schema", std::string{}) != kSceneSchema) {
    throw ArgumentError("dataset schema is not " + std::string(kSceneSchema));
  }
  std::vector<Scene> scenes;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    scenes.push_back(scene_from_json(json::parse(line)));
  }
  if (header.contains("count") && header["count"].get<std::size_t>() != scenes.size()) {
    throw ArgumentError("dataset header count does not match the number of scenes");
  }
  return scenes;
}

void save_dataset(const std::string& path, const std::vector<Scene>& scenes,
                  const SimConfig& config, std::uint64_t seed) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ArgumentError("cannot write dataset " + path);
  write_dataset(f, scenes, config, seed);
}

std::vector<Scene> load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArgumentError("cannot read dataset " + path);
  return read_dataset(f);
}

}  // namespace cbp

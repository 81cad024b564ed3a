#include "cbp/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "cbp/errors.hpp"
#include "cbp/metrics.hpp"
#include "cbp/random.hpp"

namespace cbp {
namespace fs = std::filesystem;

namespace {

constexpr const char* kManifestSchema = "cbp.manifest.v1";

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string{}; }

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

const CsvSchema& schema(const std::string& name) {
  for (const auto& s : csv_schemas()) {
    if (s.name == name) return s;
  }
  throw std::logic_error("unregistered schema " + name);
}

void write_header(std::ostream& out, const std::string& name) {
  const auto& s = schema(name);
  out << "# schema=" << s.name << '\n';
  for (std::size_t i = 0; i < s.columns.size(); ++i) out << (i ? "," : "") << s.columns[i];
  out << '\n';
}

void require_file(const std::string& key, const std::string& path) {
  if (!fs::is_regular_file(path)) throw ConfigError(key, "file not found: " + path);
}

PredictorParams load_model(const RunConfig& config) {
  require_file("checkpoint", config.checkpoint_path());
  return load_checkpoint(config.checkpoint_path(), config.model_config());
}

std::string kind_name(const InteractivityReport& r) {
  return r.scenario_kind ? to_string(*r.scenario_kind) : std::string{};
}

void write_mode_means(std::ostream& out, std::size_t rank, std::uint64_t scene_id, int agent_id,
                      const char* role, const char* source, const TrajectoryGMM& g) {
  for (const auto& r : most_likely_modes(g, std::min<std::size_t>(6, g.mode_count()))) {
    const auto& mode = g.mode(r.index);
    for (std::size_t t = 0; t < mode.waypoints.size(); ++t) {
      out << rank << ',' << scene_id << ',' << agent_id << ',' << role << ',' << source << ',' << r.index << ','
          << fmt(r.prob) << ',' << t + 1 << ',' << fmt(mode.waypoints[t].mean.x) << ','
          << fmt(mode.waypoints[t].mean.y) << '\n';
    }
  }
}

void write_points(std::ostream& out, std::size_t rank, std::uint64_t scene_id, int agent_id, const char* role,
                  const char* source, const std::vector<Point2>& pts, int first_t) {
  for (std::size_t i = 0; i < pts.size(); ++i) {
    out << rank << ',' << scene_id << ',' << agent_id << ',' << role << ',' << source << ",,,"
        << first_t + static_cast<int>(i) << ',' << fmt(pts[i].x) << ',' << fmt(pts[i].y) << '\n';
  }
}

bool parse_number(const std::string& s) {
  if (s.empty()) return false;
  char* end = nullptr;
  std::strtod(s.c_str(), &end);
  return *end == '\0';
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

const std::vector<CsvSchema>& csv_schemas() {
  static const std::vector<CsvSchema> all = [] {
    std::vector<CsvSchema> v;
    v.push_back({"cbp.train_log.v1",
                 {"epoch", "train_loss", "val_nll_marginal", "val_nll_conditional", "val_wade_marginal",
                  "val_wade_conditional"},
                 "nnnnnn"});
    v.push_back({kInteractivitySchema, interactivity_columns(), "nnnnnoonso"});
    v.push_back({"cbp.mi_histogram.v1", {"bin_lo", "bin_hi", "count"}, "nnn"});
    v.push_back({"cbp.mined.v1",
                 {"rank", "scene_id", "scenario_kind", "query_id", "target_id", "mi", "stderr", "delta_wade",
                  "delta_ll", "query_marginal_ll", "low_query_likelihood"},
                 "nnsnnnnooon"});
    v.push_back({"cbp.mined_trajectories.v1",
                 {"rank", "scene_id", "agent_id", "role", "source", "mode", "prob", "t", "x", "y"},
                 "nnnssoonnn"});
    v.push_back({"cbp.prune_report.v1",
                 {"strategy", "n_keep", "condition", "mean_delta_wade", "stderr", "scenes"},
                 "snsnnn"});
    v.push_back({"cbp.prune_scenes.v1",
                 {"scene_id", "strategy", "n_keep", "condition", "wade_original", "wade_pruned", "delta"},
                 "nsnsnnn"});
    return v;
  }();
  return all;
}

std::vector<Scene> eval_scenes(const RunConfig& config) {
  std::vector<Scene> scenes;
  if (!config.eval_dataset.empty()) {
    require_file("eval_dataset", config.eval_dataset);
    scenes = load_dataset(config.eval_dataset);
  } else {
    require_file("dataset", config.dataset_path());
    scenes = split_dataset(load_dataset(config.dataset_path()), config.split, config.seed).test;
  }
  if (config.max_eval_scenes > 0 && scenes.size() > config.max_eval_scenes) scenes.resize(config.max_eval_scenes);
  return scenes;
}

// ---------------------------------------------------------------------------

DatagenSummary cmd_datagen(const RunConfig& config) {
  config.validate();
  const auto scenes = generate_dataset(config.sim, config.seed);
  DatagenSummary s;
  s.dataset_path = config.dataset_path();
  {
    auto out = open_out(s.dataset_path);
    write_dataset(out, scenes, config.sim, config.seed);
  }
  s.total = scenes.size();
  for (auto kind : kAllScenarioKinds) s.counts[to_string(kind)] = 0;
  for (const auto& sc : scenes) ++s.counts[to_string(sc.kind)];
  s.hash = hex64(fnv1a64(read_file(s.dataset_path)));

  nlohmann::json m;
  m["schema"] = kManifestSchema;
  m["dataset"] = s.dataset_path;
  m["seed"] = config.seed;
  m["total"] = s.total;
  m["counts"] = s.counts;
  m["fnv1a64"] = s.hash;
  m["created_utc"] = utc_timestamp();
  s.manifest_path = (fs::path(config.out_dir) / "manifest.json").string();
  auto out = open_out(s.manifest_path);
  out << m.dump(2) << '\n';
  return s;
}

TrainSummary cmd_train(const RunConfig& config) {
  config.validate();
  require_file("dataset", config.dataset_path());
  const auto split = split_dataset(load_dataset(config.dataset_path()), config.split, config.seed);
  if (split.train.empty()) throw ConfigError("dataset", "training split is empty");

  TrainConfig tc = config.train;
  tc.seed = config.seed;
  const PredictorParams init = config.resume ? load_model(config)
                                             : PredictorParams::initialize(config.model_config(), config.seed);
  auto result = train(init, split.train, split.val, tc);

  TrainSummary s;
  s.checkpoint_path = config.checkpoint_path();
  if (fs::path(s.checkpoint_path).has_parent_path()) fs::create_directories(fs::path(s.checkpoint_path).parent_path());
  save_checkpoint(s.checkpoint_path, result.params);
  s.log_path = (fs::path(config.out_dir) / "train_log.csv").string();
  auto out = open_out(s.log_path);
  write_header(out, "cbp.train_log.v1");
  for (const auto& r : result.log) {
    out << r.epoch << ',' << fmt(r.train_loss) << ',' << fmt(r.val_nll_marginal) << ','
        << fmt(r.val_nll_conditional) << ',' << fmt(r.val_wade_marginal) << ',' << fmt(r.val_wade_conditional)
        << '\n';
  }
  s.log = std::move(result.log);
  return s;
}

// ---------------------------------------------------------------------------

std::vector<InteractivityReport> score_scenes(const PredictorParams& params, const std::vector<Scene>& scenes,
                                              const MiOptions& options, std::uint64_t seed) {
  std::vector<InteractivityReport> out;
  for (const auto& scene : scenes) {
    if (scene.agents.size() < 2) continue;
    auto r = pairwise_scores(params, scene, options, derive_seed(seed, scene.scene_id));
    out.insert(out.end(), std::make_move_iterator(r.begin()), std::make_move_iterator(r.end()));
  }
  return out;
}

std::vector<std::size_t> mi_histogram(const std::vector<InteractivityReport>& reports, double bin_width) {
  if (!(bin_width > 0.0)) throw ArgumentError("histogram bin width must be positive");
  std::vector<std::size_t> bins(1, 0);
  for (const auto& r : reports) {
    const auto b = r.mi_estimate <= 0.0 ? 0 : static_cast<std::size_t>(std::floor(r.mi_estimate / bin_width));
    if (b >= bins.size()) bins.resize(b + 1, 0);
    ++bins[b];
  }
  return bins;
}

ScoreSummary cmd_score(const RunConfig& config) {
  config.validate();
  const auto params = load_model(config);
  const auto scenes = eval_scenes(config);
  ScoreSummary s;
  s.reports = score_scenes(params, scenes, config.estimator, config.seed);
  s.bin_width = config.bin_width;
  s.histogram = mi_histogram(s.reports, config.bin_width);

  s.csv_path = (fs::path(config.out_dir) / "interactivity.csv").string();
  {
    auto out = open_out(s.csv_path);
    write_interactivity_csv(out, s.reports);
  }
  {
    auto out = open_out(fs::path(config.out_dir) / "mi_histogram.csv");
    write_header(out, "cbp.mi_histogram.v1");
    for (std::size_t i = 0; i < s.histogram.size(); ++i) {
      out << fmt(static_cast<double>(i) * s.bin_width) << ',' << fmt(static_cast<double>(i + 1) * s.bin_width)
          << ',' << s.histogram[i] << '\n';
    }
  }
  auto gp = open_out(fs::path(config.out_dir) / "mi_histogram.gp");
  gp << "set datafile separator ','\n"
        "set xlabel 'mutual information (nats)'\n"
        "set ylabel 'ordered agent pairs'\n"
        "set style fill solid 0.6\n"
        "set logscale y\n"
        "plot 'mi_histogram.csv' skip 2 using (($1+$2)/2):3:($2-$1) with boxes notitle\n";
  return s;
}

// ---------------------------------------------------------------------------

MineSummary mine_reports(const std::vector<InteractivityReport>& reports, std::size_t top_n) {
  MineSummary s;
  std::vector<double> lls;
  for (const auto& r : reports) {
    if (r.query_marginal_ll) lls.push_back(*r.query_marginal_ll);
  }
  std::sort(lls.begin(), lls.end());
  s.query_ll_threshold = lls.empty() ? 0.0 : quantile(lls, 0.1);

  std::vector<std::size_t> order(reports.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = reports[a];
    const auto& y = reports[b];
    if (x.mi_estimate != y.mi_estimate) return x.mi_estimate > y.mi_estimate;
    if (x.scene_id != y.scene_id) return x.scene_id < y.scene_id;
    if (x.query_id != y.query_id) return x.query_id < y.query_id;
    return x.target_id < y.target_id;
  });
  const std::size_t n = std::min(top_n, order.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = reports[order[i]];
    s.rows.push_back({i + 1, r, r.query_marginal_ll && !lls.empty() && *r.query_marginal_ll < s.query_ll_threshold});
  }
  return s;
}

MineSummary cmd_mine(const RunConfig& config) {
  config.validate();
  const auto params = load_model(config);
  const auto scenes = eval_scenes(config);
  const auto reports = score_scenes(params, scenes, config.estimator, config.seed);
  auto s = mine_reports(reports, config.top_n);

  auto out = open_out(fs::path(config.out_dir) / "mined.csv");
  write_header(out, "cbp.mined.v1");
  for (const auto& m : s.rows) {
    const auto& r = m.report;
    out << m.rank << ',' << r.scene_id << ',' << kind_name(r) << ',' << r.query_id << ',' << r.target_id << ','
        << fmt(r.mi_estimate) << ',' << fmt(r.mi_stderr) << ',' << fmt(r.delta_wade) << ',' << fmt(r.delta_ll)
        << ',' << fmt(r.query_marginal_ll) << ',' << (m.low_query_likelihood ? 1 : 0) << '\n';
  }

  // Marginal and conditional mode means of each mined target, next to both ground truths.
  auto traj = open_out(fs::path(config.out_dir) / "mined_trajectories.csv");
  write_header(traj, "cbp.mined_trajectories.v1");
  for (const auto& m : s.rows) {
    const auto& r = m.report;
    const auto it = std::find_if(scenes.begin(), scenes.end(), [&](const Scene& sc) { return sc.scene_id == r.scene_id; });
    const Scene& scene = *it;
    const auto& q = scene.agent(r.query_id);
    const auto& t = scene.agent(r.target_id);
    for (const auto* a : {&q, &t}) {
      const char* role = a == &q ? "query" : "target";
      std::vector<Point2> past;
      for (const auto& p : a->past) past.push_back(p.position());
      write_points(traj, m.rank, r.scene_id, a->agent_id, role, "past", past,
                   1 - static_cast<int>(past.size()));
      write_points(traj, m.rank, r.scene_id, a->agent_id, role, "ground_truth", a->future.states(), 1);
    }
    write_mode_means(traj, m.rank, r.scene_id, t.agent_id, "target", "marginal",
                     predict(params, scene, t.agent_id, std::nullopt));
    write_mode_means(traj, m.rank, r.scene_id, t.agent_id, "target", "conditional",
                     predict(params, scene, t.agent_id, ConditionalQuery{q.agent_id, q.future}));
  }
  return s;
}

// ---------------------------------------------------------------------------

std::string to_string(PruneCondition c) { return c == PruneCondition::removed ? "removed" : "context"; }

std::vector<int> rank_agents(const PredictorParams& params, const Scene& scene, int av_id, PruneStrategy strategy,
                             const MiOptions& options, std::uint64_t seed) {
  const Point2 av_pos = scene.agent(av_id).current_position();
  std::vector<std::pair<double, int>> scored;
  for (const auto& a : scene.agents) {
    if (a.agent_id == av_id) continue;
    double key;
    if (strategy == PruneStrategy::distance) {
      const Point2 d = a.current_position() - av_pos;
      key = std::hypot(d.x, d.y);
    } else {
      key = -mutual_information(params, scene, a.agent_id, av_id, options,
                                derive_seed(seed, scene.scene_id, static_cast<std::uint64_t>(a.agent_id)))
                 .mi_estimate;
    }
    scored.emplace_back(key, a.agent_id);
  }
  std::sort(scored.begin(), scored.end());
  std::vector<int> ids;
  for (const auto& [k, id] : scored) ids.push_back(id);
  return ids;
}

PruneSummary prune_scenes(const PredictorParams& params, const std::vector<Scene>& scenes, const RunConfig& config) {
  PruneSummary s;
  for (const auto& scene : scenes) {
    const auto av = scene.av_id();
    if (!av || scene.agents.size() < 2) continue;
    const auto& av_track = scene.agent(*av);
    const double original = wade(predict(params, scene, *av, std::nullopt), av_track.future);
    for (auto strategy : config.prune_strategies) {
      const auto ranked = rank_agents(params, scene, *av, strategy, config.estimator, config.seed);
      for (std::size_t n : config.prune_keep) {
        std::vector<int> keep{*av};
        keep.insert(keep.end(), ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(std::min(n, ranked.size())));
        const double removed = wade(predict(params, scene.with_agents(keep), *av, std::nullopt), av_track.future);
        s.scenes.push_back({scene.scene_id, strategy, n, PruneCondition::removed, original, removed});
        // Pruned agents stay in the encoder and only leave the prediction set,
        // so the AV's own prediction is the original one.
        const double context = wade(predict(params, scene, *av, std::nullopt), av_track.future);
        s.scenes.push_back({scene.scene_id, strategy, n, PruneCondition::context, original, context});
      }
    }
  }
  for (auto strategy : config.prune_strategies) {
    for (std::size_t n : config.prune_keep) {
      for (auto cond : {PruneCondition::removed, PruneCondition::context}) {
        std::vector<double> deltas;
        for (const auto& r : s.scenes) {
          if (r.strategy == strategy && r.n_keep == n && r.condition == cond) deltas.push_back(r.delta());
        }
        PruneRow row{strategy, n, cond, 0.0, 0.0, deltas.size()};
        if (!deltas.empty()) {
          const auto m = aggregate(deltas, "delta_wade");
          row.mean_delta = m.mean;
          row.stderr_delta = m.stderr_mean;
        }
        s.rows.push_back(row);
      }
    }
  }
  return s;
}

PruneSummary cmd_prune(const RunConfig& config) {
  config.validate();
  const auto params = load_model(config);
  const auto s = prune_scenes(params, eval_scenes(config), config);
  {
    auto out = open_out(fs::path(config.out_dir) / "prune_report.csv");
    write_header(out, "cbp.prune_report.v1");
    for (const auto& r : s.rows) {
      out << to_string(r.strategy) << ',' << r.n_keep << ',' << to_string(r.condition) << ','
          << fmt(r.mean_delta) << ',' << fmt(r.stderr_delta) << ',' << r.scenes << '\n';
    }
  }
  auto out = open_out(fs::path(config.out_dir) / "prune_scenes.csv");
  write_header(out, "cbp.prune_scenes.v1");
  for (const auto& r : s.scenes) {
    out << r.scene_id << ',' << to_string(r.strategy) << ',' << r.n_keep << ',' << to_string(r.condition) << ','
        << fmt(r.wade_original) << ',' << fmt(r.wade_pruned) << ',' << fmt(r.delta()) << '\n';
  }
  return s;
}

// ---------------------------------------------------------------------------

ValidationResult validate_output(const std::string& path) {
  if (!fs::is_regular_file(path)) throw std::runtime_error("no such file: " + path);
  const auto ext = fs::path(path).extension().string();
  if (ext == ".jsonl") {
    return {kSceneSchema, load_dataset(path).size()};
  }
  if (ext == ".json") {
    const auto j = nlohmann::json::parse(read_file(path));
    const auto name = j.value("schema", std::string{});
    if (name == kCheckpointSchema) {
      load_checkpoint(path);
      return {name, 1};
    }
    if (name == kManifestSchema) {
      std::size_t sum = 0;
      for (const auto& [k, v] : j.at("counts").items()) sum += v.get<std::size_t>();
      if (sum != j.at("total").get<std::size_t>()) throw std::runtime_error("manifest counts do not sum to total");
      return {name, 1};
    }
    throw std::runtime_error("unknown JSON schema '" + name + "'");
  }

  std::ifstream in(path);
  std::string line;
  if (!std::getline(in, line) || line.rfind("# schema=", 0) != 0) {
    throw std::runtime_error("missing '# schema=' first line");
  }
  const std::string name = line.substr(9);
  const auto it = std::find_if(csv_schemas().begin(), csv_schemas().end(),
                               [&](const CsvSchema& s) { return s.name == name; });
  if (it == csv_schemas().end()) throw std::runtime_error("unknown schema '" + name + "'");
  if (!std::getline(in, line) || split_csv(line) != it->columns) {
    throw std::runtime_error("header does not match schema " + name);
  }
  ValidationResult r{name, 0};
  std::size_t number = 2;
  while (std::getline(in, line)) {
    ++number;
    const auto fields = split_csv(line);
    if (fields.size() != it->columns.size()) {
      throw std::runtime_error("line " + std::to_string(number) + ": expected " +
                               std::to_string(it->columns.size()) + " fields");
    }
    for (std::size_t i = 0; i < fields.size(); ++i) {
      const char type = it->types[i];
      if ((type == 'n' && !parse_number(fields[i])) || (type == 'o' && !fields[i].empty() && !parse_number(fields[i]))) {
        throw std::runtime_error("line " + std::to_string(number) + ": column " + it->columns[i] +
                                 " is not numeric");
      }
    }
    ++r.rows;
  }
  return r;
}

}  // namespace cbp

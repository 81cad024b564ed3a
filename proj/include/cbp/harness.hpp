#pragma once

// End-to-end workflows behind the command-line tool. Every command reads a
// RunConfig, writes its outputs under out_dir and returns a summary. Config
// problems raise ConfigError; everything else propagates as runtime errors.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "cbp/config.hpp"
#include "cbp/interactivity.hpp"
#include "cbp/predictor.hpp"
#include "cbp/scenario.hpp"

namespace cbp {

std::uint64_t fnv1a64(std::string_view bytes);

// Scenes scored by score/mine/prune: eval_dataset when set, otherwise the
// test split of the dataset, truncated to max_eval_scenes.
std::vector<Scene> eval_scenes(const RunConfig& config);

struct DatagenSummary {
  std::string dataset_path;
  std::string manifest_path;
  std::size_t total = 0;
  std::map<std::string, std::size_t> counts;  // per scenario kind
  std::string hash;                           // fnv1a64 of the dataset file, hex
};
DatagenSummary cmd_datagen(const RunConfig& config);

struct TrainSummary {
  std::string checkpoint_path;
  std::string log_path;
  std::vector<EpochLog> log;
};
TrainSummary cmd_train(const RunConfig& config);

struct ScoreSummary {
  std::vector<InteractivityReport> reports;
  std::vector<std::size_t> histogram;  // bin i covers [i*w, (i+1)*w); negative estimates land in bin 0
  double bin_width = 0.0;
  std::string csv_path;
};
// Pairwise scores for every ordered pair of every scene.
std::vector<InteractivityReport> score_scenes(const PredictorParams& params, const std::vector<Scene>& scenes,
                                              const MiOptions& options, std::uint64_t seed);
std::vector<std::size_t> mi_histogram(const std::vector<InteractivityReport>& reports, double bin_width);
ScoreSummary cmd_score(const RunConfig& config);

struct MinedPair {
  std::size_t rank = 0;
  InteractivityReport report;
  bool low_query_likelihood = false;  // query's marginal log-likelihood below the 10th percentile
};
struct MineSummary {
  std::vector<MinedPair> rows;
  double query_ll_threshold = 0.0;
};
// Ranks by MI (ties: scene, query, target ascending) and keeps the first top_n.
MineSummary mine_reports(const std::vector<InteractivityReport>& reports, std::size_t top_n);
MineSummary cmd_mine(const RunConfig& config);

enum class PruneCondition { removed, context };
std::string to_string(PruneCondition c);

// Agent ids other than `av_id` ordered by the strategy (most salient first).
std::vector<int> rank_agents(const PredictorParams& params, const Scene& scene, int av_id,
                             PruneStrategy strategy, const MiOptions& options, std::uint64_t seed);

struct PruneSceneRow {
  std::uint64_t scene_id = 0;
  PruneStrategy strategy = PruneStrategy::mi;
  std::size_t n_keep = 0;
  PruneCondition condition = PruneCondition::removed;
  double wade_original = 0.0;
  double wade_pruned = 0.0;
  double delta() const { return wade_pruned - wade_original; }
};
struct PruneRow {
  PruneStrategy strategy = PruneStrategy::mi;
  std::size_t n_keep = 0;
  PruneCondition condition = PruneCondition::removed;
  double mean_delta = 0.0;
  double stderr_delta = 0.0;
  std::size_t scenes = 0;
};
struct PruneSummary {
  std::vector<PruneSceneRow> scenes;
  std::vector<PruneRow> rows;
};
PruneSummary prune_scenes(const PredictorParams& params, const std::vector<Scene>& scenes,
                          const RunConfig& config);
PruneSummary cmd_prune(const RunConfig& config);

// Schema-versioned CSV outputs: first line "# schema=<name>", then the header.
struct CsvSchema {
  std::string name;
  std::vector<std::string> columns;
  std::string types;  // per column: n number, o optional number, s text
};
const std::vector<CsvSchema>& csv_schemas();

struct ValidationResult {
  std::string schema;
  std::size_t rows = 0;
};
// Checks a CSV against its declared schema, or a JSONL dataset / checkpoint by
// loading it. Throws std::runtime_error describing the first problem.
ValidationResult validate_output(const std::string& path);

}  // namespace cbp

// Command-line front end: cbp <datagen|train|score|mine|prune|validate> [flags]
#include <cstdio>
#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "cbp/config.hpp"
#include "cbp/errors.hpp"
#include "cbp/harness.hpp"

namespace {

constexpr int kConfigExit = 2;
constexpr int kRuntimeExit = 3;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> n;
  std::optional<std::string> strategy;
  std::optional<std::size_t> m_samples;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "key = value run configuration");
  cmd->add_option("--seed", f.seed, "master seed");
  cmd->add_option("--out", f.out, "output directory");
}

cbp::RunConfig load(const Flags& f, const std::string& command) {
  cbp::RunConfig c = f.config.empty() ? cbp::RunConfig{} : cbp::load_run_config(f.config);
  if (f.seed) c.seed = *f.seed;
  if (f.out) c.out_dir = *f.out;
  if (f.m_samples) c.estimator.samples = *f.m_samples;
  if (f.strategy) cbp::apply_setting(c, "prune.strategy", *f.strategy);
  if (f.n) {
    if (command == "datagen") c.sim.scene_count = *f.n;
    else if (command == "mine") c.top_n = *f.n;
    else if (command == "prune") c.prune_keep = {*f.n};
    else c.max_eval_scenes = *f.n;
  }
  c.validate();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional behavior prediction and agent interactivity experiments"};
  app.require_subcommand(1);
  Flags f;
  std::string validate_path;

  auto* datagen = app.add_subcommand("datagen", "generate a synthetic scene dataset");
  add_common(datagen, f);
  datagen->add_option("--n", f.n, "number of scenes");
  auto* train = app.add_subcommand("train", "train the predictor");
  add_common(train, f);
  auto* score = app.add_subcommand("score", "pairwise interactivity scores on the eval scenes");
  add_common(score, f);
  score->add_option("--n", f.n, "limit on eval scenes");
  score->add_option("--m-samples", f.m_samples, "Monte Carlo samples per query mode");
  auto* mine = app.add_subcommand("mine", "rank pairs by interactivity");
  add_common(mine, f);
  mine->add_option("--n", f.n, "number of pairs to keep");
  mine->add_option("--m-samples", f.m_samples, "Monte Carlo samples per query mode");
  auto* prune = app.add_subcommand("prune", "AV error after keeping the top agents");
  add_common(prune, f);
  prune->add_option("--n", f.n, "agents kept besides the AV");
  prune->add_option("--strategy", f.strategy, "mi, distance or both");
  prune->add_option("--m-samples", f.m_samples, "Monte Carlo samples per query mode");
  auto* validate = app.add_subcommand("validate", "check an output file against its schema");
  validate->add_option("path", validate_path, "CSV, JSONL dataset or JSON checkpoint/manifest")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kConfigExit;
  }

  try {
    if (validate->parsed()) {
      const auto r = cbp::validate_output(validate_path);
      std::printf("%s: ok (%s, %zu rows)\n", validate_path.c_str(), r.schema.c_str(), r.rows);
      return 0;
    }
    const std::string command = app.get_subcommands().front()->get_name();
    const auto config = load(f, command);
    if (command == "datagen") {
      const auto s = cbp::cmd_datagen(config);
      std::printf("wrote %zu scenes to %s (fnv1a64 %s)\n", s.total, s.dataset_path.c_str(), s.hash.c_str());
      for (const auto& [kind, n] : s.counts) std::printf("  %-16s %zu\n", kind.c_str(), n);
    } else if (command == "train") {
      const auto s = cbp::cmd_train(config);
      const auto& first = s.log.front();
      const auto& last = s.log.back();
      std::printf("val nll %.4f -> %.4f (marginal), wade %.4f / %.4f (marginal / conditional)\n",
                  first.val_nll_marginal, last.val_nll_marginal, last.val_wade_marginal, last.val_wade_conditional);
      std::printf("checkpoint %s, log %s\n", s.checkpoint_path.c_str(), s.log_path.c_str());
    } else if (command == "score") {
      const auto s = cbp::cmd_score(config);
      std::printf("scored %zu ordered pairs -> %s\n", s.reports.size(), s.csv_path.c_str());
    } else if (command == "mine") {
      const auto s = cbp::cmd_mine(config);
      for (const auto& m : s.rows) {
        const auto& r = m.report;
        std::printf("%3zu scene %llu %d->%d mi %.4f dwade %s%s\n", m.rank,
                    static_cast<unsigned long long>(r.scene_id), r.query_id, r.target_id, r.mi_estimate,
                    r.delta_wade ? std::to_string(*r.delta_wade).c_str() : "-",
                    m.low_query_likelihood ? "  [unlikely query]" : "");
      }
    } else if (command == "prune") {
      const auto s = cbp::cmd_prune(config);
      std::printf("AV wADE6 change after pruning (pruned minus original)\n");
      for (const auto& r : s.rows) {
        std::printf("  %-8s keep %zu %-8s %+.4f +/- %.4f (%zu scenes)\n", cbp::to_string(r.strategy).c_str(),
                    r.n_keep, cbp::to_string(r.condition).c_str(), r.mean_delta, r.stderr_delta, r.scenes);
      }
    }
  } catch (const cbp::ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kConfigExit;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntimeExit;
  }
  return 0;
}

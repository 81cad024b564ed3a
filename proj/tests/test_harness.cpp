#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "doctest.h"

#include "cbp/config.hpp"
#include "cbp/errors.hpp"
#include "cbp/harness.hpp"

using namespace cbp;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("cbp_test_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Short horizons and a narrow model so the whole pipeline runs in seconds.
RunConfig small_run(const fs::path& out) {
  std::istringstream text(R"(
# pipeline fixture
seed = 7
sim.scene_count = 50
sim.past_steps = 4
sim.future_steps = 8
model.modes = 3
model.encoder_width = 16
model.trunk_width = 24
train.epochs = 30
train.val_limit = 10
score.samples = 200
score.max_scenes = 4
)");
  auto c = parse_run_config(text);
  c.out_dir = out.string();
  return c;
}

int run_cli(const std::string& args) {
  const int status = std::system((std::string(CBP_CLI_PATH) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("key-value parsing") {
  std::istringstream in("  # comment\n\nseed = 12\n sim.dt=0.1 \ntrain.epochs = 3\ntrain.epochs = 4\n");
  const auto kv = parse_key_values(in);
  CHECK(kv.size() == 3);
  CHECK(kv.at("sim.dt") == "0.1");
  CHECK(kv.at("train.epochs") == "4");

  std::istringstream text("seed = 12\nsim.dt = 0.1\ntrain.epochs = 4\nprune.keep = 1, 3\nprune.strategy = both\n"
                          "train.optimizer = adam\nscore.renormalize = false\n");
  const auto c = parse_run_config(text);
  CHECK(c.seed == 12);
  CHECK(c.sim.dt == 0.1);
  CHECK(c.train.epochs == 4);
  CHECK(c.prune_keep == std::vector<std::size_t>{1, 3});
  CHECK(c.prune_strategies.size() == 2);
  CHECK(c.train.optimizer == Optimizer::adam);
  CHECK_FALSE(c.estimator.renormalize);
  CHECK(c.model_config().dt == 0.1);
}

TEST_CASE("config errors name the key") {
  auto field_of = [](const std::string& text) {
    std::istringstream in(text);
    try {
      parse_run_config(in).validate();
    } catch (const ConfigError& e) {
      return e.field();
    }
    return std::string("<none>");
  };
  CHECK(field_of("bogus.key = 1\n") == "bogus.key");
  CHECK(field_of("train.epochs = -1\n") == "train.epochs");
  CHECK(field_of("sim.dt = fast\n") == "sim.dt");
  CHECK(field_of("score.renormalize = maybe\n") == "score.renormalize");
  CHECK(field_of("prune.strategy = random\n") == "prune.strategy");
  CHECK(field_of("no equals sign\n") == "line 1");
  CHECK(field_of("split.train = 0.5\n") == "split");
  CHECK(field_of("train.learning_rate = 0\n") == "train.learning_rate");
  CHECK(field_of("seed = 3\n") == "<none>");
}

TEST_CASE("every documented key is accepted") {
  const auto keys = known_config_keys();
  CHECK(std::set<std::string>(keys.begin(), keys.end()).size() == keys.size());
  for (const auto& k : keys) {
    RunConfig c;
    std::string v = "1";
    if (k == "dataset" || k == "eval_dataset" || k == "checkpoint" || k == "out_dir") v = "x";
    if (k == "train.optimizer") v = "momentum";
    if (k == "prune.strategy") v = "mi";
    CAPTURE(k);
    CHECK_NOTHROW(apply_setting(c, k, v));
  }
}

TEST_CASE("fnv1a64 reference values") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("datagen: counts, manifest and determinism") {
  const auto dir = scratch_dir("datagen");
  RunConfig c;
  c.seed = 7;
  c.sim.scene_count = 100;
  c.out_dir = (dir / "a").string();
  const auto a = cmd_datagen(c);
  CHECK(a.total == 100);
  // Default mix 0.30 / 0.20 / 0.15 / 0.25 / 0.10 of 100 scenes.
  CHECK(a.counts.at("car_follow") == 30);
  CHECK(a.counts.at("cut_in") == 20);
  CHECK(a.counts.at("yield_turn") == 15);
  CHECK(a.counts.at("independent") == 25);
  CHECK(a.counts.at("confounded_stop") == 10);
  CHECK(validate_output(a.manifest_path).schema == "cbp.manifest.v1");
  CHECK(validate_output(a.dataset_path).rows == 100);

  c.out_dir = (dir / "b").string();
  const auto b = cmd_datagen(c);
  CHECK(a.hash == b.hash);
  CHECK(slurp(a.dataset_path) == slurp(b.dataset_path));

  c.sim.mix.car_follow = 0.2;  // mix now sums to 0.9
  CHECK_THROWS_AS(cmd_datagen(c), ConfigError);
}

TEST_CASE("pipeline: train, resume, score, mine, prune, validate") {
  const auto dir = scratch_dir("pipeline");
  RunConfig c = small_run(dir);
  cmd_datagen(c);

  const auto t = cmd_train(c);
  REQUIRE(t.log.size() == 31);
  CHECK(t.log.back().val_nll_marginal < t.log.front().val_nll_marginal);
  {
    std::ifstream in(t.log_path);
    std::string schema, header;
    std::getline(in, schema);
    std::getline(in, header);
    CHECK(schema == "# schema=cbp.train_log.v1");
    CHECK(header == "epoch,train_loss,val_nll_marginal,val_nll_conditional,val_wade_marginal,val_wade_conditional");
  }

  SUBCASE("resume with no extra epochs reproduces the final metrics") {
    RunConfig r = c;
    r.resume = true;
    r.train.epochs = 0;
    r.out_dir = (dir / "resume").string();
    r.checkpoint = t.checkpoint_path;
    r.dataset = c.dataset_path();
    const auto again = cmd_train(r);
    REQUIRE(again.log.size() == 1);
    CHECK(again.log[0].val_nll_marginal == t.log.back().val_nll_marginal);
    CHECK(again.log[0].val_nll_conditional == t.log.back().val_nll_conditional);
    CHECK(again.log[0].val_wade_marginal == t.log.back().val_wade_marginal);
    CHECK(again.log[0].val_wade_conditional == t.log.back().val_wade_conditional);
  }

  SUBCASE("score") {
    const auto s = cmd_score(c);
    const auto scenes = eval_scenes(c);
    std::size_t pairs = 0;
    for (const auto& sc : scenes) pairs += sc.agents.size() * (sc.agents.size() - 1);
    CHECK(s.reports.size() == pairs);
    CHECK(validate_output(s.csv_path).rows == pairs);
    std::size_t binned = 0;
    for (auto n : s.histogram) binned += n;
    CHECK(binned == pairs);
    for (const auto& r : s.reports) CHECK(r.mi_estimate >= -3.0 * r.mi_stderr);

    RunConfig again = c;
    again.out_dir = (dir / "score_again").string();
    again.dataset = c.dataset_path();
    again.checkpoint = c.checkpoint_path();
    cmd_score(again);
    for (const char* f : {"interactivity.csv", "mi_histogram.csv", "mi_histogram.gp"}) {
      CHECK(slurp(dir / f) == slurp(dir / "score_again" / f));
    }
  }

  SUBCASE("mine clamps top_n and ranks by MI") {
    RunConfig m = c;
    m.top_n = 100000;
    const auto s = cmd_mine(m);
    CHECK(s.rows.size() == score_scenes(load_checkpoint(c.checkpoint_path()), eval_scenes(c), c.estimator, c.seed).size());
    for (std::size_t i = 1; i < s.rows.size(); ++i) {
      CHECK(s.rows[i - 1].report.mi_estimate >= s.rows[i].report.mi_estimate);
      CHECK(s.rows[i].rank == i + 1);
    }
    CHECK(validate_output((dir / "mined.csv").string()).schema == "cbp.mined.v1");
    CHECK(validate_output((dir / "mined_trajectories.csv").string()).rows > 0);
  }

  SUBCASE("prune") {
    RunConfig p = c;
    p.sim.scene_count = 6;
    p.sim.mix = {1, 0, 0, 0, 0};
    p.sim.prune_layout = true;
    p.eval_dataset = (dir / "prune_scenes.jsonl").string();
    p.dataset = p.eval_dataset;
    p.out_dir = (dir / "prune").string();
    cmd_datagen(p);
    p.checkpoint = t.checkpoint_path;
    p.prune_keep = {1, 2, 50};
    p.max_eval_scenes = 0;
    const auto s = cmd_prune(p);
    CHECK(s.rows.size() == 2 * 3 * 2);
    std::set<std::tuple<std::string, std::size_t, std::string>> seen;
    for (const auto& r : s.rows) {
      seen.insert({to_string(r.strategy), r.n_keep, to_string(r.condition)});
      CHECK(r.scenes == 6);
    }
    CHECK(seen.size() == 12);
    for (const auto& r : s.scenes) {
      if (r.n_keep == 50 || r.condition == PruneCondition::context) CHECK(r.delta() == 0.0);
    }
    CHECK(validate_output((dir / "prune" / "prune_report.csv").string()).rows == 12);
    CHECK(validate_output((dir / "prune" / "prune_scenes.csv").string()).rows == 6 * 12);
  }
}

TEST_CASE("mine flags queries below the 10th percentile of marginal likelihood") {
  std::vector<InteractivityReport> reports;
  for (int i = 0; i < 11; ++i) {
    InteractivityReport r;
    r.scene_id = static_cast<std::uint64_t>(i);
    r.query_id = 0;
    r.target_id = 1;
    r.mi_estimate = static_cast<double>(i);
    r.query_marginal_ll = static_cast<double>(i);  // 10th percentile of 0..10 is 1
    reports.push_back(r);
  }
  const auto s = mine_reports(reports, 3);
  CHECK(s.query_ll_threshold == doctest::Approx(1.0));
  REQUIRE(s.rows.size() == 3);
  CHECK(s.rows[0].report.scene_id == 10);
  CHECK_FALSE(s.rows[0].low_query_likelihood);
  const auto all = mine_reports(reports, 50);
  CHECK(all.rows.size() == 11);
  CHECK(all.rows.back().low_query_likelihood);         // ll 0
  CHECK_FALSE(all.rows[all.rows.size() - 2].low_query_likelihood);  // ll 1 is not below
}

TEST_CASE("histogram bins") {
  std::vector<InteractivityReport> reports(5);
  reports[0].mi_estimate = -0.01;
  reports[1].mi_estimate = 0.0;
  reports[2].mi_estimate = 0.24;
  reports[3].mi_estimate = 0.25;
  reports[4].mi_estimate = 1.1;
  CHECK(mi_histogram(reports, 0.25) == std::vector<std::size_t>{3, 1, 0, 0, 1});
  CHECK_THROWS_AS(mi_histogram(reports, 0.0), ArgumentError);
}

TEST_CASE("validate rejects malformed files") {
  const auto dir = scratch_dir("validate");
  auto write = [&](const std::string& name, const std::string& text) {
    std::ofstream(dir / name) << text;
    return (dir / name).string();
  };
  CHECK(validate_output(write("ok.csv", "# schema=cbp.mi_histogram.v1\nbin_lo,bin_hi,count\n0,0.25,3\n")).rows == 1);
  CHECK_THROWS(validate_output(write("noschema.csv", "bin_lo,bin_hi,count\n")));
  CHECK_THROWS(validate_output(write("unknown.csv", "# schema=cbp.nothing.v9\na\n")));
  CHECK_THROWS(validate_output(write("header.csv", "# schema=cbp.mi_histogram.v1\nlo,hi,count\n")));
  CHECK_THROWS(validate_output(write("width.csv", "# schema=cbp.mi_histogram.v1\nbin_lo,bin_hi,count\n0,1\n")));
  CHECK_THROWS(validate_output(write("text.csv", "# schema=cbp.mi_histogram.v1\nbin_lo,bin_hi,count\n0,1,x\n")));
  CHECK_THROWS(validate_output((dir / "missing.csv").string()));
}

TEST_CASE("command-line exit codes") {
  const auto dir = scratch_dir("cli");
  std::ofstream(dir / "bad_mix.cfg") << "sim.mix.car_follow = 0.2\nsim.scene_count = 10\n";
  std::ofstream(dir / "ok.cfg") << "sim.scene_count = 10\n";
  const std::string out = " --out " + (dir / "out").string();
  CHECK(run_cli("datagen --config " + (dir / "ok.cfg").string() + out) == 0);
  CHECK(run_cli("datagen --config " + (dir / "bad_mix.cfg").string() + out) == 2);
  CHECK(run_cli("datagen --config " + (dir / "missing.cfg").string() + out) == 2);
  CHECK(run_cli("score" + out) == 2);  // no checkpoint yet
  CHECK(run_cli("bogus") == 2);
  CHECK(run_cli("validate " + (dir / "out" / "scenes.jsonl").string()) == 0);
  std::ofstream(dir / "broken.csv") << "# schema=cbp.mi_histogram.v1\nnope\n";
  CHECK(run_cli("validate " + (dir / "broken.csv").string()) == 3);
}

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "pil/checkpoint.hpp"
#include "pil/errors.hpp"
#include "pil/experiment.hpp"

using namespace pil;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny() {
  ExperimentConfig cfg;
  cfg.n = 50;
  cfg.split_seed = 3;
  cfg.train.stage1_iters = 40;
  cfg.train.stage2_iters = 40;
  cfg.train.batch_size = 8;
  cfg.train.warmup_iters = 10;
  cfg.train.log_every = 2;  // checkpoints every 20 iterations
  cfg.train.log_test_samples = 10;
  cfg.train.weights.mask_proportion = 0.5;
  cfg.activation_samples = 2;
  return cfg;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "pil_experiment" / name;
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::set<std::string> listing(const fs::path& dir) {
  std::set<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out.insert(fs::relative(e.path(), dir).generic_string());
  }
  return out;
}

}  // namespace

TEST(Experiment, WritesTheDeclaredFilesAndIsReproducible) {
  const fs::path a = fresh_dir("a"), b = fresh_dir("b");
  const auto summary = run_experiment(tiny(), a);
  run_experiment(tiny(), b);

  std::set<std::string> expected{"config.json", "losses.csv", "metrics.csv", "summary.json"};
  for (const char* phase : kPhases) {
    expected.insert(std::string("checkpoints/") + phase + ".plck");
    expected.insert(std::string("checkpoints/") + phase + ".optim.plck");
  }
  for (const char* model : {"teacher", "baseline", "pi"}) {
    for (int k = 0; k < 2; ++k) expected.insert(std::string("activations/") + model + "_" + std::to_string(k) + ".pgm");
  }
  EXPECT_EQ(listing(a), expected);

  for (const char* f : {"summary.json", "losses.csv", "metrics.csv", "config.json"}) {
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  EXPECT_TRUE(summary["teacher_digest"]["unchanged"].get<bool>());
  EXPECT_EQ(summary["teacher_digest"]["before_stage2"], summary["teacher_digest"]["after_stage2"]);
  for (const char* m : {"teacher", "student", "baseline", "pi"}) EXPECT_TRUE(summary["models"].contains(m)) << m;

  // The saved teacher is the frozen one the summary talks about.
  const Network teacher = network_from_checkpoint(load_checkpoint(a / "checkpoints/teacher.plck"));
  EXPECT_EQ(digest_hex(teacher.digest()), summary["teacher_digest"]["after_stage2"].get<std::string>());

  const std::string losses = slurp(a / "losses.csv");
  for (const char* stage : {",pretrain,", ",baseline,", ",pi,"}) EXPECT_NE(losses.find(stage), std::string::npos);
  EXPECT_NE(losses.find("loss_mask"), std::string::npos);
}

TEST(Experiment, InterruptedRunResumesToTheSameResult) {
  const fs::path whole = fresh_dir("whole"), cut = fresh_dir("cut");
  run_experiment(tiny(), whole);

  RunOptions stop;
  stop.interrupt_after = 65;  // mid student phase, after its first checkpoint
  EXPECT_THROW(run_experiment(tiny(), cut, stop), Interrupted);
  EXPECT_FALSE(fs::exists(cut / "summary.json"));
  RunOptions again;
  again.resume = true;
  again.interrupt_after = 47;  // mid baseline this time
  EXPECT_THROW(run_experiment(tiny(), cut, again), Interrupted);
  RunOptions finish;
  finish.resume = true;
  run_experiment(tiny(), cut, finish);

  for (const char* f : {"summary.json", "losses.csv", "metrics.csv"}) EXPECT_EQ(slurp(whole / f), slurp(cut / f)) << f;
}

TEST(Experiment, ResumeRefusesAnotherConfig) {
  const fs::path dir = fresh_dir("other");
  RunOptions stop;
  stop.interrupt_after = 5;
  EXPECT_THROW(run_experiment(tiny(), dir, stop), Interrupted);
  ExperimentConfig changed = tiny();
  changed.train.weights.lambda = 2.0;
  RunOptions resume;
  resume.resume = true;
  EXPECT_THROW(run_experiment(changed, dir, resume), ArgumentError);
}

TEST(Experiment, ConfigJsonRoundTrip) {
  ExperimentConfig cfg = tiny();
  cfg.generator.render.noise = 0.3;
  cfg.thresholds_3d = {0.1, 0.2};
  const ExperimentConfig back = experiment_config_from_json(to_json(cfg));
  EXPECT_EQ(to_json(back), to_json(cfg));
  EXPECT_EQ(back.n, 50u);
  EXPECT_EQ(back.train.log_every, 2u);

  const auto partial = experiment_config_from_json(nlohmann::json{{"n", 10}, {"lambda", 5.0}});
  EXPECT_EQ(partial.n, 10u);
  EXPECT_EQ(partial.train.weights.lambda, 5.0);
  EXPECT_EQ(partial.train.stage1_iters, 1000u);

  ExperimentConfig bad = tiny();
  bad.n = 1;
  EXPECT_THROW(bad.validate(), ArgumentError);
  bad = tiny();
  bad.thresholds_2d = {2.0, 1.0};
  EXPECT_THROW(bad.validate(), ArgumentError);
}

TEST(Experiment, MetricsTableLayout) {
  Evaluation e;
  e.normalized_3d.epe_mean = 0.5;
  e.normalized_3d.epe_median = 0.25;
  e.normalized_3d.n_samples = 3;
  e.normalized_3d.pck = {{0.25, 0.0}, {0.5, 1.0}};
  e.normalized_3d.per_joint_epe = {0.5};
  const std::string csv = metrics_to_csv({{"pi", e}});
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "model,space,unit,metric,key,value");
  EXPECT_NE(csv.find("pi,3d,normalized,epe_mean,,0.5\n"), std::string::npos);
  EXPECT_NE(csv.find("pi,3d,normalized,pck,0.5,1\n"), std::string::npos);
  EXPECT_NE(csv.find("pi,3d,normalized,epe_joint,0,0.5\n"), std::string::npos);
}

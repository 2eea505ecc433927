#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "pil/synthdata.hpp"
#include "pil/trainer.hpp"

namespace pil {

/// Everything run_experiment needs: the training schedule plus the dataset it
/// is generated from and the evaluation grids.
struct ExperimentConfig {
  TrainConfig train;
  GeneratorConfig generator;
  std::size_t n = 2500;
  /// The dataset stream. Kept apart from train.seed so that changing one does
  /// not perturb the other.
  std::uint64_t split_seed = 0;
  /// Test samples whose activation maps are exported per model.
  std::size_t activation_samples = 4;
  std::vector<double> thresholds_3d = default_thresholds_3d();
  std::vector<double> thresholds_2d = default_thresholds_2d();

  void validate() const;
};

/// Flat object: the TrainConfig keys plus n, split_seed, generator,
/// activation_samples, thresholds_3d and thresholds_2d.
nlohmann::json to_json(const ExperimentConfig& cfg);
/// Missing keys keep the values of `base`. Throws ArgumentError on bad types.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, ExperimentConfig base = {});

/// Thrown by run_experiment when RunOptions::interrupt_after is reached.
class Interrupted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunOptions {
  /// Continue from the checkpoints already in the directory.
  bool resume = false;
  /// Stop (throwing Interrupted) after this many training iterations in this
  /// call, counted over all phases. Used to exercise resumption.
  std::optional<std::size_t> interrupt_after;
  /// Called with one line per finished phase; may be empty.
  std::function<void(const std::string&)> progress;
};

/// Training phases in execution order; also the checkpoint file stems.
inline constexpr const char* kPhases[] = {"teacher", "student", "baseline", "student_pi"};

/// Pretrains teacher and student, runs the baseline and PI second stages,
/// evaluates every model on the test split and writes
///
///   config.json  losses.csv  metrics.csv  summary.json
///   checkpoints/<phase>.plck  checkpoints/<phase>.optim.plck
///   activations/<model>_<k>.pgm
///
/// Returns the summary. Errors carry the phase that raised them.
nlohmann::json run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& dir,
                              const RunOptions& options = {});

/// Long-format metrics table: model,space,unit,metric,key,value.
std::string metrics_to_csv(const std::vector<std::pair<std::string, Evaluation>>& models);

}  // namespace pil

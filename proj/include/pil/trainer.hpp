#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pil/checkpoint.hpp"
#include "pil/losses.hpp"
#include "pil/metrics.hpp"
#include "pil/model.hpp"
#include "pil/optim.hpp"
#include "pil/synthdata.hpp"

namespace pil {

struct MaskStageFlags {
  bool stage1 = false;
  bool stage2 = true;
};

struct TrainConfig {
  std::string profile = "desk";
  std::size_t stage1_iters = 1000;
  std::size_t stage2_iters = 1000;
  std::size_t batch_size = 16;
  /// Pretraining learning rate.
  double lr = 1e-3;
  /// Learning rate of the second stage. Unset means lr / lambda, which keeps the
  /// step size of the pose term equal to the one used during pretraining.
  std::optional<double> stage2_lr;
  double momentum = 0.9;
  /// Pretraining ramps the learning rate linearly from lr / warmup_iters to lr
  /// over this many iterations; 0 disables the ramp.
  std::size_t warmup_iters = 200;
  LossWeights weights;
  MaskStageFlags mask_stage_flags;
  std::uint64_t seed = 0;
  std::size_t log_every = 50;
  /// Test samples scored at every log point (the leading part of the test split).
  std::size_t log_test_samples = 100;
  std::filesystem::path checkpoint_dir;

  double resolved_stage2_lr() const { return stage2_lr.value_or(lr / weights.lambda); }
  /// Throws ArgumentError for out-of-range fields.
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
/// Missing keys keep their defaults.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

enum class Stage { Pretrain, Baseline, PI };
enum class Split { Train, Test };

std::string to_string(Stage stage);
std::string to_string(Split split);

/// One log point of one network. Which losses are present depends on the stage.
struct LossRecord {
  std::size_t iteration = 0;
  Stage stage = Stage::Pretrain;
  Split split = Split::Train;
  std::optional<double> loss_pose_student;
  std::optional<double> loss_pose_teacher;
  std::optional<double> loss_inter;
  std::optional<double> loss_joint;
  std::optional<double> loss_mask;
};

/// Long format: iteration,stage,split,loss_name,value (LF, '.' decimal, %.17g).
std::string records_to_csv(const std::vector<LossRecord>& records);
std::vector<LossRecord> records_from_csv(const std::string& csv);

/// Training samples in the layout the networks consume.
enum class Modality { Hard, Privileged };

std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

/// Builds the [N,C,H,W] input batch for the given samples.
Tensor stack_images(const std::vector<const Sample*>& samples, Modality modality);
/// [N,3J] pose targets.
Tensor stack_poses(const std::vector<const Sample*>& samples);
/// [N,1,h,w] background masks at tap resolution; rows outside `selected` are zero.
Tensor stack_masks(const std::vector<const Sample*>& samples, std::size_t h, std::size_t w,
                   const std::vector<std::size_t>& selected);

/// Index of the k-th sample of iteration `iteration` (0-based) when the split
/// of size `n` is visited in seeded per-epoch permutations.
std::vector<std::size_t> batch_indices(std::uint64_t order_seed, std::size_t iteration, std::size_t batch_size,
                                       std::size_t n);

struct StepLosses {
  double pose = 0.0;
  std::optional<double> inter;
  std::optional<double> joint;
  std::optional<double> mask;
};

/// Runs after every completed iteration with the 1-based local count, the
/// optimizer and the records produced so far. Used for checkpointing and
/// interruption.
struct PhaseHooks {
  std::function<void(std::size_t local_iteration, Sgd& optimizer, const std::vector<LossRecord>& records)>
      on_iteration;
};

/// Where a phase resumes from.
struct PhaseState {
  std::size_t start_iteration = 0;  // local iterations already completed
  std::vector<Tensor> momentum;     // restored momentum buffers, empty for a fresh start
};

struct PhaseResult {
  std::vector<LossRecord> records;
  std::size_t iterations_run = 0;
};

/// Pose-only pretraining of one branch on its own modality: the teacher on
/// privileged images, the student on hard images. `iter_offset` shifts the
/// iteration numbers written to the records.
PhaseResult pretrain(Network& net, Modality modality, const Dataset& data, const TrainConfig& cfg,
                     std::size_t iter_offset, const PhaseState& state = {}, const PhaseHooks& hooks = {});

/// Second stage. With `teacher` the student minimizes inter + lambda * pose (plus
/// the mask loss when enabled); without it the student minimizes lambda * pose
/// only, which is the RGB-only baseline. The teacher must be frozen.
PhaseResult stage2_train(Network& student, const Network* teacher, const Dataset& data, const TrainConfig& cfg,
                         std::size_t iter_offset, const PhaseState& state = {}, const PhaseHooks& hooks = {});

/// Gradients of one stage-2 step without updating anything; used to compare
/// update directions. Returns the concatenated student parameter gradient.
std::vector<double> stage2_gradient(Network& student, const Network* teacher, const std::vector<const Sample*>& batch,
                                    const LossWeights& weights, bool with_mask, std::uint64_t mask_seed);

/// Predictions [N,3J] for a sample list, computed in fixed-size chunks.
Tensor predict(const Network& net, const std::vector<Sample>& samples, Modality modality);
using Predictor = std::function<Tensor(const std::vector<Sample>&)>;

struct Evaluation {
  Metrics normalized_3d;  ///< root-relative, scale-normalized units
  Metrics pixels_2d;      ///< image-plane pixels after undoing the normalization
};

Evaluation evaluate_predictions(const Tensor& pred, const std::vector<Sample>& samples,
                                std::span<const double> thresholds_3d, std::span<const double> thresholds_2d);
Evaluation evaluate(const Predictor& predictor, const std::vector<Sample>& samples,
                    std::span<const double> thresholds_3d, std::span<const double> thresholds_2d);
/// Throws ShapeError when the checkpoint's input does not match the modality.
Evaluation evaluate_checkpoint(const Checkpoint& ckpt, const std::vector<Sample>& samples, Modality modality,
                               std::span<const double> thresholds_3d = default_thresholds_3d(),
                               std::span<const double> thresholds_2d = default_thresholds_2d());

/// Mean |activation| of the tap over background cells (mask == 1 at tap
/// resolution) of the hard images.
double background_activation(const Network& net, const std::vector<Sample>& samples);

/// Tap values [N,C,h,w] for a sample list.
Tensor tap_values(const Network& net, const std::vector<Sample>& samples, Modality modality);

}  // namespace pil

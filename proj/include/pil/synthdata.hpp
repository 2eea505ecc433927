#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "pil/tensor.hpp"

namespace pil {

struct AngleRange {
  double min = 0.0;
  double max = 0.0;
  double mid() const { return 0.5 * (min + max); }
};

/// Planar hand-like skeleton: a root joint with `chains` serial chains of
/// `joints_per_chain` joints each. Lengths are in pixels, angles in radians.
struct SkeletonConfig {
  std::size_t chains = 5;
  std::size_t joints_per_chain = 4;
  /// One entry per bone, chain-major: bone (c, i) links joint i-1 (or the root)
  /// to joint i of chain c.
  std::vector<double> bone_lengths;
  /// In-plane bend of each bone relative to its parent bone.
  std::vector<AngleRange> flex_ranges;
  /// Out-of-plane lift of each bone relative to its parent bone.
  std::vector<AngleRange> lift_ranges;
  /// In-plane direction of each chain's first bone, before the global roll.
  std::vector<double> chain_base_angles;
  AngleRange roll_range{-0.6, 0.6};
  /// Per-sample uniform scale applied to every bone length.
  AngleRange scale_range{0.85, 1.15};
  /// Root placement, in pixels from the frame center.
  double root_jitter = 3.0;
  /// z interval mapped onto the privileged intensity ramp.
  AngleRange depth_range{-6.0, 6.0};
  /// Root z is drawn from [-root_depth_jitter, root_depth_jitter].
  double root_depth_jitter = 2.0;

  std::size_t joint_count() const { return 1 + chains * joints_per_chain; }
  /// Throws ArgumentError when the per-bone vectors do not match the joint count,
  /// a length is non-positive, or an angle range is empty.
  void validate() const;

  /// Five four-bone chains fanned upwards (21 joints), sized for a 32x32 frame.
  static SkeletonConfig hand21();
};

struct RenderConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  /// Stroke width of a bone in pixels.
  double bone_width = 2.0;
  /// Amplitude of the per-pixel uniform noise on the hard image.
  double noise = 0.15;
  std::size_t blobs = 5;
  /// Blob major/minor axis ratio is drawn from [1, blob_aspect_max].
  double blob_aspect_max = 1.0;
  /// Fraction of samples whose background blobs share the foreground hue.
  double same_hue_fraction = 0.25;
  /// Zero background without blobs (tests only).
  bool blank_background = false;
  /// Joints must project at least this far inside the frame.
  double margin = 1.0;
  std::size_t max_attempts = 100;
};

struct GeneratorConfig {
  SkeletonConfig skeleton = SkeletonConfig::hand21();
  RenderConfig render;
};

nlohmann::json to_json(const SkeletonConfig& cfg);
nlohmann::json to_json(const RenderConfig& cfg);
nlohmann::json to_json(const GeneratorConfig& cfg);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);

/// Joint positions [J,3] in frame pixels (x right, y down, z away from the camera).
using Joints = std::vector<std::array<double, 3>>;

struct PoseSample {
  Joints joints;
  double scale_factor = 1.0;  ///< the drawn per-sample scale
};

enum class AngleMode { Random, Midpoint };

/// Forward kinematics from sampled angles. Midpoint mode consumes no
/// randomness and centers the root. Retries draws whose projection leaves the
/// frame; throws ArgumentError after `render.max_attempts` failures.
PoseSample sample_pose(const GeneratorConfig& cfg, std::uint64_t seed, AngleMode mode = AngleMode::Random);

struct SampleMeta {
  std::uint64_t seed = 0;
  std::array<double, 3> root{};
  /// Longest bone in pixels; pose = (joints - root) / scale.
  double scale = 1.0;
};

struct Sample {
  Tensor image_hard;  // [3,H,W]
  Tensor image_priv;  // [1,H,W]
  Tensor mask;        // [1,H,W], 0 on the skeleton, 1 elsewhere
  Tensor pose;        // [3J]
  SampleMeta meta;
};

/// Root-relative, scale-normalized pose vector and the normalization used.
Tensor normalize_pose(const Joints& joints, const SkeletonConfig& cfg, SampleMeta& meta);
Joints denormalize_pose(const Tensor& pose, const SampleMeta& meta);

/// Rasterizes the pair. The privileged image is the depth-shaded skeleton on
/// zero; the hard image composites a jittered color version over cluttered
/// background plus noise. Both share one foreground support.
Sample render_pair(const Joints& joints, const GeneratorConfig& cfg, std::uint64_t seed);

/// Pose sampling and rendering driven by streams derived from one sample seed.
Sample generate_sample(const GeneratorConfig& cfg, std::uint64_t seed);

struct Manifest {
  int version = 1;
  GeneratorConfig config;
  std::size_t n = 0;
  std::uint64_t split_seed = 0;
  std::vector<std::uint64_t> train_seeds;
  std::vector<std::uint64_t> test_seeds;
};

nlohmann::json to_json(const Manifest& m);
Manifest manifest_from_json(const nlohmann::json& j);
void write_manifest(const Manifest& m, const std::filesystem::path& path);
Manifest read_manifest(const std::filesystem::path& path);

struct Dataset {
  Manifest manifest;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

/// 80/20 split (train = floor(4n/5)) of n distinct sample seeds drawn from `split_seed`.
Manifest make_manifest(std::size_t n, const GeneratorConfig& cfg, std::uint64_t split_seed);
/// Regenerates every sample listed in the manifest.
Dataset materialize(const Manifest& manifest);
Dataset make_dataset(std::size_t n, const GeneratorConfig& cfg, std::uint64_t split_seed);

/// Per-sample directories with little-endian f64 planar dumps and PGM previews.
void export_raw(const Dataset& data, const std::filesystem::path& dir);

/// Nearest-neighbor resampling of a [1,H,W] (or [N,1,H,W]) mask to h x w,
/// re-binarized at 0.5. Output texel (y, x) reads input (floor(y H / h), floor(x W / w)).
/// Throws ArgumentError for an upsampling request.
Tensor downsample_mask(const Tensor& mask, std::size_t h, std::size_t w);

}  // namespace pil

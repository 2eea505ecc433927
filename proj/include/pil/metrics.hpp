#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pil/pgm.hpp"
#include "pil/tensor.hpp"

namespace pil {

struct PckPoint {
  double threshold = 0.0;
  double fraction = 0.0;
};

struct EpeSummary {
  double mean = 0.0;
  double median = 0.0;
  std::vector<double> per_joint;
  std::size_t n_samples = 0;
};

struct Metrics {
  std::vector<PckPoint> pck;
  double epe_mean = 0.0;
  double epe_median = 0.0;
  std::vector<double> per_joint_epe;
  std::size_t n_samples = 0;
};

/// Euclidean error of every (sample, joint) pair of [N,J,D] tensors, D in {2,3},
/// in sample-major order.
std::vector<double> joint_errors(const Tensor& pred, const Tensor& gt);

/// Mean and median over all N*J errors; the median of an even count averages
/// the two middle values.
EpeSummary compute_epe(const Tensor& pred, const Tensor& gt);

/// Fraction of (sample, joint) pairs with error <= t for each threshold.
/// Thresholds must be positive and strictly increasing.
std::vector<PckPoint> compute_pck(const Tensor& pred, const Tensor& gt, std::span<const double> thresholds);
std::vector<PckPoint> pck_from_errors(std::span<const double> errors, std::span<const double> thresholds);

Metrics compute_metrics(const Tensor& pred, const Tensor& gt, std::span<const double> thresholds);

/// `count` evenly spaced thresholds ending at `max` (the zero point is left out).
std::vector<double> linear_thresholds(double max, std::size_t count = 20);
/// 3-D grid, normalized pose units: 0.05 .. 1.0.
std::vector<double> default_thresholds_3d();
/// 2-D grid, pixels: 0.75 .. 15.
std::vector<double> default_thresholds_2d();

/// Per-pixel maximum over the channels of sample `n` of a [N,C,h,w] tap,
/// min-max scaled to 0..255. A constant map yields an all-zero image.
GrayImage activation_map(const Tensor& tap, std::size_t n);

/// Writes one P5 image per sample as `<stem>_<n>.pgm` and returns the paths.
std::vector<std::filesystem::path> export_activation_map(const Tensor& tap, const std::filesystem::path& stem);

}  // namespace pil

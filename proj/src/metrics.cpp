#include "pil/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "pil/errors.hpp"

namespace pil {

std::vector<double> joint_errors(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape()) {
    throw ShapeError("prediction " + shape_string(pred.shape()) + " does not match ground truth " +
                     shape_string(gt.shape()));
  }
  if (pred.rank() != 3 || (pred.dim(2) != 2 && pred.dim(2) != 3)) {
    throw ShapeError("keypoints must be [N,J,2] or [N,J,3], got " + shape_string(pred.shape()));
  }
  const std::size_t pairs = pred.dim(0) * pred.dim(1), d = pred.dim(2);
  std::vector<double> errors(pairs);
  for (std::size_t i = 0; i < pairs; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double diff = pred[i * d + k] - gt[i * d + k];
      s += diff * diff;
    }
    errors[i] = std::sqrt(s);
  }
  return errors;
}

EpeSummary compute_epe(const Tensor& pred, const Tensor& gt) {
  std::vector<double> errors = joint_errors(pred, gt);
  const std::size_t n = pred.dim(0), joints = pred.dim(1);
  EpeSummary out;
  out.n_samples = n;
  out.per_joint.assign(joints, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < errors.size(); ++i) {
    total += errors[i];
    out.per_joint[i % joints] += errors[i];
  }
  for (double& v : out.per_joint) v /= static_cast<double>(n);
  out.mean = total / static_cast<double>(errors.size());
  std::sort(errors.begin(), errors.end());
  const std::size_t mid = errors.size() / 2;
  out.median = errors.size() % 2 ? errors[mid] : 0.5 * (errors[mid - 1] + errors[mid]);
  return out;
}

std::vector<PckPoint> pck_from_errors(std::span<const double> errors, std::span<const double> thresholds) {
  if (thresholds.empty()) throw ArgumentError("PCK needs at least one threshold");
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (!(thresholds[i] > 0.0) || (i > 0 && !(thresholds[i] > thresholds[i - 1]))) {
      throw ArgumentError("PCK thresholds must be positive and strictly increasing");
    }
  }
  if (errors.empty()) throw ArgumentError("PCK needs at least one error");
  std::vector<double> sorted(errors.begin(), errors.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<PckPoint> out;
  for (double t : thresholds) {
    const auto hits = std::upper_bound(sorted.begin(), sorted.end(), t) - sorted.begin();
    out.push_back({t, static_cast<double>(hits) / static_cast<double>(sorted.size())});
  }
  return out;
}

std::vector<PckPoint> compute_pck(const Tensor& pred, const Tensor& gt, std::span<const double> thresholds) {
  return pck_from_errors(joint_errors(pred, gt), thresholds);
}

Metrics compute_metrics(const Tensor& pred, const Tensor& gt, std::span<const double> thresholds) {
  const EpeSummary epe = compute_epe(pred, gt);
  Metrics m;
  m.pck = compute_pck(pred, gt, thresholds);
  m.epe_mean = epe.mean;
  m.epe_median = epe.median;
  m.per_joint_epe = epe.per_joint;
  m.n_samples = epe.n_samples;
  return m;
}

std::vector<double> linear_thresholds(double max, std::size_t count) {
  if (count == 0 || !(max > 0.0)) throw ArgumentError("threshold grid needs a positive max and count");
  std::vector<double> t(count);
  for (std::size_t i = 0; i < count; ++i) t[i] = max * static_cast<double>(i + 1) / static_cast<double>(count);
  return t;
}

std::vector<double> default_thresholds_3d() { return linear_thresholds(1.0); }

std::vector<double> default_thresholds_2d() { return linear_thresholds(15.0); }

GrayImage activation_map(const Tensor& tap, std::size_t n) {
  if (tap.rank() != 4) throw ShapeError("activation tap must be [N,C,h,w], got " + shape_string(tap.shape()));
  if (n >= tap.dim(0)) throw ArgumentError("sample index out of range");
  const std::size_t channels = tap.dim(1), h = tap.dim(2), w = tap.dim(3), plane = h * w;
  std::vector<double> maxout(plane, -std::numeric_limits<double>::infinity());
  for (std::size_t c = 0; c < channels; ++c) {
    const double* src = tap.data().data() + (n * channels + c) * plane;
    for (std::size_t i = 0; i < plane; ++i) maxout[i] = std::max(maxout[i], src[i]);
  }
  const auto [lo, hi] = std::minmax_element(maxout.begin(), maxout.end());
  GrayImage img{w, h, std::vector<std::uint8_t>(plane, 0)};
  const double range = *hi - *lo;
  if (range > 0.0) {
    for (std::size_t i = 0; i < plane; ++i) {
      img.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * (maxout[i] - *lo) / range));
    }
  }
  return img;
}

std::vector<std::filesystem::path> export_activation_map(const Tensor& tap, const std::filesystem::path& stem) {
  if (tap.rank() != 4) throw ShapeError("activation tap must be [N,C,h,w], got " + shape_string(tap.shape()));
  std::vector<std::filesystem::path> paths;
  for (std::size_t n = 0; n < tap.dim(0); ++n) {
    auto path = stem;
    path += "_" + std::to_string(n) + ".pgm";
    write_pgm(path, activation_map(tap, n));
    paths.push_back(std::move(path));
  }
  return paths;
}

}  // namespace pil

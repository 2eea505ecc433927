#include "pil/trainer.hpp"

#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

#include "pil/errors.hpp"
#include "pil/ops.hpp"
#include "pil/rng.hpp"

namespace pil {

void TrainConfig::validate() const {
  const auto profiles = predefined_profiles();
  if (!profiles.count(profile)) throw ArgumentError("unknown profile '" + profile + "'");
  if (batch_size == 0) throw ArgumentError("batch_size must be positive");
  if (log_every == 0) throw ArgumentError("log_every must be positive");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ArgumentError("lr must be positive");
  if (stage2_lr && (!(*stage2_lr > 0.0) || !std::isfinite(*stage2_lr))) {
    throw ArgumentError("stage2_lr must be positive");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ArgumentError("momentum must lie in [0, 1)");
  weights.validate();
}

nlohmann::json to_json(const TrainConfig& cfg) {
  nlohmann::json j = {
      {"profile", cfg.profile},
      {"stage1_iters", cfg.stage1_iters},
      {"stage2_iters", cfg.stage2_iters},
      {"batch_size", cfg.batch_size},
      {"lr", cfg.lr},
      {"stage2_lr", cfg.resolved_stage2_lr()},
      {"momentum", cfg.momentum},
      {"warmup_iters", cfg.warmup_iters},
      {"lambda", cfg.weights.lambda},
      {"mask_proportion", cfg.weights.mask_proportion},
      {"mask_stage_flags", {{"stage1", cfg.mask_stage_flags.stage1}, {"stage2", cfg.mask_stage_flags.stage2}}},
      {"seed", cfg.seed},
      {"log_every", cfg.log_every},
      {"log_test_samples", cfg.log_test_samples},
      {"checkpoint_dir", cfg.checkpoint_dir.string()},
  };
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig cfg) {
  if (!j.is_object()) throw ArgumentError("training config must be a JSON object");
  try {
    if (j.contains("profile")) cfg.profile = j.at("profile").get<std::string>();
    if (j.contains("stage1_iters")) cfg.stage1_iters = j.at("stage1_iters").get<std::size_t>();
    if (j.contains("stage2_iters")) cfg.stage2_iters = j.at("stage2_iters").get<std::size_t>();
    if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size").get<std::size_t>();
    if (j.contains("lr")) cfg.lr = j.at("lr").get<double>();
    if (j.contains("stage2_lr") && !j.at("stage2_lr").is_null()) cfg.stage2_lr = j.at("stage2_lr").get<double>();
    if (j.contains("momentum")) cfg.momentum = j.at("momentum").get<double>();
    if (j.contains("warmup_iters")) cfg.warmup_iters = j.at("warmup_iters").get<std::size_t>();
    if (j.contains("lambda")) cfg.weights.lambda = j.at("lambda").get<double>();
    if (j.contains("mask_proportion")) cfg.weights.mask_proportion = j.at("mask_proportion").get<double>();
    if (j.contains("mask_stage_flags")) {
      const auto& f = j.at("mask_stage_flags");
      if (f.contains("stage1")) cfg.mask_stage_flags.stage1 = f.at("stage1").get<bool>();
      if (f.contains("stage2")) cfg.mask_stage_flags.stage2 = f.at("stage2").get<bool>();
    }
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("log_every")) cfg.log_every = j.at("log_every").get<std::size_t>();
    if (j.contains("log_test_samples")) cfg.log_test_samples = j.at("log_test_samples").get<std::size_t>();
    if (j.contains("checkpoint_dir")) cfg.checkpoint_dir = j.at("checkpoint_dir").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError(std::string("bad training config: ") + e.what());
  }
  return cfg;
}

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::Pretrain: return "pretrain";
    case Stage::Baseline: return "baseline";
    case Stage::PI: return "pi";
  }
  return "?";
}

std::string to_string(Split split) { return split == Split::Train ? "train" : "test"; }

std::string to_string(Modality m) { return m == Modality::Hard ? "hard" : "privileged"; }

Modality modality_from_string(const std::string& s) {
  if (s == "hard" || s == "rgb") return Modality::Hard;
  if (s == "privileged" || s == "priv" || s == "depth") return Modality::Privileged;
  throw ArgumentError("unknown modality '" + s + "'");
}

// ---------------------------------------------------------------------------
// losses.csv

namespace {

using RecordField = std::optional<double> LossRecord::*;

struct FieldName {
  const char* name;
  RecordField field;
};

constexpr FieldName kFields[] = {
    {"loss_pose_teacher", &LossRecord::loss_pose_teacher}, {"loss_pose_student", &LossRecord::loss_pose_student},
    {"loss_inter", &LossRecord::loss_inter},               {"loss_joint", &LossRecord::loss_joint},
    {"loss_mask", &LossRecord::loss_mask},
};

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

Stage stage_from_string(const std::string& s) {
  if (s == "pretrain") return Stage::Pretrain;
  if (s == "baseline") return Stage::Baseline;
  if (s == "pi") return Stage::PI;
  throw IoError("unknown stage '" + s + "' in loss log");
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  throw IoError("unknown split '" + s + "' in loss log");
}

}  // namespace

std::string records_to_csv(const std::vector<LossRecord>& records) {
  std::string out = "iteration,stage,split,loss_name,value\n";
  for (const auto& r : records) {
    const std::string prefix = std::to_string(r.iteration) + "," + to_string(r.stage) + "," + to_string(r.split) + ",";
    for (const auto& f : kFields) {
      if (const auto& v = r.*(f.field)) out += prefix + f.name + "," + format_double(*v) + "\n";
    }
  }
  return out;
}

std::vector<LossRecord> records_from_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != "iteration,stage,split,loss_name,value") {
    throw IoError("loss log has an unexpected header");
  }
  std::vector<LossRecord> out;
  bool open = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    for (std::size_t pos; (pos = line.find(',', start)) != std::string::npos; start = pos + 1) {
      cells.push_back(line.substr(start, pos - start));
    }
    cells.push_back(line.substr(start));
    if (cells.size() != 5) throw IoError("loss log row has " + std::to_string(cells.size()) + " cells");
    LossRecord key;
    if (std::from_chars(cells[0].data(), cells[0].data() + cells[0].size(), key.iteration).ec != std::errc{}) {
      throw IoError("bad iteration '" + cells[0] + "'");
    }
    key.stage = stage_from_string(cells[1]);
    key.split = split_from_string(cells[2]);
    double value = 0.0;
    if (std::from_chars(cells[4].data(), cells[4].data() + cells[4].size(), value).ec != std::errc{}) {
      throw IoError("bad value '" + cells[4] + "'");
    }
    const FieldName* field = nullptr;
    for (const auto& f : kFields) {
      if (cells[3] == f.name) field = &f;
    }
    if (!field) throw IoError("unknown loss name '" + cells[3] + "'");

    // Rows of one record are contiguous. A teacher row never shares a record
    // with student rows, so the two pretraining branches stay apart.
    const bool teacher_row = field->field == &LossRecord::loss_pose_teacher;
    const bool same = open && out.back().iteration == key.iteration && out.back().stage == key.stage &&
                      out.back().split == key.split && !(out.back().*(field->field)) &&
                      out.back().loss_pose_teacher.has_value() == teacher_row;
    if (!same) {
      out.push_back(key);
      open = true;
    }
    out.back().*(field->field) = value;
  }
  return out;
}

// ---------------------------------------------------------------------------
// batches

Tensor stack_images(const std::vector<const Sample*>& samples, Modality modality) {
  if (samples.empty()) throw ArgumentError("empty batch");
  const Tensor& first = modality == Modality::Hard ? samples[0]->image_hard : samples[0]->image_priv;
  Shape shape{samples.size()};
  shape.insert(shape.end(), first.shape().begin(), first.shape().end());
  Tensor out(shape);
  const std::size_t per = first.numel();
  for (std::size_t n = 0; n < samples.size(); ++n) {
    const Tensor& img = modality == Modality::Hard ? samples[n]->image_hard : samples[n]->image_priv;
    if (img.shape() != first.shape()) throw ShapeError("images in a batch differ in shape");
    std::copy(img.data().begin(), img.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(n * per));
  }
  // Hard images fill the whole frame; centering them keeps early ReLUs alive.
  if (modality == Modality::Hard) {
    for (double& v : out.data()) v -= 0.5;
  }
  return out;
}

Tensor stack_poses(const std::vector<const Sample*>& samples) {
  if (samples.empty()) throw ArgumentError("empty batch");
  const std::size_t d = samples[0]->pose.numel();
  Tensor out({samples.size(), d});
  for (std::size_t n = 0; n < samples.size(); ++n) {
    if (samples[n]->pose.numel() != d) throw ShapeError("poses in a batch differ in size");
    std::copy(samples[n]->pose.data().begin(), samples[n]->pose.data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(n * d));
  }
  return out;
}

Tensor stack_masks(const std::vector<const Sample*>& samples, std::size_t h, std::size_t w,
                   const std::vector<std::size_t>& selected) {
  Tensor out({samples.size(), 1, h, w});
  for (std::size_t n : selected) {
    if (n >= samples.size()) throw ArgumentError("mask selection out of range");
    const Tensor small = downsample_mask(samples[n]->mask, h, w);
    std::copy(small.data().begin(), small.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(n * h * w));
  }
  return out;
}

std::vector<std::size_t> batch_indices(std::uint64_t order_seed, std::size_t iteration, std::size_t batch_size,
                                       std::size_t n) {
  if (n == 0) throw ArgumentError("cannot draw batches from an empty split");
  std::vector<std::size_t> out(batch_size);
  std::vector<std::size_t> perm;
  std::size_t perm_epoch = SIZE_MAX;
  for (std::size_t k = 0; k < batch_size; ++k) {
    const std::size_t pos = iteration * batch_size + k;
    const std::size_t epoch = pos / n;
    if (epoch != perm_epoch) {
      perm.resize(n);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      Rng rng(derive_seed(order_seed, "epoch", epoch));
      shuffle(perm, rng);
      perm_epoch = epoch;
    }
    out[k] = perm[pos % n];
  }
  return out;
}

// ---------------------------------------------------------------------------
// training

namespace {

constexpr std::size_t kEvalChunk = 64;

std::vector<const Sample*> pointers(const std::vector<Sample>& samples, std::size_t begin, std::size_t end) {
  std::vector<const Sample*> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(&samples[i]);
  return out;
}

std::vector<std::size_t> iota_ids(std::size_t n) {
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  return ids;
}

void check_finite_loss(const StepLosses& l, std::size_t iteration) {
  bool ok = std::isfinite(l.pose);
  for (const auto& v : {l.inter, l.joint, l.mask}) ok = ok && (!v || std::isfinite(*v));
  if (!ok) throw TrainingError("loss became non-finite at iteration " + std::to_string(iteration));
}

/// Running sums of step losses over one log interval.
struct Window {
  double pose = 0.0, inter = 0.0, joint = 0.0, mask = 0.0;
  bool has_inter = false, has_joint = false, has_mask = false;
  std::size_t count = 0;

  void add(const StepLosses& l) {
    pose += l.pose;
    if (l.inter) inter += *l.inter, has_inter = true;
    if (l.joint) joint += *l.joint, has_joint = true;
    if (l.mask) mask += *l.mask, has_mask = true;
    ++count;
  }
  StepLosses mean() const {
    const double c = static_cast<double>(count);
    StepLosses m;
    m.pose = pose / c;
    if (has_inter) m.inter = inter / c;
    if (has_joint) m.joint = joint / c;
    if (has_mask) m.mask = mask / c;
    return m;
  }
};

LossRecord make_record(std::size_t iteration, Stage stage, Split split, bool teacher, const StepLosses& l) {
  LossRecord r;
  r.iteration = iteration;
  r.stage = stage;
  r.split = split;
  (teacher ? r.loss_pose_teacher : r.loss_pose_student) = l.pose;
  r.loss_inter = l.inter;
  r.loss_joint = l.joint;
  r.loss_mask = l.mask;
  return r;
}

/// Everything one step of any phase needs to know about its objective.
struct Objective {
  Modality modality = Modality::Hard;
  const Network* teacher = nullptr;  // set: inter + joint terms
  double pose_weight = 1.0;          // multiplier of the pose term in the optimized total
  double mask_proportion = 0.0;      // > 0: mask loss on a random subset of each batch
  LossWeights weights;
  // Precomputed teacher taps of the samples in [tap_base, tap_base + taps->size()).
  const Sample* tap_base = nullptr;
  const std::vector<Tensor>* taps = nullptr;
};

/// Teacher taps of every sample, computed in fixed chunks so the values do not
/// depend on how batches are later composed.
std::vector<Tensor> teacher_taps(const Network& teacher, const std::vector<Sample>& samples) {
  std::vector<Tensor> out;
  out.reserve(samples.size());
  const Shape& tap = teacher.shapes().tap_shape;
  const std::size_t per = shape_numel(tap);
  for (std::size_t begin = 0; begin < samples.size(); begin += kEvalChunk) {
    const std::size_t end = std::min(samples.size(), begin + kEvalChunk);
    Graph g;
    const ForwardResult r = teacher.forward(g, stack_images(pointers(samples, begin, end), Modality::Privileged));
    const auto v = r.tap.value.value().data();
    for (std::size_t i = 0; i < end - begin; ++i) {
      out.emplace_back(tap, std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(i * per),
                                                v.begin() + static_cast<std::ptrdiff_t>((i + 1) * per)));
    }
  }
  return out;
}

bool all_cached(const Objective& obj, const std::vector<const Sample*>& batch) {
  if (!obj.taps) return false;
  for (const Sample* s : batch) {
    if (s < obj.tap_base || s >= obj.tap_base + obj.taps->size()) return false;
  }
  return true;
}

ActivationTap teacher_tap(Graph& g, const Objective& obj, const std::vector<const Sample*>& batch) {
  if (!all_cached(obj, batch)) return obj.teacher->forward(g, stack_images(batch, Modality::Privileged)).tap;
  const Shape& tap = obj.teacher->shapes().tap_shape;
  const std::size_t per = shape_numel(tap);
  Shape shape{batch.size()};
  shape.insert(shape.end(), tap.begin(), tap.end());
  Tensor values(shape);
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const Tensor& cached = (*obj.taps)[static_cast<std::size_t>(batch[n] - obj.tap_base)];
    std::copy(cached.data().begin(), cached.data().end(), values.data().begin() + static_cast<std::ptrdiff_t>(n * per));
  }
  return {obj.teacher->spec().tap_layer_index, g.constant(std::move(values))};
}

/// Records the losses of `batch` into `g`. Returns the values and the total to differentiate.
std::pair<StepLosses, Var> build_losses(Graph& g, const Network& net_const, Network* net_mut, const Objective& obj,
                                        const std::vector<const Sample*>& batch, const Tensor* mask) {
  const Tensor images = stack_images(batch, obj.modality);
  const ForwardResult out = net_mut ? net_mut->forward(g, images) : net_const.forward(g, images);
  Var pose = loss_pose(out.pose, g.constant(stack_poses(batch)));
  StepLosses values;
  values.pose = pose.value().item();
  Var total;
  if (obj.teacher) {
    Var inter = loss_inter(teacher_tap(g, obj, batch), out.tap);
    Var joint = loss_joint(inter, pose, obj.weights);
    values.inter = inter.value().item();
    values.joint = joint.value().item();
    total = joint;
  } else {
    total = obj.pose_weight == 1.0 ? pose : scale(pose, obj.pose_weight);
  }
  if (mask) {
    Var m = loss_mask(out.tap, *mask);
    values.mask = m.value().item();
    total = add(total, m);
  }
  return {values, total};
}

Tensor step_mask(const Network& net, const Objective& obj, const std::vector<const Sample*>& batch,
                 std::uint64_t mask_seed) {
  const Shape& tap = net.shapes().tap_shape;
  const auto ids = iota_ids(batch.size());
  return stack_masks(batch, tap[1], tap[2], select_mask_batch(ids, obj.mask_proportion, mask_seed));
}

/// Per-sample mean losses of the first `count` samples, without gradients.
StepLosses held_out_losses(const Network& net, const Objective& obj, const std::vector<Sample>& samples,
                           std::size_t count) {
  count = std::min(count, samples.size());
  Window w;
  for (std::size_t begin = 0; begin < count; begin += kEvalChunk) {
    const std::size_t end = std::min(count, begin + kEvalChunk);
    const auto chunk = pointers(samples, begin, end);
    std::optional<Tensor> mask;
    if (obj.mask_proportion > 0.0) {
      const Shape& tap = net.shapes().tap_shape;
      mask = stack_masks(chunk, tap[1], tap[2], iota_ids(chunk.size()));
    }
    Graph g;
    StepLosses values = build_losses(g, net, nullptr, obj, chunk, mask ? &*mask : nullptr).first;
    // Chunk losses are chunk means; weight them back to sums.
    const double weight = static_cast<double>(chunk.size());
    values.pose *= weight;
    for (auto* v : {&values.inter, &values.joint, &values.mask}) {
      if (*v) **v *= weight;
    }
    w.add(values);
  }
  w.count = count;
  return w.mean();
}

PhaseResult run_phase(Network& net, const Objective& obj, const Dataset& data, const TrainConfig& cfg,
                      std::size_t iterations, double lr, Stage stage, bool teacher_branch, std::size_t iter_offset,
                      std::uint64_t order_seed, std::uint64_t mask_seed_base, const PhaseState& state,
                      const PhaseHooks& hooks) {
  cfg.validate();
  if (data.train.empty()) throw ArgumentError("training split is empty");
  if (state.start_iteration > iterations) throw ArgumentError("resume point lies past the end of the phase");
  Sgd opt(net.trainable(), lr, cfg.momentum);
  const std::size_t warmup = stage == Stage::Pretrain ? cfg.warmup_iters : 0;
  if (!state.momentum.empty()) {
    auto slots = opt.state();
    if (slots.size() != state.momentum.size()) throw ArgumentError("momentum state does not match the network");
    for (std::size_t i = 0; i < slots.size(); ++i) {
      if (slots[i].tensor->shape() != state.momentum[i].shape()) {
        throw ArgumentError("momentum buffer '" + slots[i].name + "' has the wrong shape");
      }
      std::copy(state.momentum[i].data().begin(), state.momentum[i].data().end(), slots[i].tensor->data().begin());
    }
  }

  PhaseResult result;
  Window window;
  for (std::size_t t = state.start_iteration; t < iterations; ++t) {
    const std::size_t global = iter_offset + t + 1;
    const auto idx = batch_indices(order_seed, t, cfg.batch_size, data.train.size());
    std::vector<const Sample*> batch;
    batch.reserve(idx.size());
    for (auto i : idx) batch.push_back(&data.train[i]);

    std::optional<Tensor> mask;
    if (obj.mask_proportion > 0.0) mask = step_mask(net, obj, batch, derive_seed(mask_seed_base, "step", t));

    Graph g;
    auto [values, total] = build_losses(g, net, &net, obj, batch, mask ? &*mask : nullptr);
    check_finite_loss(values, global);
    g.backward(total);
    if (warmup > 0) opt.set_learning_rate(lr * std::min(1.0, static_cast<double>(t + 1) / static_cast<double>(warmup)));
    opt.step();
    window.add(values);
    ++result.iterations_run;

    if ((t + 1) % cfg.log_every == 0) {
      result.records.push_back(make_record(global, stage, Split::Train, teacher_branch, window.mean()));
      if (cfg.log_test_samples > 0 && !data.test.empty()) {
        const StepLosses test = held_out_losses(net, obj, data.test, cfg.log_test_samples);
        check_finite_loss(test, global);
        result.records.push_back(make_record(global, stage, Split::Test, teacher_branch, test));
      }
      window = Window{};
    }
    if (hooks.on_iteration) hooks.on_iteration(t + 1, opt, result.records);
  }
  return result;
}

}  // namespace

PhaseResult pretrain(Network& net, Modality modality, const Dataset& data, const TrainConfig& cfg,
                     std::size_t iter_offset, const PhaseState& state, const PhaseHooks& hooks) {
  if (net.frozen()) throw ContractViolation("cannot pretrain a frozen network");
  const bool teacher_branch = modality == Modality::Privileged;
  Objective obj;
  obj.modality = modality;
  obj.weights = cfg.weights;
  if (!teacher_branch && cfg.mask_stage_flags.stage1) obj.mask_proportion = cfg.weights.mask_proportion;
  return run_phase(net, obj, data, cfg, cfg.stage1_iters, cfg.lr, Stage::Pretrain, teacher_branch, iter_offset,
                   derive_seed(cfg.seed, "order-stage1"), derive_seed(cfg.seed, "mask-stage1", teacher_branch), state,
                   hooks);
}

PhaseResult stage2_train(Network& student, const Network* teacher, const Dataset& data, const TrainConfig& cfg,
                         std::size_t iter_offset, const PhaseState& state, const PhaseHooks& hooks) {
  if (student.frozen()) throw ContractViolation("cannot train a frozen student");
  Objective obj;
  obj.modality = Modality::Hard;
  obj.weights = cfg.weights;
  std::vector<Tensor> taps;
  if (teacher) {
    if (!teacher->frozen()) throw ContractViolation("the teacher must be frozen before the second stage");
    if (teacher->shapes().tap_shape != student.shapes().tap_shape) {
      throw ShapeError("tap shapes incompatible: teacher " + shape_string(teacher->shapes().tap_shape) +
                       " vs student " + shape_string(student.shapes().tap_shape));
    }
    obj.teacher = teacher;
    taps = teacher_taps(*teacher, data.train);
    obj.taps = &taps;
    obj.tap_base = data.train.data();
    if (cfg.mask_stage_flags.stage2) obj.mask_proportion = cfg.weights.mask_proportion;
  } else {
    obj.pose_weight = cfg.weights.lambda;
  }
  // Both students see the same batch order so the comparison is paired.
  PhaseResult result = run_phase(student, obj, data, cfg, cfg.stage2_iters, cfg.resolved_stage2_lr(),
                                 teacher ? Stage::PI : Stage::Baseline, false, iter_offset,
                                 derive_seed(cfg.seed, "order-stage2"), derive_seed(cfg.seed, "mask-stage2"), state,
                                 hooks);
  if (teacher && teacher->digest() != teacher->frozen_digest()) {
    throw TrainingError("teacher parameters changed during the second stage");
  }
  return result;
}

std::vector<double> stage2_gradient(Network& student, const Network* teacher, const std::vector<const Sample*>& batch,
                                    const LossWeights& weights, bool with_mask, std::uint64_t mask_seed) {
  Objective obj;
  obj.weights = weights;
  obj.teacher = teacher;
  if (!teacher) obj.pose_weight = weights.lambda;
  if (with_mask) obj.mask_proportion = weights.mask_proportion;
  std::optional<Tensor> mask;
  if (obj.mask_proportion > 0.0) mask = step_mask(student, obj, batch, mask_seed);
  for (auto& p : student.trainable()) p.tensor->clear_grad();
  Graph g;
  auto [values, total] = build_losses(g, student, &student, obj, batch, mask ? &*mask : nullptr);
  g.backward(total);
  std::vector<double> out;
  for (auto& p : student.trainable()) {
    out.insert(out.end(), p.tensor->grad().begin(), p.tensor->grad().end());
    p.tensor->clear_grad();
  }
  return out;
}

// ---------------------------------------------------------------------------
// evaluation

namespace {

template <typename Pick>
Tensor run_chunks(const Network& net, const std::vector<Sample>& samples, Modality modality, Pick pick) {
  if (samples.empty()) throw ArgumentError("no samples to run");
  Tensor out;
  std::vector<double> values;
  Shape row_shape;
  for (std::size_t begin = 0; begin < samples.size(); begin += kEvalChunk) {
    const std::size_t end = std::min(samples.size(), begin + kEvalChunk);
    Graph g;
    const ForwardResult res = net.forward(g, stack_images(pointers(samples, begin, end), modality));
    const Tensor& v = pick(res).value();
    row_shape.assign(v.shape().begin() + 1, v.shape().end());
    values.insert(values.end(), v.data().begin(), v.data().end());
  }
  Shape shape{samples.size()};
  shape.insert(shape.end(), row_shape.begin(), row_shape.end());
  return Tensor(shape, std::move(values));
}

void check_modality(const NetworkSpec& spec, const std::vector<Sample>& samples, Modality modality) {
  if (samples.empty()) return;
  const Tensor& img = modality == Modality::Hard ? samples[0].image_hard : samples[0].image_priv;
  if (img.shape() != spec.input_shape) {
    throw ShapeError("network expects input " + shape_string(spec.input_shape) + " but " + to_string(modality) +
                     " images are " + shape_string(img.shape()));
  }
}

}  // namespace

Tensor predict(const Network& net, const std::vector<Sample>& samples, Modality modality) {
  check_modality(net.spec(), samples, modality);
  return run_chunks(net, samples, modality, [](const ForwardResult& r) { return r.pose; });
}

Tensor tap_values(const Network& net, const std::vector<Sample>& samples, Modality modality) {
  check_modality(net.spec(), samples, modality);
  return run_chunks(net, samples, modality, [](const ForwardResult& r) { return r.tap.value; });
}

Evaluation evaluate_predictions(const Tensor& pred, const std::vector<Sample>& samples,
                                std::span<const double> thresholds_3d, std::span<const double> thresholds_2d) {
  if (samples.empty()) throw ArgumentError("no samples to evaluate");
  const std::size_t n = samples.size(), d = samples[0].pose.numel();
  if (d % 3 != 0) throw ShapeError("pose vectors must hold x, y, z triples");
  if (pred.rank() != 2 || pred.dim(0) != n || pred.dim(1) != d) {
    throw ShapeError("predictions " + shape_string(pred.shape()) + " do not match " + std::to_string(n) +
                     " samples of " + std::to_string(d) + " values");
  }
  const std::size_t joints = d / 3;
  Tensor gt3({n, joints, 3}), p3({n, joints, 3}), gt2({n, joints, 2}), p2({n, joints, 2});
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = samples[i];
    Tensor row({d});
    std::copy(pred.data().begin() + static_cast<std::ptrdiff_t>(i * d),
              pred.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * d), row.data().begin());
    const Joints pj = denormalize_pose(row, s.meta);
    const Joints gj = denormalize_pose(s.pose, s.meta);
    for (std::size_t j = 0; j < joints; ++j) {
      for (std::size_t k = 0; k < 3; ++k) {
        gt3[(i * joints + j) * 3 + k] = s.pose[j * 3 + k];
        p3[(i * joints + j) * 3 + k] = row[j * 3 + k];
      }
      for (std::size_t k = 0; k < 2; ++k) {
        gt2[(i * joints + j) * 2 + k] = gj[j][k];
        p2[(i * joints + j) * 2 + k] = pj[j][k];
      }
    }
  }
  return {compute_metrics(p3, gt3, thresholds_3d), compute_metrics(p2, gt2, thresholds_2d)};
}

Evaluation evaluate(const Predictor& predictor, const std::vector<Sample>& samples,
                    std::span<const double> thresholds_3d, std::span<const double> thresholds_2d) {
  return evaluate_predictions(predictor(samples), samples, thresholds_3d, thresholds_2d);
}

Evaluation evaluate_checkpoint(const Checkpoint& ckpt, const std::vector<Sample>& samples, Modality modality,
                               std::span<const double> thresholds_3d, std::span<const double> thresholds_2d) {
  check_modality(ckpt.spec, samples, modality);
  const Network net = network_from_checkpoint(ckpt);
  return evaluate([&](const std::vector<Sample>& s) { return predict(net, s, modality); }, samples, thresholds_3d,
                  thresholds_2d);
}

double background_activation(const Network& net, const std::vector<Sample>& samples) {
  const Tensor tap = tap_values(net, samples, Modality::Hard);
  const std::size_t channels = tap.dim(1), h = tap.dim(2), w = tap.dim(3);
  double sum = 0.0;
  std::size_t cells = 0;
  for (std::size_t n = 0; n < samples.size(); ++n) {
    const Tensor mask = downsample_mask(samples[n].mask, h, w);
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t i = 0; i < h * w; ++i) {
        if (mask[i] == 1.0) {
          sum += std::abs(tap[((n * channels + c) * h * w) + i]);
          ++cells;
        }
      }
    }
  }
  return cells ? sum / static_cast<double>(cells) : 0.0;
}

}  // namespace pil

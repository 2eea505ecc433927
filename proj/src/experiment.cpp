#include "pil/experiment.hpp"

#include <charconv>
#include <fstream>
#include <functional>

#include "pil/checkpoint.hpp"
#include "pil/errors.hpp"
#include "pil/rng.hpp"

namespace fs = std::filesystem;

namespace pil {

void ExperimentConfig::validate() const {
  train.validate();
  if (n < 2) throw ArgumentError("n must be at least 2");
  generator.skeleton.validate();
  auto check_grid = [](const std::vector<double>& t, const char* name) {
    if (t.empty()) throw ArgumentError(std::string(name) + " is empty");
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (!(t[i] > 0.0) || (i > 0 && !(t[i] > t[i - 1]))) {
        throw ArgumentError(std::string(name) + " must be positive and strictly increasing");
      }
    }
  };
  check_grid(thresholds_3d, "thresholds_3d");
  check_grid(thresholds_2d, "thresholds_2d");
}

nlohmann::json to_json(const ExperimentConfig& cfg) {
  nlohmann::json j = to_json(cfg.train);
  j["n"] = cfg.n;
  j["split_seed"] = cfg.split_seed;
  j["generator"] = to_json(cfg.generator);
  j["activation_samples"] = cfg.activation_samples;
  j["thresholds_3d"] = cfg.thresholds_3d;
  j["thresholds_2d"] = cfg.thresholds_2d;
  return j;
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j, ExperimentConfig cfg) {
  cfg.train = train_config_from_json(j, cfg.train);
  try {
    if (j.contains("n")) cfg.n = j.at("n").get<std::size_t>();
    if (j.contains("split_seed")) cfg.split_seed = j.at("split_seed").get<std::uint64_t>();
    if (j.contains("generator")) cfg.generator = generator_config_from_json(j.at("generator"));
    if (j.contains("activation_samples")) cfg.activation_samples = j.at("activation_samples").get<std::size_t>();
    if (j.contains("thresholds_3d")) cfg.thresholds_3d = j.at("thresholds_3d").get<std::vector<double>>();
    if (j.contains("thresholds_2d")) cfg.thresholds_2d = j.at("thresholds_2d").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError(std::string("bad experiment config: ") + e.what());
  }
  return cfg;
}

namespace {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Rethrows the active exception with `phase` in its message, keeping its type.
[[noreturn]] void rethrow_in(const std::string& phase) {
  const std::string at = phase + ": ";
  try {
    throw;
  } catch (const Interrupted&) {
    throw;
  } catch (const TrainingError& e) {
    throw TrainingError(at + e.what());
  } catch (const ShapeError& e) {
    throw ShapeError(at + e.what());
  } catch (const ArgumentError& e) {
    throw ArgumentError(at + e.what());
  } catch (const ContractViolation& e) {
    throw ContractViolation(at + e.what());
  } catch (const BuildError& e) {
    throw BuildError(at + e.what());
  } catch (const IoError& e) {
    throw IoError(at + e.what());
  } catch (const std::exception& e) {
    throw std::runtime_error(at + e.what());
  }
}

struct SavedPhase {
  Network net;
  std::vector<Tensor> momentum;
  std::vector<LossRecord> records;
  std::size_t iteration = 0;
  bool complete = false;
};

fs::path net_path(const fs::path& ckdir, const std::string& phase) { return ckdir / (phase + ".plck"); }
fs::path optim_path(const fs::path& ckdir, const std::string& phase) { return ckdir / (phase + ".optim.plck"); }

/// The optimizer file goes first: a network file always has a matching state.
void save_phase(const fs::path& ckdir, const std::string& phase, const Network& net, Sgd* opt,
                const std::vector<LossRecord>& records, std::size_t iteration, bool complete) {
  Checkpoint state;
  state.spec = net.spec();
  if (opt) {
    for (const auto& s : opt->state()) {
      Tensor v = *s.tensor;
      v.clear_grad();
      state.tensors.push_back({s.name, std::move(v)});
    }
  }
  state.meta = {{"phase", phase}, {"iteration", iteration}, {"records", records_to_csv(records)}};
  save_checkpoint(optim_path(ckdir, phase), state);
  save_checkpoint(net_path(ckdir, phase), checkpoint_of(net, {{"phase", phase}, {"iteration", iteration},
                                                              {"complete", complete}}));
}

std::optional<SavedPhase> load_phase(const fs::path& ckdir, const std::string& phase) {
  if (!fs::exists(net_path(ckdir, phase))) return std::nullopt;
  const Checkpoint net = load_checkpoint(net_path(ckdir, phase));
  const Checkpoint state = load_checkpoint(optim_path(ckdir, phase));
  try {
    const auto it = net.meta.at("iteration").get<std::size_t>();
    if (state.meta.at("iteration").get<std::size_t>() != it) {
      throw IoError("optimizer state of " + phase + " is out of step with its network");
    }
    SavedPhase out{network_from_checkpoint(net), {}, records_from_csv(state.meta.at("records").get<std::string>()),
                   it, net.meta.at("complete").get<bool>()};
    for (const auto& t : state.tensors) out.momentum.push_back(t.value);
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint metadata of " + phase + " is incomplete: " + e.what());
  }
}

using PhaseRunner = std::function<PhaseResult(Network&, const PhaseState&, const PhaseHooks&)>;

class PhaseDriver {
 public:
  PhaseDriver(fs::path ckdir, std::size_t cadence, const RunOptions& options)
      : ckdir_(std::move(ckdir)), cadence_(cadence), options_(options) {}

  /// Runs (or resumes, or skips) one phase; `net` holds its starting point on
  /// entry and the trained network on exit. Returns the phase's records.
  std::vector<LossRecord> run(const std::string& phase, Network& net, std::size_t iterations,
                              const PhaseRunner& runner) {
    PhaseState state;
    std::vector<LossRecord> prior;
    if (options_.resume) {
      if (auto saved = load_phase(ckdir_, phase)) {
        if (saved->net.spec() != net.spec()) throw ArgumentError("checkpoint of " + phase + " has another network");
        net = std::move(saved->net);
        if (saved->complete) return saved->records;
        state.start_iteration = saved->iteration;
        state.momentum = std::move(saved->momentum);
        prior = std::move(saved->records);
      }
    }
    auto joined = [&](const std::vector<LossRecord>& recs) {
      std::vector<LossRecord> all = prior;
      all.insert(all.end(), recs.begin(), recs.end());
      return all;
    };
    PhaseHooks hooks;
    hooks.on_iteration = [&](std::size_t local, Sgd& opt, const std::vector<LossRecord>& recs) {
      if (local % cadence_ == 0 && local < iterations) save_phase(ckdir_, phase, net, &opt, joined(recs), local, false);
      ++iterations_done_;
      if (options_.interrupt_after && iterations_done_ >= *options_.interrupt_after) {
        throw Interrupted("stopped after " + std::to_string(iterations_done_) + " iterations in " + phase);
      }
    };
    PhaseResult result = runner(net, state, hooks);
    std::vector<LossRecord> all = joined(result.records);
    save_phase(ckdir_, phase, net, nullptr, all, iterations, true);
    if (options_.progress) {
      std::string line = phase + ": " + std::to_string(iterations) + " iterations";
      for (auto it = all.rbegin(); it != all.rend(); ++it) {
        if (it->split != Split::Test) continue;
        const auto pose = it->loss_pose_student ? it->loss_pose_student : it->loss_pose_teacher;
        line += ", test pose loss " + format_double(*pose);
        break;
      }
      options_.progress(line);
    }
    return all;
  }

 private:
  fs::path ckdir_;
  std::size_t cadence_;
  RunOptions options_;
  std::size_t iterations_done_ = 0;
};

void clear_outputs(const fs::path& dir) {
  for (const char* name : {"config.json", "losses.csv", "metrics.csv", "summary.json"}) fs::remove(dir / name);
  fs::remove_all(dir / "checkpoints");
  fs::remove_all(dir / "activations");
}

nlohmann::json model_summary(const Evaluation& e, std::optional<double> background) {
  nlohmann::json j = {
      {"epe_mean_3d", e.normalized_3d.epe_mean},
      {"epe_median_3d", e.normalized_3d.epe_median},
      {"epe_mean_2d_px", e.pixels_2d.epe_mean},
      {"epe_median_2d_px", e.pixels_2d.epe_median},
  };
  if (background) j["background_activation"] = *background;
  return j;
}

}  // namespace

std::string metrics_to_csv(const std::vector<std::pair<std::string, Evaluation>>& models) {
  std::string out = "model,space,unit,metric,key,value\n";
  auto emit = [&](const std::string& model, const char* space, const char* unit, const Metrics& m) {
    const std::string prefix = model + "," + space + "," + unit + ",";
    out += prefix + "n_samples,," + std::to_string(m.n_samples) + "\n";
    out += prefix + "epe_mean,," + format_double(m.epe_mean) + "\n";
    out += prefix + "epe_median,," + format_double(m.epe_median) + "\n";
    for (const auto& p : m.pck) out += prefix + "pck," + format_double(p.threshold) + "," + format_double(p.fraction) + "\n";
    for (std::size_t j = 0; j < m.per_joint_epe.size(); ++j) {
      out += prefix + "epe_joint," + std::to_string(j) + "," + format_double(m.per_joint_epe[j]) + "\n";
    }
  };
  for (const auto& [name, e] : models) {
    emit(name, "3d", "normalized", e.normalized_3d);
    emit(name, "2d", "px", e.pixels_2d);
  }
  return out;
}

nlohmann::json run_experiment(const ExperimentConfig& cfg_in, const fs::path& dir, const RunOptions& options) {
  ExperimentConfig cfg = cfg_in;
  if (cfg.train.checkpoint_dir.empty()) cfg.train.checkpoint_dir = "checkpoints";
  cfg.validate();
  const fs::path ckdir = cfg.train.checkpoint_dir.is_absolute() ? cfg.train.checkpoint_dir
                                                                : dir / cfg.train.checkpoint_dir;
  const std::string config_text = to_json(cfg).dump(2) + "\n";

  fs::create_directories(dir);
  if (options.resume && fs::exists(dir / "config.json")) {
    if (read_text(dir / "config.json") != config_text) {
      throw ArgumentError("config differs from the one stored in " + dir.string());
    }
  } else if (!options.resume) {
    clear_outputs(dir);
  }
  fs::create_directories(ckdir);
  fs::create_directories(dir / "activations");
  write_text(dir / "config.json", config_text);

  const TrainConfig& tc = cfg.train;
  Dataset data;
  try {
    data = make_dataset(cfg.n, cfg.generator, cfg.split_seed);
  } catch (...) {
    rethrow_in("data");
  }

  // One init stream for both branches: layers of equal shape start equal.
  const std::uint64_t init_seed = derive_seed(tc.seed, "init");
  Network teacher = Network::build(teacher_spec(tc.profile), init_seed);
  Network student = Network::build(student_spec(tc.profile), init_seed);

  PhaseDriver driver(ckdir, tc.log_every * 10, options);
  std::vector<LossRecord> records;
  auto append = [&](const std::vector<LossRecord>& r) { records.insert(records.end(), r.begin(), r.end()); };
  auto guarded = [&](const std::string& phase, auto&& body) {
    try {
      body();
    } catch (...) {
      rethrow_in(phase);
    }
  };

  guarded("teacher", [&] {
    append(driver.run("teacher", teacher, tc.stage1_iters, [&](Network& net, const PhaseState& s, const PhaseHooks& h) {
      return pretrain(net, Modality::Privileged, data, tc, 0, s, h);
    }));
  });
  guarded("student", [&] {
    append(driver.run("student", student, tc.stage1_iters, [&](Network& net, const PhaseState& s, const PhaseHooks& h) {
      return pretrain(net, Modality::Hard, data, tc, 0, s, h);
    }));
  });

  Network baseline = student;
  guarded("baseline", [&] {
    append(driver.run("baseline", baseline, tc.stage2_iters, [&](Network& net, const PhaseState& s, const PhaseHooks& h) {
      return stage2_train(net, nullptr, data, tc, tc.stage1_iters, s, h);
    }));
  });

  teacher.freeze();
  const std::uint64_t digest_before = *teacher.frozen_digest();
  Network student_pi = student;
  guarded("student_pi", [&] {
    append(driver.run("student_pi", student_pi, tc.stage2_iters,
                      [&](Network& net, const PhaseState& s, const PhaseHooks& h) {
                        return stage2_train(net, &teacher, data, tc, tc.stage1_iters, s, h);
                      }));
  });
  const std::uint64_t digest_after = teacher.digest();
  if (digest_after != digest_before) throw TrainingError("student_pi: teacher parameters changed");

  nlohmann::json summary;
  guarded("evaluation", [&] {
    struct Entry {
      const char* name;
      const Network* net;
      Modality modality;
    };
    const Entry entries[] = {{"teacher", &teacher, Modality::Privileged},
                             {"student", &student, Modality::Hard},
                             {"baseline", &baseline, Modality::Hard},
                             {"pi", &student_pi, Modality::Hard}};
    std::vector<std::pair<std::string, Evaluation>> evals;
    nlohmann::json models = nlohmann::json::object();
    const std::size_t shown = std::min(cfg.activation_samples, data.test.size());
    const std::vector<Sample> preview(data.test.begin(), data.test.begin() + static_cast<std::ptrdiff_t>(shown));
    for (const auto& e : entries) {
      const Evaluation ev = evaluate_predictions(predict(*e.net, data.test, e.modality), data.test, cfg.thresholds_3d,
                                                 cfg.thresholds_2d);
      std::optional<double> bg;
      if (e.modality == Modality::Hard) bg = background_activation(*e.net, data.test);
      models[e.name] = model_summary(ev, bg);
      evals.emplace_back(e.name, ev);
      if (shown > 0 && std::string(e.name) != "student") {
        export_activation_map(tap_values(*e.net, preview, e.modality), dir / "activations" / e.name);
      }
    }
    write_text(dir / "metrics.csv", metrics_to_csv(evals));

    const double base = models["baseline"]["epe_mean_3d"].get<double>();
    const double pi = models["pi"]["epe_mean_3d"].get<double>();
    summary = {
        {"config", to_json(cfg)},
        {"data", {{"n", cfg.n}, {"split_seed", cfg.split_seed}, {"train", data.train.size()}, {"test", data.test.size()}}},
        {"teacher_digest",
         {{"before_stage2", digest_hex(digest_before)}, {"after_stage2", digest_hex(digest_after)},
          {"unchanged", digest_before == digest_after}}},
        {"models", models},
        {"pi_epe_improvement", base > 0.0 ? 1.0 - pi / base : 0.0},
    };
  });

  write_text(dir / "losses.csv", records_to_csv(records));
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  return summary;
}

}  // namespace pil

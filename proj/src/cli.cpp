#include "pil/cli.hpp"

#include <charconv>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "pil/checkpoint.hpp"
#include "pil/errors.hpp"
#include "pil/experiment.hpp"
#include "pil/metrics.hpp"

namespace fs = std::filesystem;

namespace pil {

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read " + path.string());
  try {
    nlohmann::json j;
    in >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(path.string() + " is not valid JSON: " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

/// Flags shared by every subcommand that reads or builds a dataset.
struct DataFlags {
  std::string config;
  std::string manifest;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  CLI::Option* n_opt = nullptr;
  CLI::Option* seed_opt = nullptr;

  void add_generation(CLI::App& app, const char* seed_help) {
    app.add_option("--config", config, "JSON config (n, split_seed, generator, training keys)")
        ->check(CLI::ExistingFile);
    n_opt = app.add_option("--n", n, "number of samples");
    seed_opt = app.add_option("--seed", seed, seed_help);
  }
  void add_manifest(CLI::App& app) {
    app.add_option("--data", manifest, "dataset manifest written by gen")->check(CLI::ExistingFile);
  }

  ExperimentConfig experiment() const {
    ExperimentConfig cfg;
    if (!config.empty()) cfg = experiment_config_from_json(read_json(config));
    if (*n_opt) cfg.n = n;
    return cfg;
  }

  /// Manifest from --data, else generated from --config / --n / --seed.
  Manifest resolve() const {
    if (!manifest.empty()) {
      if (!config.empty() || *n_opt || *seed_opt) throw UsageError("--data cannot be combined with --config, --n or --seed");
      return read_manifest(manifest);
    }
    ExperimentConfig cfg = experiment();
    if (*seed_opt) cfg.split_seed = seed;
    return make_manifest(cfg.n, cfg.generator, cfg.split_seed);
  }
};

const std::vector<Sample>& split_of(const Dataset& d, const std::string& split) {
  return split == "train" ? d.train : d.test;
}

Modality modality_for(const Checkpoint& ckpt, const std::string& flag) {
  if (!flag.empty()) return modality_from_string(flag);
  return ckpt.spec.input_shape.at(0) == 1 ? Modality::Privileged : Modality::Hard;
}

/// With a profile given, the checkpoint must hold exactly that profile's branch.
void check_profile(const Checkpoint& ckpt, const std::string& name, const fs::path& path) {
  if (name.empty()) return;
  const NetworkSpec t = teacher_spec(name), s = student_spec(name);
  if (ckpt.spec != t && ckpt.spec != s) {
    const ShapeTrace trace = infer_shapes(ckpt.spec);
    throw ShapeError(path.string() + " does not hold a '" + name + "' network (input " +
                     shape_string(ckpt.spec.input_shape) + ", tap " + shape_string(trace.tap_shape) + " vs " +
                     shape_string(infer_shapes(s).tap_shape) + ")");
  }
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const fs::path& path) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw IoError("bad number '" + s + "' in " + path.string());
  return v;
}

struct ReportRow {
  std::string unit;
  double epe_mean = 0.0, epe_median = 0.0;
  std::vector<PckPoint> pck;
};

/// metrics.csv -> (model, space) -> row.
std::map<std::pair<std::string, std::string>, ReportRow> read_metrics(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "model,space,unit,metric,key,value") throw IoError(path.string() + " has an unexpected header");
  std::map<std::pair<std::string, std::string>, ReportRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c = split_csv_line(line);
    if (c.size() != 6) throw IoError("malformed line in " + path.string() + ": " + line);
    ReportRow& r = rows[{c[0], c[1]}];
    r.unit = c[2];
    if (c[3] == "epe_mean") r.epe_mean = parse_double(c[5], path);
    if (c[3] == "epe_median") r.epe_median = parse_double(c[5], path);
    if (c[3] == "pck") r.pck.push_back({parse_double(c[4], path), parse_double(c[5], path)});
  }
  return rows;
}

int cmd_gen(const DataFlags& f, const std::string& out, bool raw) {
  const Manifest m = f.resolve();
  fs::create_directories(out);
  write_manifest(m, fs::path(out) / "manifest.json");
  if (raw) export_raw(materialize(m), fs::path(out) / "raw");
  std::cerr << "wrote " << m.train_seeds.size() << " train / " << m.test_seeds.size() << " test samples to " << out
            << "\n";
  return 0;
}

struct TrainFlags {
  std::string profile;
  double lambda = 0.0, mask_proportion = 0.0;
  std::size_t stage1 = 0, stage2 = 0;
  bool resume = false;
  CLI::Option *profile_opt, *lambda_opt, *mask_opt, *stage1_opt, *stage2_opt;
};

int cmd_train(const DataFlags& f, const TrainFlags& t, const std::string& out) {
  ExperimentConfig cfg = f.experiment();
  if (*f.seed_opt) cfg.train.seed = f.seed;
  if (*t.profile_opt) cfg.train.profile = t.profile;
  if (*t.lambda_opt) cfg.train.weights.lambda = t.lambda;
  if (*t.mask_opt) cfg.train.weights.mask_proportion = t.mask_proportion;
  if (*t.stage1_opt) cfg.train.stage1_iters = t.stage1;
  if (*t.stage2_opt) cfg.train.stage2_iters = t.stage2;
  cfg.validate();
  RunOptions opts;
  opts.resume = t.resume;
  opts.progress = [](const std::string& line) { std::cerr << line << "\n"; };
  const nlohmann::json summary = run_experiment(cfg, out, opts);
  std::cerr << "baseline EPE " << summary["models"]["baseline"]["epe_mean_3d"].get<double>() << ", PI EPE "
            << summary["models"]["pi"]["epe_mean_3d"].get<double>() << ", teacher EPE "
            << summary["models"]["teacher"]["epe_mean_3d"].get<double>() << " (normalized units)\n";
  return 0;
}

int cmd_eval(const DataFlags& f, const std::string& ckpt_path, const std::string& split, const std::string& modality,
             const std::string& profile, const std::string& out) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  check_profile(ckpt, profile, ckpt_path);
  const Dataset data = materialize(f.resolve());
  const Evaluation e = evaluate_checkpoint(ckpt, split_of(data, split), modality_for(ckpt, modality));
  write_text(fs::path(out) / "metrics.csv", metrics_to_csv({{fs::path(ckpt_path).stem().string(), e}}));
  std::cerr << split << " EPE mean " << e.normalized_3d.epe_mean << " normalized, " << e.pixels_2d.epe_mean << " px\n";
  return 0;
}

int cmd_actmap(const DataFlags& f, const std::string& ckpt_path, const std::string& split, const std::string& modality,
               std::size_t count, const std::string& out) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Dataset data = materialize(f.resolve());
  const auto& all = split_of(data, split);
  const std::vector<Sample> shown(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(std::min(count, all.size())));
  if (shown.empty()) throw UsageError("no samples selected");
  const Network net = network_from_checkpoint(ckpt);
  fs::create_directories(out);
  const auto paths =
      export_activation_map(tap_values(net, shown, modality_for(ckpt, modality)), fs::path(out) / fs::path(ckpt_path).stem());
  std::cerr << "wrote " << paths.size() << " activation maps to " << out << "\n";
  return 0;
}

int cmd_report(const std::string& dir, std::string out) {
  if (out.empty()) out = (fs::path(dir) / "report").string();
  const auto rows = read_metrics(fs::path(dir) / "metrics.csv");
  const char* models[] = {"baseline", "pi", "teacher"};
  std::string table = "model,space,unit,epe_mean,epe_median,pck_mean\n";
  for (const char* model : models) {
    std::string curve = "space,unit,threshold,fraction\n";
    for (const char* space : {"3d", "2d"}) {
      const auto it = rows.find({model, space});
      if (it == rows.end()) throw IoError(dir + "/metrics.csv lacks " + model + " " + space + " rows");
      const ReportRow& r = it->second;
      double area = 0.0;
      for (const auto& p : r.pck) {
        curve += std::string(space) + "," + r.unit + "," + format_double(p.threshold) + "," + format_double(p.fraction) + "\n";
        area += p.fraction;
      }
      if (!r.pck.empty()) area /= static_cast<double>(r.pck.size());
      table += std::string(model) + "," + space + "," + r.unit + "," + format_double(r.epe_mean) + "," +
               format_double(r.epe_median) + "," + format_double(area) + "\n";
    }
    write_text(fs::path(out) / (std::string("pck_") + model + ".csv"), curve);
  }
  write_text(fs::path(out) / "comparison.csv", table);
  std::cerr << "wrote report to " << out << "\n";
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Privileged-information training for pose regression", "pil"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  DataFlags gen_f, train_f, eval_f, act_f;
  std::string gen_out, train_out, eval_out, act_out, report_dir, report_out;
  bool raw = false;

  auto* gen = app.add_subcommand("gen", "generate a dataset manifest");
  gen_f.add_generation(*gen, "split seed");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_flag("--raw", raw, "also dump every sample (f64 planes and PGM previews)");

  TrainFlags tf;
  auto* train = app.add_subcommand("train", "run a full experiment");
  train_f.add_generation(*train, "training seed");
  train->add_option("--out", train_out, "experiment directory")->required();
  tf.profile_opt = train->add_option("--profile", tf.profile, "network profile");
  tf.lambda_opt = train->add_option("--lambda", tf.lambda, "pose weight of the joint loss");
  tf.mask_opt = train->add_option("--mask-proportion", tf.mask_proportion, "fraction of each batch with the mask loss");
  tf.stage1_opt = train->add_option("--stage1-iters", tf.stage1, "pretraining iterations");
  tf.stage2_opt = train->add_option("--stage2-iters", tf.stage2, "second-stage iterations");
  train->add_flag("--resume", tf.resume, "continue from the checkpoints in --out");

  std::string eval_ckpt, eval_split = "test", eval_mod, eval_profile;
  auto* eval = app.add_subcommand("eval", "score a checkpoint on a split");
  eval_f.add_generation(*eval, "split seed");
  eval_f.add_manifest(*eval);
  eval->add_option("--checkpoint", eval_ckpt, "PLCK file")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", eval_split, "train or test")->check(CLI::IsMember({"train", "test"}));
  eval->add_option("--modality", eval_mod, "hard or privileged (default: from the input channels)");
  eval->add_option("--profile", eval_profile, "expected network profile");
  eval->add_option("--out", eval_out, "output directory")->required();

  std::string act_ckpt, act_split = "test", act_mod;
  std::size_t act_count = 4;
  auto* actmap = app.add_subcommand("actmap", "export channel-max activation maps as PGM");
  act_f.add_generation(*actmap, "split seed");
  act_f.add_manifest(*actmap);
  actmap->add_option("--checkpoint", act_ckpt, "PLCK file")->required()->check(CLI::ExistingFile);
  actmap->add_option("--split", act_split, "train or test")->check(CLI::IsMember({"train", "test"}));
  actmap->add_option("--modality", act_mod, "hard or privileged (default: from the input channels)");
  actmap->add_option("--count", act_count, "leading samples of the split to export");
  actmap->add_option("--out", act_out, "output directory")->required();

  auto* report = app.add_subcommand("report", "PCK/EPE comparison of a finished experiment");
  report->add_option("experiment", report_dir, "experiment directory")->required()->check(CLI::ExistingDirectory);
  report->add_option("--out", report_out, "output directory (default: <experiment>/report)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, std::cerr, std::cerr);
  } catch (const CLI::ParseError& e) {
    app.exit(e, std::cerr, std::cerr);
    return 1;
  }

  try {
    if (*gen) return cmd_gen(gen_f, gen_out, raw);
    if (*train) return cmd_train(train_f, tf, train_out);
    if (*eval) return cmd_eval(eval_f, eval_ckpt, eval_split, eval_mod, eval_profile, eval_out);
    if (*actmap) return cmd_actmap(act_f, act_ckpt, act_split, act_mod, act_count, act_out);
    if (*report) return cmd_report(report_dir, report_out);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const LookupError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace pil

// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance --workdir DIR [--expect-fail N]... [--seeds K] [--only N]...
//
// Exit status is 0 when every failing criterion was listed with --expect-fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "grad_cases.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"
#include "pil/checkpoint.hpp"
#include "pil/errors.hpp"
#include "pil/experiment.hpp"
#include "pil/losses.hpp"
#include "pil/metrics.hpp"
#include "pil/pgm.hpp"
#include "pil/trainer.hpp"

using namespace pil;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

void info(const std::string& line) { std::cout << "  " << line << std::endl; }

// ---------------------------------------------------------------------------

Outcome gradient_checks() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_case;
  std::size_t instances = 0, cases = 0;
  for (const auto& c : gradcheck::all_cases()) {
    ++cases;
    for (std::uint64_t i = 0; i < 20; ++i) {
      Rng rng(derive_seed(101, c.name, i));
      const auto inst = c.make(rng);
      const auto rep = gradcheck::check(inst.build, inst.inputs, inst.wrt, derive_seed(102, c.name, i), 1e-5);
      ++instances;
      if (rep.max_rel_error > worst) worst = rep.max_rel_error, worst_case = c.name;
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 30.0,
          std::to_string(cases) + " ops x 20 instances, worst relative error " + fmt(worst) + " (" + worst_case +
              "), " + fmt(secs, 3) + " s"};
}

Outcome loss_oracles() {
  double worst = 0.0;
  for (std::uint64_t trial = 0; trial < 200; ++trial) {
    Rng rng(derive_seed(201, "losses", trial));
    const std::size_t n = 1 + rng.below(16), c = 1 + rng.below(8), hw = 1 + rng.below(64);
    const Tensor pred = gradcheck::uniform({n, 63}, rng), target = gradcheck::uniform({n, 63}, rng);
    const Tensor ts = gradcheck::uniform({n, c, 1, hw}, rng, 0.0, 2.0), tt = gradcheck::uniform({n, c, 1, hw}, rng, 0.0, 2.0);
    Tensor mask({n, 1, 1, hw});
    for (double& v : mask.data()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
    Graph g;
    Var pose = loss_pose(g.input(pred, true), g.constant(target));
    Var inter = loss_inter({1, g.constant(tt)}, {1, g.input(ts, true)});
    Var joint = loss_joint(inter, pose, LossWeights{100.0, 0.0});
    Var m = loss_mask({1, g.input(ts, true)}, mask);
    const double rp = oracle::mean_sq_dist(pred.values(), target.values(), n);
    const double ri = oracle::mean_sq_dist(ts.values(), tt.values(), n);
    const double rm = oracle::mask_energy(ts.values(), mask.values(), n, c, hw);
    auto err = [](double got, double ref) { return std::abs(got - ref) / std::max(1.0, std::abs(ref)); };
    worst = std::max({worst, err(pose.value().item(), rp), err(inter.value().item(), ri),
                      err(joint.value().item(), ri + 100.0 * rp), err(m.value().item(), rm)});
  }
  return {worst <= 1e-12, "200 random trials of pose, inter, joint (lambda 100) and mask, worst error " + fmt(worst)};
}

std::vector<double> random_errors(Rng& rng) {
  std::vector<double> e(1 + rng.below(500));
  for (double& x : e) x = rng.uniform() < 0.1 ? 0.0 : std::abs(rng.normal()) * rng.uniform(0.01, 2.0);
  return e;
}

Outcome metric_checks(const fs::path& run_dir, const ExperimentConfig& cfg) {
  std::vector<std::string> problems;
  // PCK monotone in the threshold.
  for (std::uint64_t s = 0; s < 1000; ++s) {
    Rng rng(derive_seed(701, "pck", s));
    const auto errors = random_errors(rng);
    const auto t = linear_thresholds(rng.uniform(0.1, 3.0), 1 + rng.below(40));
    const auto p = pck_from_errors(errors, t);
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i].fraction != oracle::pck(errors, t[i]) || (i > 0 && p[i].fraction < p[i - 1].fraction)) {
        problems.push_back("pck set " + std::to_string(s));
        break;
      }
    }
  }
  // EPE against the reference on random sets and on the trained PI model.
  double worst = 0.0;
  auto compare = [&](const Tensor& p, const Tensor& g, std::size_t d) {
    const auto ref = oracle::joint_errors(p.values(), g.values(), d);
    const auto e = compute_epe(p, g);
    worst = std::max({worst, std::abs(e.mean - oracle::mean(ref)), std::abs(e.median - oracle::median(ref))});
  };
  for (std::uint64_t s = 0; s < 200; ++s) {
    Rng rng(derive_seed(702, "epe", s));
    const std::size_t n = 1 + rng.below(50), j = 1 + rng.below(21), d = 2 + rng.below(2);
    const Tensor p = gradcheck::uniform({n, j, d}, rng), g = gradcheck::uniform({n, j, d}, rng);
    compare(p, g, d);
  }
  const Dataset data = make_dataset(cfg.n, cfg.generator, cfg.split_seed);
  const Network pi = network_from_checkpoint(load_checkpoint(run_dir / "checkpoints/student_pi.plck"));
  const Tensor pred = predict(pi, data.test, Modality::Hard);
  std::vector<const Sample*> ptrs;
  for (const auto& s : data.test) ptrs.push_back(&s);
  const std::size_t joints = pred.dim(1) / 3;
  compare(Tensor({pred.dim(0), joints, 3}, pred.values()), Tensor({pred.dim(0), joints, 3}, stack_poses(ptrs).values()), 3);
  if (worst > 1e-12) problems.push_back("EPE off by " + fmt(worst));

  // Activation maps: the saved files match a fresh export and survive the reader.
  const std::vector<Sample> shown(data.test.begin(), data.test.begin() + static_cast<std::ptrdiff_t>(cfg.activation_samples));
  const Tensor taps = tap_values(pi, shown, Modality::Hard);
  const fs::path scratch = run_dir.parent_path() / "actmap_check";
  fs::create_directories(scratch);
  const auto first = export_activation_map(taps, scratch / "a");
  const auto second = export_activation_map(tap_values(pi, shown, Modality::Hard), scratch / "b");
  for (std::size_t k = 0; k < shown.size(); ++k) {
    const std::string saved = slurp(run_dir / "activations" / ("pi_" + std::to_string(k) + ".pgm"));
    if (slurp(first[k]) != saved || slurp(second[k]) != saved) problems.push_back("activation map " + std::to_string(k) + " differs");
    if (read_pgm(first[k]) != activation_map(taps, k)) problems.push_back("PGM round trip " + std::to_string(k));
  }
  std::string detail = "1000 PCK sets monotone, EPE worst deviation " + fmt(worst) + ", " +
                       std::to_string(shown.size()) + " activation maps reproduced";
  for (const auto& p : problems) detail += "; " + p;
  return {problems.empty(), detail};
}

// ---------------------------------------------------------------------------

struct SeedRun {
  std::uint64_t seed = 0;
  fs::path dir;
  ExperimentConfig cfg;
  nlohmann::json summary;
};

ExperimentConfig seed_config(std::uint64_t seed) {
  ExperimentConfig cfg;  // 2500 samples, desk profile, 1000 + 1000 iterations, lambda 100
  cfg.train.seed = seed;
  cfg.split_seed = seed;
  return cfg;
}

/// A second stage started from the saved stage-1 networks of a finished run.
Network rerun_pi(const SeedRun& run, const Dataset& data, const TrainConfig& train) {
  Network teacher = network_from_checkpoint(load_checkpoint(run.dir / "checkpoints/teacher.plck"));
  teacher.freeze();
  Network student = network_from_checkpoint(load_checkpoint(run.dir / "checkpoints/student.plck"));
  stage2_train(student, &teacher, data, train, train.stage1_iters);
  return student;
}

double test_epe(const Network& net, const Dataset& data) {
  return evaluate_predictions(predict(net, data.test, Modality::Hard), data.test, default_thresholds_3d(),
                              default_thresholds_2d())
      .normalized_3d.epe_mean;
}

Outcome pi_benefit(const std::vector<SeedRun>& runs, double secs) {
  std::vector<double> teacher, base, pi;
  int wins = 0;
  for (const auto& r : runs) {
    const auto& m = r.summary["models"];
    teacher.push_back(m["teacher"]["epe_mean_3d"].get<double>());
    base.push_back(m["baseline"]["epe_mean_3d"].get<double>());
    pi.push_back(m["pi"]["epe_mean_3d"].get<double>());
    wins += pi.back() < base.back();
    info("seed " + std::to_string(r.seed) + ": teacher " + fmt(teacher.back()) + ", baseline " + fmt(base.back()) +
         ", PI " + fmt(pi.back()));
  }
  const double t = mean_of(teacher), b = mean_of(base), p = mean_of(pi);
  const double improvement = (b - p) / b;
  const bool ok = wins >= 4 && improvement >= 0.05 && t < p && p < b && secs < 900.0;
  return {ok, "PI wins " + std::to_string(wins) + "/" + std::to_string(runs.size()) + ", mean EPE teacher " + fmt(t) +
                  " baseline " + fmt(b) + " PI " + fmt(p) + ", improvement " + fmt(100.0 * improvement, 3) + "%, " +
                  fmt(secs, 4) + " s"};
}

void lambda_probe(const std::vector<SeedRun>& runs) {
  // With stage2_lr = lr / lambda the baseline update is independent of lambda,
  // so only the PI branch needs rerunning.
  std::vector<double> base, pi;
  for (const auto& r : runs) {
    const Dataset data = make_dataset(r.cfg.n, r.cfg.generator, r.cfg.split_seed);
    TrainConfig train = r.cfg.train;
    train.weights.lambda = 1.0;
    base.push_back(r.summary["models"]["baseline"]["epe_mean_3d"].get<double>());
    pi.push_back(test_epe(rerun_pi(r, data, train), data));
    info("lambda 1, seed " + std::to_string(r.seed) + ": baseline " + fmt(base.back()) + ", PI " + fmt(pi.back()));
  }
  info("lambda 1 (informational): mean baseline " + fmt(mean_of(base)) + ", mean PI " + fmt(mean_of(pi)) +
       ", improvement " + fmt(100.0 * (mean_of(base) - mean_of(pi)) / mean_of(base), 3) + "%");
}

Outcome mask_suppression(const std::vector<SeedRun>& runs) {
  std::vector<double> r02, r08;
  for (const auto& r : runs) {
    const Dataset data = make_dataset(r.cfg.n, r.cfg.generator, r.cfg.split_seed);
    const double none = r.summary["models"]["pi"]["background_activation"].get<double>();
    double at[2];
    for (int k = 0; k < 2; ++k) {
      TrainConfig train = r.cfg.train;
      train.weights.mask_proportion = k == 0 ? 0.2 : 0.8;
      at[k] = background_activation(rerun_pi(r, data, train), data.test);
    }
    r02.push_back(1.0 - at[0] / none);
    r08.push_back(1.0 - at[1] / none);
    info("seed " + std::to_string(r.seed) + ": background |tap| mask 0 " + fmt(none) + ", 0.2 " + fmt(at[0]) + ", 0.8 " +
         fmt(at[1]));
  }
  const double a = mean_of(r02), b = mean_of(r08);
  return {b >= 0.30 && a < b, "mean reduction vs mask 0: 0.2 -> " + fmt(100.0 * a, 3) + "%, 0.8 -> " + fmt(100.0 * b, 3) + "%"};
}

Outcome teacher_unchanged(const std::vector<SeedRun>& runs) {
  for (const auto& r : runs) {
    const auto& d = r.summary["teacher_digest"];
    const Network saved = network_from_checkpoint(load_checkpoint(r.dir / "checkpoints/teacher.plck"));
    if (!d["unchanged"].get<bool>() || d["before_stage2"] != d["after_stage2"] ||
        digest_hex(saved.digest()) != d["after_stage2"].get<std::string>()) {
      return {false, "seed " + std::to_string(r.seed) + ": digest changed"};
    }
  }
  return {true, std::to_string(runs.size()) + " runs, digest identical before and after stage 2 and in teacher.plck"};
}

Outcome loss_shape(const SeedRun& run) {
  const auto records = records_from_csv(slurp(run.dir / "losses.csv"));
  std::vector<double> student, joint;
  const std::size_t s1 = run.cfg.train.stage1_iters, s2 = run.cfg.train.stage2_iters;
  for (const auto& r : records) {
    if (r.split != Split::Train) continue;
    if (r.stage == Stage::Pretrain && r.loss_pose_student) student.push_back(*r.loss_pose_student);
    // Final third of stage 2.
    if (r.stage == Stage::PI && r.loss_joint && 3 * (r.iteration - s1) > 2 * s2) joint.push_back(*r.loss_joint);
  }
  if (student.size() < 2 || joint.size() < 2) return {false, "not enough records"};
  const double ratio = student.back() / student.front();
  double running_min = joint.front(), worst_rise = 0.0;
  for (double v : joint) {
    worst_rise = std::max(worst_rise, v / running_min - 1.0);
    running_min = std::min(running_min, v);
  }
  return {ratio <= 0.2 && worst_rise <= 0.05,
          "student pose loss end/start " + fmt(ratio) + " (" + fmt(student.front()) + " -> " + fmt(student.back()) +
              "), joint loss worst rise over final third " + fmt(100.0 * worst_rise, 3) + "% across " +
              std::to_string(joint.size()) + " points"};
}

Outcome reproducible(const SeedRun& run, const fs::path& again) {
  run_experiment(run.cfg, again);
  std::string detail;
  bool ok = true;
  for (const char* f : {"summary.json", "losses.csv"}) {
    const bool same = slurp(run.dir / f) == slurp(again / f);
    ok = ok && same;
    detail += std::string(detail.empty() ? "" : ", ") + f + (same ? " identical" : " DIFFERS");
  }
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string workdir = "acceptance_runs";
  std::vector<int> expect_fail, only;
  std::size_t seeds = 5;
  bool reuse = false;
  app.add_option("--workdir", workdir, "scratch directory for the experiment runs");
  app.add_option("--expect-fail", expect_fail, "criterion known to fail; reported but not fatal");
  app.add_option("--only", only, "run just these criteria");
  app.add_option("--seeds", seeds, "seeds for the training criteria");
  app.add_flag("--reuse", reuse, "reuse finished runs found in the workdir (timing is then not measured)");
  CLI11_PARSE(app, argc, argv);

  const std::set<int> selected(only.begin(), only.end());
  auto wanted = [&](int c) { return selected.empty() || selected.count(c); };
  std::map<int, Outcome> results;
  auto report = [&](int c, Outcome o) {
    std::cout << "criterion " << c << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
    results[c] = std::move(o);
  };
  auto guarded = [&](int c, const std::function<Outcome()>& f) {
    if (!wanted(c)) return;
    try {
      report(c, f());
    } catch (const std::exception& e) {
      report(c, {false, std::string("error: ") + e.what()});
    }
  };

  guarded(1, gradient_checks);
  guarded(2, loss_oracles);

  const bool need_runs = wanted(3) || wanted(4) || wanted(5) || wanted(6) || wanted(7) || wanted(8);
  std::vector<SeedRun> runs;
  double run_secs = 0.0;
  if (need_runs) {
    try {
      const auto t0 = Clock::now();
      for (std::uint64_t s = 0; s < seeds; ++s) {
        SeedRun r;
        r.seed = s;
        r.cfg = seed_config(s);
        r.dir = fs::path(workdir) / ("seed_" + std::to_string(s));
        if (reuse && fs::exists(r.dir / "summary.json") &&
            read_json(r.dir / "summary.json")["config"] == to_json(r.cfg)) {
          r.summary = read_json(r.dir / "summary.json");
        } else {
          const auto ts = Clock::now();
          r.summary = run_experiment(r.cfg, r.dir);
          info("seed " + std::to_string(s) + " trained in " + fmt(seconds_since(ts), 4) + " s");
        }
        runs.push_back(std::move(r));
      }
      run_secs = seconds_since(t0);
    } catch (const std::exception& e) {
      for (int c = 3; c <= 8; ++c) {
        if (wanted(c)) report(c, {false, std::string("experiment failed: ") + e.what()});
      }
      runs.clear();
    }
  }

  if (!runs.empty()) {
    guarded(3, [&] { return teacher_unchanged(runs); });
    guarded(4, [&] {
      Outcome o = pi_benefit(runs, run_secs);
      if (reuse) o.detail += " (reused runs, time not comparable)";
      return o;
    });
    if (wanted(4)) {
      try {
        lambda_probe(runs);
      } catch (const std::exception& e) {
        info(std::string("lambda probe failed: ") + e.what());
      }
    }
    guarded(5, [&] { return mask_suppression(runs); });
    guarded(6, [&] { return loss_shape(runs.front()); });
    guarded(7, [&] { return metric_checks(runs.front().dir, runs.front().cfg); });
    guarded(8, [&] { return reproducible(runs.front(), fs::path(workdir) / "seed_0_repeat"); });
  }

  std::cout << "\nsummary\n";
  int unexpected = 0;
  const std::set<int> expected(expect_fail.begin(), expect_fail.end());
  for (const auto& [c, o] : results) {
    const bool known = expected.count(c) > 0;
    std::cout << "criterion " << c << ": " << (o.pass ? "PASS" : "FAIL")
              << (!o.pass && known ? " (expected, see README)" : "") << "\n";
    if (!o.pass && !known) ++unexpected;
  }
  return unexpected == 0 ? 0 : 1;
}

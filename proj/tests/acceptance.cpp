// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include <json.hpp>

#include "cdiffdet/blocks.hpp"
#include "cdiffdet/cli.hpp"
#include "cdiffdet/detector.hpp"
#include "cdiffdet/diffusion.hpp"
#include "cdiffdet/eval.hpp"
#include "cdiffdet/geometry.hpp"
#include "cdiffdet/head.hpp"
#include "cdiffdet/loss.hpp"
#include "cdiffdet/params.hpp"
#include "oracles.hpp"

using namespace cdiffdet;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double x) {
  std::ostringstream s;
  s.precision(4);
  s << x;
  return s.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

bool cli(std::vector<std::string> args, std::ostream& log) {
  std::ostringstream out;
  const int code = run_cli(args, out, log);
  return code == kExitOk;
}

Outcome schedule() {
  const auto t0 = Clock::now();
  const NoiseSchedule s = build_cosine_schedule(1000, 0.008);
  bool dec = true;
  for (std::size_t t = 1; t <= 1000; ++t) dec = dec && s.alpha_bar[t] < s.alpha_bar[t - 1];
  const double secs = seconds_since(t0);
  const bool ok = dec && s.alpha_bar[0] == 1.0 && s.alpha_bar[1000] < 1e-3 && secs < 1.0;
  return {ok, "alpha_bar[T]=" + num(s.alpha_bar[1000]) + " decreasing=" + (dec ? "yes" : "no") + " " + num(secs) + "s"};
}

Outcome diffusion_algebra() {
  const auto t0 = Clock::now();
  const NoiseSchedule s = build_cosine_schedule(1000);
  const SignalOptions raw{2.0, false};
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::ptrdiff_t> pick_t(1, 1000);
  double worst = 0;
  for (int k = 0; k < 10000; ++k) {
    const std::ptrdiff_t t = pick_t(rng);
    const std::ptrdiff_t prev = std::uniform_int_distribution<std::ptrdiff_t>(0, t - 1)(rng);
    const Tensor x0 = Tensor::randn({1, 3, 4}, rng), eps = Tensor::randn({1, 3, 4}, rng);
    const Tensor xt = q_sample(x0, t, eps, s, raw);
    const Tensor e = epsilon_from_x0(xt, x0, s.alpha_bar_at(t));
    const Tensor step = ddim_step(xt, x0, eps, t, prev, s, raw);
    const Tensor direct = q_sample(x0, prev, eps, s, raw);
    for (std::size_t i = 0; i < x0.numel(); ++i) {
      worst = std::max(worst, std::abs(e[i] - eps[i]));
      worst = std::max(worst, std::abs(step[i] - direct[i]));
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-10 && secs < 5.0, "max abs error " + num(worst) + " over 10000 cases, " + num(secs) + "s"};
}

Outcome hungarian_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> dim(1, 7);
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<int> coarse(0, 4);
  int bad = 0;
  for (int k = 0; k < 1000; ++k) {
    const std::size_t N = dim(rng), M = dim(rng);
    std::vector<double> c(N * M);
    for (auto& x : c) x = k % 3 == 0 ? coarse(rng) : u(rng);
    const Assignment a = hungarian(c, N, M);
    const auto want = oracle::brute_hungarian(c, N, M);
    std::vector<std::size_t> sigma;
    for (const auto& [p, g] : a.pairs) sigma.push_back(p);
    if (a.total_cost != want.cost || (M <= N && sigma != want.sigma)) ++bad;
  }
  const double secs = seconds_since(t0);
  return {bad == 0 && secs < 30.0, std::to_string(bad) + " mismatches in 1000, " + num(secs) + "s"};
}

Outcome gradient_checks() {
  const auto t0 = Clock::now();
  double worst = 0;
  std::string worst_block, failed;
  for (const auto& b : gradcheck_blocks(0)) {
    GradCheckOptions opts;
    opts.max_coords_per_param = b.default_coords;
    const GradCheckResult r = b.run(opts, false);
    if (r.max_rel_error >= 1e-4) failed += " " + b.name;
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_block = b.name;
    }
  }
  const double secs = seconds_since(t0);
  return {failed.empty() && secs < 300.0,
          "worst " + num(worst) + " (" + worst_block + ")" + (failed.empty() ? "" : " failing:" + failed) + ", " +
              num(secs) + "s"};
}

Outcome caf_single_key() {
  const auto t0 = Clock::now();
  ModelConfig mc = tiny_model_config();
  std::mt19937_64 rng(11);
  int bad = 0;
  for (int k = 0; k < 100; ++k) {
    const ParamStore p = init_params(mc, static_cast<std::uint64_t>(k));
    const Tensor g = Tensor::randn({1, mc.gce_dim}, rng);
    const auto a = cross_attention_caf(Tensor::randn({1, 5, mc.model_dim()}, rng), g, ParamContext(p), mc);
    const auto b = cross_attention_caf(Tensor::randn({1, 5, mc.model_dim()}, rng, 3.0), g, ParamContext(p), mc);
    if (a.attended.values() != b.attended.values()) ++bad;
  }
  const double secs = seconds_since(t0);
  return {bad == 0 && secs < 1.0, std::to_string(bad) + " of 100 trials differ, " + num(secs) + "s"};
}

Outcome nms_and_ap() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> pos(0, 60), size(4, 30), unit(0, 1), jit(-3, 3);
  std::uniform_int_distribution<int> count(1, 15);
  int nms_bad = 0;
  double ap_err = 0;
  for (int scene = 0; scene < 100; ++scene) {
    std::vector<EvalGroundTruth> gts;
    std::vector<EvalDetection> dets;
    const int g = count(rng);
    for (int k = 0; k < g; ++k) {
      const double x = pos(rng), y = pos(rng);
      gts.push_back({k % 2, 1, {x, y, x + size(rng), y + size(rng)}});
    }
    for (const auto& gt : gts) {
      dets.push_back({gt.image_id, 1,
                      BoxXYXY{gt.box.x1 + jit(rng), gt.box.y1 + jit(rng), gt.box.x2 + jit(rng), gt.box.y2 + jit(rng)}
                          .canonical(),
                      unit(rng)});
    }
    while (dets.size() + gts.size() < 30 && unit(rng) < 0.6) {
      const double x = pos(rng), y = pos(rng);
      dets.push_back({static_cast<std::int64_t>(rng() % 2), 1, {x, y, x + size(rng), y + size(rng)}, unit(rng)});
    }
    std::vector<BoxXYXY> boxes;
    std::vector<double> scores;
    for (const auto& d : dets) {
      boxes.push_back(d.box);
      scores.push_back(std::round(d.score * 4) / 4);  // ties exercise the index tie-break
    }
    if (nms(boxes, scores, 0.5) != oracle::brute_nms(boxes, scores, 0.5)) ++nms_bad;
    for (double thr : {0.5, 0.75}) {
      ap_err = std::max(ap_err, std::abs(average_precision(dets, gts, thr, kAreaAll, 1000) -
                                         oracle::brute_ap(dets, gts, thr)));
    }
  }
  const double secs = seconds_since(t0);
  return {nms_bad == 0 && ap_err <= 1e-9 && secs < 30.0,
          "nms mismatches " + std::to_string(nms_bad) + ", max AP error " + num(ap_err) + ", " + num(secs) + "s"};
}

Outcome geometry_values() {
  const auto t0 = Clock::now();
  const double i = iou({0, 0, 2, 2}, {1, 1, 3, 3}), g = giou({0, 0, 2, 2}, {1, 1, 3, 3});
  const int level = assign_fpn_level({0, 0, 224, 224});
  const double secs = seconds_since(t0);
  const bool ok = std::abs(i - 1.0 / 7.0) < 1e-12 && std::abs(g + 5.0 / 63.0) < 1e-12 && level == 4 && secs < 1.0;
  return {ok, "iou=" + num(i) + " giou=" + num(g) + " level=" + std::to_string(level)};
}

Outcome oracle_head_inference() {
  const auto t0 = Clock::now();
  const std::vector<BoxXYXY> gt = {{8, 16, 24, 40}, {32, 4, 60, 20}, {36, 36, 52, 60}};
  const std::size_t N = 12, C = 3;
  bool ok = true;
  for (std::size_t steps : {1u, 2u, 4u}) {
    DetectorConfig dc;
    dc.model.num_classes = C;
    dc.num_proposals = N;
    dc.ddim_steps = steps;
    dc.clamp_signal = false;
    const NoiseSchedule sched = build_cosine_schedule(dc.timesteps);
    std::vector<double> x0(N * 4), logits(N * C, -10.0);
    for (std::size_t i = 0; i < N; ++i) {
      const BoxCxCyWH c = to_cxcywh(gt[i % 3]);
      const double v[4] = {c.cx / 64, c.cy / 64, c.w / 64, c.h / 64};
      for (std::size_t k = 0; k < 4; ++k) x0[i * 4 + k] = (v[k] * 2 - 1) * dc.signal_scale;
      logits[i * C + i % 3] = 10.0;
    }
    const Denoiser denoiser = [&](const Tensor&, std::ptrdiff_t) {
      return DenoiserOutput{Tensor({1, N, 4}, x0), Tensor({1, N, C}, logits), Tensor()};
    };
    const DetectionResult r = run_sampler(denoiser, 64, 64, dc, sched, 3);
    ok = ok && r.boxes.size() == 3;
    for (std::size_t k = 0; ok && k < r.boxes.size(); ++k) {
      ok = r.boxes[k] == gt[static_cast<std::size_t>(r.labels[k])];
    }
  }
  const double secs = seconds_since(t0);
  return {ok && secs < 1.0, std::string(ok ? "exact" : "mismatch") + " for 1, 2 and 4 steps, " + num(secs) + "s"};
}

// Settings for the scaled convergence run. Architecture and proposal count
// are fixed by the criterion; the optimizer settings are ours.
const char* kConvergenceConfig = R"({
  "detector": {"num_proposals": 64, "ddim_steps": 1, "model": {"fpn_dim": 64}},
  "train": {"lr": 6e-4, "warmup_steps": 100, "decay_steps": [1800], "batch_size": 16, "gt_fill_fraction": 0.0,
            "log_every": 50}
})";

std::vector<std::pair<std::size_t, double>> read_losses(const fs::path& csv) {
  std::istringstream in(slurp(csv));
  std::string line;
  std::getline(in, line);
  std::vector<std::pair<std::size_t, double>> rows;
  while (std::getline(in, line)) {
    const auto c1 = line.find(','), c2 = line.find(',', c1 + 1);
    rows.emplace_back(std::stoul(line.substr(0, c1)), std::stod(line.substr(c1 + 1, c2 - c1 - 1)));
  }
  return rows;
}

Outcome convergence(const fs::path& work) {
  const auto t0 = Clock::now();
  std::ostringstream log;
  fs::create_directories(work);
  std::ofstream(work / "config.json") << kConvergenceConfig;
  const std::string cfg = (work / "config.json").string();
  bool ok = cli({"synth", "--n", "200", "--seed", "11", "--out", (work / "train").string()}, log) &&
            cli({"synth", "--n", "50", "--seed", "12", "--first-id", "1001", "--out", (work / "val").string()}, log) &&
            cli({"train", "--data", (work / "train" / "annotations.json").string(), "--config", cfg, "--steps", "2000",
                 "--seed", "3", "--out", (work / "run").string()},
                log) &&
            cli({"infer", "--ckpt", (work / "run" / "checkpoint.cdfd").string(), "--data",
                 (work / "val" / "annotations.json").string(), "--ddim-steps", "1", "--seed", "5", "--out",
                 (work / "infer").string()},
                log) &&
            cli({"eval", "--gt", (work / "val" / "annotations.json").string(), "--pred",
                 (work / "infer" / "detections.json").string(), "--out", (work / "eval").string()},
                log);
  const double secs = seconds_since(t0);
  if (!ok) return {false, "pipeline error: " + log.str()};
  const double ap50 = nlohmann::json::parse(slurp(work / "eval" / "report.json"))["ap50"].get<double>();
  double l50 = NAN, l2000 = NAN;
  for (const auto& [step, loss] : read_losses(work / "run" / "loss.csv")) {
    if (step == 50) l50 = loss;
    if (step == 2000) l2000 = loss;
  }
  const double ratio = l2000 / l50;
  const bool pass = ap50 >= 0.5 && ratio < 0.25 && secs <= 1800.0;
  return {pass, "AP50 " + num(ap50) + ", loss(2000)/loss(50) = " + num(l2000) + "/" + num(l50) + " = " + num(ratio) +
                    ", wall " + num(secs) + "s"};
}

Outcome determinism(const fs::path& work) {
  std::ostringstream log;
  fs::create_directories(work);
  std::ofstream(work / "config.json") << R"({
    "detector": {"num_proposals": 16, "model": {"fpn_dim": 32, "gce_dim": 32}},
    "train": {"lr": 2e-4, "warmup_steps": 5, "batch_size": 2, "log_every": 10}
  })";
  const std::string data = (work / "d" / "annotations.json").string(), cfg = (work / "config.json").string();
  bool ok = cli({"synth", "--n", "8", "--seed", "21", "--out", (work / "d").string()}, log);
  for (const char* run : {"a", "b"}) {
    ok = ok && cli({"train", "--data", data, "--config", cfg, "--steps", "30", "--seed", "4", "--out",
                    (work / run).string()},
                   log);
    ok = ok && cli({"infer", "--ckpt", (work / "a" / "checkpoint.cdfd").string(), "--data", data, "--ddim-steps", "2",
                    "--seed", "6", "--out", (work / (std::string(run) + "_inf")).string()},
                   log);
  }
  if (!ok) return {false, "pipeline error: " + log.str()};
  const bool ck = slurp(work / "a" / "checkpoint.cdfd") == slurp(work / "b" / "checkpoint.cdfd");
  const bool det = slurp(work / "a_inf" / "detections.json") == slurp(work / "b_inf" / "detections.json");
  return {ck && det, std::string("checkpoints ") + (ck ? "identical" : "differ") + ", detections " +
                         (det ? "identical" : "differ")};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "cdiffdet_acceptance";
  fs::remove_all(work);
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"noise schedule", schedule},
      {"diffusion algebra", diffusion_algebra},
      {"hungarian vs brute force", hungarian_oracle},
      {"gradient checks", gradient_checks},
      {"CAF single-key", caf_single_key},
      {"NMS and AP oracles", nms_and_ap},
      {"geometry values", geometry_values},
      {"oracle-head inference", oracle_head_inference},
      {"scaled convergence", [&] { return convergence(work / "convergence"); }},
      {"determinism", [&] { return determinism(work / "determinism"); }},
  };
  int failures = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("criterion %zu %-26s %s  %s\n", k + 1, criteria[k].first, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}

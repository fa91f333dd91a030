#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <random>

#include "cdiffdet/blocks.hpp"
#include "cdiffdet/checkpoint.hpp"
#include "cdiffdet/detector.hpp"
#include "cdiffdet/errors.hpp"

using namespace cdiffdet;

namespace {

DetectorConfig tiny_detector(std::size_t N = 6) {
  DetectorConfig dc;
  dc.model = tiny_model_config();
  dc.num_proposals = N;
  return dc;
}

TrainConfig quick_train() {
  TrainConfig tc;
  tc.lr = 1e-2;
  tc.warmup_steps = 5;
  return tc;
}

std::vector<TrainSample> tiny_batch(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  TrainSample a{Tensor::randn({1, 3, 32, 32}, rng), GroundTruth{{0, 1}, {{0.1, 0.1, 0.4, 0.5}, {0.5, 0.4, 0.9, 0.9}}}};
  TrainSample b{Tensor::randn({1, 3, 32, 32}, rng), GroundTruth{{1}, {{0.2, 0.3, 0.7, 0.6}}}};
  return {a, b};
}

// Dyadic boxes so every conversion below is exact.
const std::vector<BoxXYXY> kOracleBoxes = {{8, 16, 24, 40}, {32, 4, 60, 20}, {36, 36, 52, 60}};

}  // namespace

TEST_CASE("decode_boxes identity and limits") {
  const Tensor props({1, 2, 4}, {0.5, 0.5, 0.25, 0.5, 0.2, 0.3, 0.001, 0.1});
  const Tensor zero = decode_boxes(Tensor::zeros({1, 2, 4}), props);
  CHECK(std::abs(zero[0] - 0.375) < 1e-15);
  CHECK(std::abs(zero[3] - 0.75) < 1e-15);
  // Width floored at the minimum proposal size.
  CHECK(std::abs((zero[6] - zero[4]) - kMinProposalSize) < 1e-15);
  const Tensor big = decode_boxes(Tensor({1, 2, 4}, {0, 0, 100, 0, 0, 0, 0, 0}), props);
  CHECK(std::abs((big[2] - big[0]) - 0.25 * 1000.0 / 16.0) < 1e-9);
}

TEST_CASE("denoise forward shapes and determinism") {
  const DetectorConfig dc = tiny_detector(5);
  const ParamStore p = init_params(dc.model, 1);
  std::mt19937_64 rng(2);
  const Tensor img = Tensor::randn({2, 3, 32, 32}, rng), x = Tensor::randn({2, 5, 4}, rng);
  const auto a = denoise_forward(img, x, {100.0, 900.0}, ParamContext(p), dc);
  const auto b = denoise_forward(img, x, {100.0, 900.0}, ParamContext(p), dc);
  CHECK(a.boxes.shape() == Shape{2, 5, 4});
  CHECK(a.logits.shape() == Shape{2, 5, 2});
  CHECK(a.eps_pred.shape() == Shape{2, 5, 4});
  CHECK(a.x0_signal.shape() == Shape{2, 5, 4});
  CHECK(a.logits.values() == b.logits.values());
  CHECK(a.x0_signal.values() == b.x0_signal.values());
}

TEST_CASE("training proposals repeat the ground truth then add noise") {
  std::mt19937_64 rng(3);
  const GroundTruth gt{{0, 1}, {{0.25, 0.25, 0.75, 0.5}, {0.0, 0.5, 0.5, 1.0}}};
  const Tensor p = training_proposals(gt, 8, 0.5, {}, rng);
  CHECK(p.shape() == Shape{1, 8, 4});
  const std::vector<double> first = {0.0, -0.5, 0.0, -1.0};  // (0.5,0.375,0.5,0.25) mapped to signal
  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(p[k] == doctest::Approx(first[k]));
    CHECK(p[8 + k] == p[k]);
  }
  for (std::size_t i = 0; i < p.numel(); ++i) CHECK(std::abs(p[i]) <= 2.0);
}

TEST_CASE("train step determinism, clipping and empty batch") {
  const DetectorConfig dc = tiny_detector();
  TrainConfig tc = quick_train();
  const NoiseSchedule sched = build_cosine_schedule(dc.timesteps);
  const auto batch = tiny_batch(4);
  ParamStore p1 = init_params(dc.model, 5), p2 = init_params(dc.model, 5);
  OptimizerState s1, s2;
  for (int k = 0; k < 3; ++k) {
    const auto a = train_step(batch, p1, s1, dc, tc, sched, 9);
    const auto b = train_step(batch, p2, s2, dc, tc, sched, 9);
    CHECK(a.total == b.total);
    CHECK(std::isfinite(a.total));
    CHECK(a.clipped_norm <= tc.clip_norm + 1e-9);
  }
  for (const auto& n : p1.names()) CHECK(p1.get(n).values() == p2.get(n).values());
  CHECK(s1.step == 3);
  CHECK_THROWS_AS(train_step({}, p1, s1, dc, tc, sched, 9), ContractError);
}

TEST_CASE("train step does not depend on the worker count") {
  const DetectorConfig dc = tiny_detector();
  const TrainConfig tc = quick_train();
  const NoiseSchedule sched = build_cosine_schedule(dc.timesteps);
  const auto batch = tiny_batch(6);
  ParamStore p1 = init_params(dc.model, 7), p2 = init_params(dc.model, 7);
  OptimizerState s1, s2;
  setenv("CDIFFDET_THREADS", "1", 1);
  const auto a = train_step(batch, p1, s1, dc, tc, sched, 1);
  setenv("CDIFFDET_THREADS", "3", 1);
  const auto b = train_step(batch, p2, s2, dc, tc, sched, 1);
  unsetenv("CDIFFDET_THREADS");
  CHECK(a.total == b.total);
  for (const auto& n : p1.names()) CHECK(p1.get(n).values() == p2.get(n).values());
}

TEST_CASE("single-image overfit lowers the loss") {
  const DetectorConfig dc = tiny_detector(8);
  TrainConfig tc = quick_train();
  tc.lr = 3e-3;
  tc.warmup_steps = 20;
  tc.augment = false;
  const NoiseSchedule sched = build_cosine_schedule(dc.timesteps);
  std::mt19937_64 rng(8);
  const std::vector<TrainSample> batch = {
      {Tensor::randn({1, 3, 32, 32}, rng), GroundTruth{{1}, {{0.2, 0.25, 0.6, 0.7}}}}};
  ParamStore p = init_params(dc.model, 9);
  OptimizerState s;
  // Average a few steps at each end; t and the noise proposals vary per step.
  double start = 0, end = 0;
  for (std::size_t k = 0; k < 500; ++k) {
    const double loss = train_step(batch, p, s, dc, tc, sched, 3).total;
    if (k < 10) start += loss;
    if (k >= 490) end += loss;
  }
  CHECK(end < start);
}

TEST_CASE("learning rate warmup and decay") {
  TrainConfig tc;
  tc.lr = 1.0;
  tc.warmup_steps = 10;
  tc.decay_steps = {100, 200};
  tc.decay_factor = 0.1;
  CHECK(learning_rate(tc, 0) == doctest::Approx(0.1));
  CHECK(learning_rate(tc, 50) == 1.0);
  CHECK(learning_rate(tc, 150) == doctest::Approx(0.1));
  CHECK(learning_rate(tc, 250) == doctest::Approx(0.01));
}

TEST_CASE("inference loop bounds, trace and determinism") {
  DetectorConfig dc = tiny_detector(7);
  dc.score_threshold = 1e-6;
  const ParamStore p = init_params(dc.model, 10);
  const NoiseSchedule sched = build_cosine_schedule(dc.timesteps);
  std::mt19937_64 rng(11);
  const Tensor img = Tensor::randn({1, 3, 32, 32}, rng);
  const auto a = infer(img, p, dc, sched, 5);
  CHECK(a.denoise_calls == 1);
  CHECK(a.trace.empty());
  CHECK(a.boxes.size() <= 7 * 2);
  for (std::size_t k = 1; k < a.scores.size(); ++k) CHECK(a.scores[k - 1] >= a.scores[k]);
  const auto b = infer(img, p, dc, sched, 5);
  CHECK(a.boxes == b.boxes);
  CHECK(a.scores == b.scores);
  CHECK(a.labels == b.labels);

  dc.ddim_steps = 4;
  const auto t4 = infer(img, p, dc, sched, 5, true);
  CHECK(t4.denoise_calls == 4);
  CHECK(t4.trace.size() == 4 * 7);
  for (std::size_t prop = 0; prop < 7; ++prop) {
    std::size_t rows = 0;
    for (const auto& r : t4.trace) rows += r.proposal == prop;
    CHECK(rows == 4);
  }
}

TEST_CASE("oracle denoiser recovers the ground truth exactly") {
  for (std::size_t steps : {1u, 2u, 4u}) {
    DetectorConfig dc = tiny_detector(9);
    dc.model.num_classes = 3;
    dc.ddim_steps = steps;
    dc.clamp_signal = false;
    const NoiseSchedule sched = build_cosine_schedule(dc.timesteps);
    const double W = 64, H = 64;
    std::vector<double> x0(9 * 4), logits(9 * 3, -10.0);
    for (std::size_t i = 0; i < 9; ++i) {
      const BoxCxCyWH c = to_cxcywh(kOracleBoxes[i % 3]);
      const double v[4] = {c.cx / W, c.cy / H, c.w / W, c.h / H};
      for (std::size_t k = 0; k < 4; ++k) x0[i * 4 + k] = (v[k] * 2 - 1) * dc.signal_scale;
      logits[i * 3 + i % 3] = 10.0;
    }
    std::size_t calls = 0;
    const Denoiser oracle = [&](const Tensor&, std::ptrdiff_t) {
      ++calls;
      return DenoiserOutput{Tensor({1, 9, 4}, x0), Tensor({1, 9, 3}, logits), Tensor()};
    };
    const auto r = run_sampler(oracle, 64, 64, dc, sched, 42);
    CHECK(calls == steps);
    REQUIRE(r.boxes.size() == 3);
    for (std::size_t k = 0; k < 3; ++k) {
      const int label = r.labels[k];
      CHECK(r.boxes[k] == kOracleBoxes[static_cast<std::size_t>(label)]);
    }
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  const DetectorConfig dc = tiny_detector();
  ParamStore p = init_params(dc.model, 12);
  OptimizerState s;
  const NoiseSchedule sched = build_cosine_schedule(dc.timesteps);
  train_step(tiny_batch(13), p, s, dc, quick_train(), sched, 2);
  Checkpoint ck;
  ck.config = {{"detector", dc}, {"train_state", {{"step", s.step}}}};
  ck.params = p;
  ck.optimizer = s;
  const std::string bytes = encode_checkpoint(ck);
  CHECK(bytes.substr(0, 4) == "CDFD");
  const Checkpoint back = decode_checkpoint(bytes);
  CHECK(back.config == ck.config);
  REQUIRE(back.optimizer.has_value());
  CHECK(back.optimizer->step == 1);
  for (const auto& n : p.names()) {
    CHECK(back.params.get(n).values() == p.get(n).values());
    CHECK(back.params.get(n).shape() == p.get(n).shape());
    CHECK(back.optimizer->m.at(n) == s.m.at(n));
    CHECK(back.optimizer->v.at(n) == s.v.at(n));
  }
  CHECK(encode_checkpoint(back) == bytes);

  CHECK_THROWS_AS(decode_checkpoint("XXXX"), ParseError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), ParseError);
  std::string bad_version = bytes;
  bad_version[4] = 9;
  CHECK_THROWS_AS(decode_checkpoint(bad_version), ParseError);
}

TEST_CASE("resuming from a checkpoint continues bit-compatibly") {
  const DetectorConfig dc = tiny_detector();
  const TrainConfig tc = quick_train();
  const NoiseSchedule sched = build_cosine_schedule(dc.timesteps);
  const auto batch = tiny_batch(14);
  ParamStore straight = init_params(dc.model, 15);
  OptimizerState s1;
  train_step(batch, straight, s1, dc, tc, sched, 4);
  train_step(batch, straight, s1, dc, tc, sched, 4);

  ParamStore first = init_params(dc.model, 15);
  OptimizerState s2;
  train_step(batch, first, s2, dc, tc, sched, 4);
  Checkpoint ck;
  ck.config = {{"train_state", {{"step", s2.step}}}};
  ck.params = first;
  ck.optimizer = s2;
  Checkpoint back = decode_checkpoint(encode_checkpoint(ck));
  train_step(batch, back.params, *back.optimizer, dc, tc, sched, 4);
  for (const auto& n : straight.names()) CHECK(back.params.get(n).values() == straight.get(n).values());
}

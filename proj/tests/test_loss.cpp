#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cdiffdet/errors.hpp"
#include "cdiffdet/gradcheck.hpp"
#include "cdiffdet/loss.hpp"
#include "oracles.hpp"

using namespace cdiffdet;

TEST_CASE("focal loss examples") {
  CHECK(focal_loss(1.0, 1) < 1e-12);
  CHECK(focal_loss(0.5, 1) == doctest::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-14));
  const FocalParams ce{0.5, 0.0};
  for (double p : {0.1, 0.4, 0.8}) {
    CHECK(focal_loss(p, 1, ce) == doctest::Approx(-0.5 * std::log(p)).epsilon(1e-14));
    CHECK(focal_loss(p, 0, ce) == doctest::Approx(-0.5 * std::log(1 - p)).epsilon(1e-14));
  }
  CHECK(std::isfinite(focal_loss(0.0, 1)));
}

TEST_CASE("matching cost examples") {
  const GroundTruth gt{{1}, {{0.1, 0.1, 0.5, 0.5}}};
  const MatchWeights w;
  const std::vector<double> probs = {0.05, 0.95, 0.5, 0.5};
  const std::vector<BoxXYXY> pred = {{0.1, 0.1, 0.5, 0.5}, {0.3, 0.3, 0.9, 0.7}};
  const auto c = matching_cost(probs, 2, pred, gt, w);
  REQUIRE(c.size() == 2);
  CHECK(c[0] == doctest::Approx(2.0 * focal_loss(0.95, 1)).epsilon(1e-14));
  CHECK(c[0] < c[1]);

  const MatchWeights l1_only{0.0, 1.0, 0.0};
  CHECK(matching_cost(probs, 2, pred, gt, l1_only)[0] == 0.0);

  // Two proposals against two gts by hand.
  const GroundTruth gt2{{0, 1}, {{0, 0, 0.5, 0.5}, {0.5, 0.5, 1, 1}}};
  const std::vector<double> p2 = {0.8, 0.3, 0.4, 0.6};
  const std::vector<BoxXYXY> b2 = {{0, 0, 0.5, 0.5}, {0.25, 0.25, 0.75, 0.75}};
  const auto c2 = matching_cost(p2, 2, b2, gt2, w);
  REQUIRE(c2.size() == 4);
  CHECK(c2[0] == doctest::Approx(2 * focal_loss(0.8, 1)).epsilon(1e-14));
  CHECK(c2[1] == doctest::Approx(2 * focal_loss(0.3, 1) + 5 * 2.0 + 2 * (1 - giou(b2[0], gt2.boxes[1]))).epsilon(1e-14));
  CHECK(c2[2] == doctest::Approx(2 * focal_loss(0.4, 1) + 5 * 1.0 + 2 * (1 - giou(b2[1], gt2.boxes[0]))).epsilon(1e-14));
  CHECK(c2[3] == doctest::Approx(2 * focal_loss(0.6, 1) + 5 * 1.0 + 2 * (1 - giou(b2[1], gt2.boxes[1]))).epsilon(1e-14));
  CHECK(matching_cost(p2, 2, b2, GroundTruth{}, w).empty());
}

TEST_CASE("hungarian examples") {
  const auto a = hungarian({1, 2, 2, 1}, 2, 2);
  CHECK(a.pairs == std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {1, 1}});
  CHECK(a.total_cost == 2.0);
  const auto b = hungarian({7}, 1, 1);
  CHECK(b.pairs == std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}});
  CHECK_THROWS_AS(hungarian({1, NAN}, 2, 1), ContractError);
  const auto e = hungarian({}, 3, 0);
  CHECK(e.pairs.empty());
  CHECK(e.unmatched == std::vector<std::size_t>{0, 1, 2});
}

TEST_CASE("hungarian equals exhaustive search including the tie-break") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 10);
  std::uniform_int_distribution<int> small(0, 3);
  for (int trial = 0; trial < 600; ++trial) {
    const std::size_t N = 1 + trial % 6, M = 1 + (trial / 6) % 6;
    const bool ties = trial % 2 == 0;
    std::vector<double> c(N * M);
    for (auto& x : c) x = ties ? small(rng) : u(rng);
    const auto got = hungarian(c, N, M);
    const auto want = oracle::brute_hungarian(c, N, M);
    INFO("N=" << N << " M=" << M << " trial " << trial);
    CHECK(got.total_cost == want.cost);
    std::vector<std::size_t> sigma;
    for (const auto& [p, g] : got.pairs) sigma.push_back(p);
    if (M <= N) CHECK(sigma == want.sigma);
    CHECK(got.pairs.size() == std::min(N, M));
    CHECK(got.unmatched.size() == N - got.pairs.size());
  }
}

TEST_CASE("set loss components") {
  // Two proposals, one gt matched to proposal 1.
  const Tensor logits({2, 2}, {0.3, -1.2, 2.0, 0.5});
  const Tensor boxes({2, 4}, {0.1, 0.1, 0.3, 0.4, 0.2, 0.2, 0.6, 0.5});
  const GroundTruth gt{{0}, {{0.25, 0.2, 0.6, 0.55}}};
  Assignment a;
  a.pairs = {{1, 0}};
  a.unmatched = {0};
  const MatchWeights w;
  const auto terms = set_loss(logits, boxes, gt, a, w);
  auto sig = [](double x) { return 1 / (1 + std::exp(-x)); };
  const double cls = focal_loss(sig(0.3), 0) + focal_loss(sig(-1.2), 0) + focal_loss(sig(2.0), 1) +
                     focal_loss(sig(0.5), 0);
  const double l1 = 0.05 + 0.0 + 0.0 + 0.05;
  const double g = 1 - giou({0.2, 0.2, 0.6, 0.5}, gt.boxes[0]);
  CHECK(terms.cls == doctest::Approx(2 * cls).epsilon(1e-12));
  CHECK(terms.l1 == doctest::Approx(5 * l1).epsilon(1e-12));
  CHECK(terms.giou == doctest::Approx(2 * g).epsilon(1e-12));
  CHECK(terms.total.item() == doctest::Approx(2 * cls + 5 * l1 + 2 * g).epsilon(1e-12));

  const auto bg = set_loss(logits, boxes, GroundTruth{}, Assignment{{}, {0, 1}, 0.0}, w);
  CHECK(bg.l1 == 0.0);
  CHECK(bg.giou == 0.0);
  CHECK(bg.total.item() == doctest::Approx(bg.cls).epsilon(1e-14));
}

TEST_CASE("set loss is minimal at the target and permutation invariant") {
  const GroundTruth gt{{0, 1}, {{0.1, 0.1, 0.4, 0.5}, {0.5, 0.3, 0.9, 0.8}}};
  const MatchWeights w;
  const Tensor perfect_boxes({3, 4}, {0.1, 0.1, 0.4, 0.5, 0.5, 0.3, 0.9, 0.8, 0.2, 0.2, 0.3, 0.3});
  const Tensor perfect_logits({3, 2}, {12, -12, -12, 12, -12, -12});
  auto loss_of = [&](const Tensor& lg, const Tensor& bx, const GroundTruth& g) {
    std::vector<double> probs(lg.numel());
    for (std::size_t k = 0; k < probs.size(); ++k) probs[k] = 1 / (1 + std::exp(-lg[k]));
    std::vector<BoxXYXY> pb;
    for (std::size_t i = 0; i < bx.dim(0); ++i) pb.push_back({bx[i * 4], bx[i * 4 + 1], bx[i * 4 + 2], bx[i * 4 + 3]});
    const auto a = hungarian(matching_cost(probs, 2, pb, g, w), bx.dim(0), g.boxes.size());
    return set_loss(lg, bx, g, a, w).total.item();
  };
  const double best = loss_of(perfect_logits, perfect_boxes, gt);
  std::mt19937_64 rng(4);
  for (int k = 0; k < 20; ++k) {
    std::vector<double> bv = perfect_boxes.values(), lv = perfect_logits.values();
    for (auto& x : bv) x += 0.01 * std::normal_distribution<double>()(rng);
    for (auto& x : lv) x += 0.5 * std::normal_distribution<double>()(rng);
    for (std::size_t i = 0; i < 3; ++i) {
      if (bv[i * 4 + 2] < bv[i * 4]) std::swap(bv[i * 4 + 2], bv[i * 4]);
      if (bv[i * 4 + 3] < bv[i * 4 + 1]) std::swap(bv[i * 4 + 3], bv[i * 4 + 1]);
    }
    CHECK(best < loss_of(Tensor({3, 2}, lv), Tensor({3, 4}, bv), gt));
  }

  // Proposal and gt permutations leave the value unchanged.
  std::vector<double> lv(6), bv(12);
  std::uniform_real_distribution<double> u(0.05, 0.45);
  for (auto& x : lv) x = std::normal_distribution<double>()(rng);
  for (std::size_t i = 0; i < 3; ++i) {
    bv[i * 4] = u(rng);
    bv[i * 4 + 1] = u(rng);
    bv[i * 4 + 2] = bv[i * 4] + u(rng);
    bv[i * 4 + 3] = bv[i * 4 + 1] + u(rng);
  }
  const double base = loss_of(Tensor({3, 2}, lv), Tensor({3, 4}, bv), gt);
  const std::size_t perm[3] = {2, 0, 1};
  std::vector<double> lp(6), bp(12);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t c = 0; c < 2; ++c) lp[i * 2 + c] = lv[perm[i] * 2 + c];
    for (std::size_t c = 0; c < 4; ++c) bp[i * 4 + c] = bv[perm[i] * 4 + c];
  }
  CHECK(loss_of(Tensor({3, 2}, lp), Tensor({3, 4}, bp), gt) == doctest::Approx(base).epsilon(1e-14));
  const GroundTruth swapped{{1, 0}, {gt.boxes[1], gt.boxes[0]}};
  CHECK(loss_of(Tensor({3, 2}, lv), Tensor({3, 4}, bv), swapped) == doctest::Approx(base).epsilon(1e-14));
}

TEST_CASE("set loss box gradient matches finite differences with a fixed assignment") {
  const GroundTruth gt{{0, 1}, {{0.1, 0.1, 0.4, 0.5}, {0.5, 0.3, 0.9, 0.8}}};
  const Tensor logits({3, 2}, {0.2, -0.4, -1.0, 0.7, 0.1, 0.1});
  const Tensor boxes({3, 4}, {0.12, 0.08, 0.45, 0.52, 0.55, 0.33, 0.85, 0.79, 0.2, 0.25, 0.31, 0.4});
  Assignment a;
  a.pairs = {{0, 0}, {1, 1}};
  a.unmatched = {2};
  ScalarFn f = [&](GradTape&, std::span<const Tensor> p) { return set_loss(p[0], p[1], gt, a, MatchWeights{}).total; };
  CHECK(finite_difference_check(f, {logits, boxes}).max_rel_error < 1e-4);
}

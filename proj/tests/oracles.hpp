#pragma once

// Independent slow reference implementations used by the unit and
// acceptance tests.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <vector>

#include "cdiffdet/eval.hpp"
#include "cdiffdet/geometry.hpp"

namespace oracle {

using cdiffdet::BoxXYXY;

inline double box_iou(const BoxXYXY& a, const BoxXYXY& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

struct BruteAssignment {
  double cost = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> sigma;  // proposal for each matched gt, gt order
};

// Exhaustive search over injective maps. When M <= N every gt gets a
// proposal; otherwise every proposal gets a gt and sigma holds the proposals
// of the matched gts in gt order. Costs are summed in gt order. Among equal
// costs the lexicographically smallest sigma wins.
inline BruteAssignment brute_hungarian(const std::vector<double>& cost, std::size_t N, std::size_t M) {
  BruteAssignment best;
  if (M <= N) {
    std::vector<std::size_t> sigma(M);
    std::vector<char> used(N, 0);
    auto rec = [&](auto&& self, std::size_t j) -> void {
      if (j == M) {
        double c = 0.0;
        for (std::size_t g = 0; g < M; ++g) c += cost[sigma[g] * M + g];
        if (c < best.cost || (c == best.cost && sigma < best.sigma)) best = {c, sigma};
        return;
      }
      for (std::size_t i = 0; i < N; ++i) {
        if (used[i]) continue;
        used[i] = 1;
        sigma[j] = i;
        self(self, j + 1);
        used[i] = 0;
      }
    };
    rec(rec, 0);
    if (M == 0) best.cost = 0.0;
    return best;
  }
  // More gts than proposals: choose a gt for every proposal.
  std::vector<std::size_t> tau(N);
  std::vector<char> used(M, 0);
  auto rec = [&](auto&& self, std::size_t i) -> void {
    if (i == N) {
      std::vector<std::size_t> prop_of(M, N);
      for (std::size_t p = 0; p < N; ++p) prop_of[tau[p]] = p;
      double c = 0.0;
      std::vector<std::size_t> sigma;
      for (std::size_t g = 0; g < M; ++g) {
        if (prop_of[g] == N) continue;
        c += cost[prop_of[g] * M + g];
        sigma.push_back(prop_of[g]);
      }
      if (c < best.cost) best = {c, sigma};
      return;
    }
    for (std::size_t g = 0; g < M; ++g) {
      if (used[g]) continue;
      used[g] = 1;
      tau[i] = g;
      self(self, i + 1);
      used[g] = 0;
    }
  };
  rec(rec, 0);
  if (N == 0) best.cost = 0.0;
  return best;
}

// Quadratic greedy NMS: repeatedly takes the best remaining box (lowest index
// on equal scores) and removes everything overlapping it above threshold.
inline std::vector<std::size_t> brute_nms(const std::vector<BoxXYXY>& boxes, const std::vector<double>& scores,
                                          double thr) {
  std::vector<char> alive(boxes.size(), 1);
  std::vector<std::size_t> kept;
  for (;;) {
    std::ptrdiff_t best = -1;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      if (!alive[i]) continue;
      if (best < 0 || scores[i] > scores[static_cast<std::size_t>(best)]) best = static_cast<std::ptrdiff_t>(i);
    }
    if (best < 0) return kept;
    const auto b = static_cast<std::size_t>(best);
    kept.push_back(b);
    alive[b] = 0;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      if (alive[i] && box_iou(boxes[b], boxes[i]) > thr) alive[i] = 0;
    }
  }
}

// AP of one category over all areas: per-image greedy matching in descending
// score order (best IoU among unmatched gts), then for every recall level the
// best precision at any cutoff reaching it, averaged over 101 levels.
// Scores are assumed distinct.
inline double brute_ap(const std::vector<cdiffdet::EvalDetection>& dets, const std::vector<cdiffdet::EvalGroundTruth>& gts,
                       double thr) {
  if (gts.empty()) return -1.0;
  std::vector<cdiffdet::EvalDetection> order = dets;
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  std::map<std::int64_t, std::vector<char>> taken;
  std::map<std::int64_t, std::vector<const cdiffdet::EvalGroundTruth*>> by_img;
  for (const auto& g : gts) by_img[g.image_id].push_back(&g);
  for (auto& [k, v] : by_img) taken[k].assign(v.size(), 0);
  std::vector<int> tp;
  for (const auto& d : order) {
    auto& cand = by_img[d.image_id];
    auto& tk = taken[d.image_id];
    double best = -1.0;
    std::ptrdiff_t m = -1;
    for (std::size_t k = 0; k < cand.size(); ++k) {
      if (tk[k]) continue;
      const double v = box_iou(d.box, cand[k]->box);
      if (v >= thr && v > best) {
        best = v;
        m = static_cast<std::ptrdiff_t>(k);
      }
    }
    if (m >= 0) tk[static_cast<std::size_t>(m)] = 1;
    tp.push_back(m >= 0 ? 1 : 0);
  }
  double total = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r / 100.0;
    double best = 0.0;
    int tps = 0;
    for (std::size_t k = 0; k < tp.size(); ++k) {
      tps += tp[k];
      const double rec = static_cast<double>(tps) / static_cast<double>(gts.size());
      const double prec = static_cast<double>(tps) / static_cast<double>(k + 1);
      if (rec >= level) best = std::max(best, prec);
    }
    total += best;
  }
  return total / 101.0;
}

}  // namespace oracle

#pragma once

// Set-prediction loss: sigmoid focal classification, L1 and GIoU box terms,
// the pairwise matching cost and a Hungarian solver with a canonical
// tie-break.

#include <cstddef>
#include <optional>
#include <utility>
#include <vector>

#include "cdiffdet/geometry.hpp"
#include "cdiffdet/tensor.hpp"

namespace cdiffdet {

struct MatchWeights {
  double cls = 2.0;
  double l1 = 5.0;
  double giou = 2.0;
  void validate() const;
};

struct FocalParams {
  double alpha = 0.25;
  double gamma = 2.0;
};

inline constexpr double kFocalClamp = 1e-7;

// target 1: -alpha (1-p)^gamma log p; target 0: -(1-alpha) p^gamma log(1-p),
// with p clamped to [1e-7, 1-1e-7].
double focal_loss(double p, int target, const FocalParams& fp = {});

// Sum of focal_loss(sigmoid(logits), targets) over every element. targets has
// one 0/1 entry per logit.
Tensor sigmoid_focal_loss(const Tensor& logits, const std::vector<int>& targets, const FocalParams& fp = {});

// Sum over rows of |pred - target|_1. pred: [K,4] xyxy; targets.size() == K.
Tensor l1_loss(const Tensor& pred, const std::vector<BoxXYXY>& targets);

// Sum over rows of 1 - giou(pred_k, target_k). pred rows must be canonical.
Tensor giou_loss(const Tensor& pred, const std::vector<BoxXYXY>& targets);

struct GroundTruth {
  std::vector<int> classes;      // 0-based class ids
  std::vector<BoxXYXY> boxes;    // same frame as the predictions
};

// Row-major [N, M]: C[i,j] = cls*focal(p_i[c_j], 1) + l1*|b_i - b_j|_1 + giou*(1 - giou(b_i, b_j)).
// probs is [N, C] sigmoid scores.
std::vector<double> matching_cost(const std::vector<double>& probs, std::size_t num_classes,
                                  const std::vector<BoxXYXY>& pred_boxes, const GroundTruth& gt,
                                  const MatchWeights& w, const FocalParams& fp = {});

struct Assignment {
  // (proposal, gt) ordered by gt index.
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<std::size_t> unmatched;  // ascending proposal indices
  double total_cost = 0.0;             // sum of matched costs in gt order
};

// Minimum-cost assignment of every gt (column) to a distinct proposal (row)
// for a row-major [N, M] cost matrix. When M > N, surplus gts are padded
// against sentinel proposals and dropped. Among optimal assignments the one
// whose proposal sequence (sigma(0), sigma(1), ...) is lexicographically
// smallest is returned. Throws ContractError on non-finite costs.
Assignment hungarian(const std::vector<double>& cost, std::size_t N, std::size_t M);

struct SetLossTerms {
  Tensor total;  // scalar, differentiable
  double cls = 0.0;
  double l1 = 0.0;
  double giou = 0.0;
  double noise = 0.0;
};

struct NoiseTarget {
  Tensor eps_pred;              // [N,4]
  std::vector<double> eps_true; // N*4
  double weight = 0.0;
};

// One image. logits [N,C], pred_boxes [N,4] xyxy in the gt frame. Matched
// proposals take a one-hot focal target, the rest all-background; box terms
// use matched pairs only. Normalized by max(1, M). Reported components are
// the weighted, normalized contributions.
SetLossTerms set_loss(const Tensor& logits, const Tensor& pred_boxes, const GroundTruth& gt,
                      const Assignment& assignment, const MatchWeights& w, const FocalParams& fp = {},
                      const std::optional<NoiseTarget>& noise = std::nullopt);

}  // namespace cdiffdet

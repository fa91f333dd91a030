#include "cdiffdet/loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "cdiffdet/errors.hpp"

namespace cdiffdet {

namespace {

constexpr std::uint64_t kTagFocalClamp = 0x51;
constexpr std::uint64_t kTagL1 = 0x52;
constexpr std::uint64_t kTagGiou = 0x53;

double clamp_p(double p) { return std::clamp(p, kFocalClamp, 1.0 - kFocalClamp); }

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void check_boxes(const Tensor& pred, std::size_t K, const char* who) {
  if (pred.rank() != 2 || pred.dim(1) != 4 || pred.dim(0) != K) {
    throw ShapeError(std::string(who) + " expects pred [" + std::to_string(K) + ",4], got " +
                     shape_str(pred.shape()));
  }
}

BoxXYXY row_box(const Tensor& t, std::size_t row) {
  return {t[row * 4], t[row * 4 + 1], t[row * 4 + 2], t[row * 4 + 3]};
}

// Value and gradient of 1 - giou(a, b) with respect to a's corners.
double giou_loss_grad(const BoxXYXY& a, const BoxXYXY& b, double grad[4]) {
  grad[0] = grad[1] = grad[2] = grad[3] = 0.0;
  const bool ix1_a = a.x1 >= b.x1, iy1_a = a.y1 >= b.y1;  // a supplies the intersection's min corner
  const bool ix2_a = a.x2 <= b.x2, iy2_a = a.y2 <= b.y2;
  const bool ex1_a = a.x1 <= b.x1, ey1_a = a.y1 <= b.y1;  // a supplies the enclosure's min corner
  const bool ex2_a = a.x2 >= b.x2, ey2_a = a.y2 >= b.y2;
  const double iw_raw = (ix2_a ? a.x2 : b.x2) - (ix1_a ? a.x1 : b.x1);
  const double ih_raw = (iy2_a ? a.y2 : b.y2) - (iy1_a ? a.y1 : b.y1);
  const bool iw_pos = iw_raw > 0.0, ih_pos = ih_raw > 0.0;
  if (branch_recording()) {
    note_branch(kTagGiou, ix1_a);
    note_branch(kTagGiou, iy1_a);
    note_branch(kTagGiou, ix2_a);
    note_branch(kTagGiou, iy2_a);
    note_branch(kTagGiou, ex1_a);
    note_branch(kTagGiou, ey1_a);
    note_branch(kTagGiou, ex2_a);
    note_branch(kTagGiou, ey2_a);
    note_branch(kTagGiou, iw_pos);
    note_branch(kTagGiou, ih_pos);
  }
  const double iw = iw_pos ? iw_raw : 0.0, ih = ih_pos ? ih_raw : 0.0;
  const double I = iw * ih;
  const double aw = a.x2 - a.x1, ah = a.y2 - a.y1;
  const double area_a = aw * ah, area_b = b.area();
  const double U = area_a + area_b - I;
  const double ew = (ex2_a ? a.x2 : b.x2) - (ex1_a ? a.x1 : b.x1);
  const double eh = (ey2_a ? a.y2 : b.y2) - (ey1_a ? a.y1 : b.y1);
  const double E = ew * eh;
  if (!(U > 0.0) || !(E > 0.0)) return 1.0 - giou(a, b);

  const double loss = 2.0 - I / U - U / E;
  const double dI = -1.0 / U - I / (U * U) + 1.0 / E;
  const double dA = I / (U * U) - 1.0 / E;
  const double dE = U / (E * E);
  // area_a
  grad[0] += dA * -ah;
  grad[2] += dA * ah;
  grad[1] += dA * -aw;
  grad[3] += dA * aw;
  // intersection
  if (iw_pos && ih_pos) {
    if (ix1_a) grad[0] += dI * -ih;
    if (ix2_a) grad[2] += dI * ih;
    if (iy1_a) grad[1] += dI * -iw;
    if (iy2_a) grad[3] += dI * iw;
  }
  // enclosure
  if (ex1_a) grad[0] += dE * -eh;
  if (ex2_a) grad[2] += dE * eh;
  if (ey1_a) grad[1] += dE * -ew;
  if (ey2_a) grad[3] += dE * ew;
  return loss;
}

// Rectangular Hungarian (rows <= cols) on a row-major rows x cols matrix.
// Returns the column of each row plus the row and column potentials.
struct Solved {
  std::vector<std::size_t> col_of_row;
  std::vector<double> u, v;
};

Solved solve_rect(const std::vector<double>& a, std::size_t n, std::size_t m) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0), minv(m + 1);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  std::vector<char> used(m + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  Solved s;
  s.col_of_row.assign(n, 0);
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] != 0) s.col_of_row[p[j] - 1] = j - 1;
  }
  s.u.assign(u.begin() + 1, u.end());
  s.v.assign(v.begin() + 1, v.end());
  return s;
}

// rows = gts, cols = proposals; returns sum over rows in row order.
double assignment_cost(const std::vector<double>& a, std::size_t m, const std::vector<std::size_t>& col_of_row) {
  double total = 0.0;
  for (std::size_t r = 0; r < col_of_row.size(); ++r) total += a[r * m + col_of_row[r]];
  return total;
}

// Optimal completion with rows [0, fixed_rows) pinned to the given columns.
std::vector<std::size_t> solve_pinned(const std::vector<double>& a, std::size_t n, std::size_t m,
                                      const std::vector<std::size_t>& pinned) {
  const std::size_t k = pinned.size();
  std::vector<char> taken(m, 0);
  for (auto c : pinned) taken[c] = 1;
  std::vector<std::size_t> free_cols;
  for (std::size_t c = 0; c < m; ++c) {
    if (!taken[c]) free_cols.push_back(c);
  }
  std::vector<std::size_t> out = pinned;
  const std::size_t rn = n - k, rm = free_cols.size();
  if (rn == 0) return out;
  std::vector<double> sub(rn * rm);
  for (std::size_t r = 0; r < rn; ++r) {
    for (std::size_t c = 0; c < rm; ++c) sub[r * rm + c] = a[(k + r) * m + free_cols[c]];
  }
  const Solved s = solve_rect(sub, rn, rm);
  for (std::size_t r = 0; r < rn; ++r) out.push_back(free_cols[s.col_of_row[r]]);
  return out;
}

}  // namespace

void MatchWeights::validate() const {
  if (cls < 0 || l1 < 0 || giou < 0) throw ConfigError("match weights must be nonnegative");
  if (cls == 0 && l1 == 0 && giou == 0) throw ConfigError("at least one match weight must be positive");
}

double focal_loss(double p, int target, const FocalParams& fp) {
  p = clamp_p(p);
  if (target == 1) return -fp.alpha * std::pow(1.0 - p, fp.gamma) * std::log(p);
  return -(1.0 - fp.alpha) * std::pow(p, fp.gamma) * std::log(1.0 - p);
}

Tensor sigmoid_focal_loss(const Tensor& logits, const std::vector<int>& targets, const FocalParams& fp) {
  if (targets.size() != logits.numel()) throw ShapeError("sigmoid_focal_loss: one target per logit required");
  const std::size_t n = logits.numel();
  auto grads = std::make_shared<std::vector<double>>(n);
  double total = 0.0;
  const double a = fp.alpha, g = fp.gamma;
  for (std::size_t i = 0; i < n; ++i) {
    const double raw = stable_sigmoid(logits[i]);
    const bool clamped = raw < kFocalClamp || raw > 1.0 - kFocalClamp;
    if (branch_recording()) note_branch(kTagFocalClamp, clamped);
    const double p = clamp_p(raw);
    total += focal_loss(p, targets[i], fp);
    if (clamped) continue;
    double dldp;
    if (targets[i] == 1) {
      const double q = 1.0 - p;
      dldp = a * (g * std::pow(q, g - 1.0) * std::log(p) - std::pow(q, g) / p);
    } else {
      dldp = -(1.0 - a) * (g * std::pow(p, g - 1.0) * std::log(1.0 - p) - std::pow(p, g) / (1.0 - p));
    }
    (*grads)[i] = dldp * p * (1.0 - p);
  }
  return make_result("sigmoid_focal_loss", Shape{}, {total}, {logits},
                     [grads](std::span<const double> go, std::span<double* const> gi) {
                       if (!gi[0]) return;
                       for (std::size_t i = 0; i < grads->size(); ++i) gi[0][i] += go[0] * (*grads)[i];
                     });
}

Tensor l1_loss(const Tensor& pred, const std::vector<BoxXYXY>& targets) {
  check_boxes(pred, targets.size(), "l1_loss");
  const std::size_t n = pred.numel();
  auto signs = std::make_shared<std::vector<double>>(n);
  double total = 0.0;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    const double t[4] = {targets[k].x1, targets[k].y1, targets[k].x2, targets[k].y2};
    for (std::size_t c = 0; c < 4; ++c) {
      const double diff = pred[k * 4 + c] - t[c];
      if (branch_recording()) note_branch(kTagL1, diff >= 0.0);
      total += std::abs(diff);
      (*signs)[k * 4 + c] = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
    }
  }
  return make_result("l1_loss", Shape{}, {total}, {pred},
                     [signs](std::span<const double> go, std::span<double* const> gi) {
                       if (!gi[0]) return;
                       for (std::size_t i = 0; i < signs->size(); ++i) gi[0][i] += go[0] * (*signs)[i];
                     });
}

Tensor giou_loss(const Tensor& pred, const std::vector<BoxXYXY>& targets) {
  check_boxes(pred, targets.size(), "giou_loss");
  auto grads = std::make_shared<std::vector<double>>(pred.numel());
  double total = 0.0;
  for (std::size_t k = 0; k < targets.size(); ++k) total += giou_loss_grad(row_box(pred, k), targets[k], &(*grads)[k * 4]);
  return make_result("giou_loss", Shape{}, {total}, {pred},
                     [grads](std::span<const double> go, std::span<double* const> gi) {
                       if (!gi[0]) return;
                       for (std::size_t i = 0; i < grads->size(); ++i) gi[0][i] += go[0] * (*grads)[i];
                     });
}

std::vector<double> matching_cost(const std::vector<double>& probs, std::size_t num_classes,
                                  const std::vector<BoxXYXY>& pred_boxes, const GroundTruth& gt,
                                  const MatchWeights& w, const FocalParams& fp) {
  const std::size_t N = pred_boxes.size(), M = gt.boxes.size();
  if (probs.size() != N * num_classes) throw ShapeError("matching_cost: probs must be [N, C]");
  if (gt.classes.size() != M) throw ShapeError("matching_cost: one class per gt box required");
  std::vector<double> cost(N * M);
  for (std::size_t i = 0; i < N; ++i) {
    const BoxXYXY& b = pred_boxes[i];
    for (std::size_t j = 0; j < M; ++j) {
      const int c = gt.classes[j];
      if (c < 0 || static_cast<std::size_t>(c) >= num_classes) throw IndexError("matching_cost: gt class out of range");
      const BoxXYXY& g = gt.boxes[j];
      const double l1 = std::abs(b.x1 - g.x1) + std::abs(b.y1 - g.y1) + std::abs(b.x2 - g.x2) + std::abs(b.y2 - g.y2);
      cost[i * M + j] = w.cls * focal_loss(probs[i * num_classes + static_cast<std::size_t>(c)], 1, fp) +
                        w.l1 * l1 + w.giou * (1.0 - giou(b, g));
    }
  }
  return cost;
}

Assignment hungarian(const std::vector<double>& cost, std::size_t N, std::size_t M) {
  if (cost.size() != N * M) throw ShapeError("hungarian: cost must hold N*M entries");
  for (double c : cost) {
    if (!std::isfinite(c)) throw ContractError("hungarian: non-finite cost");
  }
  Assignment out;
  if (M == 0) {
    for (std::size_t i = 0; i < N; ++i) out.unmatched.push_back(i);
    return out;
  }
  // Transposed problem: rows are gts, columns proposals (padded to >= M).
  double max_abs = 0.0;
  for (double c : cost) max_abs = std::max(max_abs, std::abs(c));
  const std::size_t cols = std::max(N, M);
  const double sentinel = 1.0 + 2.0 * static_cast<double>(M) * (max_abs + 1.0);
  std::vector<double> a(M * cols, sentinel);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < M; ++j) a[j * cols + i] = cost[i * M + j];
  }
  const Solved s = solve_rect(a, M, cols);
  std::vector<std::size_t> sigma = s.col_of_row;
  const double best = assignment_cost(a, cols, sigma);
  const double tol = 1e-12 * std::max(1.0, std::abs(best));

  // Canonical tie-break: walk gts in order and move each to the smallest
  // proposal index that still admits an optimal completion. Complementary
  // slackness rules out any edge whose reduced cost is positive.
  std::vector<std::size_t> pinned;
  for (std::size_t j = 0; j < M; ++j) {
    for (std::size_t i = 0; i < sigma[j]; ++i) {
      if (std::find(pinned.begin(), pinned.end(), i) != pinned.end()) continue;
      if (a[j * cols + i] - s.u[j] - s.v[i] > tol) continue;
      std::vector<std::size_t> trial = pinned;
      trial.push_back(i);
      std::vector<std::size_t> cand = solve_pinned(a, M, cols, trial);
      if (assignment_cost(a, cols, cand) <= best + tol) {
        sigma = std::move(cand);
        break;
      }
    }
    pinned.push_back(sigma[j]);
  }

  std::vector<char> matched(N, 0);
  for (std::size_t j = 0; j < M; ++j) {
    if (sigma[j] >= N) continue;  // padded proposal
    out.pairs.emplace_back(sigma[j], j);
    out.total_cost += cost[sigma[j] * M + j];
    matched[sigma[j]] = 1;
  }
  for (std::size_t i = 0; i < N; ++i) {
    if (!matched[i]) out.unmatched.push_back(i);
  }
  return out;
}

SetLossTerms set_loss(const Tensor& logits, const Tensor& pred_boxes, const GroundTruth& gt,
                      const Assignment& assignment, const MatchWeights& w, const FocalParams& fp,
                      const std::optional<NoiseTarget>& noise) {
  if (logits.rank() != 2) throw ShapeError("set_loss: logits must be [N,C], got " + shape_str(logits.shape()));
  const std::size_t N = logits.dim(0), C = logits.dim(1), M = gt.boxes.size();
  check_boxes(pred_boxes, N, "set_loss");
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, M));

  std::vector<int> targets(N * C, 0);
  std::vector<std::size_t> rows;
  std::vector<BoxXYXY> matched_gt;
  for (const auto& [i, j] : assignment.pairs) {
    if (i >= N || j >= M) throw IndexError("set_loss: assignment index out of range");
    targets[i * C + static_cast<std::size_t>(gt.classes[j])] = 1;
    rows.push_back(i);
    matched_gt.push_back(gt.boxes[j]);
  }

  SetLossTerms r;
  Tensor total = scale(sigmoid_focal_loss(logits, targets, fp), w.cls * norm);
  r.cls = total.item();
  if (!rows.empty()) {
    const Tensor picked = index_select(pred_boxes, 0, rows);
    const Tensor l1 = scale(l1_loss(picked, matched_gt), w.l1 * norm);
    const Tensor gl = scale(giou_loss(picked, matched_gt), w.giou * norm);
    r.l1 = l1.item();
    r.giou = gl.item();
    total = add(total, add(l1, gl));
    if (noise && noise->weight > 0.0) {
      if (noise->eps_pred.shape() != Shape{N, 4} || noise->eps_true.size() != N * 4) {
        throw ShapeError("set_loss: noise target must be [N,4]");
      }
      std::vector<double> tv;
      for (auto i : rows) tv.insert(tv.end(), noise->eps_true.begin() + i * 4, noise->eps_true.begin() + i * 4 + 4);
      const Tensor diff = sub(index_select(noise->eps_pred, 0, rows), Tensor({rows.size(), 4}, std::move(tv)));
      const Tensor nl = scale(mean(square(diff)), noise->weight);
      r.noise = nl.item();
      total = add(total, nl);
    }
  }
  r.total = total;
  return r;
}

}  // namespace cdiffdet

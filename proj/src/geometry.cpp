#include "cdiffdet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cdiffdet/errors.hpp"

namespace cdiffdet {

BoxXYXY BoxXYXY::canonical() const {
  return {std::min(x1, x2), std::min(y1, y2), std::max(x1, x2), std::max(y1, y2)};
}

BoxXYXY to_xyxy(const BoxCxCyWH& b) {
  return {b.cx - 0.5 * b.w, b.cy - 0.5 * b.h, b.cx + 0.5 * b.w, b.cy + 0.5 * b.h};
}

BoxCxCyWH to_cxcywh(const BoxXYXY& b) {
  return {0.5 * (b.x1 + b.x2), 0.5 * (b.y1 + b.y2), b.x2 - b.x1, b.y2 - b.y1};
}

namespace {

double intersection(const BoxXYXY& a, const BoxXYXY& b) {
  const double w = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double h = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  return w * h;
}

}  // namespace

double iou(const BoxXYXY& a, const BoxXYXY& b) {
  const double inter = intersection(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double giou(const BoxXYXY& a, const BoxXYXY& b) {
  const double inter = intersection(a, b);
  const double uni = a.area() + b.area() - inter;
  const double io = uni > 0.0 ? inter / uni : 0.0;
  const double enclosing = (std::max(a.x2, b.x2) - std::min(a.x1, b.x1)) * (std::max(a.y2, b.y2) - std::min(a.y1, b.y1));
  if (enclosing <= 0.0) return io;
  return io - (enclosing - uni) / enclosing;
}

int assign_fpn_level(const BoxXYXY& box, double s_base, LevelRange range) {
  const double area = std::max(0.0, box.width()) * std::max(0.0, box.height());
  if (!(area > 0.0)) return range.min_level;
  const double raw = std::floor(std::log2(std::sqrt(area) / s_base)) + 4.0;
  return static_cast<int>(std::clamp(raw, static_cast<double>(range.min_level), static_cast<double>(range.max_level)));
}

std::vector<std::size_t> nms(std::span<const BoxXYXY> boxes, std::span<const double> scores, double iou_threshold) {
  if (boxes.size() != scores.size()) throw ShapeError("nms: boxes and scores differ in length");
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> keep;
  std::vector<bool> suppressed(boxes.size(), false);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t cur = order[i];
    if (suppressed[cur]) continue;
    keep.push_back(cur);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const std::size_t other = order[j];
      if (!suppressed[other] && iou(boxes[cur], boxes[other]) > iou_threshold) suppressed[other] = true;
    }
  }
  return keep;
}

}  // namespace cdiffdet

#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace cdiffdet {

struct BoxXYXY {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  // Swaps corners so that x2 >= x1 and y2 >= y1.
  BoxXYXY canonical() const;
  bool operator==(const BoxXYXY&) const = default;
};

struct BoxCxCyWH {
  double cx = 0, cy = 0, w = 0, h = 0;
  bool operator==(const BoxCxCyWH&) const = default;
};

BoxXYXY to_xyxy(const BoxCxCyWH& b);
BoxCxCyWH to_cxcywh(const BoxXYXY& b);

// Intersection over union; 0 when the union is empty.
double iou(const BoxXYXY& a, const BoxXYXY& b);
// IoU minus the fraction of the enclosing box not covered by the union.
double giou(const BoxXYXY& a, const BoxXYXY& b);

struct LevelRange {
  int min_level = 1;
  int max_level = 5;
};

// floor(log2(sqrt(area)/s_base)) + 4 clamped to range. Zero-area boxes map to
// range.min_level.
int assign_fpn_level(const BoxXYXY& box, double s_base = 224.0, LevelRange range = {});

// Greedy NMS. Returns kept indices in descending-score order; equal scores
// are visited in ascending index order. A box is suppressed when its IoU with
// an already kept box exceeds iou_threshold.
std::vector<std::size_t> nms(std::span<const BoxXYXY> boxes, std::span<const double> scores,
                             double iou_threshold = 0.5);

}  // namespace cdiffdet

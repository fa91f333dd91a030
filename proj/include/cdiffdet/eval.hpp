#pragma once

// COCO-style box AP: 101-point interpolated precision, IoU thresholds
// .50:.05:.95, area buckets split at 32^2 and 96^2, at most 100 detections
// per image and category.

#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdiffdet/geometry.hpp"

namespace cdiffdet {

struct EvalDetection {
  std::int64_t image_id = 0;
  int category = 0;
  BoxXYXY box;  // pixels
  double score = 0.0;
};

struct EvalGroundTruth {
  std::int64_t image_id = 0;
  int category = 0;
  BoxXYXY box;
};

struct AreaRange {
  double lo = 0.0;
  double hi = std::numeric_limits<double>::infinity();
  bool contains(double a) const { return a >= lo && a <= hi; }
};

inline const AreaRange kAreaAll{};
inline const AreaRange kAreaSmall{0.0, 32.0 * 32.0};
inline const AreaRange kAreaMedium{32.0 * 32.0, 96.0 * 96.0};
inline const AreaRange kAreaLarge{96.0 * 96.0, std::numeric_limits<double>::infinity()};

struct EvalReport {
  double ap = 0, ap50 = 0, ap75 = 0, ap_small = 0, ap_medium = 0, ap_large = 0;
  std::map<int, double> per_category;  // AP@[.5:.95] per category with ground truth
};

// AP of one category at one IoU threshold; category fields are ignored, so
// callers pass a single class. Returns -1 when no ground truth falls in the
// area range.
double average_precision(const std::vector<EvalDetection>& preds, const std::vector<EvalGroundTruth>& gts,
                         double iou_threshold, const AreaRange& area = kAreaAll, std::size_t max_dets = 100);

EvalReport coco_summary(const std::vector<EvalDetection>& preds, const std::vector<EvalGroundTruth>& gts);

nlohmann::json report_to_json(const EvalReport& r);
std::string report_to_csv(const EvalReport& r);

// Detections document: {"detections": [{"image_id", "category_id", "bbox": [x,y,w,h], "score"}]}.
nlohmann::json detections_to_json(const std::vector<EvalDetection>& dets);
std::vector<EvalDetection> detections_from_json(const nlohmann::json& j);

}  // namespace cdiffdet

#include "cdiffdet/eval.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <tuple>

#include "cdiffdet/errors.hpp"

namespace cdiffdet {

namespace {

bool det_before(const EvalDetection& a, const EvalDetection& b) {
  if (a.score != b.score) return a.score > b.score;
  return std::tie(a.image_id, a.box.x1, a.box.y1, a.box.x2, a.box.y2) <
         std::tie(b.image_id, b.box.x1, b.box.y1, b.box.x2, b.box.y2);
}

struct Outcome {
  double score;
  std::int64_t image_id;
  BoxXYXY box;
  bool tp;
};

}  // namespace

double average_precision(const std::vector<EvalDetection>& preds, const std::vector<EvalGroundTruth>& gts,
                         double iou_threshold, const AreaRange& area, std::size_t max_dets) {
  std::map<std::int64_t, std::vector<const EvalGroundTruth*>> gt_by_image;
  std::size_t positives = 0;
  for (const auto& g : gts) {
    gt_by_image[g.image_id].push_back(&g);
    if (area.contains(g.box.area())) ++positives;
  }
  if (positives == 0) return -1.0;

  std::map<std::int64_t, std::vector<EvalDetection>> det_by_image;
  for (const auto& d : preds) det_by_image[d.image_id].push_back(d);

  std::vector<Outcome> outcomes;
  for (auto& [img, dets] : det_by_image) {
    std::sort(dets.begin(), dets.end(), det_before);
    if (dets.size() > max_dets) dets.resize(max_dets);
    std::vector<const EvalGroundTruth*> g = gt_by_image[img];
    // In-range ground truth is preferred; out-of-range ground truth only
    // absorbs detections that match nothing else.
    std::stable_partition(g.begin(), g.end(), [&](const EvalGroundTruth* x) { return area.contains(x->box.area()); });
    std::vector<char> taken(g.size(), 0);
    for (const auto& d : dets) {
      double best = iou_threshold;
      std::ptrdiff_t match = -1;
      for (std::size_t k = 0; k < g.size(); ++k) {
        if (taken[k]) continue;
        const bool ignored = !area.contains(g[k]->box.area());
        if (match >= 0 && area.contains(g[static_cast<std::size_t>(match)]->box.area()) && ignored) break;
        const double v = iou(d.box, g[k]->box);
        if (v < best) continue;
        best = v;
        match = static_cast<std::ptrdiff_t>(k);
      }
      if (match >= 0) {
        taken[static_cast<std::size_t>(match)] = 1;
        if (!area.contains(g[static_cast<std::size_t>(match)]->box.area())) continue;  // ignored
        outcomes.push_back({d.score, img, d.box, true});
      } else if (area.contains(d.box.area())) {
        outcomes.push_back({d.score, img, d.box, false});
      }
    }
  }
  std::sort(outcomes.begin(), outcomes.end(), [](const Outcome& a, const Outcome& b) {
    if (a.score != b.score) return a.score > b.score;
    return std::tie(a.image_id, a.box.x1, a.box.y1, a.box.x2, a.box.y2) <
           std::tie(b.image_id, b.box.x1, b.box.y1, b.box.x2, b.box.y2);
  });

  const std::size_t n = outcomes.size();
  std::vector<double> recall(n), precision(n);
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (outcomes[i].tp ? tp : fp) += 1.0;
    recall[i] = tp / static_cast<double>(positives);
    precision[i] = tp / (tp + fp);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double level = static_cast<double>(r) / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), level);
    if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return sum / 101.0;
}

EvalReport coco_summary(const std::vector<EvalDetection>& preds, const std::vector<EvalGroundTruth>& gts) {
  std::set<int> cats;
  for (const auto& g : gts) cats.insert(g.category);
  std::map<int, std::vector<EvalDetection>> pc;
  std::map<int, std::vector<EvalGroundTruth>> gc;
  for (const auto& d : preds) pc[d.category].push_back(d);
  for (const auto& g : gts) gc[g.category].push_back(g);

  auto mean_over = [&](double thr, const AreaRange& area, std::map<int, double>* per_cat_accum) {
    double s = 0.0;
    std::size_t n = 0;
    for (int c : cats) {
      const double ap = average_precision(pc[c], gc[c], thr, area);
      if (ap < 0) continue;
      s += ap;
      ++n;
      if (per_cat_accum) (*per_cat_accum)[c] += ap / 10.0;
    }
    return n ? s / static_cast<double>(n) : 0.0;
  };

  EvalReport r;
  const AreaRange* buckets[3] = {&kAreaSmall, &kAreaMedium, &kAreaLarge};
  double* bucket_out[3] = {&r.ap_small, &r.ap_medium, &r.ap_large};
  for (int k = 0; k < 10; ++k) {
    const double thr = 0.5 + 0.05 * static_cast<double>(k);
    const double ap = mean_over(thr, kAreaAll, &r.per_category);
    r.ap += ap / 10.0;
    if (k == 0) r.ap50 = ap;
    if (k == 5) r.ap75 = ap;
    for (int b = 0; b < 3; ++b) *bucket_out[b] += mean_over(thr, *buckets[b], nullptr) / 10.0;
  }
  return r;
}

nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [c, ap] : r.per_category) per[std::to_string(c)] = ap;
  return {{"ap", r.ap},           {"ap50", r.ap50},       {"ap75", r.ap75},        {"ap_small", r.ap_small},
          {"ap_medium", r.ap_medium}, {"ap_large", r.ap_large}, {"per_category", per}};
}

std::string report_to_csv(const EvalReport& r) {
  std::ostringstream s;
  s.precision(17);
  s << "metric,value\n";
  s << "ap," << r.ap << "\nap50," << r.ap50 << "\nap75," << r.ap75 << "\nap_small," << r.ap_small << "\nap_medium,"
    << r.ap_medium << "\nap_large," << r.ap_large << "\n";
  for (const auto& [c, ap] : r.per_category) s << "ap_category_" << c << "," << ap << "\n";
  return s.str();
}

nlohmann::json detections_to_json(const std::vector<EvalDetection>& dets) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& d : dets) {
    arr.push_back({{"image_id", d.image_id},
                   {"category_id", d.category},
                   {"bbox", {d.box.x1, d.box.y1, d.box.width(), d.box.height()}},
                   {"score", d.score}});
  }
  return {{"detections", arr}};
}

std::vector<EvalDetection> detections_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("detections") || !j["detections"].is_array()) {
    throw ParseError("detections document needs a 'detections' array");
  }
  std::vector<EvalDetection> out;
  std::size_t k = 0;
  for (const auto& d : j["detections"]) {
    try {
      const auto& b = d.at("bbox");
      if (!b.is_array() || b.size() != 4) throw ParseError("bbox must have 4 numbers");
      EvalDetection e;
      e.image_id = d.at("image_id").get<std::int64_t>();
      e.category = d.at("category_id").get<int>();
      e.score = d.at("score").get<double>();
      const double x = b[0].get<double>(), y = b[1].get<double>(), w = b[2].get<double>(), h = b[3].get<double>();
      e.box = {x, y, x + w, y + h};
      out.push_back(e);
    } catch (const nlohmann::json::exception& ex) {
      throw ParseError("detection " + std::to_string(k) + ": " + ex.what());
    } catch (const ParseError& ex) {
      throw ParseError("detection " + std::to_string(k) + ": " + ex.what());
    }
    ++k;
  }
  return out;
}

}  // namespace cdiffdet

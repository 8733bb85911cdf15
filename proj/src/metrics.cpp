#include "eccdet/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <numeric>

#include "eccdet/error.hpp"

namespace eccdet {

std::vector<GroundTruth> ground_truth_of(const std::vector<ImageSample>& samples) {
  std::vector<GroundTruth> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({s.id, s.boxes});
  return out;
}

MatchResult match_detections(const std::vector<Detection>& detections,
                             const std::vector<BoundingBox>& gt, double iou_threshold) {
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detections[a].score > detections[b].score;
  });
  MatchResult result;
  result.true_positive.assign(detections.size(), false);
  std::vector<bool> taken(gt.size(), false);
  for (std::size_t d : order) {
    double best = 0.0;
    std::size_t best_gt = gt.size();
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (taken[g]) continue;
      const double v = iou(detections[d].box, gt[g]);
      if (v > best) {
        best = v;
        best_gt = g;
      }
    }
    if (best_gt < gt.size() && best >= iou_threshold) {
      taken[best_gt] = true;
      result.true_positive[d] = true;
    }
  }
  result.false_negatives =
      static_cast<int>(std::count(taken.begin(), taken.end(), false));
  return result;
}

namespace {

void sort_ranked(std::vector<RankedDetection>& ranked) {
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const RankedDetection& a, const RankedDetection& b) {
                     if (a.score != b.score) return a.score > b.score;
                     if (a.image_id != b.image_id) return a.image_id < b.image_id;
                     return a.index < b.index;
                   });
}

}  // namespace

std::vector<PrPoint> precision_recall_curve(std::vector<RankedDetection> ranked, int total_gt) {
  sort_ranked(ranked);
  std::vector<PrPoint> curve;
  curve.reserve(ranked.size());
  int tp = 0;
  int fp = 0;
  for (const auto& r : ranked) {
    (r.true_positive ? tp : fp) += 1;
    curve.push_back({total_gt > 0 ? static_cast<double>(tp) / total_gt : 0.0,
                     static_cast<double>(tp) / (tp + fp), r.score});
  }
  return curve;
}

double average_precision(std::vector<RankedDetection> ranked, int total_gt) {
  if (total_gt <= 0) {
    throw Error(ErrorCode::kUndefined, "average precision is undefined without ground truth");
  }
  const auto curve = precision_recall_curve(std::move(ranked), total_gt);
  // Sweep from the right so each point holds the max precision at recall >= its own.
  std::vector<double> envelope(curve.size());
  double running = 0.0;
  for (std::size_t i = curve.size(); i-- > 0;) {
    running = std::max(running, curve[i].precision);
    envelope[i] = running;
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < curve.size(); ++i) {
    ap += (curve[i].recall - prev_recall) * envelope[i];
    prev_recall = curve[i].recall;
  }
  return ap;
}

std::vector<RankedDetection> rank_detections(const std::vector<ImageDetections>& detections,
                                             const std::vector<GroundTruth>& gt,
                                             double iou_threshold, int* total_gt) {
  std::map<std::string, const ImageDetections*> by_id;
  for (const auto& d : detections) by_id[d.id] = &d;
  std::map<std::string, bool> known;
  int gt_count = 0;
  std::vector<RankedDetection> ranked;
  for (const auto& g : gt) {
    known[g.id] = true;
    gt_count += static_cast<int>(g.boxes.size());
    const auto it = by_id.find(g.id);
    if (it == by_id.end()) continue;
    const auto& dets = it->second->detections;
    const MatchResult m = match_detections(dets, g.boxes, iou_threshold);
    for (std::size_t i = 0; i < dets.size(); ++i) {
      ranked.push_back({dets[i].score, g.id, i, m.true_positive[i]});
    }
  }
  for (const auto& d : detections) {
    if (!known.count(d.id)) {
      throw Error(ErrorCode::kMissingId, "predictions reference unknown image id " + d.id);
    }
  }
  if (total_gt) *total_gt = gt_count;
  return ranked;
}

double average_precision(const std::vector<ImageDetections>& detections,
                         const std::vector<GroundTruth>& gt, double iou_threshold) {
  int total = 0;
  auto ranked = rank_detections(detections, gt, iou_threshold, &total);
  return average_precision(std::move(ranked), total);
}

EvalResult evaluate(const std::vector<ImageDetections>& detections,
                    const std::vector<GroundTruth>& gt, double iou_threshold,
                    double score_threshold) {
  EvalResult r;
  r.iou_threshold = iou_threshold;
  r.ap = average_precision(detections, gt, iou_threshold);

  std::vector<ImageDetections> kept;
  kept.reserve(detections.size());
  for (const auto& d : detections) {
    ImageDetections k{d.id, {}};
    for (const auto& det : d.detections) {
      if (det.score >= score_threshold) k.detections.push_back(det);
    }
    kept.push_back(std::move(k));
  }
  std::map<std::string, const ImageDetections*> by_id;
  for (const auto& d : kept) by_id[d.id] = &d;
  for (const auto& g : gt) {
    const auto it = by_id.find(g.id);
    const std::vector<Detection> none;
    const auto& dets = it == by_id.end() ? none : it->second->detections;
    const MatchResult m = match_detections(dets, g.boxes, iou_threshold);
    const int tp = static_cast<int>(std::count(m.true_positive.begin(), m.true_positive.end(), true));
    r.tp += tp;
    r.fp += static_cast<int>(dets.size()) - tp;
    r.fn += m.false_negatives;
  }
  r.precision = r.tp + r.fp > 0 ? static_cast<double>(r.tp) / (r.tp + r.fp) : 0.0;
  r.recall = r.tp + r.fn > 0 ? static_cast<double>(r.tp) / (r.tp + r.fn) : 0.0;
  r.f1 = r.precision + r.recall > 0.0
             ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
             : 0.0;
  return r;
}

nlohmann::json EvalResult::to_json() const {
  return {{"tp", tp},         {"fp", fp}, {"fn", fn}, {"precision", precision},
          {"recall", recall}, {"f1", f1}, {"ap", ap}, {"iou_threshold", iou_threshold}};
}

std::string format_eval_table(const EvalResult& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "IoU %.2f | TP %d FP %d FN %d | P %.3f R %.3f F1 %.3f AP %.3f\n",
                r.iou_threshold, r.tp, r.fp, r.fn, r.precision, r.recall, r.f1, r.ap);
  return buf;
}

}  // namespace eccdet

#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "eccdet/data.hpp"
#include "eccdet/decode.hpp"

namespace eccdet {

struct GroundTruth {
  std::string id;
  std::vector<BoundingBox> boxes;
};

std::vector<GroundTruth> ground_truth_of(const std::vector<ImageSample>& samples);

struct MatchResult {
  std::vector<bool> true_positive;  // per detection, in input order
  int false_negatives = 0;
};

// Greedy matching in descending score order: each detection takes the
// unmatched ground-truth box with the highest IoU and is a true positive when
// that IoU reaches the threshold.
MatchResult match_detections(const std::vector<Detection>& detections,
                             const std::vector<BoundingBox>& gt, double iou_threshold);

struct RankedDetection {
  double score = 0.0;
  std::string image_id;
  std::size_t index = 0;
  bool true_positive = false;
};

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
  double score = 0.0;
};

// Cumulative precision/recall after each detection, ordered by (score desc,
// image id, detection index).
std::vector<PrPoint> precision_recall_curve(std::vector<RankedDetection> ranked, int total_gt);

// All-point interpolated AP; throws kUndefined when total_gt == 0.
double average_precision(std::vector<RankedDetection> ranked, int total_gt);

std::vector<RankedDetection> rank_detections(const std::vector<ImageDetections>& detections,
                                             const std::vector<GroundTruth>& gt,
                                             double iou_threshold, int* total_gt = nullptr);

double average_precision(const std::vector<ImageDetections>& detections,
                         const std::vector<GroundTruth>& gt, double iou_threshold = 0.5);

struct EvalResult {
  int tp = 0;
  int fp = 0;
  int fn = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double ap = 0.0;
  double iou_threshold = 0.5;

  nlohmann::json to_json() const;
  bool operator==(const EvalResult&) const = default;
};

// P/R/F1 count detections with score >= score_threshold; AP uses every
// detection. Images missing from `detections` count as having none.
EvalResult evaluate(const std::vector<ImageDetections>& detections,
                    const std::vector<GroundTruth>& gt, double iou_threshold = 0.5,
                    double score_threshold = 0.0);

std::string format_eval_table(const EvalResult& r);

}  // namespace eccdet

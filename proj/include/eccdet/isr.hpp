#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "eccdet/data.hpp"
#include "eccdet/decode.hpp"
#include "eccdet/model.hpp"

namespace eccdet {

// Mean matched IoU over the ground-truth boxes after greedy score-ordered
// matching (unmatched boxes contribute 0). Without ground truth the score is
// 1 when there are no detections and 0 otherwise.
double image_iou_score(const std::vector<Detection>& detections,
                       const std::vector<BoundingBox>& gt);

// alpha = max(floor, 1 - s); floor defaults to 0.
double importance_weight(double s, double floor = 0.0);

struct WeightEntry {
  double s = 0.0;
  double alpha = 1.0;
  bool operator==(const WeightEntry&) const = default;
};

struct WeightTable {
  std::map<std::string, WeightEntry> entries;
  double floor = 0.0;

  // Throws kMissingId naming the id.
  const WeightEntry& at(const std::string& id) const;
  double mean_alpha() const;

  nlohmann::json to_json() const;
  static WeightTable from_json(const nlohmann::json& doc);
  void save(const std::filesystem::path& path) const;
  static WeightTable load(const std::filesystem::path& path);

  bool operator==(const WeightTable&) const = default;
};

// Inference IoU for every sample (resize and normalize only), then weights.
WeightTable mine_weights(const Detector& model, const CheckpointMeta& meta,
                         const std::vector<ImageSample>& samples, const DecodeConfig& decode,
                         double floor = 0.0);
// Loads the checkpoint, requiring its model config to equal expected.
WeightTable mine_weights(const std::filesystem::path& checkpoint, const ModelConfig& expected,
                         const std::vector<ImageSample>& samples, const DecodeConfig& decode,
                         double floor = 0.0);

// Spearman rank correlation with average ranks for ties; 0 when either
// variable is constant or there are fewer than two points.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

// Type-7 (linear interpolation) sample quantile, q in [0, 1].
double quantile(std::vector<double> values, double q);

struct IouLossPoint {
  std::string id;
  double iou = 0.0;
  double loss = 0.0;
};

struct IouLossScatter {
  std::vector<IouLossPoint> points;  // ordered by id
  double spearman = 0.0;
  double loss_q1 = 0.0;
  double loss_q3 = 0.0;
  // IoU > 0.7 with loss >= Q3, plus IoU < 0.3 with loss <= Q1.
  int abnormal = 0;
  double abnormal_fraction = 0.0;
};

inline constexpr double kHighIou = 0.7;
inline constexpr double kLowIou = 0.3;

// Pairs per-image IoU scores with per-image losses. Both must cover the same
// ids; otherwise throws kMissingId listing the ids absent from either side.
IouLossScatter iou_loss_scatter(const WeightTable& table,
                                const std::map<std::string, double>& losses);

// Abnormal count against fixed loss quartiles, e.g. stage-1 quartiles applied
// to a stage-2 scatter so both stages are judged by the same plot regions.
int count_abnormal(const IouLossScatter& scatter, double loss_q1, double loss_q3);

void save_scatter_csv(const std::filesystem::path& path, const IouLossScatter& scatter);

// Per-image loss file: CSV with header "id,loss".
void save_sample_losses(const std::filesystem::path& path,
                        const std::map<std::string, double>& losses);
std::map<std::string, double> load_sample_losses(const std::filesystem::path& path);

}  // namespace eccdet

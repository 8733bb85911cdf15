#pragma once

#include <vector>

#include "json.hpp"

#include "eccdet/data.hpp"
#include "eccdet/model.hpp"

namespace eccdet {

struct Detection {
  BoundingBox box;  // input-image pixel frame, x = column
  double score = 0.0;
};

struct DecodeConfig {
  int top_k = 10;
  double score_threshold = 0.3;
};

// Elementwise mean of the main and all intermediate heatmaps.
Tensor ensemble_heatmap(const HeadOutputs& outputs);

// Peaks of the ensembled heatmap (3x3 local maxima, ties resolved toward the
// lexicographically first cell), top_k by score, thresholded, boxes clipped to
// the image. Scores are sorted descending.
std::vector<Detection> decode_boxes(const HeadOutputs& outputs, const DecodeConfig& cfg,
                                    int image_height, int image_width);

// Resizes the sample to meta.input_size, normalizes it, runs the model and
// maps the decoded boxes back to the sample's own pixel frame.
std::vector<Detection> detect(const Detector& model, const CheckpointMeta& meta,
                              const ImageSample& sample, const DecodeConfig& cfg);

Normalization normalization_of(const CheckpointMeta& meta);

struct ImageDetections {
  std::string id;
  std::vector<Detection> detections;
};

// Runs detect over every sample in parallel; output order follows samples.
std::vector<ImageDetections> detect_all(const Detector& model, const CheckpointMeta& meta,
                                        const std::vector<ImageSample>& samples,
                                        const DecodeConfig& cfg);

nlohmann::json detections_to_json(const ImageDetections& image);
ImageDetections detections_from_json(const nlohmann::json& doc);
// A prediction file is a JSON array of per-image documents.
void save_predictions(const std::filesystem::path& path, const std::vector<ImageDetections>& preds);
std::vector<ImageDetections> load_predictions(const std::filesystem::path& path);

}  // namespace eccdet

#include "eccdet/decode.hpp"

#include <algorithm>
#include <fstream>

#include "eccdet/error.hpp"
#include "eccdet/parallel.hpp"
#include "eccdet/targets.hpp"

namespace eccdet {

Tensor ensemble_heatmap(const HeadOutputs& outputs) {
  Tensor mean = outputs.main_heatmap;
  for (const auto& hm : outputs.intermediate_heatmaps) mean += hm;
  mean *= 1.0 / static_cast<double>(outputs.heatmap_count());
  return mean;
}

std::vector<Detection> decode_boxes(const HeadOutputs& outputs, const DecodeConfig& cfg,
                                    int image_height, int image_width) {
  const Tensor heat = ensemble_heatmap(outputs);
  const int rows = heat.height();
  const int cols = heat.width();

  struct Peak {
    double score;
    int row, col;
  };
  std::vector<Peak> peaks;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const double v = heat(0, r, c);
      bool is_peak = true;
      for (int dr = -1; dr <= 1 && is_peak; ++dr) {
        for (int dc = -1; dc <= 1; ++dc) {
          const int nr = r + dr;
          const int nc = c + dc;
          if ((dr == 0 && dc == 0) || nr < 0 || nr >= rows || nc < 0 || nc >= cols) continue;
          const double n = heat(0, nr, nc);
          // Equal neighbors earlier in row-major order win the tie.
          const bool earlier = nr < r || (nr == r && nc < c);
          if (n > v || (n == v && earlier)) {
            is_peak = false;
            break;
          }
        }
      }
      if (is_peak) peaks.push_back({v, r, c});
    }
  }
  std::stable_sort(peaks.begin(), peaks.end(),
                   [](const Peak& a, const Peak& b) { return a.score > b.score; });
  if (peaks.size() > static_cast<std::size_t>(std::max(0, cfg.top_k))) {
    peaks.resize(static_cast<std::size_t>(std::max(0, cfg.top_k)));
  }

  std::vector<Detection> out;
  for (const Peak& p : peaks) {
    if (p.score < cfg.score_threshold) continue;
    const double cx = kOutputStride * (p.col + outputs.offset_pred(0, p.row, p.col));
    const double cy = kOutputStride * (p.row + outputs.offset_pred(1, p.row, p.col));
    const double w = kOutputStride * outputs.size_pred(0, p.row, p.col);
    const double h = kOutputStride * outputs.size_pred(1, p.row, p.col);
    const BoundingBox box =
        BoundingBox{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h}.clipped(image_width,
                                                                                  image_height);
    if (!box.valid()) continue;
    out.push_back({box, p.score});
  }
  return out;
}

Normalization normalization_of(const CheckpointMeta& meta) {
  Normalization norm;
  for (int c = 0; c < 3; ++c) {
    norm.mean[c] = meta.norm_mean[c];
    norm.stddev[c] = meta.norm_std[c];
  }
  return norm;
}

std::vector<Detection> detect(const Detector& model, const CheckpointMeta& meta,
                              const ImageSample& sample, const DecodeConfig& cfg) {
  const int size = meta.input_size;
  const ImageSample resized = resize_sample(sample, size);
  const HeadOutputs out = model.forward(to_network_input(resized.pixels, normalization_of(meta)));
  std::vector<Detection> dets = decode_boxes(out, cfg, size, size);
  const double sx = static_cast<double>(sample.width()) / size;
  const double sy = static_cast<double>(sample.height()) / size;
  for (auto& d : dets) {
    d.box = {d.box.x_lt * sx, d.box.y_lt * sy, d.box.x_rb * sx, d.box.y_rb * sy};
  }
  return dets;
}

std::vector<ImageDetections> detect_all(const Detector& model, const CheckpointMeta& meta,
                                        const std::vector<ImageSample>& samples,
                                        const DecodeConfig& cfg) {
  std::vector<ImageDetections> out(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    out[i] = {samples[i].id, detect(model, meta, samples[i], cfg)};
  });
  return out;
}

nlohmann::json detections_to_json(const ImageDetections& image) {
  nlohmann::json dets = nlohmann::json::array();
  for (const auto& d : image.detections) {
    dets.push_back({{"box", {d.box.x_lt, d.box.y_lt, d.box.x_rb, d.box.y_rb}}, {"score", d.score}});
  }
  return {{"id", image.id}, {"detections", dets}};
}

ImageDetections detections_from_json(const nlohmann::json& doc) {
  ImageDetections out;
  try {
    out.id = doc.at("id").get<std::string>();
    for (const auto& d : doc.at("detections")) {
      const auto& b = d.at("box");
      if (!b.is_array() || b.size() != 4) throw Error(ErrorCode::kParse, "box must have 4 numbers");
      out.detections.push_back({{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                                 b[3].get<double>()},
                                d.at("score").get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("prediction document: ") + e.what());
  }
  return out;
}

void save_predictions(const std::filesystem::path& path, const std::vector<ImageDetections>& preds) {
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& p : preds) doc.push_back(detections_to_json(p));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << doc.dump(1) << '\n';
}

std::vector<ImageDetections> load_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open predictions " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, path.string() + ": " + e.what());
  }
  if (!doc.is_array()) throw Error(ErrorCode::kParse, path.string() + ": expected a JSON array");
  std::vector<ImageDetections> out;
  for (const auto& d : doc) out.push_back(detections_from_json(d));
  return out;
}

}  // namespace eccdet

#include "eccdet/isr.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "eccdet/error.hpp"

namespace eccdet {

double image_iou_score(const std::vector<Detection>& detections,
                       const std::vector<BoundingBox>& gt) {
  if (gt.empty()) return detections.empty() ? 1.0 : 0.0;
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detections[a].score > detections[b].score;
  });
  std::vector<double> matched(gt.size(), 0.0);
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
    if (best_gt < gt.size()) {
      taken[best_gt] = true;
      matched[best_gt] = best;
    }
  }
  return std::accumulate(matched.begin(), matched.end(), 0.0) / static_cast<double>(gt.size());
}

double importance_weight(double s, double floor) {
  return std::clamp(std::max(floor, 1.0 - s), 0.0, 1.0);
}

const WeightEntry& WeightTable::at(const std::string& id) const {
  const auto it = entries.find(id);
  if (it == entries.end()) throw Error(ErrorCode::kMissingId, "no weight entry for image " + id);
  return it->second;
}

double WeightTable::mean_alpha() const {
  if (entries.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& [id, e] : entries) sum += e.alpha;
  return sum / static_cast<double>(entries.size());
}

nlohmann::json WeightTable::to_json() const {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& [id, e] : entries) records.push_back({{"id", id}, {"s", e.s}, {"alpha", e.alpha}});
  return {{"floor", floor}, {"records", records}};
}

WeightTable WeightTable::from_json(const nlohmann::json& doc) {
  WeightTable table;
  try {
    table.floor = doc.value("floor", 0.0);
    const auto& records = doc.at("records");
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      const double s = r.at("s").get<double>();
      const double alpha = r.at("alpha").get<double>();
      if (!(s >= 0.0 && s <= 1.0) || !(alpha >= 0.0 && alpha <= 1.0)) {
        throw Error(ErrorCode::kParse,
                    "weight table records[" + std::to_string(i) + "]: s and alpha must lie in [0, 1]");
      }
      table.entries[r.at("id").get<std::string>()] = {s, alpha};
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("weight table: ") + e.what());
  }
  return table;
}

void WeightTable::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << to_json().dump(1) << '\n';
}

WeightTable WeightTable::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open weight table " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, path.string() + ": " + e.what());
  }
  return from_json(doc);
}

WeightTable mine_weights(const Detector& model, const CheckpointMeta& meta,
                         const std::vector<ImageSample>& samples, const DecodeConfig& decode,
                         double floor) {
  if (samples.empty()) throw Error(ErrorCode::kConfig, "cannot mine weights on an empty set");
  const auto preds = detect_all(model, meta, samples, decode);
  WeightTable table;
  table.floor = floor;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double s = image_iou_score(preds[i].detections, samples[i].boxes);
    table.entries[samples[i].id] = {s, importance_weight(s, floor)};
  }
  return table;
}

WeightTable mine_weights(const std::filesystem::path& checkpoint, const ModelConfig& expected,
                         const std::vector<ImageSample>& samples, const DecodeConfig& decode,
                         double floor) {
  CheckpointMeta meta;
  const Detector model = load_detector(checkpoint, expected, &meta);
  return mine_weights(model, meta, samples, decode, floor);
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw Error(ErrorCode::kShape, "spearman: length mismatch");
  const std::size_t n = a.size();
  if (n < 2) return 0.0;
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double mean = 0.5 * static_cast<double>(n + 1);
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    cov += (ra[i] - mean) * (rb[i] - mean);
    va += (ra[i] - mean) * (ra[i] - mean);
    vb += (rb[i] - mean) * (rb[i] - mean);
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw Error(ErrorCode::kUndefined, "quantile of an empty set");
  if (!(q >= 0.0 && q <= 1.0)) throw Error(ErrorCode::kConfig, "quantile level must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

IouLossScatter iou_loss_scatter(const WeightTable& table,
                                const std::map<std::string, double>& losses) {
  std::vector<std::string> missing;
  for (const auto& [id, e] : table.entries) {
    if (!losses.count(id)) missing.push_back(id + " (no loss)");
  }
  for (const auto& [id, l] : losses) {
    if (!table.entries.count(id)) missing.push_back(id + " (no weight)");
  }
  if (!missing.empty()) {
    std::string msg = "iou/loss id mismatch:";
    for (const auto& m : missing) msg += " " + m;
    throw Error(ErrorCode::kMissingId, msg);
  }

  IouLossScatter out;
  if (table.entries.empty()) return out;
  std::vector<double> ious, ls;
  for (const auto& [id, e] : table.entries) {
    out.points.push_back({id, e.s, losses.at(id)});
    ious.push_back(e.s);
    ls.push_back(losses.at(id));
  }
  out.spearman = spearman(ious, ls);
  out.loss_q1 = quantile(ls, 0.25);
  out.loss_q3 = quantile(ls, 0.75);
  out.abnormal = count_abnormal(out, out.loss_q1, out.loss_q3);
  out.abnormal_fraction = static_cast<double>(out.abnormal) / static_cast<double>(out.points.size());
  return out;
}

int count_abnormal(const IouLossScatter& scatter, double loss_q1, double loss_q3) {
  int n = 0;
  for (const auto& p : scatter.points) {
    if ((p.iou > kHighIou && p.loss >= loss_q3) || (p.iou < kLowIou && p.loss <= loss_q1)) ++n;
  }
  return n;
}

void save_scatter_csv(const std::filesystem::path& path, const IouLossScatter& scatter) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.precision(17);
  out << "id,iou,loss\n";
  for (const auto& p : scatter.points) out << p.id << ',' << p.iou << ',' << p.loss << '\n';
}

void save_sample_losses(const std::filesystem::path& path,
                        const std::map<std::string, double>& losses) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.precision(17);
  out << "id,loss\n";
  for (const auto& [id, l] : losses) out << id << ',' << l << '\n';
}

std::map<std::string, double> load_sample_losses(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::map<std::string, double> out;
  std::string line;
  std::getline(in, line);
  if (line != "id,loss") throw Error(ErrorCode::kParse, path.string() + ": expected header id,loss");
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) {
      throw Error(ErrorCode::kParse, path.string() + ": line " + std::to_string(row) + " has no comma");
    }
    try {
      out[line.substr(0, comma)] = std::stod(line.substr(comma + 1));
    } catch (const std::exception&) {
      throw Error(ErrorCode::kParse, path.string() + ": line " + std::to_string(row) + " bad loss value");
    }
  }
  return out;
}

}  // namespace eccdet

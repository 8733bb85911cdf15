#include "eccdet/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "eccdet/bcl.hpp"
#include "eccdet/error.hpp"
#include "eccdet/parallel.hpp"
#include "eccdet/targets.hpp"

namespace eccdet {

// ---------------------------------------------------------------------------
// Configuration

TrainConfig TrainConfig::desk() {
  TrainConfig cfg;
  cfg.preset = "desk";
  cfg.model.fpn_channels = 32;
  cfg.model.head_channels = 32;
  return cfg;
}

TrainConfig TrainConfig::paper() {
  TrainConfig cfg;
  cfg.preset = "paper";
  cfg.epochs = 20;
  cfg.batch_size = 16;
  cfg.lr = 1e-4;
  cfg.model.fpn_channels = 64;
  cfg.model.head_channels = 0;
  return cfg;
}

TrainConfig TrainConfig::preset_named(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "paper") return paper();
  throw Error(ErrorCode::kConfig, "unknown preset '" + name + "' (expected desk or paper)");
}

CheckpointMeta TrainConfig::checkpoint_meta() const {
  CheckpointMeta meta;
  meta.input_size = input_size;
  for (int c = 0; c < 3; ++c) {
    meta.norm_mean[c] = normalization.mean[c];
    meta.norm_std[c] = normalization.stddev[c];
  }
  return meta;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw Error(ErrorCode::kConfig, "epochs must be >= 1");
  if (stage2_epochs < 0) throw Error(ErrorCode::kConfig, "stage2_epochs must be >= 0");
  if (batch_size < 2) throw Error(ErrorCode::kConfig, "batch_size must be >= 2");
  if (!(lr > 0.0)) throw Error(ErrorCode::kConfig, "lr must be positive");
  if (lr_floor < 0.0 || lr_floor > lr) throw Error(ErrorCode::kConfig, "lr_floor must lie in [0, lr]");
  if (stage2_lr < 0.0) throw Error(ErrorCode::kConfig, "stage2_lr must be >= 0");
  if (!(grad_clip > 0.0)) throw Error(ErrorCode::kConfig, "grad_clip must be positive");
  if (input_size < 32 || input_size % 32 != 0) {
    throw Error(ErrorCode::kConfig, "input_size must be a positive multiple of 32");
  }
  if (isr_floor < 0.0 || isr_floor > 1.0) throw Error(ErrorCode::kConfig, "isr_floor must lie in [0, 1]");
  if (!(temperature > 0.0)) throw Error(ErrorCode::kConfig, "temperature must be positive");
  if (decode.top_k < 1) throw Error(ErrorCode::kConfig, "top_k must be >= 1");
  if (decode.score_threshold < 0.0 || decode.score_threshold > 1.0) {
    throw Error(ErrorCode::kConfig, "score_threshold must lie in [0, 1]");
  }
  if (augment.min_crop_scale <= 0.0 || augment.min_crop_scale > 1.0) {
    throw Error(ErrorCode::kConfig, "min_crop_scale must lie in (0, 1]");
  }
  for (int c = 0; c < 3; ++c) {
    if (!(normalization.stddev[c] > 0.0)) throw Error(ErrorCode::kConfig, "norm_std must be positive");
  }
  loss.validate();
  model.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"preset", preset},
          {"epochs", epochs},
          {"stage2_epochs", stage2_epochs},
          {"batch_size", batch_size},
          {"lr", lr},
          {"lr_floor", lr_floor},
          {"stage2_lr", stage2_lr},
          {"grad_clip", grad_clip},
          {"seed", seed},
          {"input_size", input_size},
          {"isr_floor", isr_floor},
          {"temperature", temperature},
          {"loss",
           {{"inter", loss.inter},
            {"offset", loss.offset},
            {"size", loss.size},
            {"contrastive", loss.contrastive},
            {"focal_alpha", loss.focal_alpha},
            {"focal_beta", loss.focal_beta}}},
          {"adam", {{"beta1", adam.beta1}, {"beta2", adam.beta2}, {"epsilon", adam.epsilon}}},
          {"model", model.to_json()},
          {"augment",
           {{"min_crop_scale", augment.min_crop_scale},
            {"flip", augment.flip},
            {"rotate", augment.rotate},
            {"min_visible_fraction", augment.min_visible_fraction},
            {"max_crop_attempts", augment.max_crop_attempts}}},
          {"decode", {{"top_k", decode.top_k}, {"score_threshold", decode.score_threshold}}},
          {"norm_mean", std::vector<double>(normalization.mean, normalization.mean + 3)},
          {"norm_std", std::vector<double>(normalization.stddev, normalization.stddev + 3)}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, const TrainConfig& base) {
  TrainConfig cfg = base;
  try {
    cfg.preset = j.value("preset", cfg.preset);
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.stage2_epochs = j.value("stage2_epochs", cfg.stage2_epochs);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.lr = j.value("lr", cfg.lr);
    cfg.lr_floor = j.value("lr_floor", cfg.lr_floor);
    cfg.stage2_lr = j.value("stage2_lr", cfg.stage2_lr);
    cfg.grad_clip = j.value("grad_clip", cfg.grad_clip);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.input_size = j.value("input_size", cfg.input_size);
    cfg.isr_floor = j.value("isr_floor", cfg.isr_floor);
    cfg.temperature = j.value("temperature", cfg.temperature);
    if (j.contains("loss")) {
      const auto& l = j.at("loss");
      cfg.loss.inter = l.value("inter", cfg.loss.inter);
      cfg.loss.offset = l.value("offset", cfg.loss.offset);
      cfg.loss.size = l.value("size", cfg.loss.size);
      cfg.loss.contrastive = l.value("contrastive", cfg.loss.contrastive);
      cfg.loss.focal_alpha = l.value("focal_alpha", cfg.loss.focal_alpha);
      cfg.loss.focal_beta = l.value("focal_beta", cfg.loss.focal_beta);
    }
    if (j.contains("adam")) {
      const auto& a = j.at("adam");
      cfg.adam.beta1 = a.value("beta1", cfg.adam.beta1);
      cfg.adam.beta2 = a.value("beta2", cfg.adam.beta2);
      cfg.adam.epsilon = a.value("epsilon", cfg.adam.epsilon);
    }
    if (j.contains("model")) {
      nlohmann::json merged = cfg.model.to_json();
      merged.update(j.at("model"));
      cfg.model = ModelConfig::from_json(merged);
    }
    if (j.contains("augment")) {
      const auto& a = j.at("augment");
      cfg.augment.min_crop_scale = a.value("min_crop_scale", cfg.augment.min_crop_scale);
      cfg.augment.flip = a.value("flip", cfg.augment.flip);
      cfg.augment.rotate = a.value("rotate", cfg.augment.rotate);
      cfg.augment.min_visible_fraction =
          a.value("min_visible_fraction", cfg.augment.min_visible_fraction);
      cfg.augment.max_crop_attempts = a.value("max_crop_attempts", cfg.augment.max_crop_attempts);
    }
    if (j.contains("decode")) {
      const auto& d = j.at("decode");
      cfg.decode.top_k = d.value("top_k", cfg.decode.top_k);
      cfg.decode.score_threshold = d.value("score_threshold", cfg.decode.score_threshold);
    }
    for (const char* key : {"norm_mean", "norm_std"}) {
      if (!j.contains(key)) continue;
      const auto v = j.at(key).get<std::vector<double>>();
      if (v.size() != 3) throw Error(ErrorCode::kConfig, std::string(key) + " must have 3 values");
      double* dst = std::string(key) == "norm_mean" ? cfg.normalization.mean : cfg.normalization.stddev;
      std::copy(v.begin(), v.end(), dst);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("train config: ") + e.what());
  }
  cfg.augment.output_size = cfg.input_size;
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Optimization

double cosine_lr(double lr0, double floor, long step, long total) {
  if (total <= 1) return lr0;
  const double t = static_cast<double>(std::clamp(step, 0L, total - 1)) / static_cast<double>(total - 1);
  return floor + 0.5 * (lr0 - floor) * (1.0 + std::cos(std::numbers::pi * t));
}

Adam::Adam(const ParameterStore& params, const AdamConfig& cfg) : cfg_(cfg) {
  for (const auto& p : params.all()) {
    m_.emplace_back(p.value.size(), 0.0);
    v_.emplace_back(p.value.size(), 0.0);
  }
}

void Adam::step(ParameterStore& params, const Gradients& grads, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& value = params[i].value;
    const auto g = grads[i];
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < value.size(); ++k) {
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
      value[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.epsilon);
    }
  }
}

double clip_grad_norm(Gradients& grads, double max_norm) {
  const double norm = grads.norm();
  if (norm > max_norm) grads.scale(max_norm / norm);
  return norm;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

constexpr std::uint64_t kPairingStream = 0x5bd1e995ULL;

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

struct StageSpec {
  int stage = 1;
  int epochs = 1;
  double lr0 = 0.0;
  LossMode mode = LossMode::kJoint;
  const WeightTable* weights = nullptr;
};

void add_scaled(LossReport& acc, const LossReport& r, double f) {
  acc.l_hm_main += f * r.l_hm_main;
  acc.l_hm_inter += f * r.l_hm_inter;
  acc.l_o += f * r.l_o;
  acc.l_s += f * r.l_s;
  acc.l_cl += f * r.l_cl;
  acc.total += f * r.total;
}

std::vector<TrainLogRow> run_stage(Detector& model, const TrainConfig& cfg,
                                   const std::vector<ImageSample>& train, const StageSpec& spec,
                                   const TrainHooks& hooks) {
  cfg.validate();
  if (train.empty()) throw Error(ErrorCode::kConfig, "training set is empty");
  if (spec.weights) {
    for (const auto& s : train) spec.weights->at(s.id);
  }
  AugmentConfig aug = cfg.augment;
  aug.output_size = cfg.input_size;
  const Normalization norm = cfg.normalization;
  const bool use_bcl = spec.mode == LossMode::kJoint && cfg.loss.contrastive > 0.0;

  const std::size_t n = train.size();
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const long steps_per_epoch = static_cast<long>((n + bs - 1) / bs);
  const long total_steps = steps_per_epoch * spec.epochs;

  Adam adam(model.parameters(), cfg.adam);
  Gradients total_grad(model.parameters());
  std::vector<Gradients> slot_grads(bs, Gradients(model.parameters()));
  std::vector<Detector::Trace> traces(bs);
  std::vector<HeadGradients> head_grads(bs);
  std::vector<LossReport> reports(bs);
  std::vector<ImageSample> batch(bs);

  std::vector<TrainLogRow> log;
  long step = 0;
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    const std::uint64_t epoch_seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch));
    const auto order = epoch_order(n, epoch_seed);
    for (std::size_t start = 0; start < n; start += bs, ++step) {
      const std::size_t count = std::min(bs, n - start);
      const double grad_scale = 1.0 / static_cast<double>(count);

      parallel_for(count, [&](std::size_t k) {
        const std::size_t index = order[start + k];
        batch[k] = augment(train[index], mix_seed(epoch_seed, index), aug);
        const double alpha = spec.weights ? spec.weights->at(train[index].id).alpha : 1.0;
        const HeadOutputs out = model.forward(to_network_input(batch[k].pixels, norm), &traces[k]);
        const TargetMaps targets = encode_targets(batch[k].boxes, cfg.input_size, cfg.input_size);
        head_grads[k] = HeadGradients::zeros_like(out);
        reports[k] = total_loss_with_grad(out, targets, 0.0, cfg.loss, spec.mode, alpha,
                                          grad_scale, head_grads[k]);
      });

      LossReport batch_report;
      for (std::size_t k = 0; k < count; ++k) add_scaled(batch_report, reports[k], grad_scale);

      std::vector<Tensor> fused_grads;
      if (use_bcl) {
        std::vector<const Tensor*> features;
        std::vector<std::vector<BoundingBox>> boxes;
        for (std::size_t k = 0; k < count; ++k) {
          features.push_back(&traces[k].fused);
          boxes.push_back(batch[k].boxes);
        }
        const ContrastiveBatch cb = build_contrastive_batch(features, boxes, cfg.input_size,
                                                            cfg.input_size, cfg.temperature);
        const ContrastiveLoss cl =
            contrastive_loss(cb, mix_seed(epoch_seed ^ kPairingStream, static_cast<std::uint64_t>(step)));
        batch_report.l_cl = cl.loss;
        batch_report.total += cfg.loss.contrastive * cl.loss;
        fused_grads = contrastive_backward(cb, cl, features);
        for (auto& g : fused_grads) g *= cfg.loss.contrastive;
      }

      if (!std::isfinite(batch_report.total)) {
        std::string ids;
        for (std::size_t k = 0; k < count; ++k) ids += (k ? "," : "") + train[order[start + k]].id;
        throw Error(ErrorCode::kNonFinite, "non-finite loss at stage " + std::to_string(spec.stage) +
                                               " epoch " + std::to_string(epoch) + " step " +
                                               std::to_string(step) + " batch [" + ids + "]");
      }

      parallel_for(count, [&](std::size_t k) {
        slot_grads[k].zero();
        model.backward(traces[k], head_grads[k], use_bcl ? &fused_grads[k] : nullptr,
                       slot_grads[k]);
      });
      total_grad.zero();
      for (std::size_t k = 0; k < count; ++k) total_grad.add(slot_grads[k]);

      TrainLogRow row;
      row.stage = spec.stage;
      row.epoch = epoch;
      row.step = step;
      row.lr = cosine_lr(spec.lr0, cfg.lr_floor, step, total_steps);
      row.loss = batch_report;
      row.grad_norm = clip_grad_norm(total_grad, cfg.grad_clip);
      if (!total_grad.all_finite()) {
        throw Error(ErrorCode::kNonFinite, "non-finite gradient at stage " +
                                               std::to_string(spec.stage) + " step " +
                                               std::to_string(step));
      }
      adam.step(model.parameters(), total_grad, row.lr);
      log.push_back(row);
    }
    if (hooks.on_epoch_end) hooks.on_epoch_end(epoch);
  }
  return log;
}

}  // namespace

std::vector<TrainLogRow> train_stage1(Detector& model, const TrainConfig& cfg,
                                      const std::vector<ImageSample>& train,
                                      const TrainHooks& hooks) {
  return run_stage(model, cfg, train, {1, cfg.epochs, cfg.lr, LossMode::kJoint, nullptr}, hooks);
}

std::vector<TrainLogRow> train_stage2(Detector& model, const TrainConfig& cfg,
                                      const std::vector<ImageSample>& train,
                                      const WeightTable& weights, const TrainHooks& hooks) {
  return run_stage(model, cfg, train,
                   {2, cfg.resolved_stage2_epochs(), cfg.resolved_stage2_lr(),
                    LossMode::kReweighted, &weights},
                   hooks);
}

void save_loss_log(const std::filesystem::path& path, const std::vector<TrainLogRow>& rows,
                   bool append) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.precision(10);
  if (!append) out << "stage,epoch,step,lr,total,l_hm_main,l_hm_inter,l_o,l_s,l_cl,grad_norm\n";
  for (const auto& r : rows) {
    out << r.stage << ',' << r.epoch << ',' << r.step << ',' << r.lr << ',' << r.loss.total << ','
        << r.loss.l_hm_main << ',' << r.loss.l_hm_inter << ',' << r.loss.l_o << ',' << r.loss.l_s
        << ',' << r.loss.l_cl << ',' << r.grad_norm << '\n';
  }
}

std::vector<double> smoothed(const std::vector<double>& values, std::size_t window) {
  std::vector<double> out(values.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    sum += values[i];
    if (i >= window) sum -= values[i - window];
    out[i] = sum / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

std::map<std::string, double> per_sample_losses(const Detector& model, const CheckpointMeta& meta,
                                                const std::vector<ImageSample>& samples,
                                                const LossWeights& weights) {
  std::vector<double> losses(samples.size());
  const Normalization norm = normalization_of(meta);
  parallel_for(samples.size(), [&](std::size_t i) {
    const ImageSample resized = resize_sample(samples[i], meta.input_size);
    const HeadOutputs out = model.forward(to_network_input(resized.pixels, norm));
    const TargetMaps targets = encode_targets(resized.boxes, meta.input_size, meta.input_size);
    losses[i] = total_loss(out, targets, 0.0, weights).total;
  });
  std::map<std::string, double> out;
  for (std::size_t i = 0; i < samples.size(); ++i) out[samples[i].id] = losses[i];
  return out;
}

std::vector<ImageDetections> predict_all(const Detector& model, const CheckpointMeta& meta,
                                         const std::vector<ImageSample>& samples,
                                         const DecodeConfig& decode) {
  DecodeConfig all = decode;
  all.score_threshold = 0.0;
  return detect_all(model, meta, samples, all);
}

EvalResult evaluate_model(const Detector& model, const CheckpointMeta& meta,
                          const std::vector<ImageSample>& test, const DecodeConfig& decode,
                          double iou_threshold) {
  return evaluate(predict_all(model, meta, test, decode), ground_truth_of(test), iou_threshold,
                  decode.score_threshold);
}

std::vector<SizeBucket> default_size_buckets() {
  return {{0.0, 0.1, "<10%"},
          {0.1, 0.2, "10-20%"},
          {0.2, 0.3, "20-30%"},
          {0.3, 0.4, "30-40%"},
          {0.4, 1.0, ">40%"}};
}

int size_bucket_of(const ImageSample& sample, const std::vector<SizeBucket>& buckets) {
  if (sample.boxes.empty()) return -1;
  double largest = 0.0;
  for (const auto& b : sample.boxes) largest = std::max(largest, b.area());
  const double ratio = largest / (static_cast<double>(sample.width()) * sample.height());
  for (std::size_t i = 0; i < buckets.size(); ++i) {
    if (ratio > buckets[i].lower && ratio <= buckets[i].upper) return static_cast<int>(i);
  }
  return -1;
}

namespace {

void check_partition(const std::vector<SizeBucket>& buckets) {
  if (buckets.empty()) throw Error(ErrorCode::kConfig, "size buckets are empty");
  double edge = 0.0;
  for (const auto& b : buckets) {
    if (b.lower != edge || !(b.upper > b.lower)) {
      throw Error(ErrorCode::kConfig, "size buckets must partition (0, 1] in increasing order");
    }
    edge = b.upper;
  }
  if (edge != 1.0) throw Error(ErrorCode::kConfig, "size buckets must end at 1");
}

}  // namespace

std::vector<SizeBucketResult> evaluate_by_size(const Detector& model, const CheckpointMeta& meta,
                                               const std::vector<ImageSample>& test,
                                               const std::vector<SizeBucket>& buckets,
                                               const DecodeConfig& decode, double iou_threshold) {
  check_partition(buckets);
  const auto preds = predict_all(model, meta, test, decode);
  std::vector<SizeBucketResult> rows;
  for (const auto& b : buckets) rows.push_back({b, 0, std::nullopt});
  std::vector<std::vector<ImageDetections>> bucket_preds(buckets.size());
  std::vector<std::vector<GroundTruth>> bucket_gt(buckets.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    const int b = size_bucket_of(test[i], buckets);
    if (b < 0) continue;
    bucket_preds[b].push_back(preds[i]);
    bucket_gt[b].push_back({test[i].id, test[i].boxes});
    ++rows[b].images;
  }
  for (std::size_t b = 0; b < buckets.size(); ++b) {
    if (rows[b].images == 0) continue;
    rows[b].result = evaluate(bucket_preds[b], bucket_gt[b], iou_threshold, decode.score_threshold);
  }
  return rows;
}

nlohmann::json size_report_json(const std::vector<SizeBucketResult>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json j = {{"bucket", r.bucket.label},
                        {"lower", r.bucket.lower},
                        {"upper", r.bucket.upper},
                        {"images", r.images}};
    j["result"] = r.result ? r.result->to_json() : nlohmann::json(nullptr);
    out.push_back(j);
  }
  return out;
}

double mean_inference_ms(const Detector& model, const CheckpointMeta& meta,
                         const std::vector<ImageSample>& samples, const DecodeConfig& decode,
                         int repeats) {
  if (samples.empty() || repeats < 1) return 0.0;
  using Clock = std::chrono::steady_clock;
  const auto t0 = Clock::now();
  for (int r = 0; r < repeats; ++r) {
    for (const auto& s : samples) detect(model, meta, s, decode);
  }
  const std::chrono::duration<double, std::milli> elapsed = Clock::now() - t0;
  return elapsed.count() / static_cast<double>(samples.size() * static_cast<std::size_t>(repeats));
}

// ---------------------------------------------------------------------------
// Pipeline

std::string config_hash(const nlohmann::json& config) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

nlohmann::json scatter_summary(const IouLossScatter& s) {
  return {{"spearman", s.spearman},
          {"loss_q1", s.loss_q1},
          {"loss_q3", s.loss_q3},
          {"abnormal", s.abnormal},
          {"abnormal_fraction", s.abnormal_fraction}};
}

IouLossScatter scatter_from_summary(const nlohmann::json& j) {
  IouLossScatter s;
  s.spearman = j.at("spearman").get<double>();
  s.loss_q1 = j.at("loss_q1").get<double>();
  s.loss_q3 = j.at("loss_q3").get<double>();
  s.abnormal = j.at("abnormal").get<int>();
  s.abnormal_fraction = j.at("abnormal_fraction").get<double>();
  return s;
}

EvalResult eval_from_json(const nlohmann::json& j) {
  EvalResult r;
  r.tp = j.at("tp").get<int>();
  r.fp = j.at("fp").get<int>();
  r.fn = j.at("fn").get<int>();
  r.precision = j.at("precision").get<double>();
  r.recall = j.at("recall").get<double>();
  r.f1 = j.at("f1").get<double>();
  r.ap = j.at("ap").get<double>();
  r.iou_threshold = j.at("iou_threshold").get<double>();
  return r;
}

void write_json(const std::filesystem::path& path, const nlohmann::json& doc) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, path.string() + ": " + e.what());
  }
}

void require_file(const std::filesystem::path& path, const char* step) {
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorCode::kIo, std::string(step) + " needs " + path.string());
  }
}

void record_epoch_means(RunManifest& manifest, const std::vector<TrainLogRow>& log) {
  if (log.empty()) return;
  const int stage = log.front().stage;
  int epoch = -1;
  double sum = 0.0;
  int n = 0;
  const auto flush = [&] {
    if (n) manifest.metric_history.push_back({{"stage", stage}, {"epoch", epoch}, {"mean_loss", sum / n}});
  };
  for (const auto& r : log) {
    if (r.epoch != epoch) {
      flush();
      epoch = r.epoch;
      sum = 0.0;
      n = 0;
    }
    sum += r.loss.total;
    ++n;
  }
  flush();
}

// Saves the epoch checkpoint and, with a validation set, the best-F1 one.
TrainHooks checkpoint_hooks(const Detector& model, const TrainConfig& cfg, int stage,
                            const std::filesystem::path& run_dir, const PipelineOptions& options,
                            nlohmann::json& validation_log) {
  TrainHooks hooks;
  const std::filesystem::path ckpt = run_dir / ("stage" + std::to_string(stage) + ".ckpt");
  const std::filesystem::path best = run_dir / ("stage" + std::to_string(stage) + "_best.ckpt");
  hooks.on_epoch_end = [&model, &cfg, &options, &validation_log, stage, ckpt, best](int epoch) {
    const CheckpointMeta meta = cfg.checkpoint_meta();
    save_checkpoint(ckpt, model, meta);
    if (!options.validation) return;
    const double f1 = evaluate_model(model, meta, *options.validation, cfg.decode).f1;
    double best_f1 = -1.0;
    for (const auto& v : validation_log) best_f1 = std::max(best_f1, v["val_f1"].get<double>());
    if (f1 > best_f1) save_checkpoint(best, model, meta);
    validation_log.push_back({{"stage", stage}, {"epoch", epoch}, {"val_f1", f1}});
  };
  return hooks;
}

}  // namespace

nlohmann::json RunManifest::to_json() const {
  nlohmann::json j = {{"config", config},
                      {"config_hash", config_hash},
                      {"stage1_checkpoint", stage1_checkpoint},
                      {"weight_table", weight_table},
                      {"stage2_checkpoint", stage2_checkpoint},
                      {"loss_log", loss_log},
                      {"eval", eval},
                      {"metric_history", metric_history}};
  if (final_eval) j["final_eval"] = final_eval->to_json();
  if (stage1_scatter) j["stage1_iou_loss"] = scatter_summary(*stage1_scatter);
  if (stage2_scatter) j["stage2_iou_loss"] = scatter_summary(*stage2_scatter);
  return j;
}

RunManifest RunManifest::load(const std::filesystem::path& run_dir) {
  const nlohmann::json j = read_json(run_dir / "manifest.json");
  RunManifest m;
  try {
    m.config = j.at("config");
    m.config_hash = j.at("config_hash").get<std::string>();
    m.stage1_checkpoint = j.value("stage1_checkpoint", "");
    m.weight_table = j.value("weight_table", "");
    m.stage2_checkpoint = j.value("stage2_checkpoint", "");
    m.loss_log = j.value("loss_log", "");
    m.eval = j.value("eval", "");
    m.metric_history = j.value("metric_history", nlohmann::json::array());
    if (j.contains("final_eval")) m.final_eval = eval_from_json(j.at("final_eval"));
    if (j.contains("stage1_iou_loss")) m.stage1_scatter = scatter_from_summary(j.at("stage1_iou_loss"));
    if (j.contains("stage2_iou_loss")) m.stage2_scatter = scatter_from_summary(j.at("stage2_iou_loss"));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, "manifest.json: " + std::string(e.what()));
  }
  return m;
}

void RunManifest::save(const std::filesystem::path& run_dir) const {
  write_json(run_dir / "manifest.json", to_json());
}

TrainConfig load_run_config(const std::filesystem::path& run_dir) {
  const nlohmann::json j = read_json(run_dir / "config.json");
  return TrainConfig::from_json(j, TrainConfig::preset_named(j.value("preset", "desk")));
}

void pipeline_train(const TrainConfig& cfg, const std::vector<ImageSample>& train,
                    const std::filesystem::path& run_dir, const PipelineOptions& options) {
  cfg.validate();
  std::filesystem::create_directories(run_dir);
  RunManifest manifest;
  manifest.config = cfg.to_json();
  manifest.config_hash = config_hash(manifest.config);
  write_json(run_dir / "config.json", manifest.config);

  Detector model(cfg.model, cfg.seed);
  nlohmann::json validation_log = nlohmann::json::array();
  const auto log =
      train_stage1(model, cfg, train, checkpoint_hooks(model, cfg, 1, run_dir, options, validation_log));
  save_checkpoint(run_dir / "stage1.ckpt", model, cfg.checkpoint_meta());
  save_loss_log(run_dir / "loss_log.csv", log);
  manifest.stage1_checkpoint = "stage1.ckpt";
  manifest.loss_log = "loss_log.csv";
  record_epoch_means(manifest, log);
  for (const auto& v : validation_log) manifest.metric_history.push_back(v);
  manifest.save(run_dir);
}

WeightTable pipeline_mine(const std::filesystem::path& run_dir,
                          const std::vector<ImageSample>& train, const PipelineOptions& options) {
  const TrainConfig cfg = load_run_config(run_dir);
  RunManifest manifest = RunManifest::load(run_dir);
  require_file(run_dir / "stage1.ckpt", "mine");
  CheckpointMeta meta;
  const Detector model = load_detector(run_dir / "stage1.ckpt", cfg.model, &meta);
  const WeightTable weights = mine_weights(model, meta, train, cfg.decode, cfg.isr_floor);
  weights.save(run_dir / "weights.table");
  manifest.weight_table = "weights.table";
  if (options.diagnostics) {
    const auto losses = per_sample_losses(model, meta, train, cfg.loss);
    save_sample_losses(run_dir / "sample_loss_stage1.csv", losses);
    manifest.stage1_scatter = iou_loss_scatter(weights, losses);
    save_scatter_csv(run_dir / "iou_loss_stage1.csv", *manifest.stage1_scatter);
  }
  manifest.save(run_dir);
  return weights;
}

void pipeline_finetune(const std::filesystem::path& run_dir, const std::vector<ImageSample>& train,
                       const PipelineOptions& options) {
  const TrainConfig cfg = load_run_config(run_dir);
  RunManifest manifest = RunManifest::load(run_dir);
  require_file(run_dir / "stage1.ckpt", "finetune");
  require_file(run_dir / "weights.table", "finetune");
  CheckpointMeta meta;
  Detector model = load_detector(run_dir / "stage1.ckpt", cfg.model, &meta);
  const WeightTable weights = WeightTable::load(run_dir / "weights.table");
  nlohmann::json validation_log = nlohmann::json::array();
  const auto log = train_stage2(model, cfg, train, weights,
                                checkpoint_hooks(model, cfg, 2, run_dir, options, validation_log));
  save_checkpoint(run_dir / "stage2.ckpt", model, meta);
  // Drop stage-2 rows from an earlier finetune so reruns stay idempotent.
  std::vector<std::string> kept;
  {
    std::ifstream in(run_dir / "loss_log.csv");
    std::string line;
    while (std::getline(in, line)) {
      if (line.rfind("2,", 0) != 0) kept.push_back(line);
    }
  }
  {
    std::ofstream out(run_dir / "loss_log.csv", std::ios::trunc);
    for (const auto& line : kept) out << line << '\n';
  }
  save_loss_log(run_dir / "loss_log.csv", log, true);
  manifest.stage2_checkpoint = "stage2.ckpt";
  nlohmann::json history = nlohmann::json::array();
  for (const auto& h : manifest.metric_history) {
    if (h.value("stage", 0) != 2) history.push_back(h);
  }
  manifest.metric_history = history;
  record_epoch_means(manifest, log);
  for (const auto& v : validation_log) manifest.metric_history.push_back(v);
  if (options.diagnostics) {
    const WeightTable after = mine_weights(model, meta, train, cfg.decode, cfg.isr_floor);
    after.save(run_dir / "iou_stage2.table");
    const auto losses = per_sample_losses(model, meta, train, cfg.loss);
    save_sample_losses(run_dir / "sample_loss_stage2.csv", losses);
    manifest.stage2_scatter = iou_loss_scatter(after, losses);
    save_scatter_csv(run_dir / "iou_loss_stage2.csv", *manifest.stage2_scatter);
  }
  manifest.save(run_dir);
}

EvalResult pipeline_eval(const std::filesystem::path& run_dir,
                         const std::vector<ImageSample>& test) {
  const TrainConfig cfg = load_run_config(run_dir);
  RunManifest manifest = RunManifest::load(run_dir);
  std::filesystem::path ckpt = run_dir / "stage2.ckpt";
  if (manifest.stage2_checkpoint.empty() || !std::filesystem::exists(ckpt)) ckpt = run_dir / "stage1.ckpt";
  require_file(ckpt, "eval");
  CheckpointMeta meta;
  const Detector model = load_detector(ckpt, cfg.model, &meta);
  const EvalResult result = evaluate_model(model, meta, test, cfg.decode);
  nlohmann::json doc = result.to_json();
  doc["checkpoint"] = ckpt.filename().string();
  doc["by_size"] = size_report_json(
      evaluate_by_size(model, meta, test, default_size_buckets(), cfg.decode));
  write_json(run_dir / "eval.json", doc);
  manifest.eval = "eval.json";
  manifest.final_eval = result;
  manifest.save(run_dir);
  return result;
}

RunManifest run_pipeline(const TrainConfig& cfg, const std::vector<ImageSample>& train,
                         const std::vector<ImageSample>& test, const std::filesystem::path& run_dir,
                         const PipelineOptions& options) {
  pipeline_train(cfg, train, run_dir, options);
  pipeline_mine(run_dir, train, options);
  if (!options.skip_stage2) pipeline_finetune(run_dir, train, options);
  pipeline_eval(run_dir, test);
  return RunManifest::load(run_dir);
}

}  // namespace eccdet

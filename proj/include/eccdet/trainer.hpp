#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "eccdet/bcl.hpp"
#include "eccdet/data.hpp"
#include "eccdet/decode.hpp"
#include "eccdet/isr.hpp"
#include "eccdet/losses.hpp"
#include "eccdet/metrics.hpp"
#include "eccdet/model.hpp"

namespace eccdet {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainConfig {
  std::string preset = "desk";
  int epochs = 20;
  int stage2_epochs = 0;  // 0: same as epochs
  int batch_size = 8;
  double lr = 1.5e-3;
  double lr_floor = 0.0;
  double stage2_lr = 0.0;  // 0: same as lr
  double grad_clip = 35.0;
  std::uint64_t seed = 0;
  int input_size = 128;
  double isr_floor = 0.0;
  double temperature = kDefaultTemperature;
  LossWeights loss;
  AdamConfig adam;
  ModelConfig model;
  AugmentConfig augment;
  DecodeConfig decode;
  Normalization normalization;

  static TrainConfig desk();
  static TrainConfig paper();
  static TrainConfig preset_named(const std::string& name);

  int resolved_stage2_epochs() const { return stage2_epochs > 0 ? stage2_epochs : epochs; }
  double resolved_stage2_lr() const { return stage2_lr > 0.0 ? stage2_lr : lr; }
  CheckpointMeta checkpoint_meta() const;

  void validate() const;
  nlohmann::json to_json() const;
  // Keys present in j override the corresponding fields of base.
  static TrainConfig from_json(const nlohmann::json& j, const TrainConfig& base);
};

// Cosine annealing from lr0 at step 0 to floor at step total - 1.
double cosine_lr(double lr0, double floor, long step, long total);

class Adam {
 public:
  Adam(const ParameterStore& params, const AdamConfig& cfg);
  void step(ParameterStore& params, const Gradients& grads, double lr);
  long steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

// Scales grads so the global L2 norm is at most max_norm; returns the norm
// before clipping.
double clip_grad_norm(Gradients& grads, double max_norm);

struct TrainLogRow {
  int stage = 1;
  int epoch = 0;
  long step = 0;
  double lr = 0.0;
  LossReport loss;  // batch means
  double grad_norm = 0.0;
};

struct TrainHooks {
  std::function<void(int epoch)> on_epoch_end;
};

// First stage: detection loss plus the weighted contrastive term, with
// augmentation. Training is a deterministic function of the config and the
// initial parameters.
std::vector<TrainLogRow> train_stage1(Detector& model, const TrainConfig& cfg,
                                      const std::vector<ImageSample>& train,
                                      const TrainHooks& hooks = {});
// Second stage: each sample's detection loss scaled by its weight-table
// alpha; no contrastive term. A fresh optimizer starts from the current
// parameters. Throws kMissingId when a training id has no weight.
std::vector<TrainLogRow> train_stage2(Detector& model, const TrainConfig& cfg,
                                      const std::vector<ImageSample>& train,
                                      const WeightTable& weights, const TrainHooks& hooks = {});

// Writes the CSV with a header, or appends rows to an existing file.
void save_loss_log(const std::filesystem::path& path, const std::vector<TrainLogRow>& rows,
                   bool append = false);

// Moving average over the trailing window (shorter at the start).
std::vector<double> smoothed(const std::vector<double>& values, std::size_t window);

// Detection loss of each sample without augmentation (contrastive term
// excluded), keyed by id.
std::map<std::string, double> per_sample_losses(const Detector& model, const CheckpointMeta& meta,
                                                const std::vector<ImageSample>& samples,
                                                const LossWeights& weights);

// Decodes every detection above zero score (top_k still applies) so AP sees
// the whole ranking; P/R/F1 use decode.score_threshold.
std::vector<ImageDetections> predict_all(const Detector& model, const CheckpointMeta& meta,
                                         const std::vector<ImageSample>& samples,
                                         const DecodeConfig& decode);
EvalResult evaluate_model(const Detector& model, const CheckpointMeta& meta,
                          const std::vector<ImageSample>& test, const DecodeConfig& decode,
                          double iou_threshold = 0.5);

struct SizeBucket {
  double lower = 0.0;  // exclusive
  double upper = 1.0;  // inclusive
  std::string label;
};

// Relative size bins (box area / image area): <10%, 10-20%, 20-30%, 30-40%, >40%.
std::vector<SizeBucket> default_size_buckets();

struct SizeBucketResult {
  SizeBucket bucket;
  int images = 0;
  std::optional<EvalResult> result;  // absent when no image falls in the bucket
};

// Images are bucketed by their largest ground-truth box; negative frames are
// not bucketed. Buckets must partition (0, 1].
std::vector<SizeBucketResult> evaluate_by_size(const Detector& model, const CheckpointMeta& meta,
                                               const std::vector<ImageSample>& test,
                                               const std::vector<SizeBucket>& buckets,
                                               const DecodeConfig& decode,
                                               double iou_threshold = 0.5);
// Bucketing only, exposed for tests; returns the bucket index or -1.
int size_bucket_of(const ImageSample& sample, const std::vector<SizeBucket>& buckets);
nlohmann::json size_report_json(const std::vector<SizeBucketResult>& rows);

// Mean single-image forward + decode time in milliseconds.
double mean_inference_ms(const Detector& model, const CheckpointMeta& meta,
                         const std::vector<ImageSample>& samples, const DecodeConfig& decode,
                         int repeats = 1);

struct PipelineOptions {
  bool skip_stage2 = false;  // ablation without sample re-weighting
  bool diagnostics = true;   // per-sample IoU/loss tables after each stage
  const std::vector<ImageSample>* validation = nullptr;  // enables best-F1 checkpoints
};

// Run directory state, mirrored in manifest.json.
struct RunManifest {
  nlohmann::json config;
  std::string config_hash;
  std::string stage1_checkpoint;  // file names relative to the run directory
  std::string weight_table;
  std::string stage2_checkpoint;
  std::string loss_log;
  std::string eval;
  nlohmann::json metric_history = nlohmann::json::array();
  std::optional<EvalResult> final_eval;
  std::optional<IouLossScatter> stage1_scatter;
  std::optional<IouLossScatter> stage2_scatter;

  nlohmann::json to_json() const;
  static RunManifest load(const std::filesystem::path& run_dir);
  void save(const std::filesystem::path& run_dir) const;
};

// 64-bit FNV-1a of the compact JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& config);

// Reads <run_dir>/config.json.
TrainConfig load_run_config(const std::filesystem::path& run_dir);

// Pipeline steps. Each reads what earlier steps left in run_dir and updates
// manifest.json; run_pipeline chains them.
//   train:    config.json, stage1.ckpt, loss_log.csv
//   mine:     weights.table (+ sample_loss_stage1.csv, iou_loss_stage1.csv)
//   finetune: stage2.ckpt, stage-2 rows of loss_log.csv (+ iou_stage2.table,
//             sample_loss_stage2.csv, iou_loss_stage2.csv)
//   eval:     eval.json for stage2.ckpt, or stage1.ckpt when stage 2 is absent
void pipeline_train(const TrainConfig& cfg, const std::vector<ImageSample>& train,
                    const std::filesystem::path& run_dir, const PipelineOptions& options = {});
WeightTable pipeline_mine(const std::filesystem::path& run_dir,
                          const std::vector<ImageSample>& train,
                          const PipelineOptions& options = {});
void pipeline_finetune(const std::filesystem::path& run_dir, const std::vector<ImageSample>& train,
                       const PipelineOptions& options = {});
EvalResult pipeline_eval(const std::filesystem::path& run_dir,
                         const std::vector<ImageSample>& test);

RunManifest run_pipeline(const TrainConfig& cfg, const std::vector<ImageSample>& train,
                         const std::vector<ImageSample>& test, const std::filesystem::path& run_dir,
                         const PipelineOptions& options = {});

}  // namespace eccdet

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "eccdet/nn.hpp"
#include "eccdet/tensor.hpp"

namespace eccdet {

struct ModelConfig {
  std::vector<int> backbone_channels = {16, 32, 64, 128};
  int fpn_channels = 64;
  int head_channels = 0;  // 0: same as fpn_channels
  int n_stages = 2;       // heatmap stages; n_stages - 1 are intermediate
  int head_kernel = 3;
  bool use_flow = true;   // false pins the SFA flow to zero (plain top-down FPN)

  int resolved_head_channels() const { return head_channels > 0 ? head_channels : fpn_channels; }
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

struct FeaturePyramid {
  std::array<Tensor, 4> levels;  // strides 4, 8, 16, 32
};

struct HeadOutputs {
  std::vector<Tensor> intermediate_heatmaps;  // each 1 x H/4 x W/4, after sigmoid
  Tensor main_heatmap;                        // 1 x H/4 x W/4, after sigmoid
  Tensor offset_pred;                         // 2 x H/4 x W/4
  Tensor size_pred;                           // 2 x H/4 x W/4, positive

  std::size_t heatmap_count() const { return intermediate_heatmaps.size() + 1; }
};

// Loss gradients with respect to the head outputs (same shapes).
struct HeadGradients {
  std::vector<Tensor> intermediate_heatmaps;
  Tensor main_heatmap;
  Tensor offset_pred;
  Tensor size_pred;

  static HeadGradients zeros_like(const HeadOutputs& outputs);
};

// conv -> affine -> relu
struct ConvNormRelu {
  Conv2d conv;
  ChannelAffine norm;

  struct Trace {
    Tensor input, conv_out, output;
  };
  static ConvNormRelu create(ParameterStore& params, const std::string& name, int in, int out,
                             int kernel, int stride);
  Tensor forward(const ParameterStore& params, const Tensor& x, Trace* trace) const;
  Tensor backward(const ParameterStore& params, const Trace& trace, const Tensor& grad,
                  Gradients& grads, bool want_input_grad = true) const;
};

class Backbone {
 public:
  struct Trace {
    ConvNormRelu::Trace stem;
    std::array<std::array<ConvNormRelu::Trace, 2>, 4> stages;
  };

  Backbone() = default;
  Backbone(ParameterStore& params, const std::vector<int>& channels);

  // H and W must be divisible by 32.
  FeaturePyramid forward(const ParameterStore& params, const Tensor& image, Trace* trace) const;
  void backward(const ParameterStore& params, const Trace& trace, const FeaturePyramid& grads_out,
                Gradients& grads) const;

 private:
  ConvNormRelu stem_;
  std::array<std::array<ConvNormRelu, 2>, 4> stages_;
};

// Semantic flow alignment: warps the upsampled coarse feature along a learned
// two-channel flow and adds the fine feature.
class SemanticFlowAlign {
 public:
  struct Trace {
    Tensor high, low, upsampled, concat, flow_conv_out, flow;
  };
  struct InputGrads {
    Tensor high, low;
  };

  SemanticFlowAlign() = default;
  SemanticFlowAlign(ParameterStore& params, const std::string& name, int channels, bool use_flow);

  Tensor forward(const ParameterStore& params, const Tensor& high, const Tensor& low,
                 Trace* trace) const;
  InputGrads backward(const ParameterStore& params, const Trace& trace, const Tensor& grad,
                      Gradients& grads) const;

  const Conv2d& flow_conv() const { return flow_conv_; }
  const ChannelAffine& flow_norm() const { return flow_norm_; }
  bool use_flow() const { return use_flow_; }

 private:
  Conv2d flow_conv_;
  ChannelAffine flow_norm_;
  bool use_flow_ = true;
};

// Top-down fusion of the pyramid into one stride-4 feature.
class SemanticFlowFpn {
 public:
  struct Trace {
    std::array<Tensor, 4> lateral_in, lateral_conv, lateral_out;
    std::array<SemanticFlowAlign::Trace, 3> align;  // index i fuses level i with level i+1
  };

  SemanticFlowFpn() = default;
  SemanticFlowFpn(ParameterStore& params, const std::vector<int>& in_channels, int channels,
                  bool use_flow);

  Tensor forward(const ParameterStore& params, const FeaturePyramid& pyramid, Trace* trace) const;
  FeaturePyramid backward(const ParameterStore& params, const Trace& trace, const Tensor& grad,
                          Gradients& grads) const;

  const SemanticFlowAlign& align(int i) const { return align_[static_cast<std::size_t>(i)]; }
  const Conv2d& lateral_conv(int i) const { return lateral_conv_[static_cast<std::size_t>(i)]; }
  const ChannelAffine& lateral_norm(int i) const {
    return lateral_norm_[static_cast<std::size_t>(i)];
  }

 private:
  std::array<Conv2d, 4> lateral_conv_;
  std::array<ChannelAffine, 4> lateral_norm_;
  std::array<SemanticFlowAlign, 3> align_;
};

// Two k x k convolutions with a ReLU between them.
struct HeadBranch {
  Conv2d first;
  Conv2d second;

  struct Trace {
    Tensor input, hidden, output;
  };
  static HeadBranch create(ParameterStore& params, const std::string& name, int in, int hidden,
                           int out, int kernel);
  Tensor forward(const ParameterStore& params, const Tensor& x, Trace* trace) const;
  Tensor backward(const ParameterStore& params, const Trace& trace, const Tensor& grad,
                  Gradients& grads) const;
};

// Heatmap-propagation head: n_stages - 1 intermediate heatmap branches whose
// logits are projected back into the feature stream, followed by the main
// heatmap, offset and size branches.
class DetectionHead {
 public:
  struct Trace {
    std::vector<Tensor> streams;  // X_1 .. X_n
    std::vector<HeadBranch::Trace> intermediate;
    std::vector<Tensor> intermediate_logits;
    HeadBranch::Trace heatmap, offset, size;
    HeadOutputs outputs;
  };

  DetectionHead() = default;
  DetectionHead(ParameterStore& params, int channels, int hidden, int n_stages, int kernel);

  HeadOutputs forward(const ParameterStore& params, const Tensor& fused, Trace* trace) const;
  Tensor backward(const ParameterStore& params, const Trace& trace, const HeadGradients& grad,
                  Gradients& grads) const;

  int n_stages() const { return static_cast<int>(intermediate_.size()) + 1; }

 private:
  std::vector<HeadBranch> intermediate_;
  std::vector<Conv2d> projections_;  // 1 -> C, 1x1
  HeadBranch heatmap_, offset_, size_;
};

// Largest logit fed to the size exponential.
inline constexpr double kMaxSizeLogit = 10.0;

class Detector {
 public:
  struct Trace {
    Backbone::Trace backbone;
    FeaturePyramid pyramid;
    SemanticFlowFpn::Trace fpn;
    Tensor fused;
    DetectionHead::Trace head;
  };

  explicit Detector(ModelConfig cfg, std::uint64_t seed = 0);

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }

  const Backbone& backbone() const { return backbone_; }
  const SemanticFlowFpn& fpn() const { return fpn_; }
  const DetectionHead& head() const { return head_; }

  // image is a normalized 3 x H x W tensor, H and W divisible by 32.
  HeadOutputs forward(const Tensor& image, Trace* trace = nullptr) const;
  // grad_fused (optional) is an extra gradient on the fused stride-4 feature,
  // e.g. from the contrastive branch.
  void backward(const Trace& trace, const HeadGradients& grad, const Tensor* grad_fused,
                Gradients& grads) const;

 private:
  ModelConfig cfg_;
  ParameterStore params_;
  Backbone backbone_;
  SemanticFlowFpn fpn_;
  DetectionHead head_;
};

// Inference metadata stored alongside the weights.
struct CheckpointMeta {
  int input_size = 128;
  double norm_mean[3] = {0.5, 0.5, 0.5};
  double norm_std[3] = {0.25, 0.25, 0.25};
};

struct Checkpoint {
  ModelConfig config;
  CheckpointMeta meta;
  ParameterStore params;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Detector& model,
                     const CheckpointMeta& meta);
Checkpoint read_checkpoint(const std::filesystem::path& path);
// Rebuilds the detector and verifies that every stored array matches the
// architecture; throws kCheckpoint on mismatch.
Detector load_detector(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);
// As above, additionally requiring the stored config to equal expected.
Detector load_detector(const std::filesystem::path& path, const ModelConfig& expected,
                       CheckpointMeta* meta = nullptr);

}  // namespace eccdet

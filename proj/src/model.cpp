#include "eccdet/model.hpp"

#include <cmath>
#include <random>

#include "eccdet/error.hpp"

namespace eccdet {
namespace {

// CenterNet heatmap prior: sigmoid(-2.19) ~ 0.1.
constexpr double kHeatmapPriorBias = -2.19;

}  // namespace

void ModelConfig::validate() const {
  if (backbone_channels.size() != 4) {
    throw Error(ErrorCode::kConfig, "backbone_channels must list 4 stages");
  }
  for (int c : backbone_channels) {
    if (c <= 0) throw Error(ErrorCode::kConfig, "backbone channel counts must be positive");
  }
  if (fpn_channels <= 0) throw Error(ErrorCode::kConfig, "fpn_channels must be positive");
  if (head_channels < 0) throw Error(ErrorCode::kConfig, "head_channels must be >= 0");
  if (n_stages < 1) throw Error(ErrorCode::kConfig, "n_stages must be >= 1");
  if (head_kernel < 1 || head_kernel % 2 == 0) {
    throw Error(ErrorCode::kConfig, "head_kernel must be odd");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"backbone_channels", backbone_channels},
          {"fpn_channels", fpn_channels},
          {"head_channels", head_channels},
          {"n_stages", n_stages},
          {"head_kernel", head_kernel},
          {"use_flow", use_flow}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.backbone_channels = j.value("backbone_channels", cfg.backbone_channels);
  cfg.fpn_channels = j.value("fpn_channels", cfg.fpn_channels);
  cfg.head_channels = j.value("head_channels", cfg.head_channels);
  cfg.n_stages = j.value("n_stages", cfg.n_stages);
  cfg.head_kernel = j.value("head_kernel", cfg.head_kernel);
  cfg.use_flow = j.value("use_flow", cfg.use_flow);
  cfg.validate();
  return cfg;
}

HeadGradients HeadGradients::zeros_like(const HeadOutputs& outputs) {
  HeadGradients g;
  for (const auto& t : outputs.intermediate_heatmaps) {
    g.intermediate_heatmaps.emplace_back(t.channels(), t.height(), t.width());
  }
  const auto zero = [](const Tensor& t) { return Tensor(t.channels(), t.height(), t.width()); };
  g.main_heatmap = zero(outputs.main_heatmap);
  g.offset_pred = zero(outputs.offset_pred);
  g.size_pred = zero(outputs.size_pred);
  return g;
}

// ---------------------------------------------------------------------------

ConvNormRelu ConvNormRelu::create(ParameterStore& params, const std::string& name, int in,
                                  int out, int kernel, int stride) {
  return {Conv2d::create(params, name + ".conv", in, out, kernel, stride),
          ChannelAffine::create(params, name + ".norm", out)};
}

Tensor ConvNormRelu::forward(const ParameterStore& params, const Tensor& x, Trace* trace) const {
  Tensor conv_out = conv.forward(params, x);
  Tensor out = relu(norm.forward(params, conv_out));
  if (trace) {
    trace->input = x;
    trace->conv_out = std::move(conv_out);
    trace->output = out;
  }
  return out;
}

Tensor ConvNormRelu::backward(const ParameterStore& params, const Trace& trace, const Tensor& grad,
                              Gradients& grads, bool want_input_grad) const {
  const Tensor d_norm = relu_backward(trace.output, grad);
  const Tensor d_conv = norm.backward(params, trace.conv_out, d_norm, grads);
  return conv.backward(params, trace.input, d_conv, grads, want_input_grad);
}

// ---------------------------------------------------------------------------

Backbone::Backbone(ParameterStore& params, const std::vector<int>& channels) {
  stem_ = ConvNormRelu::create(params, "backbone.stem", 3, channels[0], 3, 2);
  int in = channels[0];
  for (int s = 0; s < 4; ++s) {
    const std::string name = "backbone.stage" + std::to_string(s + 1);
    stages_[s][0] = ConvNormRelu::create(params, name + ".down", in, channels[s], 3, 2);
    stages_[s][1] = ConvNormRelu::create(params, name + ".conv", channels[s], channels[s], 3, 1);
    in = channels[s];
  }
}

FeaturePyramid Backbone::forward(const ParameterStore& params, const Tensor& image,
                                 Trace* trace) const {
  if (image.channels() != 3) throw Error(ErrorCode::kShape, "backbone expects a 3-channel image");
  if (image.height() % 32 != 0 || image.width() % 32 != 0 || image.height() == 0 ||
      image.width() == 0) {
    throw Error(ErrorCode::kShape, "backbone input " + std::to_string(image.height()) + "x" +
                                       std::to_string(image.width()) +
                                       " is not divisible by 32");
  }
  FeaturePyramid pyr;
  Tensor x = stem_.forward(params, image, trace ? &trace->stem : nullptr);
  for (int s = 0; s < 4; ++s) {
    x = stages_[s][0].forward(params, x, trace ? &trace->stages[s][0] : nullptr);
    x = stages_[s][1].forward(params, x, trace ? &trace->stages[s][1] : nullptr);
    pyr.levels[s] = x;
  }
  return pyr;
}

void Backbone::backward(const ParameterStore& params, const Trace& trace,
                        const FeaturePyramid& grads_out, Gradients& grads) const {
  Tensor d;
  for (int s = 3; s >= 0; --s) {
    if (d.empty()) {
      d = grads_out.levels[s];
    } else if (!grads_out.levels[s].empty()) {
      d += grads_out.levels[s];
    }
    d = stages_[s][1].backward(params, trace.stages[s][1], d, grads);
    d = stages_[s][0].backward(params, trace.stages[s][0], d, grads);
  }
  stem_.backward(params, trace.stem, d, grads, false);
}

// ---------------------------------------------------------------------------

SemanticFlowAlign::SemanticFlowAlign(ParameterStore& params, const std::string& name,
                                     int channels, bool use_flow)
    : use_flow_(use_flow) {
  flow_conv_ = Conv2d::create(params, name + ".flow_conv", 2 * channels, 2, 3, 1);
  flow_norm_ = ChannelAffine::create(params, name + ".flow_norm", 2);
}

Tensor SemanticFlowAlign::forward(const ParameterStore& params, const Tensor& high,
                                  const Tensor& low, Trace* trace) const {
  if (high.channels() != low.channels()) {
    throw Error(ErrorCode::kShape, "sfa: channel mismatch between fine and coarse features");
  }
  if (low.height() != (high.height() + 1) / 2 || low.width() != (high.width() + 1) / 2) {
    throw Error(ErrorCode::kShape, "sfa: coarse feature must be half the fine resolution");
  }
  Tensor up = resize_bilinear(low, high.height(), high.width());
  Tensor out;
  Tensor concat, conv_out, flow;
  if (use_flow_) {
    concat = Tensor::concat(high, up);
    conv_out = flow_conv_.forward(params, concat);
    flow = flow_norm_.forward(params, conv_out);
    out = flow_warp(up, flow);
  } else {
    out = up;
  }
  out += high;
  if (trace) {
    trace->high = high;
    trace->low = low;
    trace->upsampled = std::move(up);
    trace->concat = std::move(concat);
    trace->flow_conv_out = std::move(conv_out);
    trace->flow = std::move(flow);
  }
  return out;
}

SemanticFlowAlign::InputGrads SemanticFlowAlign::backward(const ParameterStore& params,
                                                          const Trace& trace, const Tensor& grad,
                                                          Gradients& grads) const {
  InputGrads g;
  g.high = grad;
  Tensor d_up;
  if (use_flow_) {
    FlowWarpGrad wg = flow_warp_backward(trace.upsampled, trace.flow, grad);
    d_up = std::move(wg.input);
    const Tensor d_conv = flow_norm_.backward(params, trace.flow_conv_out, wg.flow, grads);
    const Tensor d_concat = flow_conv_.backward(params, trace.concat, d_conv, grads);
    const int c = trace.high.channels();
    g.high += d_concat.slice_channels(0, c);
    d_up += d_concat.slice_channels(c, c);
  } else {
    d_up = grad;
  }
  g.low = resize_bilinear_backward(d_up, trace.low.height(), trace.low.width());
  return g;
}

// ---------------------------------------------------------------------------

SemanticFlowFpn::SemanticFlowFpn(ParameterStore& params, const std::vector<int>& in_channels,
                                 int channels, bool use_flow) {
  for (int i = 0; i < 4; ++i) {
    const std::string name = "fpn.lateral" + std::to_string(i + 1);
    lateral_conv_[i] = Conv2d::create(params, name + ".conv", in_channels[i], channels, 1, 1);
    lateral_norm_[i] = ChannelAffine::create(params, name + ".norm", channels);
  }
  for (int i = 0; i < 3; ++i) {
    align_[i] = SemanticFlowAlign(params, "fpn.align" + std::to_string(i + 1), channels, use_flow);
  }
}

Tensor SemanticFlowFpn::forward(const ParameterStore& params, const FeaturePyramid& pyramid,
                                Trace* trace) const {
  std::array<Tensor, 4> lateral;
  for (int i = 0; i < 4; ++i) {
    Tensor conv_out = lateral_conv_[i].forward(params, pyramid.levels[i]);
    lateral[i] = lateral_norm_[i].forward(params, conv_out);
    if (trace) {
      trace->lateral_in[i] = pyramid.levels[i];
      trace->lateral_conv[i] = std::move(conv_out);
      trace->lateral_out[i] = lateral[i];
    }
  }
  Tensor top = lateral[3];
  for (int i = 2; i >= 0; --i) {
    top = align_[i].forward(params, lateral[i], top, trace ? &trace->align[i] : nullptr);
  }
  return top;
}

FeaturePyramid SemanticFlowFpn::backward(const ParameterStore& params, const Trace& trace,
                                         const Tensor& grad, Gradients& grads) const {
  std::array<Tensor, 4> d_lateral;
  Tensor d_top = grad;
  for (int i = 0; i < 3; ++i) {
    auto g = align_[i].backward(params, trace.align[i], d_top, grads);
    d_lateral[i] = std::move(g.high);
    d_top = std::move(g.low);
  }
  d_lateral[3] = std::move(d_top);
  FeaturePyramid out;
  for (int i = 0; i < 4; ++i) {
    const Tensor d_conv =
        lateral_norm_[i].backward(params, trace.lateral_conv[i], d_lateral[i], grads);
    out.levels[i] = lateral_conv_[i].backward(params, trace.lateral_in[i], d_conv, grads);
  }
  return out;
}

// ---------------------------------------------------------------------------

HeadBranch HeadBranch::create(ParameterStore& params, const std::string& name, int in,
                              int hidden, int out, int kernel) {
  return {Conv2d::create(params, name + ".first", in, hidden, kernel, 1),
          Conv2d::create(params, name + ".second", hidden, out, kernel, 1)};
}

Tensor HeadBranch::forward(const ParameterStore& params, const Tensor& x, Trace* trace) const {
  Tensor hidden = relu(first.forward(params, x));
  Tensor out = second.forward(params, hidden);
  if (trace) {
    trace->input = x;
    trace->hidden = std::move(hidden);
    trace->output = out;
  }
  return out;
}

Tensor HeadBranch::backward(const ParameterStore& params, const Trace& trace, const Tensor& grad,
                            Gradients& grads) const {
  const Tensor d_hidden = relu_backward(trace.hidden, second.backward(params, trace.hidden, grad, grads));
  return first.backward(params, trace.input, d_hidden, grads);
}

DetectionHead::DetectionHead(ParameterStore& params, int channels, int hidden, int n_stages,
                             int kernel) {
  for (int t = 0; t + 1 < n_stages; ++t) {
    const std::string name = "head.inter" + std::to_string(t + 1);
    intermediate_.push_back(HeadBranch::create(params, name, channels, hidden, 1, kernel));
    projections_.push_back(Conv2d::create(params, name + ".proj", 1, channels, 1, 1));
  }
  heatmap_ = HeadBranch::create(params, "head.heatmap", channels, hidden, 1, kernel);
  offset_ = HeadBranch::create(params, "head.offset", channels, hidden, 2, kernel);
  size_ = HeadBranch::create(params, "head.size", channels, hidden, 2, kernel);
}

HeadOutputs DetectionHead::forward(const ParameterStore& params, const Tensor& fused,
                                   Trace* trace) const {
  HeadOutputs out;
  Tensor stream = fused;
  if (trace) {
    trace->streams.clear();
    trace->intermediate.assign(intermediate_.size(), {});
    trace->intermediate_logits.clear();
  }
  for (std::size_t t = 0; t < intermediate_.size(); ++t) {
    if (trace) trace->streams.push_back(stream);
    Tensor logits =
        intermediate_[t].forward(params, stream, trace ? &trace->intermediate[t] : nullptr);
    out.intermediate_heatmaps.push_back(sigmoid(logits));
    stream += projections_[t].forward(params, logits);
    if (trace) trace->intermediate_logits.push_back(std::move(logits));
  }
  if (trace) trace->streams.push_back(stream);
  out.main_heatmap = sigmoid(heatmap_.forward(params, stream, trace ? &trace->heatmap : nullptr));
  out.offset_pred = offset_.forward(params, stream, trace ? &trace->offset : nullptr);
  Tensor size_logits = size_.forward(params, stream, trace ? &trace->size : nullptr);
  out.size_pred = size_logits;
  for (double& v : out.size_pred.values()) v = std::exp(std::min(v, kMaxSizeLogit));
  if (trace) trace->outputs = out;
  return out;
}

Tensor DetectionHead::backward(const ParameterStore& params, const Trace& trace,
                               const HeadGradients& grad, Gradients& grads) const {
  const HeadOutputs& out = trace.outputs;
  const Tensor d_hm_logits = sigmoid_backward(out.main_heatmap, grad.main_heatmap);
  Tensor d_size_logits = grad.size_pred;
  for (std::size_t i = 0; i < d_size_logits.size(); ++i) {
    const bool clamped = trace.size.output.values()[i] > kMaxSizeLogit;
    d_size_logits.values()[i] = clamped ? 0.0 : d_size_logits.values()[i] * out.size_pred.values()[i];
  }
  Tensor d_stream = heatmap_.backward(params, trace.heatmap, d_hm_logits, grads);
  d_stream += offset_.backward(params, trace.offset, grad.offset_pred, grads);
  d_stream += size_.backward(params, trace.size, d_size_logits, grads);

  for (std::size_t k = intermediate_.size(); k-- > 0;) {
    Tensor d_logits = sigmoid_backward(out.intermediate_heatmaps[k], grad.intermediate_heatmaps[k]);
    d_logits += projections_[k].backward(params, trace.intermediate_logits[k], d_stream, grads);
    d_stream += intermediate_[k].backward(params, trace.intermediate[k], d_logits, grads);
  }
  return d_stream;
}

// ---------------------------------------------------------------------------

Detector::Detector(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  backbone_ = Backbone(params_, cfg_.backbone_channels);
  fpn_ = SemanticFlowFpn(params_, cfg_.backbone_channels, cfg_.fpn_channels, cfg_.use_flow);
  head_ = DetectionHead(params_, cfg_.fpn_channels, cfg_.resolved_head_channels(), cfg_.n_stages,
                        cfg_.head_kernel);

  // Initialization walks the parameter names; every weight gets a rule.
  std::mt19937_64 rng(seed);
  const auto ends_with = [](const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  for (auto& p : params_.all()) {
    if (!ends_with(p.name, ".weight")) continue;
    const double fan_in = static_cast<double>(p.value.size()) / p.shape[0];
    if (p.name.starts_with("backbone.") || ends_with(p.name, ".first.weight")) {
      init_normal(p, rng, std::sqrt(2.0 / fan_in));
    } else if (p.name.find(".lateral") != std::string::npos) {
      init_normal(p, rng, std::sqrt(1.0 / fan_in));
    } else if (p.name.find(".flow_conv") != std::string::npos) {
      init_normal(p, rng, 1e-3);
    } else if (ends_with(p.name, ".second.weight")) {
      init_normal(p, rng, 0.01);
    } else if (ends_with(p.name, ".proj.weight")) {
      init_constant(p, 0.0);
    } else {
      throw Error(ErrorCode::kConfig, "no init rule for parameter " + p.name);
    }
  }
  for (auto& p : params_.all()) {
    if (p.name == "head.heatmap.second.bias" ||
        (p.name.starts_with("head.inter") && ends_with(p.name, ".second.bias"))) {
      init_constant(p, kHeatmapPriorBias);
    }
  }
}

HeadOutputs Detector::forward(const Tensor& image, Trace* trace) const {
  if (trace) {
    trace->pyramid = backbone_.forward(params_, image, &trace->backbone);
    trace->fused = fpn_.forward(params_, trace->pyramid, &trace->fpn);
    return head_.forward(params_, trace->fused, &trace->head);
  }
  const FeaturePyramid pyr = backbone_.forward(params_, image, nullptr);
  const Tensor fused = fpn_.forward(params_, pyr, nullptr);
  return head_.forward(params_, fused, nullptr);
}

void Detector::backward(const Trace& trace, const HeadGradients& grad, const Tensor* grad_fused,
                        Gradients& grads) const {
  Tensor d_fused = head_.backward(params_, trace.head, grad, grads);
  if (grad_fused) d_fused += *grad_fused;
  const FeaturePyramid d_pyr = fpn_.backward(params_, trace.fpn, d_fused, grads);
  backbone_.backward(params_, trace.backbone, d_pyr, grads);
}

}  // namespace eccdet

#include "eccdet/losses.hpp"

#include <algorithm>
#include <cmath>

#include "eccdet/error.hpp"

namespace eccdet {

void LossWeights::validate() const {
  for (double v : {inter, offset, size, contrastive}) {
    if (!(std::isfinite(v) && v >= 0.0)) {
      throw Error(ErrorCode::kConfig, "loss weights must be finite and non-negative");
    }
  }
  if (!(focal_alpha > 0.0 && focal_beta > 0.0)) {
    throw Error(ErrorCode::kConfig, "focal exponents must be positive");
  }
}

namespace {

double focal_sum(const Tensor& pred, const Tensor& target, std::size_t objects, double alpha,
                 double beta, Tensor* grad) {
  if (!pred.same_shape(target)) throw Error(ErrorCode::kShape, "focal loss: shape mismatch");
  const auto& p_all = pred.values();
  const auto& y_all = target.values();
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, objects));
  if (grad) *grad = Tensor(pred.channels(), pred.height(), pred.width());
  double sum = 0.0;
  for (std::size_t i = 0; i < p_all.size(); ++i) {
    const double raw = p_all[i];
    const double p = std::clamp(raw, kProbabilityClamp, 1.0 - kProbabilityClamp);
    const bool inside = raw == p;
    double term = 0.0;
    double d_term = 0.0;
    if (y_all[i] == 1.0) {
      const double q = std::pow(1.0 - p, alpha);
      term = q * std::log(p);
      d_term = -alpha * std::pow(1.0 - p, alpha - 1.0) * std::log(p) + q / p;
    } else {
      const double w = std::pow(1.0 - y_all[i], beta);
      const double pa = std::pow(p, alpha);
      term = w * pa * std::log(1.0 - p);
      d_term = w * (alpha * std::pow(p, alpha - 1.0) * std::log(1.0 - p) - pa / (1.0 - p));
    }
    sum += term;
    if (grad && inside) grad->values()[i] = -d_term * norm;
  }
  return -sum * norm;
}

}  // namespace

double focal_heatmap_loss(const Tensor& pred, const Tensor& target, double alpha, double beta,
                          Tensor* grad) {
  const auto& y = target.values();
  const auto objects = static_cast<std::size_t>(std::count(y.begin(), y.end(), 1.0));
  return focal_sum(pred, target, objects, alpha, beta, grad);
}

double focal_heatmap_loss(const Tensor& pred, const TargetMaps& targets, double alpha,
                          double beta, Tensor* grad) {
  return focal_sum(pred, targets.heatmap, targets.object_count(), alpha, beta, grad);
}

namespace {

double center_l1(const Tensor& pred, const Tensor& target, const std::vector<Cell>& centers,
                 Tensor* grad) {
  if (!pred.same_shape(target)) throw Error(ErrorCode::kShape, "L1 loss: shape mismatch");
  if (grad) *grad = Tensor(pred.channels(), pred.height(), pred.width());
  if (centers.empty()) return 0.0;
  const double norm = 1.0 / static_cast<double>(centers.size());
  double sum = 0.0;
  for (const Cell& cell : centers) {
    for (int c = 0; c < pred.channels(); ++c) {
      const double diff = pred(c, cell.row, cell.col) - target(c, cell.row, cell.col);
      sum += std::abs(diff);
      if (grad) {
        const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
        (*grad)(c, cell.row, cell.col) += sign * norm;
      }
    }
  }
  return sum * norm;
}

LossReport combine(LossReport r, const LossWeights& w, LossMode mode, double sample_weight) {
  const double detection = r.l_hm_main + w.inter * r.l_hm_inter + w.offset * r.l_o + w.size * r.l_s;
  if (mode == LossMode::kJoint) {
    r.total = detection + w.contrastive * r.l_cl;
  } else {
    r.l_cl = 0.0;
    r.total = sample_weight * detection;
  }
  return r;
}

}  // namespace

double offset_loss(const Tensor& offset_pred, const TargetMaps& targets, Tensor* grad) {
  return center_l1(offset_pred, targets.offset_target, targets.center_indices, grad);
}

double size_loss(const Tensor& size_pred, const TargetMaps& targets, Tensor* grad) {
  return center_l1(size_pred, targets.size_target, targets.center_indices, grad);
}

LossReport total_loss(const HeadOutputs& outputs, const TargetMaps& targets, double l_cl,
                      const LossWeights& weights, LossMode mode, double sample_weight) {
  if (sample_weight < 0.0 || sample_weight > 1.0) {
    throw Error(ErrorCode::kConfig, "sample weight must lie in [0, 1]");
  }
  LossReport r;
  r.l_hm_main = focal_heatmap_loss(outputs.main_heatmap, targets, weights.focal_alpha,
                                   weights.focal_beta);
  if (!outputs.intermediate_heatmaps.empty()) {
    for (const auto& hm : outputs.intermediate_heatmaps) {
      r.l_hm_inter += focal_heatmap_loss(hm, targets, weights.focal_alpha, weights.focal_beta);
    }
    r.l_hm_inter /= static_cast<double>(outputs.intermediate_heatmaps.size());
  }
  r.l_o = offset_loss(outputs.offset_pred, targets);
  r.l_s = size_loss(outputs.size_pred, targets);
  r.l_cl = l_cl;
  return combine(r, weights, mode, sample_weight);
}

LossReport total_loss_with_grad(const HeadOutputs& outputs, const TargetMaps& targets,
                                double l_cl, const LossWeights& weights, LossMode mode,
                                double sample_weight, double grad_scale, HeadGradients& grad) {
  if (sample_weight < 0.0 || sample_weight > 1.0) {
    throw Error(ErrorCode::kConfig, "sample weight must lie in [0, 1]");
  }
  const double scale = grad_scale * (mode == LossMode::kReweighted ? sample_weight : 1.0);
  LossReport r;
  r.l_hm_main = focal_heatmap_loss(outputs.main_heatmap, targets, weights.focal_alpha,
                                   weights.focal_beta, &grad.main_heatmap);
  grad.main_heatmap *= scale;
  const std::size_t n_inter = outputs.intermediate_heatmaps.size();
  grad.intermediate_heatmaps.resize(n_inter);
  for (std::size_t k = 0; k < n_inter; ++k) {
    r.l_hm_inter += focal_heatmap_loss(outputs.intermediate_heatmaps[k], targets,
                                       weights.focal_alpha, weights.focal_beta,
                                       &grad.intermediate_heatmaps[k]);
    grad.intermediate_heatmaps[k] *= scale * weights.inter / static_cast<double>(n_inter);
  }
  if (n_inter > 0) r.l_hm_inter /= static_cast<double>(n_inter);
  r.l_o = offset_loss(outputs.offset_pred, targets, &grad.offset_pred);
  grad.offset_pred *= scale * weights.offset;
  r.l_s = size_loss(outputs.size_pred, targets, &grad.size_pred);
  grad.size_pred *= scale * weights.size;
  r.l_cl = l_cl;
  return combine(r, weights, mode, sample_weight);
}

}  // namespace eccdet

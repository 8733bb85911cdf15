#pragma once

#include "eccdet/model.hpp"
#include "eccdet/targets.hpp"
#include "eccdet/tensor.hpp"

namespace eccdet {

struct LossWeights {
  double inter = 0.3;
  double offset = 1.0;
  double size = 0.1;
  double contrastive = 0.3;
  double focal_alpha = 2.0;  // exponent on (1 - p) at centers and p elsewhere
  double focal_beta = 4.0;   // exponent on (1 - Y) away from centers

  void validate() const;
};

struct LossReport {
  double l_hm_main = 0.0;
  double l_hm_inter = 0.0;
  double l_o = 0.0;
  double l_s = 0.0;
  double l_cl = 0.0;
  double total = 0.0;
};

enum class LossMode {
  kJoint,          // first stage: detection terms plus the contrastive term
  kReweighted,     // second stage: sample weight on detection terms only
};

inline constexpr double kProbabilityClamp = 1e-6;

// Penalty-reduced pixel-wise focal loss normalized by max(1, #objects).
// grad (optional) receives d(loss)/d(pred), same shape as pred.
double focal_heatmap_loss(const Tensor& pred, const TargetMaps& targets, double alpha,
                          double beta, Tensor* grad = nullptr);
// Overload on a raw target heatmap; cells equal to 1 count as objects.
double focal_heatmap_loss(const Tensor& pred, const Tensor& target, double alpha, double beta,
                          Tensor* grad = nullptr);

// Mean over center cells of the L1 error summed over both components.
double offset_loss(const Tensor& offset_pred, const TargetMaps& targets, Tensor* grad = nullptr);
double size_loss(const Tensor& size_pred, const TargetMaps& targets, Tensor* grad = nullptr);

// Combined objective. In kReweighted mode every detection term is multiplied
// by sample_weight and the contrastive term is omitted.
LossReport total_loss(const HeadOutputs& outputs, const TargetMaps& targets, double l_cl,
                      const LossWeights& weights, LossMode mode = LossMode::kJoint,
                      double sample_weight = 1.0);

// Same report plus d(total detection loss)/d(outputs) scaled by grad_scale
// (the contrastive term has no head gradient).
LossReport total_loss_with_grad(const HeadOutputs& outputs, const TargetMaps& targets,
                                double l_cl, const LossWeights& weights, LossMode mode,
                                double sample_weight, double grad_scale, HeadGradients& grad);

}  // namespace eccdet

#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "eccdet/data.hpp"
#include "eccdet/tensor.hpp"

namespace eccdet {

using Embedding = std::vector<double>;

inline constexpr double kDefaultTemperature = 0.07;

// Mean feature vector over mask-1 positions of a C x H x W field; nullopt
// when the mask is empty.
std::optional<Embedding> masked_average_pool(const Tensor& features, const Tensor& mask);

Embedding l2_normalize(const Embedding& v);
// Gradient of the unit vector u / |u| back to u.
Embedding l2_normalize_backward(const Embedding& raw, const Embedding& grad_unit);

struct ContrastiveBatch {
  std::vector<Embedding> fg_embeddings;  // unit length, one per image with foreground
  std::vector<Embedding> bg_embeddings;  // unit length, one per image
  double temperature = kDefaultTemperature;

  // Bookkeeping for the backward pass.
  std::vector<std::size_t> fg_image;
  std::vector<std::size_t> bg_image;
  std::vector<Embedding> fg_raw;
  std::vector<Embedding> bg_raw;
  std::vector<Tensor> fg_masks;  // per image, full resolution
  int image_height = 0;
  int image_width = 0;
};

// Upsamples each stride-4 feature to the input resolution, pools foreground
// (union of boxes) and background regions and L2-normalizes the results.
ContrastiveBatch build_contrastive_batch(const std::vector<const Tensor*>& features,
                                         const std::vector<std::vector<BoundingBox>>& boxes,
                                         int image_height, int image_width,
                                         double temperature = kDefaultTemperature);

struct ContrastiveLoss {
  double loss = 0.0;
  std::vector<Embedding> grad_fg;
  std::vector<Embedding> grad_bg;
  std::vector<std::size_t> positives;  // positive index for each fg query
  std::vector<double> per_query;
};

// Random pairing of each foreground query with a different foreground
// embedding; no embedding is used as a positive twice.
std::vector<std::size_t> draw_positive_pairing(std::size_t n_fg, std::uint64_t seed);

// InfoNCE averaged over foreground queries with all background embeddings as
// negatives. Returns zero (and zero gradients) with fewer than two foreground
// or no background embeddings.
ContrastiveLoss contrastive_loss(const ContrastiveBatch& batch, std::uint64_t seed);
ContrastiveLoss contrastive_loss(const ContrastiveBatch& batch,
                                 const std::vector<std::size_t>& positives);

// Gradient of the loss with respect to each image's stride-4 feature.
std::vector<Tensor> contrastive_backward(const ContrastiveBatch& batch,
                                         const ContrastiveLoss& loss,
                                         const std::vector<const Tensor*>& features);

double cosine_similarity(const Embedding& a, const Embedding& b);

}  // namespace eccdet

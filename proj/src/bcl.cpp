#include "eccdet/bcl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "eccdet/error.hpp"
#include "eccdet/nn.hpp"
#include "eccdet/targets.hpp"

namespace eccdet {
namespace {

constexpr double kNormEpsilon = 1e-12;

double dot(const Embedding& a, const Embedding& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

std::optional<Embedding> masked_average_pool(const Tensor& features, const Tensor& mask) {
  if (mask.height() != features.height() || mask.width() != features.width()) {
    throw Error(ErrorCode::kShape, "masked_average_pool: mask and feature sizes differ");
  }
  const auto m = mask.plane(0);
  const double count = std::accumulate(m.begin(), m.end(), 0.0);
  if (count <= 0.0) return std::nullopt;
  Embedding out(static_cast<std::size_t>(features.channels()), 0.0);
  for (int c = 0; c < features.channels(); ++c) {
    const auto f = features.plane(c);
    double s = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (m[i] != 0.0) s += f[i];
    }
    out[static_cast<std::size_t>(c)] = s / count;
  }
  return out;
}

Embedding l2_normalize(const Embedding& v) {
  const double n = std::max(std::sqrt(dot(v, v)), kNormEpsilon);
  Embedding out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
  return out;
}

Embedding l2_normalize_backward(const Embedding& raw, const Embedding& grad_unit) {
  const double n = std::max(std::sqrt(dot(raw, raw)), kNormEpsilon);
  const Embedding unit = l2_normalize(raw);
  const double proj = dot(unit, grad_unit);
  Embedding out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (grad_unit[i] - unit[i] * proj) / n;
  return out;
}

double cosine_similarity(const Embedding& a, const Embedding& b) {
  const double na = std::sqrt(dot(a, a));
  const double nb = std::sqrt(dot(b, b));
  if (na <= 0.0 || nb <= 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

ContrastiveBatch build_contrastive_batch(const std::vector<const Tensor*>& features,
                                         const std::vector<std::vector<BoundingBox>>& boxes,
                                         int image_height, int image_width, double temperature) {
  if (features.size() != boxes.size()) {
    throw Error(ErrorCode::kShape, "build_contrastive_batch: feature/box list sizes differ");
  }
  if (!(temperature > 0.0)) throw Error(ErrorCode::kConfig, "temperature must be positive");
  ContrastiveBatch batch;
  batch.temperature = temperature;
  batch.image_height = image_height;
  batch.image_width = image_width;
  for (std::size_t i = 0; i < features.size(); ++i) {
    const Tensor up = resize_bilinear(*features[i], image_height, image_width);
    RegionMasks masks = foreground_background_masks(boxes[i], image_height, image_width);
    if (auto fg = masked_average_pool(up, masks.foreground)) {
      batch.fg_embeddings.push_back(l2_normalize(*fg));
      batch.fg_raw.push_back(std::move(*fg));
      batch.fg_image.push_back(i);
    }
    if (auto bg = masked_average_pool(up, masks.background)) {
      batch.bg_embeddings.push_back(l2_normalize(*bg));
      batch.bg_raw.push_back(std::move(*bg));
      batch.bg_image.push_back(i);
    }
    batch.fg_masks.push_back(std::move(masks.foreground));
  }
  return batch;
}

std::vector<std::size_t> draw_positive_pairing(std::size_t n_fg, std::uint64_t seed) {
  std::vector<std::size_t> perm(n_fg);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  if (n_fg < 2) return perm;
  std::mt19937_64 rng(seed);
  for (;;) {
    std::shuffle(perm.begin(), perm.end(), rng);
    bool fixed_point = false;
    for (std::size_t i = 0; i < n_fg; ++i) fixed_point = fixed_point || perm[i] == i;
    if (!fixed_point) return perm;
  }
}

ContrastiveLoss contrastive_loss(const ContrastiveBatch& batch, std::uint64_t seed) {
  return contrastive_loss(batch, draw_positive_pairing(batch.fg_embeddings.size(), seed));
}

ContrastiveLoss contrastive_loss(const ContrastiveBatch& batch,
                                 const std::vector<std::size_t>& positives) {
  const std::size_t n_fg = batch.fg_embeddings.size();
  const std::size_t n_bg = batch.bg_embeddings.size();
  ContrastiveLoss out;
  const std::size_t dim = n_fg > 0 ? batch.fg_embeddings[0].size()
                                   : (n_bg > 0 ? batch.bg_embeddings[0].size() : 0);
  out.grad_fg.assign(n_fg, Embedding(dim, 0.0));
  out.grad_bg.assign(n_bg, Embedding(dim, 0.0));
  out.positives = positives;
  if (n_fg < 2 || n_bg < 1) return out;
  if (positives.size() != n_fg) {
    throw Error(ErrorCode::kShape, "contrastive_loss: one positive per query required");
  }
  const double inv_tau = 1.0 / batch.temperature;
  const double inv_n = 1.0 / static_cast<double>(n_fg);
  std::vector<double> logits(n_bg + 1);
  for (std::size_t q = 0; q < n_fg; ++q) {
    const std::size_t p = positives[q];
    if (p == q || p >= n_fg) throw Error(ErrorCode::kShape, "contrastive_loss: invalid positive");
    const Embedding& query = batch.fg_embeddings[q];
    logits[0] = dot(query, batch.fg_embeddings[p]) * inv_tau;
    for (std::size_t j = 0; j < n_bg; ++j) logits[j + 1] = dot(query, batch.bg_embeddings[j]) * inv_tau;
    const double top = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    for (double z : logits) denom += std::exp(z - top);
    const double lse = top + std::log(denom);
    const double li = lse - logits[0];
    out.per_query.push_back(li);
    out.loss += li * inv_n;

    // dL/dz_j = softmax_j - [j == positive]
    for (std::size_t j = 0; j <= n_bg; ++j) {
      const double s = std::exp(logits[j] - lse) - (j == 0 ? 1.0 : 0.0);
      const double coef = s * inv_tau * inv_n;
      const Embedding& key = j == 0 ? batch.fg_embeddings[p] : batch.bg_embeddings[j - 1];
      Embedding& d_key = j == 0 ? out.grad_fg[p] : out.grad_bg[j - 1];
      for (std::size_t d = 0; d < dim; ++d) {
        out.grad_fg[q][d] += coef * key[d];
        d_key[d] += coef * query[d];
      }
    }
  }
  return out;
}

std::vector<Tensor> contrastive_backward(const ContrastiveBatch& batch,
                                         const ContrastiveLoss& loss,
                                         const std::vector<const Tensor*>& features) {
  const std::size_t n_images = features.size();
  std::vector<Embedding> d_fg_pool(n_images), d_bg_pool(n_images);
  for (std::size_t k = 0; k < batch.fg_embeddings.size(); ++k) {
    d_fg_pool[batch.fg_image[k]] = l2_normalize_backward(batch.fg_raw[k], loss.grad_fg[k]);
  }
  for (std::size_t k = 0; k < batch.bg_embeddings.size(); ++k) {
    d_bg_pool[batch.bg_image[k]] = l2_normalize_backward(batch.bg_raw[k], loss.grad_bg[k]);
  }
  std::vector<Tensor> grads;
  grads.reserve(n_images);
  const int h = batch.image_height;
  const int w = batch.image_width;
  for (std::size_t i = 0; i < n_images; ++i) {
    const Tensor& f = *features[i];
    if (d_fg_pool[i].empty() && d_bg_pool[i].empty()) {
      grads.emplace_back(f.channels(), f.height(), f.width());
      continue;
    }
    const auto mask = batch.fg_masks[i].plane(0);
    const double fg_count = std::accumulate(mask.begin(), mask.end(), 0.0);
    const double bg_count = static_cast<double>(mask.size()) - fg_count;
    // The pooled means spread their gradient uniformly over each region.
    Tensor d_up(f.channels(), h, w);
    for (int c = 0; c < f.channels(); ++c) {
      const double g_fg = d_fg_pool[i].empty() ? 0.0 : d_fg_pool[i][static_cast<std::size_t>(c)] / fg_count;
      const double g_bg = d_bg_pool[i].empty() ? 0.0 : d_bg_pool[i][static_cast<std::size_t>(c)] / bg_count;
      auto plane = d_up.plane(c);
      for (std::size_t p = 0; p < plane.size(); ++p) plane[p] = mask[p] != 0.0 ? g_fg : g_bg;
    }
    grads.push_back(resize_bilinear_backward(d_up, f.height(), f.width()));
  }
  return grads;
}

}  // namespace eccdet

#include "eccdet/targets.hpp"

#include <algorithm>
#include <cmath>

#include "eccdet/error.hpp"

namespace eccdet {

double gaussian_radius(double height, double width, double min_overlap) {
  const double a1 = 1.0;
  const double b1 = height + width;
  const double c1 = width * height * (1.0 - min_overlap) / (1.0 + min_overlap);
  const double r1 = (b1 + std::sqrt(b1 * b1 - 4.0 * a1 * c1)) / 2.0;

  const double a2 = 4.0;
  const double b2 = 2.0 * (height + width);
  const double c2 = (1.0 - min_overlap) * width * height;
  const double r2 = (b2 + std::sqrt(b2 * b2 - 4.0 * a2 * c2)) / 2.0;

  const double a3 = 4.0 * min_overlap;
  const double b3 = -2.0 * min_overlap * (height + width);
  const double c3 = (min_overlap - 1.0) * width * height;
  const double r3 = (b3 + std::sqrt(b3 * b3 - 4.0 * a3 * c3)) / 2.0;
  return std::min({r1, r2, r3});
}

double gaussian_sigma(double height_cells, double width_cells) {
  return std::max(gaussian_radius(height_cells, width_cells) / 3.0, 1.0 / 3.0);
}

TargetMaps encode_targets(const std::vector<BoundingBox>& boxes, int image_height,
                          int image_width) {
  if (image_height % kOutputStride != 0 || image_width % kOutputStride != 0) {
    throw Error(ErrorCode::kShape, "encode_targets: image size must be divisible by 4");
  }
  const int rows = image_height / kOutputStride;
  const int cols = image_width / kOutputStride;
  TargetMaps maps;
  maps.heatmap = Tensor(1, rows, cols);
  maps.offset_target = Tensor(2, rows, cols);
  maps.size_target = Tensor(2, rows, cols);

  for (std::size_t k = 0; k < boxes.size(); ++k) {
    const BoundingBox box = boxes[k].clipped(image_width, image_height);
    if (!box.valid()) {
      maps.warnings.push_back("box " + std::to_string(k) + " empty after clipping; skipped");
      continue;
    }
    const double cx = box.center_x() / kOutputStride;
    const double cy = box.center_y() / kOutputStride;
    double w = box.width() / kOutputStride;
    double h = box.height() / kOutputStride;
    if (w < 1.0 || h < 1.0) {
      maps.warnings.push_back("box " + std::to_string(k) +
                              " smaller than one stride-4 cell; size clamped to 1");
      w = std::max(w, 1.0);
      h = std::max(h, 1.0);
    }
    const Cell cell{std::min(static_cast<int>(std::floor(cy)), rows - 1),
                    std::min(static_cast<int>(std::floor(cx)), cols - 1)};
    const double sigma = gaussian_sigma(h, w);
    const double denom = 2.0 * sigma * sigma;
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        const double dr = r - cell.row;
        const double dc = c - cell.col;
        const double g = std::exp(-(dr * dr + dc * dc) / denom);
        double& y = maps.heatmap(0, r, c);
        y = std::max(y, g);
      }
    }
    maps.offset_target(0, cell.row, cell.col) = cx - cell.col;
    maps.offset_target(1, cell.row, cell.col) = cy - cell.row;
    maps.size_target(0, cell.row, cell.col) = w;
    maps.size_target(1, cell.row, cell.col) = h;
    maps.center_indices.push_back(cell);
    maps.per_object_sigma.push_back(sigma);
  }
  return maps;
}

RegionMasks foreground_background_masks(const std::vector<BoundingBox>& boxes,
                                        int image_height, int image_width) {
  RegionMasks masks{Tensor(1, image_height, image_width), Tensor(1, image_height, image_width)};
  for (const auto& b : boxes) {
    // Pixel (x, y) covers [x, x+1) x [y, y+1); it belongs to the box when its
    // center does.
    const int x0 = std::max(0, static_cast<int>(std::ceil(b.x_lt - 0.5)));
    const int x1 = std::min(image_width, static_cast<int>(std::ceil(b.x_rb - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::ceil(b.y_lt - 0.5)));
    const int y1 = std::min(image_height, static_cast<int>(std::ceil(b.y_rb - 0.5)));
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) masks.foreground(0, y, x) = 1.0;
    }
  }
  for (std::size_t i = 0; i < masks.foreground.size(); ++i) {
    masks.background.values()[i] = 1.0 - masks.foreground.values()[i];
  }
  return masks;
}

}  // namespace eccdet

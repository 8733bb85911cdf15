#pragma once

#include <string>
#include <vector>

#include "eccdet/data.hpp"
#include "eccdet/tensor.hpp"

namespace eccdet {

inline constexpr int kOutputStride = 4;

struct Cell {
  int row = 0;
  int col = 0;
  bool operator==(const Cell&) const = default;
};

// Stride-4 supervision. Two-channel maps use channel 0 for x (column, width)
// and channel 1 for y (row, height).
struct TargetMaps {
  Tensor heatmap;        // 1 x H/4 x W/4
  Tensor offset_target;  // 2 x H/4 x W/4
  Tensor size_target;    // 2 x H/4 x W/4, in stride-4 cells
  std::vector<Cell> center_indices;
  std::vector<double> per_object_sigma;
  std::vector<std::string> warnings;

  std::size_t object_count() const { return center_indices.size(); }
};

// CornerNet radius: the largest corner displacement that keeps IoU with the
// ground-truth box above min_overlap.
double gaussian_radius(double height, double width, double min_overlap = 0.7);
// Size-adaptive standard deviation (radius / 3, floored at 1/3) for a box
// given in stride-4 cells.
double gaussian_sigma(double height_cells, double width_cells);

TargetMaps encode_targets(const std::vector<BoundingBox>& boxes, int image_height,
                          int image_width);

struct RegionMasks {
  Tensor foreground;  // 1 x H x W, 1 inside the union of boxes
  Tensor background;  // 1 - foreground
};

RegionMasks foreground_background_masks(const std::vector<BoundingBox>& boxes,
                                        int image_height, int image_width);

}  // namespace eccdet

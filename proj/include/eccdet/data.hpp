#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "eccdet/tensor.hpp"

namespace eccdet {

// Axis-aligned box in image pixel coordinates; x is the column axis, y the
// row axis.
struct BoundingBox {
  double x_lt = 0.0;
  double y_lt = 0.0;
  double x_rb = 0.0;
  double y_rb = 0.0;

  double width() const { return x_rb - x_lt; }
  double height() const { return y_rb - y_lt; }
  double area() const { return width() > 0.0 && height() > 0.0 ? width() * height() : 0.0; }
  double center_x() const { return 0.5 * (x_lt + x_rb); }
  double center_y() const { return 0.5 * (y_lt + y_rb); }
  bool valid() const { return x_lt < x_rb && y_lt < y_rb; }

  BoundingBox clipped(double width, double height) const;

  bool operator==(const BoundingBox&) const = default;
};

double iou(const BoundingBox& a, const BoundingBox& b);

// Image pixels are stored as a 3 x H x W tensor with values in [0, 1].
struct ImageSample {
  std::string id;
  Tensor pixels;
  std::vector<BoundingBox> boxes;

  int height() const { return pixels.height(); }
  int width() const { return pixels.width(); }
};

struct SizeBin {
  double min_area_fraction = 0.0;
  double max_area_fraction = 0.0;
  double probability = 0.0;
};

struct SynthConfig {
  int image_size = 128;
  int n_train = 64;
  int n_test = 16;
  // Box area as a fraction of the image area.
  std::vector<SizeBin> size_distribution = {
      {0.004, 0.01, 0.65}, {0.01, 0.04, 0.25}, {0.04, 0.12, 0.10}};
  double contrast_low = 0.15;
  double contrast_high = 0.35;
  std::uint64_t texture_seed = 7;
  double negative_rate = 0.2;
  int max_objects = 3;

  void validate() const;
  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
};

struct SyntheticSplit {
  std::vector<ImageSample> train;
  std::vector<ImageSample> test;
};

SyntheticSplit generate_synthetic(const SynthConfig& cfg);

// Renders one elliptical blob (axis-aligned) into an image and returns its
// tight box. Exposed for fixtures that need blobs of known geometry.
BoundingBox draw_blob(Tensor& pixels, double cx, double cy, double semi_x, double semi_y,
                      double contrast);

// COCO detection JSON. Category information is discarded on load; the saved
// file carries a single "polyp" category. With load_pixels false only ids and
// boxes are read and pixels stay empty.
std::vector<ImageSample> load_coco(const std::filesystem::path& annotation_path,
                                   const std::filesystem::path& image_root,
                                   bool load_pixels = true);
std::vector<ImageSample> load_coco(const nlohmann::json& doc,
                                   const std::filesystem::path& image_root,
                                   bool load_pixels = true);
// Writes images as 16-bit PNGs under image_root/<subdir>/ and the annotation
// document to annotation_path. File names in the document are relative to
// image_root.
void save_coco(const std::vector<ImageSample>& samples,
               const std::filesystem::path& annotation_path,
               const std::filesystem::path& image_root, const std::string& subdir);
nlohmann::json coco_document(const std::vector<ImageSample>& samples,
                             const std::string& subdir);

// Writes <dir>/train.json, <dir>/test.json, the image folders and
// <dir>/manifest.json recording the generating config.
void save_synthetic_dataset(const SyntheticSplit& split, const SynthConfig& cfg,
                            const std::filesystem::path& dir);

struct Normalization {
  double mean[3] = {0.5, 0.5, 0.5};
  double stddev[3] = {0.25, 0.25, 0.25};
};

Tensor to_network_input(const Tensor& pixels, const Normalization& norm);

struct AugmentConfig {
  int output_size = 128;
  double min_crop_scale = 0.6;
  bool flip = true;
  bool rotate = true;  // multiples of 90 degrees
  double min_visible_fraction = 0.25;
  int max_crop_attempts = 10;
};

// Affine map from source pixel coordinates to output pixel coordinates.
struct GeometricTransform {
  double a[2][2] = {{1.0, 0.0}, {0.0, 1.0}};
  double t[2] = {0.0, 0.0};

  std::pair<double, double> apply(double x, double y) const;
  std::pair<double, double> invert(double x, double y) const;
  BoundingBox apply(const BoundingBox& box) const;
  BoundingBox invert(const BoundingBox& box) const;
};

struct AugmentParams {
  double crop_x = 0.0;
  double crop_y = 0.0;
  double crop_size = 0.0;  // side of the square crop in source pixels
  bool flip = false;
  int quarter_turns = 0;
};

GeometricTransform make_transform(const AugmentParams& params, int output_size);

struct AugmentResult {
  ImageSample sample;
  GeometricTransform transform;
  // Index into the source box list for each surviving output box.
  std::vector<std::size_t> source_index;
};

// Geometric augmentation (crop, resize, flip, quarter-turn rotation). The
// output keeps pixel values in [0, 1]; normalization is applied by
// to_network_input.
AugmentResult augment_with_transform(const ImageSample& sample, std::uint64_t seed,
                                     const AugmentConfig& cfg);
ImageSample augment(const ImageSample& sample, std::uint64_t seed, const AugmentConfig& cfg);
// Applies explicit parameters; boxes below the visibility threshold are dropped.
AugmentResult apply_augment(const ImageSample& sample, const AugmentParams& params,
                            const AugmentConfig& cfg);

// Square resize without cropping, used at inference.
ImageSample resize_sample(const ImageSample& sample, int size);

// splitmix64 mixing of a base seed and a stream index.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace eccdet

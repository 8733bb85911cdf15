#include "eccdet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "eccdet/error.hpp"
#include "eccdet/image_io.hpp"

namespace eccdet {
namespace fs = std::filesystem;
using json = nlohmann::json;

BoundingBox BoundingBox::clipped(double width, double height) const {
  return {std::clamp(x_lt, 0.0, width), std::clamp(y_lt, 0.0, height),
          std::clamp(x_rb, 0.0, width), std::clamp(y_rb, 0.0, height)};
}

double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x_rb, b.x_rb) - std::max(a.x_lt, b.x_lt);
  const double ih = std::min(a.y_rb, b.y_rb) - std::max(a.y_lt, b.y_lt);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Synthetic generation

void SynthConfig::validate() const {
  if (image_size <= 0 || image_size % 32 != 0) {
    throw Error(ErrorCode::kConfig, "image_size must be a positive multiple of 32");
  }
  if (n_train < 0 || n_test < 0) throw Error(ErrorCode::kConfig, "negative split size");
  if (size_distribution.empty()) throw Error(ErrorCode::kConfig, "empty size_distribution");
  double total = 0.0;
  for (const auto& bin : size_distribution) {
    if (bin.probability < 0.0 || bin.min_area_fraction <= 0.0 ||
        bin.max_area_fraction <= bin.min_area_fraction || bin.max_area_fraction > 1.0) {
      throw Error(ErrorCode::kConfig, "invalid size_distribution bin");
    }
    total += bin.probability;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw Error(ErrorCode::kConfig, "size_distribution probabilities must sum to 1");
  }
  if (!(contrast_low > 0.0 && contrast_low <= contrast_high && contrast_high <= 1.0)) {
    throw Error(ErrorCode::kConfig, "contrast_range must lie within (0, 1]");
  }
  if (negative_rate < 0.0 || negative_rate > 1.0) {
    throw Error(ErrorCode::kConfig, "negative_rate must lie in [0, 1]");
  }
  if (max_objects < 1) throw Error(ErrorCode::kConfig, "max_objects must be >= 1");
}

json SynthConfig::to_json() const {
  json bins = json::array();
  for (const auto& b : size_distribution) {
    bins.push_back({{"min_area_fraction", b.min_area_fraction},
                    {"max_area_fraction", b.max_area_fraction},
                    {"probability", b.probability}});
  }
  return {{"image_size", image_size},     {"n_train", n_train},
          {"n_test", n_test},             {"size_distribution", bins},
          {"contrast_range", {contrast_low, contrast_high}},
          {"texture_seed", texture_seed}, {"negative_rate", negative_rate},
          {"max_objects", max_objects}};
}

SynthConfig SynthConfig::from_json(const json& j) {
  SynthConfig cfg;
  cfg.image_size = j.value("image_size", cfg.image_size);
  cfg.n_train = j.value("n_train", cfg.n_train);
  cfg.n_test = j.value("n_test", cfg.n_test);
  if (j.contains("size_distribution")) {
    cfg.size_distribution.clear();
    for (const auto& b : j.at("size_distribution")) {
      cfg.size_distribution.push_back({b.at("min_area_fraction").get<double>(),
                                       b.at("max_area_fraction").get<double>(),
                                       b.at("probability").get<double>()});
    }
  }
  if (j.contains("contrast_range")) {
    cfg.contrast_low = j.at("contrast_range").at(0).get<double>();
    cfg.contrast_high = j.at("contrast_range").at(1).get<double>();
  }
  cfg.texture_seed = j.value("texture_seed", cfg.texture_seed);
  cfg.negative_rate = j.value("negative_rate", cfg.negative_rate);
  cfg.max_objects = j.value("max_objects", cfg.max_objects);
  cfg.validate();
  return cfg;
}

namespace {

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

// Smooth lattice noise in [-1, 1] with the given lattice spacing in pixels.
std::vector<double> value_noise(int size, double spacing, std::mt19937_64& rng) {
  const int cells = static_cast<int>(std::ceil(size / spacing)) + 2;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> lattice(static_cast<std::size_t>(cells) * cells);
  for (double& v : lattice) v = u(rng);
  std::vector<double> out(static_cast<std::size_t>(size) * size);
  for (int y = 0; y < size; ++y) {
    const double gy = y / spacing;
    const int iy = static_cast<int>(gy);
    const double fy = smoothstep(gy - iy);
    for (int x = 0; x < size; ++x) {
      const double gx = x / spacing;
      const int ix = static_cast<int>(gx);
      const double fx = smoothstep(gx - ix);
      auto at = [&](int r, int c) { return lattice[static_cast<std::size_t>(r) * cells + c]; };
      const double top = at(iy, ix) * (1.0 - fx) + at(iy, ix + 1) * fx;
      const double bottom = at(iy + 1, ix) * (1.0 - fx) + at(iy + 1, ix + 1) * fx;
      out[static_cast<std::size_t>(y) * size + x] = top * (1.0 - fy) + bottom * fy;
    }
  }
  return out;
}

Tensor render_background(int size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double base[3] = {0.55 + 0.15 * u(rng), 0.30 + 0.12 * u(rng), 0.25 + 0.12 * u(rng)};
  const auto coarse = value_noise(size, 32.0, rng);
  const auto fine = value_noise(size, 10.0, rng);
  std::normal_distribution<double> grain(0.0, 0.015);
  Tensor pixels(3, size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * size + x;
      const double shade = 0.08 * coarse[i] + 0.04 * fine[i];
      for (int c = 0; c < 3; ++c) {
        pixels(c, y, x) = std::clamp(base[c] * (1.0 + shade) + grain(rng), 0.0, 1.0);
      }
    }
  }
  return pixels;
}

double quantize_down(double v) { return std::floor(v * 16.0) / 16.0; }

bool separated(const BoundingBox& a, const BoundingBox& b, double gap) {
  return a.x_rb + gap <= b.x_lt || b.x_rb + gap <= a.x_lt || a.y_rb + gap <= b.y_lt ||
         b.y_rb + gap <= a.y_lt;
}

ImageSample generate_one(const SynthConfig& cfg, const std::string& id, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int size = cfg.image_size;
  ImageSample sample;
  sample.id = id;
  sample.pixels = render_background(size, rng);

  int count = 0;
  if (u(rng) >= cfg.negative_rate) {
    const double r = u(rng);
    count = r < 0.5 ? 1 : (r < 0.8 ? 2 : 3);
    count = std::min(count, cfg.max_objects);
  }
  for (int k = 0; k < count; ++k) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      double pick = u(rng);
      const SizeBin* bin = &cfg.size_distribution.back();
      for (const auto& b : cfg.size_distribution) {
        if (pick < b.probability) {
          bin = &b;
          break;
        }
        pick -= b.probability;
      }
      const double fraction =
          bin->min_area_fraction + u(rng) * (bin->max_area_fraction - bin->min_area_fraction);
      const double area = fraction * size * size;
      const double aspect = 0.75 + u(rng) * (4.0 / 3.0 - 0.75);
      const double w = std::sqrt(area * aspect);
      const double h = area / w;
      const double semi_x = std::max(2.0, quantize_down(0.5 * w));
      const double semi_y = std::max(2.0, quantize_down(0.5 * h));
      if (2.0 * semi_x + 2.0 >= size || 2.0 * semi_y + 2.0 >= size) continue;
      const double cx = quantize_down(semi_x + 1.0 + u(rng) * (size - 2.0 * semi_x - 2.0));
      const double cy = quantize_down(semi_y + 1.0 + u(rng) * (size - 2.0 * semi_y - 2.0));
      const BoundingBox box{cx - semi_x, cy - semi_y, cx + semi_x, cy + semi_y};
      const bool clear = std::all_of(sample.boxes.begin(), sample.boxes.end(),
                                     [&](const BoundingBox& o) { return separated(box, o, 4.0); });
      if (!clear) continue;
      const double contrast = cfg.contrast_low + u(rng) * (cfg.contrast_high - cfg.contrast_low);
      sample.boxes.push_back(draw_blob(sample.pixels, cx, cy, semi_x, semi_y, contrast));
      break;
    }
  }
  return sample;
}

std::string make_id(const char* prefix, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%04d", prefix, index);
  return buf;
}

}  // namespace

BoundingBox draw_blob(Tensor& pixels, double cx, double cy, double semi_x, double semi_y,
                      double contrast) {
  static constexpr double kTint[3] = {1.0, 0.55, 0.45};
  const int y_begin = std::max(0, static_cast<int>(std::floor(cy - semi_y)));
  const int y_end = std::min(pixels.height(), static_cast<int>(std::ceil(cy + semi_y)) + 1);
  const int x_begin = std::max(0, static_cast<int>(std::floor(cx - semi_x)));
  const int x_end = std::min(pixels.width(), static_cast<int>(std::ceil(cx + semi_x)) + 1);
  for (int y = y_begin; y < y_end; ++y) {
    for (int x = x_begin; x < x_end; ++x) {
      const double dx = (x + 0.5 - cx) / semi_x;
      const double dy = (y + 0.5 - cy) / semi_y;
      const double r2 = dx * dx + dy * dy;
      if (r2 > 1.0) continue;
      const double profile = 0.6 + 0.4 * (1.0 - r2);
      for (int c = 0; c < 3; ++c) {
        pixels(c, y, x) = std::clamp(pixels(c, y, x) + contrast * profile * kTint[c], 0.0, 1.0);
      }
    }
  }
  return {cx - semi_x, cy - semi_y, cx + semi_x, cy + semi_y};
}

SyntheticSplit generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  SyntheticSplit split;
  split.train.reserve(static_cast<std::size_t>(cfg.n_train));
  split.test.reserve(static_cast<std::size_t>(cfg.n_test));
  for (int i = 0; i < cfg.n_train; ++i) {
    split.train.push_back(generate_one(cfg, make_id("train", i),
                                       mix_seed(cfg.texture_seed, static_cast<std::uint64_t>(i))));
  }
  for (int i = 0; i < cfg.n_test; ++i) {
    split.test.push_back(generate_one(
        cfg, make_id("test", i), mix_seed(cfg.texture_seed, (1ULL << 32) + i)));
  }
  return split;
}

// ---------------------------------------------------------------------------
// COCO

json coco_document(const std::vector<ImageSample>& samples, const std::string& subdir) {
  json images = json::array();
  json annotations = json::array();
  int ann_id = 1;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const int image_id = static_cast<int>(i) + 1;
    const std::string file = subdir.empty() ? s.id + ".png" : subdir + "/" + s.id + ".png";
    images.push_back(
        {{"id", image_id}, {"file_name", file}, {"width", s.width()}, {"height", s.height()}});
    for (const auto& b : s.boxes) {
      annotations.push_back({{"id", ann_id++},
                             {"image_id", image_id},
                             {"category_id", 1},
                             {"bbox", {b.x_lt, b.y_lt, b.width(), b.height()}},
                             {"area", b.area()},
                             {"iscrowd", 0}});
    }
  }
  return {{"images", images},
          {"annotations", annotations},
          {"categories", json::array({{{"id", 1}, {"name", "polyp"}}})}};
}

void save_coco(const std::vector<ImageSample>& samples, const fs::path& annotation_path,
               const fs::path& image_root, const std::string& subdir) {
  fs::create_directories(image_root / subdir);
  for (const auto& s : samples) write_png16(image_root / subdir / (s.id + ".png"), s.pixels);
  if (annotation_path.has_parent_path()) fs::create_directories(annotation_path.parent_path());
  std::ofstream out(annotation_path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + annotation_path.string());
  out << coco_document(samples, subdir).dump(1) << '\n';
}

std::vector<ImageSample> load_coco(const fs::path& annotation_path, const fs::path& image_root,
                                   bool load_pixels) {
  std::ifstream in(annotation_path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open annotation file " + annotation_path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, annotation_path.string() + ": " + e.what());
  }
  return load_coco(doc, image_root, load_pixels);
}

std::vector<ImageSample> load_coco(const json& doc, const fs::path& image_root, bool load_pixels) {
  if (!doc.is_object() || !doc.contains("images") || !doc.at("images").is_array()) {
    throw Error(ErrorCode::kParse, "document: missing \"images\" array");
  }
  std::vector<ImageSample> samples;
  std::map<json, std::size_t> by_image_id;
  std::set<std::string> seen_ids;
  const auto& images = doc.at("images");
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& rec = images[i];
    const std::string where = "images[" + std::to_string(i) + "]";
    if (!rec.is_object() || !rec.contains("id") || !rec.contains("file_name") ||
        !rec.at("file_name").is_string()) {
      throw Error(ErrorCode::kParse, where + ": expected object with id and file_name");
    }
    const std::string file = rec.at("file_name").get<std::string>();
    ImageSample s;
    s.id = fs::path(file).stem().string();
    if (!seen_ids.insert(s.id).second) {
      throw Error(ErrorCode::kParse, where + ": duplicate image name " + s.id);
    }
    if (load_pixels) {
      const fs::path path = image_root / file;
      if (!fs::exists(path)) throw Error(ErrorCode::kIo, "missing image file " + path.string());
      s.pixels = read_png(path);
    }
    by_image_id[rec.at("id")] = samples.size();
    samples.push_back(std::move(s));
  }
  if (doc.contains("annotations")) {
    const auto& anns = doc.at("annotations");
    if (!anns.is_array()) throw Error(ErrorCode::kParse, "document: \"annotations\" not an array");
    for (std::size_t i = 0; i < anns.size(); ++i) {
      const auto& rec = anns[i];
      std::string where = "annotations[" + std::to_string(i) + "]";
      if (rec.is_object() && rec.contains("id")) where += " (id " + rec.at("id").dump() + ")";
      if (!rec.is_object() || !rec.contains("image_id")) {
        throw Error(ErrorCode::kParse, where + ": missing image_id");
      }
      const auto it = by_image_id.find(rec.at("image_id"));
      if (it == by_image_id.end()) {
        throw Error(ErrorCode::kParse, where + ": unknown image_id " + rec.at("image_id").dump());
      }
      if (!rec.contains("bbox") || !rec.at("bbox").is_array() || rec.at("bbox").size() != 4 ||
          !std::all_of(rec.at("bbox").begin(), rec.at("bbox").end(),
                       [](const json& v) { return v.is_number(); })) {
        throw Error(ErrorCode::kParse, where + ": bbox must be 4 numbers");
      }
      const auto& bb = rec.at("bbox");
      const double x = bb[0].get<double>();
      const double y = bb[1].get<double>();
      const double w = bb[2].get<double>();
      const double h = bb[3].get<double>();
      if (!(w > 0.0 && h > 0.0)) {
        throw Error(ErrorCode::kParse, where + ": bbox width and height must be positive");
      }
      samples[it->second].boxes.push_back({x, y, x + w, y + h});
    }
  }
  return samples;
}

void save_synthetic_dataset(const SyntheticSplit& split, const SynthConfig& cfg,
                            const fs::path& dir) {
  fs::create_directories(dir);
  save_coco(split.train, dir / "train.json", dir, "train");
  save_coco(split.test, dir / "test.json", dir, "test");
  json manifest = {{"synth_config", cfg.to_json()},
                   {"train_annotations", "train.json"},
                   {"test_annotations", "test.json"},
                   {"n_train", split.train.size()},
                   {"n_test", split.test.size()}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Normalization and augmentation

Tensor to_network_input(const Tensor& pixels, const Normalization& norm) {
  Tensor out(pixels.channels(), pixels.height(), pixels.width());
  for (int c = 0; c < pixels.channels(); ++c) {
    const double mean = norm.mean[std::min(c, 2)];
    const double inv = 1.0 / norm.stddev[std::min(c, 2)];
    auto src = pixels.plane(c);
    auto dst = out.plane(c);
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = (src[i] - mean) * inv;
  }
  return out;
}

std::pair<double, double> GeometricTransform::apply(double x, double y) const {
  return {a[0][0] * x + a[0][1] * y + t[0], a[1][0] * x + a[1][1] * y + t[1]};
}

std::pair<double, double> GeometricTransform::invert(double x, double y) const {
  const double det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
  const double dx = x - t[0];
  const double dy = y - t[1];
  return {(a[1][1] * dx - a[0][1] * dy) / det, (-a[1][0] * dx + a[0][0] * dy) / det};
}

namespace {

template <typename Map>
BoundingBox map_box(const BoundingBox& box, Map&& map) {
  const auto [x0, y0] = map(box.x_lt, box.y_lt);
  const auto [x1, y1] = map(box.x_rb, box.y_rb);
  return {std::min(x0, x1), std::min(y0, y1), std::max(x0, x1), std::max(y0, y1)};
}

GeometricTransform compose(const GeometricTransform& first, const GeometricTransform& then) {
  GeometricTransform out;
  for (int r = 0; r < 2; ++r) {
    for (int c = 0; c < 2; ++c) {
      out.a[r][c] = then.a[r][0] * first.a[0][c] + then.a[r][1] * first.a[1][c];
    }
    out.t[r] = then.a[r][0] * first.t[0] + then.a[r][1] * first.t[1] + then.t[r];
  }
  return out;
}

double sample_bilinear(const Tensor& img, int c, double x, double y) {
  x = std::clamp(x, 0.0, static_cast<double>(img.width() - 1));
  y = std::clamp(y, 0.0, static_cast<double>(img.height() - 1));
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, img.width() - 1);
  const int y1 = std::min(y0 + 1, img.height() - 1);
  const double fx = x - x0;
  const double fy = y - y0;
  const double top = img(c, y0, x0) * (1.0 - fx) + img(c, y0, x1) * fx;
  const double bottom = img(c, y1, x0) * (1.0 - fx) + img(c, y1, x1) * fx;
  return top * (1.0 - fy) + bottom * fy;
}

// Output pixel (ox, oy) takes the source value at the inverse image of its
// center; source pixel centers sit at integer + 0.5.
Tensor render(const Tensor& src, const GeometricTransform& tf, int out_w, int out_h) {
  Tensor out(src.channels(), out_h, out_w);
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      const auto [sx, sy] = tf.invert(ox + 0.5, oy + 0.5);
      for (int c = 0; c < src.channels(); ++c) {
        out(c, oy, ox) = sample_bilinear(src, c, sx - 0.5, sy - 0.5);
      }
    }
  }
  return out;
}

}  // namespace

BoundingBox GeometricTransform::apply(const BoundingBox& box) const {
  return map_box(box, [this](double x, double y) { return apply(x, y); });
}

BoundingBox GeometricTransform::invert(const BoundingBox& box) const {
  return map_box(box, [this](double x, double y) { return invert(x, y); });
}

GeometricTransform make_transform(const AugmentParams& params, int output_size) {
  const double scale = output_size / params.crop_size;
  GeometricTransform tf;
  tf.a[0][0] = scale;
  tf.a[1][1] = scale;
  tf.t[0] = -params.crop_x * scale;
  tf.t[1] = -params.crop_y * scale;
  if (params.flip) {
    GeometricTransform flip;
    flip.a[0][0] = -1.0;
    flip.t[0] = output_size;
    tf = compose(tf, flip);
  }
  // Clockwise quarter turn in image coordinates: (x, y) -> (S - y, x).
  GeometricTransform turn;
  turn.a[0][0] = 0.0;
  turn.a[0][1] = -1.0;
  turn.a[1][0] = 1.0;
  turn.a[1][1] = 0.0;
  turn.t[0] = output_size;
  for (int k = 0; k < ((params.quarter_turns % 4) + 4) % 4; ++k) tf = compose(tf, turn);
  return tf;
}

AugmentResult apply_augment(const ImageSample& sample, const AugmentParams& params,
                            const AugmentConfig& cfg) {
  AugmentResult result;
  result.transform = make_transform(params, cfg.output_size);
  result.sample.id = sample.id;
  result.sample.pixels =
      render(sample.pixels, result.transform, cfg.output_size, cfg.output_size);
  const BoundingBox window{params.crop_x, params.crop_y, params.crop_x + params.crop_size,
                           params.crop_y + params.crop_size};
  for (std::size_t i = 0; i < sample.boxes.size(); ++i) {
    const BoundingBox& box = sample.boxes[i];
    const BoundingBox visible{std::max(box.x_lt, window.x_lt), std::max(box.y_lt, window.y_lt),
                              std::min(box.x_rb, window.x_rb), std::min(box.y_rb, window.y_rb)};
    if (!visible.valid() || box.area() <= 0.0 ||
        visible.area() < cfg.min_visible_fraction * box.area()) {
      continue;
    }
    BoundingBox mapped = result.transform.apply(visible).clipped(cfg.output_size, cfg.output_size);
    if (!mapped.valid()) continue;
    result.sample.boxes.push_back(mapped);
    result.source_index.push_back(i);
  }
  return result;
}

AugmentResult augment_with_transform(const ImageSample& sample, std::uint64_t seed,
                                     const AugmentConfig& cfg) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double side = std::min(sample.width(), sample.height());
  AugmentParams params;
  params.flip = cfg.flip && u(rng) < 0.5;
  params.quarter_turns = cfg.rotate ? static_cast<int>(u(rng) * 4.0) % 4 : 0;
  for (int attempt = 0; attempt < std::max(1, cfg.max_crop_attempts); ++attempt) {
    const double scale = cfg.min_crop_scale + u(rng) * (1.0 - cfg.min_crop_scale);
    params.crop_size = scale * side;
    params.crop_x = u(rng) * (sample.width() - params.crop_size);
    params.crop_y = u(rng) * (sample.height() - params.crop_size);
    AugmentResult result = apply_augment(sample, params, cfg);
    if (sample.boxes.empty() || !result.sample.boxes.empty()) return result;
  }
  // Center-crop fallback at full scale keeps every box.
  params.crop_size = side;
  params.crop_x = 0.5 * (sample.width() - side);
  params.crop_y = 0.5 * (sample.height() - side);
  return apply_augment(sample, params, cfg);
}

ImageSample augment(const ImageSample& sample, std::uint64_t seed, const AugmentConfig& cfg) {
  return augment_with_transform(sample, seed, cfg).sample;
}

ImageSample resize_sample(const ImageSample& sample, int size) {
  if (sample.width() == size && sample.height() == size) return sample;
  GeometricTransform tf;
  tf.a[0][0] = static_cast<double>(size) / sample.width();
  tf.a[1][1] = static_cast<double>(size) / sample.height();
  ImageSample out;
  out.id = sample.id;
  out.pixels = render(sample.pixels, tf, size, size);
  for (const auto& b : sample.boxes) out.boxes.push_back(tf.apply(b));
  return out;
}

}  // namespace eccdet

#include "doctest.h"

#include <fstream>
#include <random>

#include "eccdet/error.hpp"
#include "eccdet/model.hpp"
#include "support.hpp"

using namespace eccdet;
using testing::random_tensor;
using testing::rel_err;

namespace {

ModelConfig tiny_config(int n_stages = 2) {
  ModelConfig cfg;
  cfg.backbone_channels = {4, 6, 8, 8};
  cfg.fpn_channels = 6;
  cfg.head_channels = 5;
  cfg.n_stages = n_stages;
  return cfg;
}

void zero_params_with_prefix(ParameterStore& ps, const std::string& prefix) {
  for (auto& p : ps.all()) {
    if (p.name.starts_with(prefix)) std::fill(p.value.begin(), p.value.end(), 0.0);
  }
}

}  // namespace

TEST_CASE("backbone pyramid shapes for a 128x128 input") {
  ModelConfig cfg;
  cfg.backbone_channels = {16, 32, 64, 128};
  Detector det(cfg, 1);
  std::mt19937_64 rng(1);
  const FeaturePyramid pyr = det.backbone().forward(det.parameters(), random_tensor(3, 128, 128, rng), nullptr);
  const int expect[4][3] = {{16, 32, 32}, {32, 16, 16}, {64, 8, 8}, {128, 4, 4}};
  for (int i = 0; i < 4; ++i) {
    CHECK(pyr.levels[i].channels() == expect[i][0]);
    CHECK(pyr.levels[i].height() == expect[i][1]);
    CHECK(pyr.levels[i].width() == expect[i][2]);
    CHECK(pyr.levels[i].all_finite());
  }
}

TEST_CASE("inputs not divisible by 32 are rejected before compute") {
  Detector det(tiny_config(), 1);
  CHECK_THROWS_AS(det.forward(Tensor(3, 48, 64)), Error);
  CHECK_THROWS_AS(det.forward(Tensor(3, 64, 40)), Error);
  CHECK_THROWS_AS(det.forward(Tensor(1, 64, 64)), Error);
}

TEST_CASE("all-zero input gives finite, repeatable outputs") {
  Detector det(tiny_config(), 3);
  const HeadOutputs a = det.forward(Tensor(3, 64, 64));
  const HeadOutputs b = det.forward(Tensor(3, 64, 64));
  CHECK(a.main_heatmap.all_finite());
  CHECK(a.size_pred.all_finite());
  CHECK(a.main_heatmap.values() == b.main_heatmap.values());
  CHECK(a.offset_pred.values() == b.offset_pred.values());
}

TEST_CASE("shape contract holds for any input divisible by 32") {
  for (auto [h, w] : {std::pair{64, 64}, std::pair{64, 96}, std::pair{128, 32}}) {
    Detector det(tiny_config(3), 2);
    std::mt19937_64 rng(h + w);
    const HeadOutputs out = det.forward(random_tensor(3, h, w, rng));
    CHECK(out.intermediate_heatmaps.size() == 2);
    for (const auto& t : {out.main_heatmap, out.intermediate_heatmaps[0], out.intermediate_heatmaps[1]}) {
      CHECK(t.channels() == 1);
      CHECK(t.height() == h / 4);
      CHECK(t.width() == w / 4);
      for (double v : t.values()) {
        if (!(v > 0.0 && v < 1.0)) FAIL("heatmap value outside (0, 1)");
      }
    }
    CHECK(out.offset_pred.channels() == 2);
    CHECK(out.size_pred.channels() == 2);
    CHECK(out.size_pred.height() == h / 4);
    for (double v : out.size_pred.values()) CHECK(v > 0.0);
  }
}

TEST_CASE("fused feature has fpn_channels at stride 4") {
  ModelConfig cfg;
  cfg.fpn_channels = 64;
  Detector det(cfg, 4);
  std::mt19937_64 rng(4);
  const FeaturePyramid pyr = det.backbone().forward(det.parameters(), random_tensor(3, 128, 128, rng), nullptr);
  const Tensor fused = det.fpn().forward(det.parameters(), pyr, nullptr);
  CHECK(fused.channels() == 64);
  CHECK(fused.height() == 32);
  CHECK(fused.width() == 32);
}

TEST_CASE("SFA with zero flow reduces to fine + bilinear upsample of coarse") {
  ParameterStore ps;
  SemanticFlowAlign sfa(ps, "sfa", 3, true);
  std::mt19937_64 rng(5);
  for (auto& p : ps.all()) init_normal(p, rng, 0.3);
  zero_params_with_prefix(ps, "sfa.flow_conv");
  const Tensor high = random_tensor(3, 8, 8, rng);
  const Tensor low = random_tensor(3, 4, 4, rng);
  // Zero conv output gives flow = affine shift; zero that too.
  zero_params_with_prefix(ps, "sfa.flow_norm.shift");
  const Tensor out = sfa.forward(ps, high, low, nullptr);
  const Tensor want = high + resize_bilinear(low, 8, 8);
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out.values()[i] == doctest::Approx(want.values()[i]));

  SemanticFlowAlign plain(ps, "plain", 3, false);
  const Tensor out2 = plain.forward(ps, high, low, nullptr);
  for (std::size_t i = 0; i < out2.size(); ++i) CHECK(out2.values()[i] == doctest::Approx(want.values()[i]));
}

TEST_CASE("SFA rejects mismatched inputs") {
  ParameterStore ps;
  SemanticFlowAlign sfa(ps, "sfa", 3, true);
  CHECK_THROWS_AS(sfa.forward(ps, Tensor(3, 8, 8), Tensor(2, 4, 4), nullptr), Error);
  CHECK_THROWS_AS(sfa.forward(ps, Tensor(3, 8, 8), Tensor(3, 3, 4), nullptr), Error);
}

TEST_CASE("FPN with zeroed flows equals an additive top-down reference") {
  ModelConfig cfg = tiny_config();
  Detector det(cfg, 6);
  ParameterStore& ps = det.parameters();
  std::mt19937_64 rng(6);
  for (auto& p : ps.all()) init_normal(p, rng, 0.3);
  zero_params_with_prefix(ps, "fpn.align");
  FeaturePyramid pyr;
  const int sizes[4] = {16, 8, 4, 2};
  for (int i = 0; i < 4; ++i) pyr.levels[i] = random_tensor(cfg.backbone_channels[i], sizes[i], sizes[i], rng, -3, 3);
  const Tensor got = det.fpn().forward(ps, pyr, nullptr);

  // Reference: direct-loop 1x1 conv and affine per level, then coarse-to-fine sums.
  std::array<Tensor, 4> lat;
  for (int i = 0; i < 4; ++i) {
    const std::string base = "fpn.lateral" + std::to_string(i + 1);
    const auto& w = ps.find(base + ".conv.weight")->value;
    const auto& b = ps.find(base + ".conv.bias")->value;
    const auto& sc = ps.find(base + ".norm.scale")->value;
    const auto& sh = ps.find(base + ".norm.shift")->value;
    const Tensor& x = pyr.levels[i];
    lat[i] = Tensor(cfg.fpn_channels, x.height(), x.width());
    for (int o = 0; o < cfg.fpn_channels; ++o) {
      for (int y = 0; y < x.height(); ++y) {
        for (int xx = 0; xx < x.width(); ++xx) {
          double s = b[o];
          for (int c = 0; c < x.channels(); ++c) s += w[o * x.channels() + c] * x(c, y, xx);
          lat[i](o, y, xx) = sc[o] * s + sh[o];
        }
      }
    }
  }
  Tensor top = lat[3];
  for (int i = 2; i >= 0; --i) top = lat[i] + resize_bilinear(top, lat[i].height(), lat[i].width());
  REQUIRE(got.same_shape(top));
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(got.values()[i] == doctest::Approx(top.values()[i]).epsilon(1e-10));
  CHECK(got.all_finite());
}

TEST_CASE("head stage counts") {
  std::mt19937_64 rng(7);
  const Tensor img = random_tensor(3, 64, 64, rng);
  CHECK(Detector(tiny_config(1), 1).forward(img).intermediate_heatmaps.empty());
  CHECK(Detector(tiny_config(2), 1).forward(img).intermediate_heatmaps.size() == 1);
  for (int n = 1; n <= 4; ++n) {
    const Detector det(tiny_config(n), 1);
    CHECK(det.head().n_stages() == n);
    CHECK(det.forward(img).heatmap_count() == static_cast<std::size_t>(n));
  }
}

TEST_CASE("zero head parameters give heatmaps of exactly 0.5") {
  Detector det(tiny_config(3), 8);
  zero_params_with_prefix(det.parameters(), "head.");
  std::mt19937_64 rng(8);
  const HeadOutputs out = det.forward(random_tensor(3, 64, 64, rng));
  for (const auto& hm : out.intermediate_heatmaps) {
    for (double v : hm.values()) CHECK(v == 0.5);
  }
  for (double v : out.main_heatmap.values()) CHECK(v == 0.5);
  for (double v : out.size_pred.values()) CHECK(v == 1.0);
}

TEST_CASE("initial heatmap prior and zero-initialized projections") {
  Detector det(tiny_config(2), 9);
  CHECK(det.parameters().find("head.heatmap.second.bias")->value[0] == doctest::Approx(-2.19));
  CHECK(det.parameters().find("head.inter1.second.bias")->value[0] == doctest::Approx(-2.19));
  for (double v : det.parameters().find("head.inter1.proj.weight")->value) CHECK(v == 0.0);
  const Detector again(tiny_config(2), 9);
  CHECK(det.parameters() == again.parameters());
  const Detector other(tiny_config(2), 10);
  CHECK_FALSE(det.parameters() == other.parameters());
}

TEST_CASE("end-to-end parameter gradients match finite differences") {
  // Loss = sum of all head outputs (plus a probe on the fused feature) on a
  // 64x64 input; 20 random parameters per configuration.
  for (bool use_flow : {true, false}) {
    ModelConfig cfg = tiny_config(3);
    cfg.use_flow = use_flow;
    Detector det(cfg, 11);
    std::mt19937_64 rng(use_flow ? 11 : 12);
    for (auto& p : det.parameters().all()) {
      const double stddev = p.name.find("flow") != std::string::npos ? 0.3 : 0.25;
      init_normal(p, rng, stddev);
    }
    const Tensor img = random_tensor(3, 64, 64, rng);
    Detector::Trace trace;
    const HeadOutputs out = det.forward(img, &trace);
    const Tensor fused_probe = random_tensor(trace.fused.channels(), 16, 16, rng);

    const auto loss = [&] {
      Detector::Trace t;
      const HeadOutputs o = det.forward(img, &t);
      double s = 0.0;
      for (const auto& hm : o.intermediate_heatmaps) for (double v : hm.values()) s += v;
      for (double v : o.main_heatmap.values()) s += v;
      for (double v : o.offset_pred.values()) s += v;
      for (double v : o.size_pred.values()) s += v;
      return s + testing::dot(t.fused, fused_probe);
    };

    HeadGradients g = HeadGradients::zeros_like(out);
    for (auto& t : g.intermediate_heatmaps) t.fill(1.0);
    g.main_heatmap.fill(1.0);
    g.offset_pred.fill(1.0);
    g.size_pred.fill(1.0);
    Gradients grads(det.parameters());
    det.backward(trace, g, &fused_probe, grads);

    std::uniform_int_distribution<std::size_t> pick_param(0, det.parameters().size() - 1);
    int checked = 0;
    while (checked < 20) {
      const std::size_t p = pick_param(rng);
      auto& values = det.parameters()[p].value;
      const std::size_t i = std::uniform_int_distribution<std::size_t>(0, values.size() - 1)(rng);
      const double numeric = testing::central_diff(loss, &values[i], 1e-5);
      CHECK_MESSAGE(rel_err(grads[p][i], numeric, 1e-6) < 1e-3,
                    det.parameters()[p].name << "[" << i << "] analytic " << grads[p][i]
                                             << " numeric " << numeric);
      ++checked;
    }
  }
}

TEST_CASE("model config validation and JSON") {
  ModelConfig cfg;
  cfg.n_stages = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = ModelConfig{};
  cfg.head_kernel = 4;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = ModelConfig{};
  cfg.backbone_channels = {8, 8, 8};
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = tiny_config(4);
  cfg.use_flow = false;
  CHECK(ModelConfig::from_json(cfg.to_json()) == cfg);
}

TEST_CASE("checkpoint round trip and mismatch errors") {
  testing::TempDir dir("ckpt");
  Detector det(tiny_config(2), 13);
  CheckpointMeta meta;
  meta.input_size = 64;
  meta.norm_mean[1] = 0.4;
  save_checkpoint(dir / "a.ckpt", det, meta);

  CheckpointMeta loaded_meta;
  const Detector back = load_detector(dir / "a.ckpt", &loaded_meta);
  CHECK(back.config() == det.config());
  CHECK(back.parameters() == det.parameters());
  CHECK(loaded_meta.input_size == 64);
  CHECK(loaded_meta.norm_mean[1] == 0.4);
  std::mt19937_64 rng(13);
  const Tensor img = random_tensor(3, 64, 64, rng);
  CHECK(back.forward(img).main_heatmap.values() == det.forward(img).main_heatmap.values());

  const auto expect_ckpt_error = [](auto&& fn) {
    try {
      fn();
      FAIL("expected a checkpoint error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kCheckpoint);
    }
  };
  expect_ckpt_error([&] { load_detector(dir / "a.ckpt", tiny_config(3)); });

  // Truncated file.
  {
    std::ifstream in(dir / "a.ckpt", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream(dir / "cut.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    std::string bad = bytes;
    bad[0] = 'X';
    std::ofstream(dir / "magic.ckpt", std::ios::binary) << bad;
  }
  expect_ckpt_error([&] { load_detector(dir / "cut.ckpt"); });
  expect_ckpt_error([&] { load_detector(dir / "magic.ckpt"); });
  CHECK_THROWS_AS(load_detector(dir / "absent.ckpt"), Error);
}

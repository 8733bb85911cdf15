#include "doctest.h"

#include <random>

#include "eccdet/error.hpp"
#include "eccdet/isr.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace eccdet;

TEST_CASE("image IoU score examples") {
  const BoundingBox g{0, 0, 10, 10};
  CHECK(image_iou_score({{g, 0.9}}, {g}) == 1.0);
  CHECK(importance_weight(1.0) == 0.0);
  CHECK(image_iou_score({}, {g}) == 0.0);
  CHECK(importance_weight(0.0) == 1.0);
  CHECK(image_iou_score({{{0, 0, 10, 5}, 0.9}}, {g}) == doctest::Approx(0.5));
  CHECK(importance_weight(0.5) == doctest::Approx(0.5));

  // Negative frames: clean is easy, any detection is a miss.
  CHECK(image_iou_score({}, {}) == 1.0);
  CHECK(image_iou_score({{g, 0.4}}, {}) == 0.0);

  // Two boxes, one found: mean over ground truth.
  CHECK(image_iou_score({{g, 0.9}}, {g, {20, 20, 30, 30}}) == doctest::Approx(0.5));
  // The higher-scoring detection claims the box first.
  CHECK(image_iou_score({{{0, 0, 10, 5}, 0.3}, {g, 0.9}}, {g}) == 1.0);
  CHECK(image_iou_score({{{0, 0, 10, 5}, 0.9}, {g, 0.3}}, {g}) == doctest::Approx(0.5));
}

TEST_CASE("importance weight is monotone with a floor") {
  double previous = 2.0;
  for (int i = 0; i <= 100; ++i) {
    const double a = importance_weight(i / 100.0);
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
    CHECK(a <= previous);
    previous = a;
  }
  CHECK(importance_weight(0.95, 0.1) == doctest::Approx(0.1));
  CHECK(importance_weight(0.2, 0.1) == doctest::Approx(0.8));
}

TEST_CASE("spearman examples") {
  CHECK(spearman({0.1, 0.2, 0.3, 0.4}, {4.0, 3.0, 2.5, 0.1}) == doctest::Approx(-1.0));
  CHECK(spearman({0.1, 0.2, 0.3}, {1.0, 1.0, 1.0}) == 0.0);
  CHECK(spearman({0.5}, {1.0}) == 0.0);
  // Ranks (1 3 2 5 4) vs (4 3 5 1 2): sum d^2 = 38, rho = 1 - 6 * 38 / (5 * 24).
  const std::vector<double> a{0.1, 0.5, 0.3, 0.9, 0.7}, b{2.0, 1.0, 3.0, 0.5, 0.8};
  CHECK(spearman(a, b) == doctest::Approx(-0.9));
  CHECK(spearman(a, b) == doctest::Approx(oracle::spearman(a, b)));

  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> tie(0, 5);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> x(12), y(12);
    for (auto& v : x) v = tie(rng);
    for (auto& v : y) v = tie(rng) * 0.5;
    CHECK(spearman(x, y) == doctest::Approx(oracle::spearman(x, y)).epsilon(1e-12));
  }
  CHECK_THROWS_AS(spearman({1, 2}, {1, 2, 3}), Error);
}

TEST_CASE("type-7 quantiles") {
  CHECK(quantile({4, 1, 3, 2}, 0.25) == doctest::Approx(1.75));
  CHECK(quantile({4, 1, 3, 2}, 0.75) == doctest::Approx(3.25));
  CHECK(quantile({4, 1, 3, 2}, 0.0) == 1.0);
  CHECK(quantile({4, 1, 3, 2}, 1.0) == 4.0);
  CHECK(quantile({7}, 0.3) == 7.0);
  CHECK_THROWS_AS(quantile({}, 0.5), Error);
  CHECK_THROWS_AS(quantile({1, 2}, 1.5), Error);
}

TEST_CASE("IoU-loss scatter statistics") {
  WeightTable t;
  const double s[8] = {0.9, 0.8, 0.75, 0.5, 0.4, 0.2, 0.1, 0.0};
  const double l[8] = {3.0, 0.1, 0.2, 1.0, 1.5, 0.05, 2.0, 2.5};
  std::map<std::string, double> losses;
  for (int i = 0; i < 8; ++i) {
    const std::string id = "i" + std::to_string(i);
    t.entries[id] = {s[i], 1 - s[i]};
    losses[id] = l[i];
  }
  const IouLossScatter sc = iou_loss_scatter(t, losses);
  CHECK(sc.points.size() == 8);
  // Sorted losses 0.05 0.1 0.2 1.0 1.5 2.0 2.5 3.0: Q1 = 0.175, Q3 = 2.125.
  CHECK(sc.loss_q1 == doctest::Approx(0.175));
  CHECK(sc.loss_q3 == doctest::Approx(2.125));
  // i0 (IoU 0.9, loss 3.0) is high-IoU/high-loss; i5 (IoU 0.2, loss 0.05) is low/low.
  CHECK(sc.abnormal == 2);
  CHECK(sc.abnormal_fraction == doctest::Approx(0.25));
  CHECK(count_abnormal(sc, sc.loss_q1, sc.loss_q3) == sc.abnormal);
  // Fixed regions: Q3 = 0.05 adds i1 and i2 (IoU > 0.7); Q1 = 0 drops i5.
  CHECK(count_abnormal(sc, 0.0, 0.05) == 3);
  std::vector<double> ious(s, s + 8), ls(l, l + 8);
  CHECK(sc.spearman == doctest::Approx(oracle::spearman(ious, ls)));

  losses.erase("i3");
  losses["extra"] = 1.0;
  try {
    iou_loss_scatter(t, losses);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kMissingId);
    const std::string msg = e.what();
    CHECK(msg.find("i3") != std::string::npos);
    CHECK(msg.find("extra") != std::string::npos);
  }
}

TEST_CASE("weight table persistence and lookup") {
  testing::TempDir dir("isr");
  WeightTable t;
  t.floor = 0.05;
  t.entries["a"] = {0.25, 0.75};
  t.entries["b"] = {1.0, 0.05};
  t.save(dir / "w.table");
  CHECK(WeightTable::load(dir / "w.table") == t);
  CHECK(t.mean_alpha() == doctest::Approx(0.4));
  CHECK(t.at("a").alpha == 0.75);
  try {
    t.at("zzz");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kMissingId);
    CHECK(std::string(e.what()).find("zzz") != std::string::npos);
  }
  nlohmann::json bad = t.to_json();
  bad["records"][0]["alpha"] = 1.5;
  CHECK_THROWS_AS(WeightTable::from_json(bad), Error);
  CHECK_THROWS_AS(WeightTable::load(dir / "none.table"), Error);

  std::map<std::string, double> losses{{"a", 0.5}, {"b", 1.25}};
  save_sample_losses(dir / "l.csv", losses);
  CHECK(load_sample_losses(dir / "l.csv") == losses);
}

TEST_CASE("mining with an untrained model") {
  SynthConfig sc;
  sc.image_size = 64;
  sc.n_train = 12;
  sc.n_test = 2;
  const SyntheticSplit split = generate_synthetic(sc);
  ModelConfig mc;
  mc.backbone_channels = {4, 6, 8, 8};
  mc.fpn_channels = 6;
  const Detector model(mc, 2);
  CheckpointMeta meta;
  meta.input_size = 64;
  const DecodeConfig dc;

  const WeightTable t = mine_weights(model, meta, split.train, dc);
  CHECK(t.entries.size() == split.train.size());
  for (const auto& s : split.train) CHECK(t.entries.count(s.id) == 1);

  double mean = 0.0;
  for (const auto& s : split.train) {
    const double iou = image_iou_score(detect(model, meta, s, dc), s.boxes);
    CHECK(t.at(s.id).s == doctest::Approx(iou));
    mean += (1.0 - iou) / static_cast<double>(split.train.size());
  }
  CHECK(t.mean_alpha() == doctest::Approx(mean));
  CHECK(t.mean_alpha() > 0.5);
  CHECK(mine_weights(model, meta, split.train, dc) == t);
  CHECK_THROWS_AS(mine_weights(model, meta, {}, dc), Error);

  testing::TempDir dir("mine");
  save_checkpoint(dir / "m.ckpt", model, meta);
  CHECK(mine_weights(dir / "m.ckpt", mc, split.train, dc) == t);
  ModelConfig other = mc;
  other.n_stages = 3;
  CHECK_THROWS_AS(mine_weights(dir / "m.ckpt", other, split.train, dc), Error);
}

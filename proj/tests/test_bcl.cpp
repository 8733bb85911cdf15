#include "doctest.h"

#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include "eccdet/bcl.hpp"
#include "eccdet/error.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace eccdet;
using testing::random_tensor;
using testing::rel_err;

namespace {

Embedding random_unit(std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Embedding v(dim);
  for (auto& x : v) x = n(rng);
  return l2_normalize(v);
}

ContrastiveBatch random_batch(std::size_t n_fg, std::size_t n_bg, std::size_t dim,
                              std::mt19937_64& rng, double tau = kDefaultTemperature) {
  ContrastiveBatch b;
  b.temperature = tau;
  for (std::size_t i = 0; i < n_fg; ++i) b.fg_embeddings.push_back(random_unit(dim, rng));
  for (std::size_t i = 0; i < n_bg; ++i) b.bg_embeddings.push_back(random_unit(dim, rng));
  return b;
}

double norm(const Embedding& v) { return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0)); }

}  // namespace

TEST_CASE("masked average pooling") {
  std::mt19937_64 rng(1);
  const Tensor f = random_tensor(3, 2, 2, rng);

  SUBCASE("full mask is the global mean") {
    const auto e = masked_average_pool(f, Tensor(1, 2, 2, 1.0));
    REQUIRE(e);
    for (int c = 0; c < 3; ++c) {
      const auto p = f.plane(c);
      CHECK((*e)[c] == doctest::Approx(std::accumulate(p.begin(), p.end(), 0.0) / 4.0));
    }
  }
  SUBCASE("constant field pools to the constant") {
    Tensor mask(1, 2, 2);
    mask(0, 1, 0) = 1.0;
    const auto e = masked_average_pool(Tensor(3, 2, 2, 0.75), mask);
    REQUIRE(e);
    for (double v : *e) CHECK(v == 0.75);
  }
  SUBCASE("two selected cells of a 2x2 field") {
    Tensor field(2, 2, 2);
    // channel 0: [[1, 2], [3, 4]]; channel 1: [[10, 20], [30, 40]]
    for (int y = 0; y < 2; ++y) {
      for (int x = 0; x < 2; ++x) {
        field(0, y, x) = 1 + 2 * y + x;
        field(1, y, x) = 10 * (1 + 2 * y + x);
      }
    }
    Tensor mask(1, 2, 2);
    mask(0, 0, 1) = 1.0;
    mask(0, 1, 0) = 1.0;
    const auto e = masked_average_pool(field, mask);
    REQUIRE(e);
    CHECK((*e)[0] == doctest::Approx(2.5));
    CHECK((*e)[1] == doctest::Approx(25.0));
  }
  SUBCASE("empty mask signals absence") {
    CHECK_FALSE(masked_average_pool(f, Tensor(1, 2, 2)).has_value());
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(masked_average_pool(f, Tensor(1, 3, 2, 1.0)), Error);
  }
}

TEST_CASE("contrastive batch counting and normalization") {
  std::mt19937_64 rng(2);
  const Tensor a = random_tensor(8, 8, 8, rng);
  const Tensor b = random_tensor(8, 8, 8, rng);
  const std::vector<BoundingBox> box{{4, 4, 12, 14}};

  const ContrastiveBatch both = build_contrastive_batch({&a, &b}, {box, {{10, 10, 20, 16}}}, 32, 32);
  CHECK(both.fg_embeddings.size() == 2);
  CHECK(both.bg_embeddings.size() == 2);

  const ContrastiveBatch neg = build_contrastive_batch({&a, &b}, {box, {}}, 32, 32);
  CHECK(neg.fg_embeddings.size() == 1);
  CHECK(neg.bg_embeddings.size() == 2);
  CHECK(neg.fg_image == std::vector<std::size_t>{0});

  for (const auto* list : {&both.fg_embeddings, &both.bg_embeddings, &neg.bg_embeddings}) {
    for (const auto& e : *list) CHECK(norm(e) == doctest::Approx(1.0).epsilon(1e-5));
  }
  CHECK_THROWS_AS(build_contrastive_batch({&a}, {box, box}, 32, 32), Error);
  CHECK_THROWS_AS(build_contrastive_batch({&a}, {box}, 32, 32, 0.0), Error);
}

TEST_CASE("equal similarities give log(1 + |negatives|)") {
  ContrastiveBatch b;
  const Embedding e = l2_normalize({1.0, 2.0, -1.0});
  b.fg_embeddings = {e, e, e};
  b.bg_embeddings = {e, e, e, e};
  const ContrastiveLoss l = contrastive_loss(b, 5);
  CHECK(l.loss == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  for (double li : l.per_query) CHECK(li == doctest::Approx(1.6094379124341003));
}

TEST_CASE("dominant positive drives the loss to zero") {
  ContrastiveBatch b;
  const Embedding e{1.0, 0.0};
  const Embedding opposite{-1.0, 0.0};
  b.fg_embeddings = {e, e};
  b.bg_embeddings = {opposite, opposite, opposite};
  const ContrastiveLoss l = contrastive_loss(b, 0);
  // log(1 + 3 exp(-2 / 0.07)), about 1.1e-12
  CHECK(l.loss >= 0.0);
  CHECK(l.loss < 1e-8);
  CHECK(l.loss == doctest::Approx(std::log1p(3.0 * std::exp(-2.0 / 0.07))).epsilon(1e-6));
}

TEST_CASE("skip rule: fewer than two foreground or no background") {
  std::mt19937_64 rng(3);
  for (auto [n_fg, n_bg] : {std::pair<std::size_t, std::size_t>{0, 3}, {1, 3}, {3, 0}}) {
    const ContrastiveBatch b = random_batch(n_fg, n_bg, 4, rng);
    const ContrastiveLoss l = contrastive_loss(b, 1);
    CHECK(l.loss == 0.0);
    for (const auto& g : l.grad_fg) for (double v : g) CHECK(v == 0.0);
    for (const auto& g : l.grad_bg) for (double v : g) CHECK(v == 0.0);
  }
}

TEST_CASE("4x4 embedding fixture matches the direct formula") {
  ContrastiveBatch b;
  b.temperature = 0.5;
  b.fg_embeddings = {l2_normalize({1, 0, 0, 0}), l2_normalize({1, 1, 0, 0}),
                     l2_normalize({0.5, -0.5, 1, 0}), l2_normalize({0, 0, 1, 1})};
  b.bg_embeddings = {l2_normalize({0, 1, 0, 0}), l2_normalize({0, 0, 0, 1}),
                     l2_normalize({-1, 0.5, 0, 0.5}), l2_normalize({1, -1, -1, 1})};
  const std::vector<std::size_t> pos{1, 0, 3, 2};
  CHECK(std::abs(contrastive_loss(b, pos).loss - oracle::infonce(b, pos)) < 1e-9);
  const std::vector<std::size_t> cyc{3, 2, 0, 1};
  CHECK(std::abs(contrastive_loss(b, cyc).loss - oracle::infonce(b, cyc)) < 1e-9);
  CHECK_THROWS_AS(contrastive_loss(b, std::vector<std::size_t>{0, 1, 2, 3}), Error);
  CHECK_THROWS_AS(contrastive_loss(b, std::vector<std::size_t>{1, 0}), Error);
}

TEST_CASE("random batches match the direct formula and stay non-negative") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const ContrastiveBatch b = random_batch(2 + trial % 5, 1 + trial % 4, 6, rng, 0.2 + 0.05 * (trial % 3));
    const ContrastiveLoss l = contrastive_loss(b, trial);
    CHECK(l.loss >= 0.0);
    CHECK(l.loss == doctest::Approx(oracle::infonce(b, l.positives)).epsilon(1e-10));
  }
}

TEST_CASE("positive pairing is a derangement") {
  for (std::size_t n = 2; n < 10; ++n) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto p = draw_positive_pairing(n, seed);
      REQUIRE(p.size() == n);
      CHECK(std::set<std::size_t>(p.begin(), p.end()).size() == n);
      for (std::size_t i = 0; i < n; ++i) CHECK(p[i] != i);
      CHECK(draw_positive_pairing(n, seed) == p);
    }
  }
  CHECK(draw_positive_pairing(2, 9) == std::vector<std::size_t>{1, 0});
}

TEST_CASE("embedding gradients match finite differences") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    ContrastiveBatch b = random_batch(3 + trial % 2, 3, 5, rng, 0.3);
    const auto pos = draw_positive_pairing(b.fg_embeddings.size(), trial);
    const ContrastiveLoss l = contrastive_loss(b, pos);
    const auto f = [&] { return contrastive_loss(b, pos).loss; };
    for (std::size_t k = 0; k < b.fg_embeddings.size(); ++k) {
      for (std::size_t d = 0; d < 5; ++d) {
        CHECK(rel_err(l.grad_fg[k][d], testing::central_diff(f, &b.fg_embeddings[k][d])) < 1e-4);
      }
    }
    for (std::size_t k = 0; k < b.bg_embeddings.size(); ++k) {
      for (std::size_t d = 0; d < 5; ++d) {
        CHECK(rel_err(l.grad_bg[k][d], testing::central_diff(f, &b.bg_embeddings[k][d])) < 1e-4);
      }
    }
  }
}

TEST_CASE("feature gradients through pooling and upsampling match finite differences") {
  std::mt19937_64 rng(6);
  std::vector<Tensor> feats;
  for (int i = 0; i < 3; ++i) feats.push_back(random_tensor(4, 4, 4, rng));
  const std::vector<std::vector<BoundingBox>> boxes{{{2, 3, 9, 10}}, {{6, 4, 14, 12}, {1, 1, 4, 5}}, {}};
  const std::vector<const Tensor*> ptrs{&feats[0], &feats[1], &feats[2]};
  const double tau = 0.3;
  const auto f = [&] {
    return contrastive_loss(build_contrastive_batch(ptrs, boxes, 16, 16, tau), std::vector<std::size_t>{1, 0}).loss;
  };
  const ContrastiveBatch b = build_contrastive_batch(ptrs, boxes, 16, 16, tau);
  const ContrastiveLoss l = contrastive_loss(b, std::vector<std::size_t>{1, 0});
  REQUIRE(l.loss > 0.0);
  const std::vector<Tensor> g = contrastive_backward(b, l, ptrs);
  REQUIRE(g.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < feats[i].size(); j += 3) {
      const double numeric = testing::central_diff(f, &feats[i].values()[j]);
      CHECK(rel_err(g[i].values()[j], numeric, 1e-8) < 1e-4);
    }
  }
}

TEST_CASE("loss is invariant to image order under the same pairing") {
  std::mt19937_64 rng(7);
  const ContrastiveBatch b = random_batch(5, 4, 6, rng);
  const auto pos = draw_positive_pairing(5, 11);
  // Relabel queries through a permutation and carry the pairing along.
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  std::vector<std::size_t> inv(5);
  for (std::size_t i = 0; i < 5; ++i) inv[perm[i]] = i;
  ContrastiveBatch shuffled = b;
  std::vector<std::size_t> pos2(5);
  for (std::size_t i = 0; i < 5; ++i) {
    shuffled.fg_embeddings[i] = b.fg_embeddings[perm[i]];
    pos2[i] = inv[pos[perm[i]]];
  }
  std::reverse(shuffled.bg_embeddings.begin(), shuffled.bg_embeddings.end());
  CHECK(contrastive_loss(shuffled, pos2).loss == doctest::Approx(contrastive_loss(b, pos).loss).epsilon(1e-12));
}

TEST_CASE("loss decreases as the positive similarity grows") {
  ContrastiveBatch b;
  b.bg_embeddings = {l2_normalize({0, 1, 0}), l2_normalize({0, 0, 1}), l2_normalize({-1, 1, 1})};
  double previous = std::numeric_limits<double>::infinity();
  for (int k = 0; k <= 10; ++k) {
    const double angle = 3.0 * (1.0 - k / 10.0);
    b.fg_embeddings = {{1, 0, 0}, {std::cos(angle), 0, std::sin(angle)}};
    const double l = contrastive_loss(b, std::vector<std::size_t>{1, 0}).per_query[0];
    CHECK(l < previous);
    previous = l;
  }
}

TEST_CASE("cosine similarity and normalization backward") {
  CHECK(cosine_similarity({1, 0}, {0, 2}) == 0.0);
  CHECK(cosine_similarity({1, 1}, {2, 2}) == doctest::Approx(1.0));
  CHECK(cosine_similarity({0, 0}, {1, 0}) == 0.0);
  Embedding raw{0.3, -1.2, 0.8};
  const Embedding g{0.5, 0.1, -0.7};
  const Embedding analytic = l2_normalize_backward(raw, g);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto f = [&] {
      const Embedding u = l2_normalize(raw);
      return u[0] * g[0] + u[1] * g[1] + u[2] * g[2];
    };
    CHECK(rel_err(analytic[i], testing::central_diff(f, &raw[i])) < 1e-6);
  }
}

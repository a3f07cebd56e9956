#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "dsai/model.hpp"
#include "test_helpers.hpp"

using namespace dsai;
using dsai::testing::randn;
using dsai::testing::tiny_arch;

namespace {

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(Real)) == 0;
}

}  // namespace

TEST_CASE("a single token is pooled with weight one") {
  Model model(tiny_arch(), 1);
  Rng rng(2);
  Tensor z = randn({2, 1, 8}, rng, false);
  ForwardCapture capture;
  ForwardCtx ctx;
  ctx.capture = &capture;
  Tensor pooled = model.aggregate(z, "fine", ctx);
  CHECK(pooled.shape() == std::vector<std::size_t>{2, 8});
  CHECK(same_bits(pooled, reshape(z, {2, 8})));
  REQUIRE(capture.aggregation.size() == 2);
  for (const auto& rec : capture.aggregation) {
    CHECK(rec.branch == "fine");
    REQUIRE(rec.weights.size() == 1);
    CHECK(rec.weights[0] == 1.0);
  }
}

TEST_CASE("pooling weights are a softmax over scored tokens") {
  Model model(tiny_arch(), 3);
  const std::size_t n = 5, d = 8;
  Rng rng(4);
  Tensor z = randn({2, n, d}, rng, false);
  ForwardCapture capture;
  ForwardCtx ctx;
  ctx.capture = &capture;
  Tensor pooled = model.aggregate(z, "coarse", ctx);

  Tensor q = model.params().param("head.q");
  REQUIRE(capture.aggregation.size() == 2);
  for (std::size_t b = 0; b < 2; ++b) {
    const auto& rec = capture.aggregation[b];
    CHECK(rec.batch == b);
    REQUIRE(rec.weights.size() == n);

    std::vector<Real> scores(n);
    Real mx = -1e300;
    for (std::size_t t = 0; t < n; ++t) {
      Real s = 0.0;
      for (std::size_t i = 0; i < d; ++i) s += z.data()[(b * n + t) * d + i] * q.data()[i];
      scores[t] = s;
      mx = std::max(mx, s);
    }
    Real zsum = 0.0;
    for (Real& s : scores) {
      s = std::exp(s - mx);
      zsum += s;
    }
    Real wsum = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      const Real w = scores[t] / zsum;
      CHECK(rec.weights[t] == doctest::Approx(w).epsilon(1e-12));
      CHECK(rec.weights[t] >= 0.0);
      wsum += rec.weights[t];
    }
    CHECK(wsum == doctest::Approx(1.0).epsilon(1e-12));

    for (std::size_t i = 0; i < d; ++i) {
      Real acc = 0.0;
      for (std::size_t t = 0; t < n; ++t) {
        acc += rec.weights[t] * z.data()[(b * n + t) * d + i];
      }
      CHECK(pooled.data()[b * d + i] == doctest::Approx(acc).epsilon(1e-12));
    }
  }
}

TEST_CASE("zeroing the query reduces pooling to the token mean") {
  Model model(tiny_arch(), 5);
  Tensor q = model.params().param("head.q");
  std::fill(q.data(), q.data() + q.size(), 0.0);

  const std::size_t n = 4, d = 8;
  Rng rng(6);
  Tensor z = randn({1, n, d}, rng, false);
  ForwardCapture capture;
  ForwardCtx ctx;
  ctx.capture = &capture;
  Tensor pooled = model.aggregate(z, "fine", ctx);
  for (Real w : capture.aggregation[0].weights) {
    CHECK(w == doctest::Approx(0.25).epsilon(1e-15));
  }
  for (std::size_t i = 0; i < d; ++i) {
    Real mean = 0.0;
    for (std::size_t t = 0; t < n; ++t) mean += z.data()[t * d + i];
    mean /= static_cast<Real>(n);
    CHECK(pooled.data()[i] == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("mean mode equals adaptive mode with a zero query, bit for bit") {
  ModelConfig adaptive = tiny_arch();
  ModelConfig mean = tiny_arch();
  mean.aggregation = "mean";
  Model a(adaptive, 7);
  Model m(mean, 7);
  Tensor q = a.params().param("head.q");
  std::fill(q.data(), q.data() + q.size(), 0.0);

  Rng rng(8);
  Tensor z = randn({3, 4, 8}, rng, false);
  ForwardCtx ctx;
  CHECK(same_bits(a.aggregate(z, "fine", ctx), m.aggregate(z, "fine", ctx)));

  Tensor x = randn({2, 4, 64}, rng, false);
  CHECK(same_bits(a.forward(x, ctx), m.forward(x, ctx)));
}

TEST_CASE("classifier emits raw scores") {
  Model model(tiny_arch(), 9);
  Rng rng(10);
  Tensor x = randn({4, 4, 64}, rng, false);
  ForwardCtx ctx;
  Tensor logits = model.forward(x, ctx);
  Real mn = 1e300;
  for (std::size_t b = 0; b < 4; ++b) {
    Real sum = 0.0;
    for (std::size_t k = 0; k < 2; ++k) {
      sum += logits.data()[b * 2 + k];
      mn = std::min(mn, logits.data()[b * 2 + k]);
    }
    CHECK(sum != doctest::Approx(1.0).epsilon(1e-6));
  }
  CHECK(mn < 0.0);
}

TEST_CASE("a zero classifier maps every trial to zero logits") {
  Model model(tiny_arch(), 11);
  for (const char* name : {"cls.w", "cls.b"}) {
    Tensor t = model.params().param(name);
    std::fill(t.data(), t.data() + t.size(), 0.0);
  }
  Rng rng(12);
  Tensor x = randn({2, 4, 64}, rng, false);
  ForwardCtx ctx;
  Tensor logits = model.forward(x, ctx);
  for (std::size_t i = 0; i < logits.size(); ++i) CHECK(logits.data()[i] == 0.0);
}

TEST_CASE("branch order in the concatenation matches the classifier blocks") {
  Model model(tiny_arch(), 13);
  const std::size_t d = 8, K = 2;
  Rng rng(14);
  Tensor pooled = randn({1, 2 * d}, rng, false);
  Tensor logits = model.classify(pooled);

  // Swapping the two pooled halves together with the matching classifier
  // weight rows reproduces the same logits.
  Tensor swapped = Tensor::zeros({1, 2 * d});
  std::memcpy(swapped.data(), pooled.data() + d, d * sizeof(Real));
  std::memcpy(swapped.data() + d, pooled.data(), d * sizeof(Real));
  Tensor w = model.params().param("cls.w");
  Tensor w_orig = Tensor::zeros({2 * d, K});
  std::memcpy(w_orig.data(), w.data(), w.size() * sizeof(Real));
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t k = 0; k < K; ++k) {
      w.data()[r * K + k] = w_orig.data()[(r + d) * K + k];
      w.data()[(r + d) * K + k] = w_orig.data()[r * K + k];
    }
  }
  Tensor logits_swapped = model.classify(swapped);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    CHECK(logits_swapped.data()[i] == doctest::Approx(logits.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("classify rejects pooled vectors of the wrong width") {
  Model model(tiny_arch(), 15);
  CHECK_THROWS_AS(model.classify(Tensor::zeros({1, 8})), ConfigError);
  Model fine_only(toggle_branch(tiny_arch(), "coarse"), 15);
  CHECK_NOTHROW(fine_only.classify(Tensor::zeros({1, 8})));
}

TEST_CASE("pooling weights ignore a constant score shift") {
  Rng rng(16);
  Tensor s = randn({1, 6}, rng, false);
  Tensor shifted = Tensor::zeros({1, 6});
  for (std::size_t i = 0; i < 6; ++i) shifted.data()[i] = s.data()[i] + 3.5;
  Tensor a = softmax(s, 1);
  Tensor b = softmax(shifted, 1);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("aggregate validates its input") {
  Model model(tiny_arch(), 17);
  ForwardCtx ctx;
  CHECK_THROWS_AS(model.aggregate(Tensor::zeros({1, 4, 7}), "fine", ctx), ShapeError);
  CHECK_THROWS_AS(model.aggregate(Tensor::zeros({4, 8}), "fine", ctx), ShapeError);
}

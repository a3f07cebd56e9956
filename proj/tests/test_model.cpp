#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>

#include "dsai/model.hpp"
#include "test_helpers.hpp"

using namespace dsai;
using dsai::testing::randn;
using dsai::testing::tiny_arch;

namespace {

std::vector<Tensor> all_params(Model& m) {
  std::vector<Tensor> out;
  for (auto& kv : m.params().params()) out.push_back(kv.second);
  return out;
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(Real)) == 0;
}

}  // namespace

TEST_CASE("forward produces logits of the configured shape") {
  Model model(tiny_arch(), 1);
  Rng rng(2);
  Tensor x = randn({3, 4, 64}, rng, false);
  ForwardCtx ctx;

  Tensor f = model.tokenize(x, ctx);
  CHECK(f.shape() == std::vector<std::size_t>{3, 4, 2});  // f2 = 4, N = 2
  Tensor z0 = model.project_and_encode(f, ctx);
  CHECK(z0.shape() == std::vector<std::size_t>{3, 2, 8});

  auto z = model.run_branches(z0, ctx);
  CHECK(z.fine.shape() == z0.shape());
  CHECK(z.coarse.shape() == z0.shape());
  model.attentive_stage(z, ctx);
  CHECK(z.fine.shape() == z0.shape());

  Tensor logits = model.forward(x, ctx);
  CHECK(logits.shape() == std::vector<std::size_t>{3, 2});
  for (std::size_t i = 0; i < logits.size(); ++i) {
    CHECK(std::isfinite(logits.data()[i]));
  }

  Tensor one = model.forward_trial(Tensor::from_data({4, 64}, std::vector<Real>(256, 0.5)), ctx);
  CHECK(one.shape() == std::vector<std::size_t>{2});
}

TEST_CASE("construction validates the architecture") {
  ModelConfig bad = tiny_arch();
  bad.input_samples = 63;
  CHECK_THROWS_WITH_AS(Model(bad, 0), doctest::Contains("64"), ConfigError);
}

TEST_CASE("tokenize rejects inputs that disagree with the configuration") {
  Model model(tiny_arch(), 1);
  ForwardCtx ctx;
  CHECK_THROWS_AS(model.tokenize(Tensor::zeros({1, 5, 64}), ctx), ConfigError);
  CHECK_THROWS_AS(model.tokenize(Tensor::zeros({1, 4, 63}), ctx), ConfigError);
  CHECK_THROWS_AS(model.tokenize(Tensor::zeros({4, 64}), ctx), ShapeError);
}

TEST_CASE("parameter registry carries the expected names") {
  Model model(tiny_arch(), 1);
  const ParamStore& store = model.params();
  for (const char* name :
       {"tokenizer.conv1.w", "tokenizer.spatial.w", "tokenizer.bn1.gamma", "tokenizer.dw2.w",
        "tokenizer.pw2.w", "tokenizer.proj.w", "tokenizer.pe", "fine.block0.dw.w",
        "fine.block0.alpha", "fine.alpha_inject", "coarse.block0.pw2.w", "intra_fine.l0.mha.wq",
        "intra_coarse.l0.ffn.w1", "cross_fine.l0.beta", "cross_coarse.l0.mha.wo", "head.q",
        "cls.w", "cls.b"}) {
    CAPTURE(name);
    CHECK(store.has_param(name));
  }
  CHECK_FALSE(store.has_param("tokenizer.bn1.running_mean"));  // buffer, not param
}

TEST_CASE("ablated configurations drop exactly the matching parameters") {
  ModelConfig a = tiny_arch();
  a.inter_attention = false;
  a.positional_encoding = false;
  a.aggregation = "mean";
  Model model(a, 1);
  CHECK_FALSE(model.params().has_param("cross_fine.l0.beta"));
  CHECK_FALSE(model.params().has_param("tokenizer.pe"));
  CHECK_FALSE(model.params().has_param("head.q"));
  CHECK(model.params().has_param("intra_fine.l0.mha.wq"));

  ModelConfig b = toggle_branch(tiny_arch(), "coarse");
  Model fine_only(b, 1);
  CHECK_FALSE(fine_only.params().has_param("coarse.block0.dw.w"));
  CHECK_FALSE(fine_only.params().has_param("cross_fine.l0.beta"));
  CHECK(fine_only.params().param("cls.w").extent(0) == 8);  // d, not 2d

  Rng rng(5);
  Tensor x = randn({2, 4, 64}, rng, false);
  ForwardCtx ctx;
  CHECK(fine_only.forward(x, ctx).shape() == std::vector<std::size_t>{2, 2});
}

TEST_CASE("initialization is seed-deterministic and name-streamed") {
  Model a(tiny_arch(), 42);
  Model b(tiny_arch(), 42);
  Model c(tiny_arch(), 43);
  auto pa = all_params(a);
  auto pb = all_params(b);
  auto pc = all_params(c);
  REQUIRE(pa.size() == pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(same_bits(pa[i], pb[i]));
    if (!same_bits(pa[i], pc[i])) any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("initialization follows the documented distributions") {
  ModelConfig arch;  // reference size, so the statistics are meaningful
  Model model(arch, 7);
  Tensor pe = model.params().param("tokenizer.pe");
  Real mean = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < pe.size(); ++i) {
    mean += pe.data()[i];
    sq += pe.data()[i] * pe.data()[i];
  }
  mean /= static_cast<Real>(pe.size());
  const Real stdev = std::sqrt(sq / static_cast<Real>(pe.size()) - mean * mean);
  CHECK(std::abs(mean) < 0.005);
  CHECK(stdev == doctest::Approx(0.02).epsilon(0.15));

  Tensor bias = model.params().param("cls.b");
  for (std::size_t i = 0; i < bias.size(); ++i) CHECK(bias.data()[i] == 0.0);
  Tensor gamma = model.params().param("tokenizer.bn1.gamma");
  for (std::size_t i = 0; i < gamma.size(); ++i) CHECK(gamma.data()[i] == 1.0);
  CHECK(model.params().param("fine.block0.alpha").value() == 1.0);
  CHECK(model.params().param("cross_fine.l0.beta").value() == 1.0);

  // Weight entries stay inside the fan-in bound.
  Tensor w = model.params().param("cls.w");
  const Real bound = std::sqrt(1.0 / static_cast<Real>(w.extent(0)));
  for (std::size_t i = 0; i < w.size(); ++i) {
    CHECK(std::abs(w.data()[i]) <= bound);
  }
}

TEST_CASE("evaluation forward is bit-deterministic") {
  Model model(tiny_arch(), 9);
  Rng rng(4);
  Tensor x = randn({2, 4, 64}, rng, false);
  ForwardCtx ctx;
  Tensor a = model.forward(x, ctx);
  Tensor b = model.forward(x, ctx);
  CHECK(same_bits(a, b));
}

TEST_CASE("every parameter gradient matches finite differences") {
  Model model(tiny_arch(), 11);
  Rng data_rng(3);
  Tensor x = randn({2, 4, 64}, data_rng, false);
  const std::vector<int> labels{0, 1};

  SUBCASE("training mode with dropout and batch statistics") {
    auto loss = [&]() {
      Rng mask_rng(123);
      ForwardCtx ctx;
      ctx.train = true;
      ctx.rng = &mask_rng;
      return softmax_cross_entropy(model.forward(x, ctx), labels);
    };
    auto res = dsai::testing::fd_check(loss, all_params(model), 4);
    CHECK(res.checked >= 40);
    CHECK(res.max_rel < 1e-5);
  }
  SUBCASE("evaluation mode") {
    auto loss = [&]() {
      ForwardCtx ctx;
      return softmax_cross_entropy(model.forward(x, ctx), labels);
    };
    auto res = dsai::testing::fd_check(loss, all_params(model), 4);
    CHECK(res.max_rel < 1e-5);
  }
}

TEST_CASE("input gradients flow back to the trial") {
  Model model(tiny_arch(), 13);
  Rng rng(6);
  Tensor x = randn({2, 4, 64}, rng, true);
  const std::vector<int> labels{1, 0};
  auto loss = [&]() {
    ForwardCtx ctx;
    return softmax_cross_entropy(model.forward(x, ctx), labels);
  };
  auto res = dsai::testing::fd_check(loss, {x}, 12);
  CHECK(res.max_rel < 1e-5);
}

TEST_CASE("saliency returns one non-negative score per channel") {
  Model model(tiny_arch(), 17);
  Rng rng(8);
  Tensor x = randn({3, 4, 64}, rng, false);
  auto scores = model.saliency(x, {0, 1, 0});
  REQUIRE(scores.size() == 4);
  Real total = 0.0;
  for (Real s : scores) {
    CHECK(std::isfinite(s));
    CHECK(s >= 0.0);
    total += s;
  }
  CHECK(total > 0.0);

  // The probe must not leave gradients on the parameters.
  for (auto& kv : model.params().params()) {
    const auto g = kv.second.grad_vector();
    const Real mag = std::accumulate(g.begin(), g.end(), 0.0,
                                     [](Real acc, Real v) { return acc + std::abs(v); });
    CHECK(mag == 0.0);
  }
}

TEST_CASE("parameter and multiply counts sit inside the efficiency budget") {
  ModelConfig arch;  // 22 channels by default
  arch.input_channels = 64;
  arch.n_classes = 4;
  Model model(arch, 0);
  CHECK(model.parameter_count() == 75988);
  CHECK(model.parameter_count() >= 69000);
  CHECK(model.parameter_count() <= 85000);
  CHECK(model.mac_count() >= 55252500);
  CHECK(model.mac_count() <= 92087500);

  ModelConfig two = arch;
  two.n_classes = 2;
  Model smaller(two, 0);
  // Only the classifier depends on the class count: 2d weights + 1 bias each.
  CHECK(model.parameter_count() - smaller.parameter_count() ==
        2 * (2 * arch.embed_dim + 1));
  CHECK(model.mac_convention() != nullptr);
}

TEST_CASE("checkpoints restore the exact model") {
  const char* path = "ckpt_roundtrip.bin";
  Config cfg;
  cfg.arch = tiny_arch();
  cfg.arch.aggregation = "mean";
  cfg.train.learning_rate = 5e-4;
  Model model(cfg.arch, 21);
  model.params().param("cls.b").data()[0] = 0.125;  // mark a value to track
  save_checkpoint(path, cfg, model.params());

  LoadedModel loaded = load_checkpoint(path);
  CHECK(serialize_config(loaded.config) == serialize_config(cfg));
  auto pa = all_params(model);
  auto pb = all_params(loaded.model);
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(same_bits(pa[i], pb[i]));

  Rng rng(30);
  Tensor x = randn({2, 4, 64}, rng, false);
  ForwardCtx ctx;
  CHECK(same_bits(model.forward(x, ctx), loaded.model.forward(x, ctx)));
  std::remove(path);
}

TEST_CASE("checkpoint loading rejects foreign files") {
  const char* path = "ckpt_bogus.bin";
  {
    std::ofstream out(path, std::ios::binary);
    out << "not a checkpoint at all";
  }
  CHECK_THROWS_AS(load_checkpoint(path), DataError);
  std::remove(path);
  CHECK_THROWS_AS(load_checkpoint("no_such_file.bin"), DataError);
}

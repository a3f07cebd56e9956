#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "dsai/model.hpp"
#include "test_helpers.hpp"

using namespace dsai;
using dsai::testing::randn;
using dsai::testing::tiny_arch;

namespace {

void fill_param(Model& m, const std::string& name, Real value) {
  Tensor t = m.params().param(name);
  std::fill(t.data(), t.data() + t.size(), value);
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(Real)) == 0;
}

Real abs_diff(const Tensor& a, const Tensor& b) {
  Real d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += std::abs(a.data()[i] - b.data()[i]);
  return d;
}

}  // namespace

TEST_CASE("branches preserve the token grid shape") {
  ModelConfig arch;  // reference size: 31 tokens, 40 dims
  Model model(arch, 1);
  Rng rng(2);
  Tensor z0 = randn({2, 31, 40}, rng, false);
  ForwardCtx ctx;
  auto z = model.run_branches(z0, ctx);
  CHECK(z.fine.shape() == z0.shape());
  CHECK(z.coarse.shape() == z0.shape());
  CHECK(abs_diff(z.fine, z.coarse) > 1e-6);
}

TEST_CASE("zero residual scales make both branches the identity") {
  Model model(tiny_arch(), 3);
  for (const char* name : {"fine.block0.alpha", "fine.alpha_inject", "coarse.block0.alpha",
                           "coarse.alpha_inject"}) {
    fill_param(model, name, 0.0);
  }
  Rng rng(4);
  Tensor z0 = randn({2, 2, 8}, rng, false);
  ForwardCtx ctx;
  auto z = model.run_branches(z0, ctx);
  CHECK(same_bits(z.fine, z0));
  CHECK(same_bits(z.coarse, z0));
}

TEST_CASE("zero convolution weights leave the doubled re-injected stream") {
  Model model(tiny_arch(), 5);
  for (const char* name : {"fine.block0.dw.w", "fine.block0.pw1.w", "fine.block0.pw2.w"}) {
    fill_param(model, name, 0.0);
  }
  Rng rng(6);
  Tensor z0 = randn({1, 2, 8}, rng, false);
  ForwardCtx ctx;
  auto z = model.run_branches(z0, ctx);
  // The block contributes zero, so the branch is z0 plus the unit-scaled
  // re-injection: exactly 2 * z0.
  for (std::size_t i = 0; i < z0.size(); ++i) {
    CHECK(z.fine.data()[i] == 2.0 * z0.data()[i]);
  }
}

TEST_CASE("grouped block matches a dense loop reference when groups = 1") {
  ModelConfig arch = tiny_arch();
  arch.groups = 1;
  Model model(arch, 7);
  fill_param(model, "fine.alpha_inject", 0.0);

  const std::size_t d = 8, n = 2, dh = 16, k = 3;
  Rng rng(8);
  Tensor z0 = randn({1, n, d}, rng, false);
  ForwardCtx ctx;
  Tensor out = model.run_branches(z0, ctx).fine;

  auto P = [&](const char* s) { return model.params().param(std::string("fine.block0") + s); };
  Tensor dw = P(".dw.w"), dwb = P(".dw.b"), w1 = P(".pw1.w"), b1 = P(".pw1.b"), w2 = P(".pw2.w");
  Tensor gamma = P(".bn.gamma"), beta = P(".bn.beta");
  Tensor rm = model.params().buffer("fine.block0.bn.running_mean");
  Tensor rv = model.params().buffer("fine.block0.bn.running_var");
  const Real alpha = P(".alpha").value();
  auto ref_gelu = [](Real v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); };

  // Channels-first copy of the tokens, matching the branch-internal layout.
  std::vector<Real> h(d * n), conv(d * n), hid(dh * n), proj(d * n);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t i = 0; i < d; ++i) h[i * n + t] = z0.data()[t * d + i];
  }
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t t = 0; t < n; ++t) {
      Real acc = dwb.data()[i];
      for (std::size_t j = 0; j < k; ++j) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - 1;
        if (src >= 0 && src < static_cast<std::ptrdiff_t>(n)) {
          acc += dw.data()[i * k + j] * h[i * n + src];
        }
      }
      conv[i * n + t] = ref_gelu(acc);
    }
  }
  for (std::size_t o = 0; o < dh; ++o) {
    for (std::size_t t = 0; t < n; ++t) {
      Real acc = b1.data()[o];
      for (std::size_t i = 0; i < d; ++i) acc += w1.data()[o * d + i] * conv[i * n + t];
      hid[o * n + t] = ref_gelu(acc);
    }
  }
  for (std::size_t o = 0; o < d; ++o) {
    const Real inv = 1.0 / std::sqrt(rv.data()[o] + 1e-5);
    for (std::size_t t = 0; t < n; ++t) {
      Real acc = 0.0;
      for (std::size_t i = 0; i < dh; ++i) acc += w2.data()[o * dh + i] * hid[i * n + t];
      const Real norm = gamma.data()[o] * (acc - rm.data()[o]) * inv + beta.data()[o];
      proj[o * n + t] = h[o * n + t] + alpha * norm;
    }
  }
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t i = 0; i < d; ++i) {
      CHECK(out.data()[t * d + i] == doctest::Approx(proj[i * n + t]).epsilon(1e-12));
    }
  }
}

TEST_CASE("residual scales carry exact gradients") {
  Model model(tiny_arch(), 9);
  Rng rng(10);
  Tensor z0 = randn({2, 2, 8}, rng, false);
  auto loss = [&]() {
    ForwardCtx ctx;
    auto z = model.run_branches(z0, ctx);
    return add(sum_all(mul(z.fine, z.fine)), sum_all(mul(z.coarse, z.coarse)));
  };
  std::vector<Tensor> wrt{model.params().param("fine.block0.alpha"),
                          model.params().param("fine.alpha_inject"),
                          model.params().param("coarse.block0.dw.w"),
                          model.params().param("coarse.block0.bn.gamma")};
  auto res = dsai::testing::fd_check(loss, wrt, 0);
  CHECK(res.max_rel < 1e-5);
}

TEST_CASE("coarse kernels cover a wider receptive field than fine ones") {
  ModelConfig arch;
  auto span = [](const std::vector<std::size_t>& ks) {
    std::size_t s = 1;
    for (std::size_t k : ks) s += k - 1;
    return s;
  };
  CHECK(span(arch.coarse_kernels) > span(arch.fine_kernels));
}

TEST_CASE("single-branch models rebuild identically after a double toggle") {
  ModelConfig arch = tiny_arch();
  Model original(arch, 11);
  Model rebuilt(toggle_branch(toggle_branch(arch, "coarse"), "coarse"), 11);
  REQUIRE(original.params().n_params() == rebuilt.params().n_params());
  for (std::size_t i = 0; i < original.params().params().size(); ++i) {
    CHECK(original.params().params()[i].first == rebuilt.params().params()[i].first);
    CHECK(same_bits(original.params().params()[i].second, rebuilt.params().params()[i].second));
  }
}

TEST_CASE("disabled branches stay undefined") {
  Model fine_only(toggle_branch(tiny_arch(), "coarse"), 13);
  Rng rng(14);
  Tensor z0 = randn({1, 2, 8}, rng, false);
  ForwardCtx ctx;
  auto z = fine_only.run_branches(z0, ctx);
  CHECK(z.fine.defined());
  CHECK_FALSE(z.coarse.defined());

  Model coarse_only(toggle_branch(tiny_arch(), "fine"), 13);
  auto zc = coarse_only.run_branches(z0, ctx);
  CHECK_FALSE(zc.fine.defined());
  CHECK(zc.coarse.defined());
}

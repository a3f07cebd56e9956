#include <doctest.h>

#include <cstring>
#include <sstream>

#include "dsai/config.hpp"
#include "dsai/param_store.hpp"
#include "test_helpers.hpp"

using namespace dsai;

TEST_CASE("config serialization round-trips and hashes stably") {
  Config cfg;
  const std::string text = serialize_config(cfg);
  Config back = parse_config(text);
  CHECK(serialize_config(back) == text);
  CHECK(config_hash(back) == config_hash(cfg));

  back.train.learning_rate = 1e-4;
  CHECK(config_hash(back) != config_hash(cfg));
  CHECK(serialize_config(parse_config(serialize_config(back))) == serialize_config(back));
}

TEST_CASE("config parser rejects unknown keys and sections") {
  CHECK_THROWS_WITH_AS(parse_config("[arch]\nfoo = 1\n"), doctest::Contains("unknown key 'foo'"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(parse_config("[nonsense]\n"), doctest::Contains("unknown section"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(parse_config("f1 = 16\n"), doctest::Contains("before any section"),
                       ConfigError);
  CHECK_THROWS_AS(parse_config("[arch]\nf1 == 16\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[arch]\nf1 = banana\n"), ConfigError);
  // keys must sit in their own section
  CHECK_THROWS_AS(parse_config("[train]\nf1 = 16\n"), ConfigError);
}

TEST_CASE("config parser accepts comments, blanks, and lists") {
  Config cfg = parse_config(
      "# comment\n"
      "[arch]\n"
      "fine_kernels = 5,9\n"
      "\n"
      "[train]\n"
      "protocol = loso\n");
  CHECK(cfg.arch.fine_kernels == std::vector<std::size_t>{5, 9});
  CHECK(cfg.train.protocol == "loso");
}

TEST_CASE("overrides apply by dotted path") {
  Config cfg;
  apply_override(cfg, "train.batch_size=128");
  CHECK(cfg.train.batch_size == 128);
  apply_override(cfg, "ablation.positional_encoding=false");
  CHECK_FALSE(cfg.arch.positional_encoding);
  CHECK_THROWS_WITH_AS(apply_override(cfg, "arch.nope=1"), doctest::Contains("unknown key"),
                       ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "no_dot"), ConfigError);
}

TEST_CASE("validation enforces the structural invariants") {
  Config cfg;
  CHECK_NOTHROW(validate(cfg));

  SUBCASE("heads must divide embed_dim") {
    cfg.arch.n_heads = 3;
    CHECK_THROWS_WITH_AS(validate(cfg), doctest::Contains("n_heads"), ConfigError);
  }
  SUBCASE("minimum trial length is named") {
    cfg.arch.input_samples = 63;
    CHECK_THROWS_WITH_AS(validate(cfg), doctest::Contains("64"), ConfigError);
  }
  SUBCASE("both branches off is rejected") {
    cfg.arch.fine_branch = false;
    cfg.arch.coarse_branch = false;
    CHECK_THROWS_WITH_AS(validate(cfg), doctest::Contains("branch"), ConfigError);
  }
  SUBCASE("groups must divide the channel widths") {
    cfg.arch.groups = 7;
    CHECK_THROWS_WITH_AS(validate(cfg), doctest::Contains("groups"), ConfigError);
  }
  SUBCASE("branch kernels must be odd") {
    cfg.arch.fine_kernels = {4};
    CHECK_THROWS_WITH_AS(validate(cfg), doctest::Contains("odd"), ConfigError);
  }
  SUBCASE("branch kernels must fit the token span") {
    cfg.arch.input_samples = 64;  // 2 tokens
    cfg.arch.coarse_kernels = {11, 15};
    CHECK_THROWS_WITH_AS(validate(cfg), doctest::Contains("token span"), ConfigError);
  }
  SUBCASE("aggregation mode is checked") {
    cfg.arch.aggregation = "max";
    CHECK_THROWS_WITH_AS(validate(cfg), doctest::Contains("aggregation"), ConfigError);
  }
  SUBCASE("protocol is checked") {
    cfg.train.protocol = "bootstrap";
    CHECK_THROWS_WITH_AS(validate(cfg), doctest::Contains("protocol"), ConfigError);
  }
  SUBCASE("kfold needs at least two folds") {
    cfg.train.folds = 1;
    CHECK_THROWS_WITH_AS(validate(cfg), doctest::Contains("folds"), ConfigError);
  }
}

TEST_CASE("branch toggling is involutive on the config record") {
  ModelConfig cfg;
  ModelConfig once = toggle_branch(cfg, "fine");
  CHECK_FALSE(once.fine_branch);
  ModelConfig twice = toggle_branch(once, "fine");
  Config a, b;
  a.arch = cfg;
  b.arch = twice;
  CHECK(serialize_config(a) == serialize_config(b));
  CHECK_THROWS_AS(toggle_branch(cfg, "middle"), ConfigError);
}

TEST_CASE("param store registers, looks up, and counts") {
  ParamStore store;
  Tensor w = store.add("layer.w", Tensor::zeros({3, 4}));
  store.add_buffer("layer.stat", Tensor::zeros({3}));
  CHECK(w.requires_grad());
  CHECK(store.n_trainable() == 12);
  CHECK(store.has_param("layer.w"));
  CHECK_FALSE(store.has_param("layer.stat"));
  CHECK(store.param("layer.w").node() == w.node());
  CHECK_THROWS_AS(store.add("layer.w", Tensor::zeros({1})), ContractError);
  CHECK_THROWS_AS(store.add_buffer("layer.w", Tensor::zeros({1})), ContractError);
  CHECK_THROWS_AS(store.param("missing"), ContractError);
  CHECK_THROWS_AS(store.buffer("missing"), ContractError);
}

TEST_CASE("param store clone is a deep copy") {
  ParamStore store;
  Tensor w = store.add("w", Tensor::from_data({2}, {1, 2}));
  ParamStore copy = store.clone();
  Tensor cloned = copy.params()[0].second;
  cloned.data()[0] = 99.0;
  CHECK(w.at(static_cast<std::size_t>(0)) == doctest::Approx(1.0));
  store.copy_values_from(copy);
  CHECK(w.at(static_cast<std::size_t>(0)) == doctest::Approx(99.0));
}

TEST_CASE("param records survive a write and read cycle bit-exactly") {
  Rng rng(5);
  ParamStore store;
  store.add("a.w", dsai::testing::randn({3, 5}, rng, false));
  store.add("a.b", dsai::testing::randn({5}, rng, false));
  store.add_buffer("a.stat", dsai::testing::randn({5}, rng, false));

  std::stringstream buf;
  store.save_records(buf);

  ParamStore target;
  target.add("a.w", Tensor::zeros({3, 5}));
  target.add("a.b", Tensor::zeros({5}));
  target.add_buffer("a.stat", Tensor::zeros({5}));
  target.load_records(buf);

  for (std::size_t i = 0; i < store.params().size(); ++i) {
    const Tensor& src = store.params()[i].second;
    const Tensor& dst = target.params()[i].second;
    CHECK(std::memcmp(src.data(), dst.data(), src.size() * sizeof(Real)) == 0);
  }
  CHECK(std::memcmp(store.buffers()[0].second.data(), target.buffers()[0].second.data(),
                    5 * sizeof(Real)) == 0);
}

TEST_CASE("param record loading rejects layout mismatches") {
  ParamStore store;
  store.add("w", Tensor::zeros({2, 2}));

  std::stringstream buf;
  store.save_records(buf);
  ParamStore wrong_shape;
  wrong_shape.add("w", Tensor::zeros({4}));
  CHECK_THROWS_WITH_AS(wrong_shape.load_records(buf), doctest::Contains("shape"), DataError);

  std::stringstream buf2;
  store.save_records(buf2);
  ParamStore wrong_name;
  wrong_name.add("v", Tensor::zeros({2, 2}));
  CHECK_THROWS_AS(wrong_name.load_records(buf2), DataError);
}

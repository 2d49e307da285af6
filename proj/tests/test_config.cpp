#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "crin/config.hpp"

using namespace crin;

TEST_CASE("defaults validate and split widths into equal thirds") {
  RunConfig c;
  CHECK_NOTHROW(c.validate());
  const auto s = c.model.split(96);
  CHECK(s.b == 32);
  CHECK(s.s == 32);
  CHECK(s.r == 32);
  CHECK(c.model.task_channels(96) == 32);
  CHECK(c.model.divisibility() == 16);
}

TEST_CASE("config text round-trips through the parser") {
  RunConfig c;
  c.model.stage_widths = {12, 24};
  c.model.num_stages = 2;
  c.model.attention = AttentionMlp::per_space;
  c.train.variant = ModelKind::mti_only;
  c.train.base_lr = 3e-4;
  c.synth.adjacency_ratio = 0.25;
  const std::string text = to_config_text(c);
  RunConfig back = parse_run_config(text);
  CHECK(to_config_text(back) == text);
  CHECK(back.model.w_b == 1.0 / 3.0);
  CHECK(back.train.base_lr == 3e-4);
}

TEST_CASE("parser accepts comments, blank lines and fractions") {
  RunConfig c = parse_run_config(
      "# desk run\n\nmodel.stage_widths = 12, 24  # two stages\nmodel.num_stages=2\n"
      "model.task_split = 1/2, 1/4, 1/4\nmodel.branch_kernels = 3, skip\n");
  CHECK(c.model.stage_widths == std::vector<std::int64_t>{12, 24});
  CHECK(c.model.w_b == 0.5);
  CHECK(c.model.branch_kernels == std::vector<int>{3, kSkipBranch});
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("parser rejects unknown keys, duplicates and bad values with the line") {
  auto message = [](const std::string& text) {
    try {
      parse_run_config(text, "run.cfg");
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  CHECK(message("train.max_iters = 5\nmodel.colour = red\n").find("run.cfg:2: unknown config key 'model.colour'") !=
        std::string::npos);
  CHECK(message("train.seed = 1\ntrain.seed = 2\n").find("duplicate") != std::string::npos);
  CHECK(message("train.max_iters = ten\n").find("train.max_iters") != std::string::npos);
  CHECK(message("just text\n").find("key = value") != std::string::npos);
  CHECK(message("train.variant = resnet\n").find("unknown model variant") != std::string::npos);
}

TEST_CASE("overrides apply on top of file values") {
  RunConfig c = parse_run_config("train.max_iters = 5\n");
  apply_override(c, "train.max_iters=7");
  apply_override(c, " train.augment = false ");
  CHECK(c.train.max_iters == 7);
  CHECK_FALSE(c.train.augment);
  CHECK_THROWS_AS(apply_override(c, "train.max_iters"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "nope=1"), ConfigError);
}

TEST_CASE("architecture invariants are enforced") {
  auto invalid = [](auto mutate) {
    CrinConfig c;
    mutate(c);
    CHECK_THROWS_AS(c.validate(), ConfigError);
  };
  invalid([](CrinConfig& c) { c.num_stages = 3; });
  invalid([](CrinConfig& c) { c.stage_widths = {48, 96, 192, 386}; });  // 386/3 is fractional
  invalid([](CrinConfig& c) { c.w_b = 0.5; });
  invalid([](CrinConfig& c) { c.branch_kernels = {kSkipBranch, 7, kSkipBranch}; });
  invalid([](CrinConfig& c) { c.branch_kernels = {7, 11}; });
  invalid([](CrinConfig& c) { c.branch_kernels = {kSkipBranch, 8}; });
  invalid([](CrinConfig& c) { c.init_kernel = 4; });
  invalid([](CrinConfig& c) { c.mlp_reduction = 0; });
}

TEST_CASE("train and synth invariants are enforced") {
  RunConfig c;
  c.train.max_iters = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = RunConfig{};
  c.train.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = RunConfig{};
  c.synth.adjacency_ratio = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = RunConfig{};
  c.synth.building_size_min = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("every key is documented and has a default") {
  const auto keys = config_keys();
  CHECK(keys.size() > 30);
  for (const auto& k : keys) {
    CAPTURE(k.key);
    CHECK(!k.doc.empty());
    CHECK(!k.default_value.empty() == (k.key != "train.manifest"));
  }
}

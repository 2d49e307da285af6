#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "crin/model.hpp"
#include "test_util.hpp"

using namespace crin;
using crin::testing::max_abs_diff;
using crin::testing::random_tensor;

namespace {

CrinConfig tiny_config() {
  CrinConfig c;
  c.stage_widths = {12, 24};
  c.num_stages = 2;
  return c;
}

}  // namespace

TEST_CASE("encoder stage shapes follow the width list") {
  CrinConfig c;
  ParamStore p(DType::f32);
  std::mt19937_64 rng(0);
  Encoder enc(p, "encoder", c, rng);
  Tape tape(false);
  Binding b(tape, p, false);
  EncoderOutput out = enc(b, tape.constant(Tensor({1, 3, 128, 128})));
  REQUIRE(out.stages.size() == 4);
  CHECK(out.stages[0].shape() == Shape{1, 48, 64, 64});
  CHECK(out.stages[1].shape() == Shape{1, 96, 32, 32});
  CHECK(out.stages[2].shape() == Shape{1, 192, 16, 16});
  CHECK(out.stages[3].shape() == Shape{1, 384, 8, 8});
  CHECK(out.stem.shape() == Shape{1, 48, 128, 128});
  CHECK(out.skip(0).shape().h == 16);
  CHECK(out.skip(3).shape().h == 128);
}

TEST_CASE("encoder rejects indivisible inputs with the required divisor") {
  CrinConfig c;
  ParamStore p(DType::f32);
  std::mt19937_64 rng(0);
  Encoder enc(p, "encoder", c, rng);
  Tape tape(false);
  Binding b(tape, p, false);
  try {
    enc(b, tape.constant(Tensor({1, 3, 120, 128})));
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("divisible by 16") != std::string::npos);
  }
  CHECK_THROWS_AS(enc(b, tape.constant(Tensor({1, 4, 128, 128}))), ShapeError);
}

TEST_CASE("zero image with zero biases gives zero features and constant logits") {
  for (ModelKind kind : {ModelKind::baseline, ModelKind::naive_multitask, ModelKind::mti_only, ModelKind::full_crin}) {
    CAPTURE(model_kind_name(kind));
    Model m(kind, tiny_config(), 3);
    for (bool training : {false, true}) {
      Tape tape(false);
      Binding b(tape, m.params(), training);
      ModelOutput out = m.forward(b, tape.constant(Tensor({2, 3, 32, 32})), true);
      CHECK(ops::sum(ops::mul(out.building.value(), out.building.value())) == 0.0);
      CHECK(ops::sum(ops::mul(out.road.value(), out.road.value())) == 0.0);
      for (const auto& st : out.stages) CHECK(ops::sum(ops::mul(st.features.value(), st.features.value())) == 0.0);
    }
  }
}

TEST_CASE("full model output shapes") {
  Model m(ModelKind::full_crin, CrinConfig{}, 1);
  Tape tape(false);
  Binding b(tape, m.params(), false);
  std::mt19937_64 rng(2);
  ModelOutput out = m.forward(b, tape.constant(random_tensor({1, 3, 128, 128}, rng)), true);
  CHECK(out.building.shape() == Shape{1, 1, 128, 128});
  CHECK(out.road.shape() == Shape{1, 1, 128, 128});
  REQUIRE(out.stages.size() == 4);
  const std::int64_t expected_w[] = {192, 96, 48, 48}, expected_h[] = {16, 32, 64, 128};
  for (int j = 0; j < 4; ++j) {
    const auto& st = out.stages[j];
    CHECK(st.features.shape() == Shape{1, expected_w[j], expected_h[j], expected_h[j]});
    CHECK(st.split.b + st.split.s + st.split.r == expected_w[j]);
    CHECK(st.attention.shape() == Shape{1, 4, expected_w[j], 1});
    CHECK(st.aux_building.shape() == Shape{1, 1, expected_h[j], expected_h[j]});
    CHECK(st.aux_road.shape() == Shape{1, 1, expected_h[j], expected_h[j]});
  }
  CHECK(m.decoder_widths() == std::vector<std::int64_t>{192, 96, 48, 48});
}

TEST_CASE("fixed seed gives bit-identical logits") {
  for (ModelKind kind : {ModelKind::baseline, ModelKind::naive_multitask, ModelKind::mti_only, ModelKind::full_crin}) {
    CAPTURE(model_kind_name(kind));
    std::mt19937_64 rng(7);
    const Tensor x = random_tensor({2, 3, 32, 32}, rng);
    Tensor logits[2];
    for (int run = 0; run < 2; ++run) {
      Model m = build_variant(kind, tiny_config(), 11);
      Tape tape;
      Binding b(tape, m.params(), true);
      logits[run] = m.forward(b, tape.constant(x)).building.value();
    }
    CHECK(logits[0].identical(logits[1]));
  }
}

TEST_CASE("zero head weights with bias b give constant logits b") {
  Model m(ModelKind::full_crin, tiny_config(), 5);
  m.params().at("head.building.weight").fill(0.0);
  m.params().at("head.building.bias").fill(0.75);
  m.params().at("head.road.weight").fill(0.0);
  m.params().at("head.road.bias").fill(-1.25);
  Tape tape(false);
  Binding b(tape, m.params(), false);
  std::mt19937_64 rng(1);
  ModelOutput out = m.forward(b, tape.constant(random_tensor({1, 3, 32, 32}, rng)));
  for (std::int64_t i = 0; i < out.building.value().numel(); ++i) {
    CHECK(out.building.value().at(i) == 0.75f);
    CHECK(out.road.value().at(i) == -1.25f);
  }
}

TEST_CASE("variant wiring") {
  Model base(ModelKind::baseline, tiny_config(), 0);
  CHECK(base.params().contains("building.encoder.stem.conv.weight"));
  CHECK(base.params().contains("road.encoder.stem.conv.weight"));
  CHECK(base.params().at("building.head.weight").shape() == Shape{1, 12, 1, 1});
  CHECK(base.params().at("road.head.weight").shape() == Shape{1, 12, 1, 1});

  Model naive(ModelKind::naive_multitask, tiny_config(), 0);
  CHECK(naive.params().contains("encoder.stem.conv.weight"));
  CHECK(naive.params().at("head.building.weight").shape() == Shape{1, 12, 1, 1});
  CHECK(naive.params().at("head.road.weight").shape() == Shape{1, 12, 1, 1});
  CHECK(naive.params().learnable_elements() * 2 - base.params().learnable_elements() == 2 * 13);

  Model mti(ModelKind::mti_only, tiny_config(), 0);
  Model full(ModelKind::full_crin, tiny_config(), 0);
  CHECK(mti.csi_blocks().empty());
  CHECK(full.csi_blocks().size() == 2);
  CHECK(full.params().learnable_elements() > mti.params().learnable_elements());
  CHECK(mti.params().contains("aux.1.road.weight"));
  CHECK(mti.fingerprint() != full.fingerprint());
  CHECK(full.fingerprint() == Model(ModelKind::full_crin, tiny_config(), 99).fingerprint());
  CHECK_THROWS_AS(parse_model_kind("unet"), ConfigError);
}

TEST_CASE("MTI block shapes, zeros and channel-layout checks") {
  CrinConfig c;
  ParamStore p(DType::f32);
  std::mt19937_64 rng(0);
  MtiBlock mti(p, "mti", 192, 96, 96, c, rng);
  CHECK(mti.split().b == 32);
  CHECK(mti.split().s == 32);
  CHECK(mti.split().r == 32);
  Tape tape(false);
  Binding b(tape, p, false);
  Var out = mti(b, tape.constant(Tensor({1, 192, 8, 8})), tape.constant(Tensor({1, 96, 8, 8})));
  CHECK(out.shape() == Shape{1, 96, 8, 8});
  CHECK(ops::sum(ops::mul(out.value(), out.value())) == 0.0);
  CHECK_THROWS_AS(mti(b, tape.constant(Tensor({1, 190, 8, 8})), tape.constant(Tensor({1, 96, 8, 8}))), ShapeError);
  CHECK_THROWS_AS(mti(b, tape.constant(Tensor({1, 192, 8, 8})), tape.constant(Tensor({1, 96, 4, 4}))), ShapeError);
}

TEST_CASE("MTI fusion keeps the task groups apart") {
  CrinConfig c = tiny_config();
  ParamStore p(DType::f64);
  std::mt19937_64 rng(4);
  MtiBlock mti(p, "mti", 24, 12, 12, c, rng);
  const Tensor d = random_tensor({2, 24, 6, 6}, rng, DType::f64);
  const Tensor skip = random_tensor({2, 12, 6, 6}, rng, DType::f64);
  auto run = [&](const Tensor& dd) {
    Tape tape(false);
    Binding b(tape, p, false);
    return mti(b, tape.constant(dd), tape.constant(skip)).value();
  };
  const Tensor base = run(d);
  // Perturbing the road half of the decoder feature leaves f_b untouched, and vice versa.
  for (int half = 0; half < 2; ++half) {
    Tensor dp = d;
    for (std::int64_t n = 0; n < 2; ++n)
      for (std::int64_t ch = half * 12; ch < half * 12 + 12; ++ch)
        for (std::int64_t i = 0; i < 36; ++i) dp.set(n, ch, i / 6, i % 6, dp.at(n, ch, i / 6, i % 6) + 0.5);
    const Tensor out = run(dp);
    const std::int64_t untouched = half == 1 ? 0 : 8;  // f_b channels [0,4), f_r channels [8,12)
    const std::int64_t changed = half == 1 ? 8 : 0;
    bool same = true, differs = false;
    for (std::int64_t n = 0; n < 2; ++n)
      for (std::int64_t ch = 0; ch < 4; ++ch)
        for (std::int64_t i = 0; i < 36; ++i) {
          same &= out.at(n, untouched + ch, i / 6, i % 6) == base.at(n, untouched + ch, i / 6, i % 6);
          differs |= out.at(n, changed + ch, i / 6, i % 6) != base.at(n, changed + ch, i / 6, i % 6);
        }
    CHECK(same);
    CHECK(differs);
  }

  // The two-group fusion conv equals two dense convs over [d_b | s_b] and [d_r | s_r].
  const Tensor& w = p.at("mti.fusion.conv.weight");
  const ConvSpec grouped = ConvSpec::same(32, 8, 3, 3, 2, false);
  const Tensor x = random_tensor({2, 32, 6, 6}, rng, DType::f64);
  const Tensor y = ops::conv2d(x, w, nullptr, grouped);
  const ConvSpec dense = ConvSpec::same(16, 4, 3, 3, 1, false);
  const Tensor yb = crin::testing::naive_conv2d(ops::slice(x, 1, 0, 16), ops::slice(w, 0, 0, 4), nullptr, dense);
  const Tensor yr = crin::testing::naive_conv2d(ops::slice(x, 1, 16, 16), ops::slice(w, 0, 4, 4), nullptr, dense);
  CHECK(max_abs_diff(y, ops::channel_concat(yb, yr)) <= 1e-12);
}

TEST_CASE("CSI attention sums to one per channel") {
  CrinConfig c;
  ParamStore p(DType::f32);
  std::mt19937_64 rng(9);
  CsiBlock csi(p, "csi", 24, c, rng);
  for (int trial = 0; trial < 20; ++trial) {
    Tape tape(false);
    Binding b(tape, p, false);
    CsiOutput out = csi(b, tape.constant(random_tensor({3, 24, 8, 8}, rng, DType::f32, -3, 3)));
    REQUIRE(out.attention.shape() == Shape{3, 4, 24, 1});
    for (std::int64_t n = 0; n < 3; ++n)
      for (std::int64_t ch = 0; ch < 24; ++ch) {
        double s = 0;
        for (std::int64_t i = 0; i < 4; ++i) s += out.attention.value().at(n, i, ch, 0);
        CHECK(std::abs(s - 1.0) <= 1e-6);
      }
  }
}

TEST_CASE("CSI degenerate attentions") {
  CrinConfig c;
  ParamStore p(DType::f64);
  std::mt19937_64 rng(3);
  CsiBlock csi(p, "csi", 12, c, rng);
  const Tensor x = random_tensor({2, 12, 9, 9}, rng, DType::f64);
  const Tensor f_init = ops::conv2d(x, p.at("csi.init.weight"), &p.at("csi.init.bias"), ConvSpec::depthwise(12, 5, 5));

  SUBCASE("one-hot on the skip branch returns f_init exactly") {
    Tensor& bias = p.at("csi.mlp.fc2.bias");
    for (std::int64_t ch = 0; ch < 12; ++ch) bias.set(ch, 1e3);  // logits laid out branch-major
    Tape tape(false);
    Binding b(tape, p, false);
    CsiOutput out = csi(b, tape.constant(x));
    CHECK(out.features.value().identical(f_init));
  }
  SUBCASE("uniform attention averages the branches") {
    p.at("csi.mlp.fc2.weight").fill(0.0);
    p.at("csi.mlp.fc2.bias").fill(0.0);
    Tape tape(false);
    Binding b(tape, p, false);
    CsiOutput out = csi(b, tape.constant(x));
    Tensor expected = f_init;
    for (int k : {7, 11, 21}) {
      const std::string n = "csi.k" + std::to_string(k);
      const Tensor col = ops::conv2d(f_init, p.at(n + ".col.weight"), &p.at(n + ".col.bias"),
                                     ConvSpec::depthwise(12, k, 1));
      expected = ops::add(expected, ops::conv2d(col, p.at(n + ".row.weight"), &p.at(n + ".row.bias"),
                                                ConvSpec::depthwise(12, 1, k)));
    }
    CHECK(max_abs_diff(out.features.value(), ops::scale(expected, 0.25)) <= 1e-12);
    for (std::int64_t i = 0; i < out.attention.value().numel(); ++i) CHECK(out.attention.value().at(i) == 0.25);
  }
  CHECK_THROWS_AS(
      [&] {
        Tape tape(false);
        Binding b(tape, p, false);
        csi(b, tape.constant(Tensor({1, 10, 4, 4}, DType::f64)));
      }(),
      ShapeError);
}

TEST_CASE("CSI keeps task spaces isolated") {
  // Zeroing road channels leaves building channels bit-unchanged and vice versa.
  auto check_isolation = [](const CrinConfig& c, bool fixed) {
    ParamStore p(DType::f32);
    std::mt19937_64 rng(12);
    CsiBlock csi(p, "csi", 24, c, rng);
    const Tensor x = random_tensor({2, 24, 8, 8}, rng);
    Tensor attn = ops::softmax(random_tensor({2, 4, 24, 1}, rng), 1);
    auto run = [&](const Tensor& in) {
      Tape tape(false);
      Binding b(tape, p, false);
      return csi(b, tape.constant(in), fixed ? &attn : nullptr).features.value();
    };
    const Tensor base = run(x);
    for (auto [zero_from, keep_from] : {std::pair<std::int64_t, std::int64_t>{16, 0}, {0, 16}}) {
      Tensor xz = x;
      for (std::int64_t n = 0; n < 2; ++n)
        for (std::int64_t ch = zero_from; ch < zero_from + 8; ++ch)
          for (std::int64_t i = 0; i < 64; ++i) xz.set(n, ch, i / 8, i % 8, 0.0);
      const Tensor out = run(xz);
      bool same = true;
      for (std::int64_t n = 0; n < 2; ++n)
        for (std::int64_t ch = keep_from; ch < keep_from + 8; ++ch)
          for (std::int64_t i = 0; i < 64; ++i) same &= out.at(n, ch, i / 8, i % 8) == base.at(n, ch, i / 8, i % 8);
      CHECK(same);
    }
  };
  CrinConfig per_space;
  per_space.attention = AttentionMlp::per_space;
  check_isolation(per_space, false);
  check_isolation(CrinConfig{}, true);
}

TEST_CASE("per-space attention still sums to one") {
  CrinConfig c;
  c.attention = AttentionMlp::per_space;
  ParamStore p(DType::f64);
  std::mt19937_64 rng(5);
  CsiBlock csi(p, "csi", 24, c, rng);
  CHECK(csi.mlp_groups().size() == 3);
  Tape tape(false);
  Binding b(tape, p, false);
  CsiOutput out = csi(b, tape.constant(random_tensor({2, 24, 4, 4}, rng, DType::f64)));
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t ch = 0; ch < 24; ++ch) {
      double s = 0;
      for (std::int64_t i = 0; i < 4; ++i) s += out.attention.value().at(n, i, ch, 0);
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
}

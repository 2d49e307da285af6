#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <random>

#include "crin/analysis.hpp"
#include "crin/nn.hpp"

using namespace crin;

namespace {

CrinConfig tiny_config() {
  CrinConfig c;
  c.stage_widths = {12, 24};
  c.num_stages = 2;
  return c;
}

// Learnable element count read back from the serialized payload sizes.
std::int64_t serialized_elements(const ParamStore& params) {
  constexpr std::size_t header = 4 + 4 + 1 + 1 + 4 * 8;
  std::int64_t total = 0;
  for (const auto& e : params.entries()) {
    if (!e.learnable) continue;
    const std::string blob = rten_encode(e.value);
    total += static_cast<std::int64_t>((blob.size() - header) / (e.value.dtype() == DType::f32 ? 4 : 8));
  }
  return total;
}

std::vector<Tensor> random_images(std::size_t count, std::int64_t size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u;
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < count; ++k) {
    Tensor t({1, 3, size, size});
    for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, u(rng));
    out.push_back(std::move(t));
  }
  return out;
}

CostReport single_conv_cost(const ConvSpec& spec, Shape input) {
  ParamStore ps;
  std::mt19937_64 rng(0);
  const nn::Conv conv = nn::Conv::make(ps, "conv", spec, rng);
  return count_flops(ps, [&](Binding& b) { conv(b, b.tape().constant(Tensor::zeros(input))); });
}

}  // namespace

TEST_CASE("parameter counts") {
  std::mt19937_64 rng(0);
  SUBCASE("depthwise 21x21 has exactly 49 times the weights of depthwise 3x3") {
    for (std::int64_t c : {16, 64, 256}) {
      ParamStore ps;
      nn::Conv::make(ps, "k21", ConvSpec::depthwise(c, 21, 21, false), rng);
      nn::Conv::make(ps, "k3", ConvSpec::depthwise(c, 3, 3, false), rng);
      const CostReport r = count_params(ps);
      CHECK(r.subtotal("k21").params == 441 * c);
      CHECK(r.subtotal("k3").params == 9 * c);
      CHECK(r.subtotal("k21").params == 49 * r.subtotal("k3").params);
    }
  }
  SUBCASE("pointwise conv with bias") {
    ParamStore ps;
    nn::Conv::make(ps, "pw", ConvSpec::same(24, 40, 1, 1), rng);
    CHECK(count_params(ps).total_params() == 24 * 40 + 40);
  }
  SUBCASE("every variant agrees with an independent serialized element count") {
    for (ModelKind kind : {ModelKind::baseline, ModelKind::naive_multitask, ModelKind::mti_only, ModelKind::full_crin}) {
      const Model m(kind, tiny_config(), 1);
      const CostReport r = count_params(m);
      CHECK(r.total_params() == serialized_elements(m.params()));
      CHECK(r.total_params() == m.params().learnable_elements());
    }
  }
}

TEST_CASE("MAC counts") {
  SUBCASE("pointwise conv is H W C_out C_in") {
    const CostReport r = single_conv_cost(ConvSpec::same(16, 8, 1, 1, 1, false), {1, 16, 10, 12});
    CHECK(r.total_macs() == 10 * 12 * 8 * 16);
    CHECK(r.total_flops() == 2 * r.total_macs());
  }
  SUBCASE("strided grouped conv") {
    const CostReport r = single_conv_cost(ConvSpec::same(8, 12, 3, 3, 2, false, 2), {2, 8, 16, 16});
    CHECK(r.total_macs() == 2 * 8 * 8 * 12 * (8 / 2) * 9);
  }
  SUBCASE("decomposed 21x21 depthwise branch versus a dense 21x21 conv at C = 64") {
    const Shape in{1, 64, 32, 32};
    const std::int64_t col = single_conv_cost(ConvSpec::depthwise(64, 21, 1, false), in).total_macs();
    const std::int64_t row = single_conv_cost(ConvSpec::depthwise(64, 1, 21, false), in).total_macs();
    const std::int64_t dense = single_conv_cost(ConvSpec::same(64, 64, 21, 21, 1, false), in).total_macs();
    CHECK(col + row == 42 * 64 * 32 * 32);
    CHECK(dense == 441 * 64 * 64 * 32 * 32);
    CHECK(dense % (col + row) == 0);
    CHECK(dense / (col + row) == 672);
  }
  SUBCASE("totals are additive and independent of enumeration order") {
    const Model m(ModelKind::full_crin, tiny_config(), 2);
    CostReport r = count_flops(m, {1, 3, 32, 32});
    const std::int64_t forward = r.total_macs();
    std::mt19937_64 rng(9);
    std::shuffle(r.layers.begin(), r.layers.end(), rng);
    std::int64_t sum = 0;
    for (const auto& l : r.layers) sum += l.macs;
    CHECK(sum == forward);
    CHECK(r.total_macs() == forward);
    CHECK(r.total_params() == m.params().learnable_elements());
    const CostReport twice = count_flops(m, {2, 3, 32, 32});
    CHECK(twice.total_macs() == 2 * forward);
  }
  SUBCASE("MTI decoder stage costs at most two thirds of a conventional stage at equal width") {
    const CrinConfig reference;
    const Model mti(ModelKind::mti_only, reference, 0), naive(ModelKind::naive_multitask, reference, 0);
    CHECK(mti.decoder_widths() == naive.decoder_widths());
    const Shape in{1, 3, 128, 128};
    const CostReport a = count_flops(mti, in), b = count_flops(naive, in);
    for (int j = 0; j < reference.num_stages; ++j) {
      const std::int64_t stage_mti = a.subtotal("decoder." + std::to_string(j)).macs;
      const std::int64_t stage_conv = b.subtotal("decoder." + std::to_string(j)).macs;
      CAPTURE(j);
      CHECK(3 * stage_mti <= 2 * stage_conv);
    }
  }
}

TEST_CASE("cost report csv") {
  CostReport r;
  r.layers = {{"a", 3, 10}, {"b", 0, 5}};
  CHECK(r.csv() == "layer,params,macs,flops\na,3,10,20\nb,0,5,10\ntotal,3,15,30\n");
}

TEST_CASE("fps benchmark") {
  const Model m(ModelKind::full_crin, tiny_config(), 0);
  CHECK_THROWS_AS(bench_fps(m, {1, 3, 32, 32}, 0, 0), std::invalid_argument);
  const FpsReport r = bench_fps(m, {2, 3, 32, 32}, 1, 3);
  CHECK(r.runs == 3);
  CHECK(r.batch == 2);
  CHECK(r.mean > 0);
  CHECK(r.median > 0);
  CHECK(r.stddev >= 0);
}

TEST_CASE("scale contribution") {
  const auto probe = random_images(kMinProbeSamples, 32, 4);
  for (AttentionMlp mlp : {AttentionMlp::dense, AttentionMlp::per_space}) {
    // Reference widths: the bias construction needs MLP logits well below 10.
    CrinConfig c;
    c.attention = mlp;
    CAPTURE(static_cast<int>(mlp));
    Model m(ModelKind::full_crin, c, 3);

    const ScaleContribution sc = scale_contribution(m, probe);
    REQUIRE(sc.rows.size() == 3 * static_cast<std::size_t>(c.num_stages));
    for (const auto& row : sc.rows) {
      double total = 0;
      for (double f : row.fractions) total += f;
      CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
    }
    CHECK(sc.csv().rfind("stage,height,width,space,channels,skip,k7,k11,k21\n", 0) == 0);

    const int forced = 2;
    for (const auto& block : m.csi_blocks()) {
      const auto layers = block.mlp_output_layers();
      const auto groups = block.mlp_groups();
      for (std::size_t g = 0; g < layers.size(); ++g) {
        Tensor& bias = m.params().at(layers[g] + ".bias");
        const std::int64_t channels = groups[g].second;
        for (std::int64_t ch = 0; ch < channels; ++ch) bias.set(forced * channels + ch, 10.0);
      }
    }
    for (const auto& row : scale_contribution(m, probe).rows) {
      CHECK(row.fractions[forced] == 1.0);
    }
  }
  CHECK_THROWS_AS(scale_contribution(Model(ModelKind::full_crin, tiny_config(), 0), random_images(3, 32, 1)),
                  std::invalid_argument);
  CHECK_THROWS_AS(scale_contribution(Model(ModelKind::mti_only, tiny_config(), 0), probe), std::invalid_argument);
}

TEST_CASE("feature export") {
  SUBCASE("constant map exports as 0") {
    const Raster8 r = feature_to_gray(Tensor::full({1, 1, 3, 5}, 0.7));
    CHECK(r.height == 3);
    CHECK(r.width == 5);
    CHECK(std::all_of(r.pixels.begin(), r.pixels.end(), [](std::uint8_t v) { return v == 0; }));
  }
  SUBCASE("min-max normalization spans 0..255") {
    const Raster8 r = feature_to_gray(Tensor::from_list({1, 1, 1, 3}, {-1.0, 0.0, 3.0}));
    CHECK(r.pixels == std::vector<std::uint8_t>{0, 64, 255});
  }
  SUBCASE("files match feature sizes and re-export is byte-identical") {
    const Model m(ModelKind::full_crin, tiny_config(), 6);
    const Tensor image = random_images(1, 32, 8)[0];
    const auto dir = std::filesystem::temp_directory_path() / "crin_test_features";
    std::filesystem::remove_all(dir);
    const auto a = export_features(m, image, {0, 1}, 2, dir / "a");
    const auto b = export_features(m, image, {0, 1}, 2, dir / "b");
    REQUIRE(a.size() == 12);
    for (const auto& e : a) {
      const Raster8 r = read_pnm(dir / "a" / e.file);
      CHECK(r.height == e.height);
      CHECK(r.width == e.width);
      CHECK(read_file(dir / "a" / e.file) == read_file(dir / "b" / e.file));
    }
    CHECK(a[0].height == 16);
    CHECK(a.back().height == 32);
    CHECK(read_file(dir / "a" / "index.json") == read_file(dir / "b" / "index.json"));
    std::filesystem::remove_all(dir);
  }
}

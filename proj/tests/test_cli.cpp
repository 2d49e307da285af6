#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <map>
#include <sstream>

#include "crin/cli.hpp"
#include "crin/train.hpp"

using namespace crin;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("crin_cli_" + name);
  fs::remove_all(dir);
  return dir;
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = read_file(e.path());
  return files;
}

std::size_t count(const std::string& haystack, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = haystack.find(needle); pos != std::string::npos; pos = haystack.find(needle, pos + 1)) ++n;
  return n;
}

const std::vector<std::string> kTiny = {"--set", "model.stage_widths=12,24", "--set", "model.num_stages=2",
                                        "--set", "synth.scene_size=32",      "--set", "synth.building_count=3",
                                        "--set", "synth.building_size_min=4", "--set", "synth.building_size_max=6",
                                        "--set", "synth.road_width_min=2",   "--set", "synth.road_width_max=3",
                                        "--set", "synth.train_scenes=4",     "--set", "synth.val_scenes=2"};

std::vector<std::string> with(std::vector<std::string> args, const std::vector<std::string>& extra) {
  args.insert(args.end(), extra.begin(), extra.end());
  return args;
}

}  // namespace

TEST_CASE("usage errors exit 1 with usage text and write nothing") {
  const fs::path dir = scratch("usage");
  SUBCASE("unknown flag") {
    const Result r = cli({"synth", "--out", dir.string(), "--bogus"});
    CHECK(r.code == 1);
    CHECK(r.err.find("--bogus") != std::string::npos);
    CHECK(r.err.find("Usage:") != std::string::npos);
  }
  SUBCASE("unknown subcommand") {
    const Result r = cli({"frobnicate", "--out", dir.string()});
    CHECK(r.code == 1);
    CHECK(r.err.find("Usage:") != std::string::npos);
  }
  SUBCASE("missing required option") { CHECK(cli({"eval", "--split", "val"}).code == 1); }
  SUBCASE("unknown config key") {
    const Result r = cli({"synth", "--out", dir.string(), "--set", "synth.colour=red"});
    CHECK(r.code == 1);
    CHECK(r.err.find("synth.colour") != std::string::npos);
  }
  SUBCASE("invalid variant") { CHECK(cli({"train", "--out", dir.string(), "--variant", "unet"}).code == 1); }
  SUBCASE("analyze without an analysis flag") {
    const fs::path ckdir = scratch("usage_ckpt");
    fs::create_directories(ckdir);
    RunConfig rc;
    rc.model.stage_widths = {12, 24};
    rc.model.num_stages = 2;
    const Model m(ModelKind::mti_only, rc.model, 0);
    Checkpoint ck{rc, m.fingerprint(), 0, {}, "", m.params()};
    ck.config.train.variant = ModelKind::mti_only;
    std::ostringstream rng;
    rng << std::mt19937_64(0);
    ck.rng_state = rng.str();
    checkpoint_save(ck, ckdir / "m.rckp");
    CHECK(cli({"analyze", "--checkpoint", (ckdir / "m.rckp").string(), "--out", dir.string()}).code == 1);
    CHECK(cli({"analyze", "--checkpoint", (ckdir / "m.rckp").string(), "--out", dir.string(), "--scales"}).code == 1);
    fs::remove_all(ckdir);
  }
  CHECK(!fs::exists(dir));
  CHECK(cli({"--help"}).code == 0);
  CHECK(cli({"--version"}).out == std::string("crin ") + kVersion + "\n");
}

TEST_CASE("synth with the same seed twice gives byte-identical trees") {
  const fs::path a = scratch("synth_a"), b = scratch("synth_b"), c = scratch("synth_c");
  REQUIRE(cli(with({"synth", "--out", a.string()}, kTiny)).code == 0);
  REQUIRE(cli(with({"synth", "--out", b.string()}, kTiny)).code == 0);
  REQUIRE(cli(with({"synth", "--out", c.string(), "--set", "synth.seed=2"}, kTiny)).code == 0);
  const auto ta = tree(a), tb = tree(b);
  CHECK(ta.size() == 3 * 6 + 3);
  CHECK(ta.count("manifest.json") == 1);
  CHECK(ta.count("resolved_config.cfg") == 1);
  CHECK(ta.at("VERSION") == std::string("crin ") + kVersion + "\n");
  CHECK(ta == tb);
  CHECK(tree(c) != ta);
  // The echoed config reproduces the run on its own.
  const RunConfig echoed = load_run_config((a / "resolved_config.cfg").string());
  CHECK(to_config_text(echoed) == ta.at("resolved_config.cfg"));
  for (const auto& d : {a, b, c}) fs::remove_all(d);
}

TEST_CASE("train, eval, predict and analyze compose through files") {
  const fs::path root = scratch("pipeline");
  const std::string data = (root / "data").string(), run = (root / "run").string();
  REQUIRE(cli(with({"synth", "--out", data}, kTiny)).code == 0);
  const std::string manifest = data + "/manifest.json";
  const std::vector<std::string> train = with({"train", "--variant", "full_crin", "--manifest", manifest, "--set",
                                               "train.max_iters=4", "--set", "train.batch_size=2", "--set",
                                               "train.eval_interval=2", "--set", "train.checkpoint_interval=2"},
                                              kTiny);
  const Result t = cli(with(train, {"--out", run}));
  REQUIRE(t.code == 0);
  const std::string ckpt = run + "/checkpoints/last.rckp";
  CHECK(checkpoint_load(ckpt).iteration == 4);
  CHECK(fs::exists(root / "run" / "VERSION"));
  CHECK(fs::exists(root / "run" / "resolved_config.cfg"));

  SUBCASE("resume reproduces the uninterrupted log") {
    const std::string resumed = (root / "resumed").string();
    REQUIRE(cli(with(train, {"--out", resumed, "--resume", run + "/checkpoints/ckpt_000002.rckp"})).code == 0);
    const std::string full = read_file(root / "run" / "train_log.csv");
    const std::string tail = read_file(root / "resumed" / "train_log.csv");
    CHECK(full.substr(full.size() - (tail.size() - train_log_header().size())) ==
          tail.substr(train_log_header().size()));
  }
  SUBCASE("fingerprint mismatch needs the override") {
    const std::string other = (root / "other").string();
    auto changed = with(train, {"--out", other, "--resume", ckpt, "--set", "model.init_kernel=3", "--set",
                                "train.max_iters=5"});
    const Result r = cli(changed);
    CHECK(r.code == 1);
    CHECK(r.err.find("--allow-fingerprint-mismatch") != std::string::npos);
    CHECK(!fs::exists(other));
    changed.push_back("--allow-fingerprint-mismatch");
    CHECK(cli(changed).code == 0);
    CHECK(checkpoint_load(other + "/checkpoints/last.rckp").iteration == 5);
  }
  SUBCASE("eval prints the metrics block and writes metrics.csv") {
    const Result r = cli({"eval", "--checkpoint", ckpt, "--manifest", manifest, "--split", "val", "--out",
                          (root / "eval").string()});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("IoU") != std::string::npos);
    CHECK(read_file(root / "eval" / "metrics.csv").rfind("task,iou,precision,recall,f1\nbuilding,", 0) == 0);
    CHECK(fs::exists(root / "eval" / "VERSION"));
    CHECK(cli({"eval", "--checkpoint", ckpt, "--manifest", manifest, "--split", "test"}).code == 1);
  }
  SUBCASE("predict writes probability maps and error rasters") {
    const std::string out = (root / "pred").string();
    const Manifest m = load_manifest(manifest);
    const auto& e = m.entries.front();
    REQUIRE(cli({"predict", "--checkpoint", ckpt, "--image", data + "/" + e.image, "--building",
                 data + "/" + e.building, "--road", data + "/" + e.road, "--out", out})
                .code == 0);
    const Raster8 prob = read_pnm(root / "pred" / "building_prob.pgm");
    CHECK(prob.channels == 1);
    CHECK(prob.height == 32);
    const Raster8 err = read_pnm(root / "pred" / "road_error.ppm");
    CHECK(err.channels == 3);
    CHECK(fs::exists(root / "pred" / "metrics.csv"));
  }
  SUBCASE("analyze writes every report") {
    const std::string out = (root / "analyze").string();
    const Result r = cli({"analyze", "--checkpoint", ckpt, "--out", out, "--flops", "--params", "--fps", "--scales",
                          "--features", "--input", "32", "--runs", "2", "--warmup", "0", "--channels", "1"});
    REQUIRE(r.code == 0);
    for (const char* f : {"flops.csv", "params.csv", "fps.json", "scales.csv", "features/index.json", "VERSION"})
      CHECK(fs::exists(root / "analyze" / f));
    CHECK(cli({"analyze", "--checkpoint", ckpt, "--out", out, "--flops", "--input", "30"}).code == 1);
  }
  SUBCASE("diverging training exits 2 and names the last good checkpoint") {
    const std::string out = (root / "diverge").string();
    const Result r = cli(with(train, {"--out", out, "--set", "train.base_lr=1e30", "--set",
                                      "train.checkpoint_interval=1"}));
    CHECK(r.code == 2);
    CHECK(r.err.find("non-finite loss at iteration 2") != std::string::npos);
    CHECK(r.err.find("last good checkpoint") != std::string::npos);
    CHECK(checkpoint_load(out + "/checkpoints/last.rckp").iteration == 1);
  }
  fs::remove_all(root);
}

TEST_CASE("eval on predictions equal to the ground truth reports 100.00 everywhere") {
  const fs::path root = scratch("perfect");
  REQUIRE(cli(with({"synth", "--out", (root / "data").string()}, kTiny)).code == 0);
  RunConfig rc = load_run_config((root / "data" / "resolved_config.cfg").string());
  const Manifest m = load_manifest(root / "data" / "manifest.json");
  const Model model(ModelKind::full_crin, rc.model, 11);

  // Replace the masks with the model's own thresholded predictions.
  std::int64_t positives[2] = {0, 0};
  for (const auto& e : m.entries) {
    const Prediction p = predict(model, load_image(root / "data" / e.image));
    std::size_t k = 0;
    for (const auto& [prob, path] : {std::pair{&p.building, e.building}, std::pair{&p.road, e.road}}) {
      Tensor mask(prob->shape());
      for (std::int64_t i = 0; i < mask.numel(); ++i) mask.set(i, prob->at(i) >= 0.5 ? 1.0 : 0.0);
      if (e.split == "val") positives[k] += static_cast<std::int64_t>(ops::sum(mask));
      save_mask(mask, root / "data" / path);
      ++k;
    }
  }
  REQUIRE(positives[0] > 0);
  REQUIRE(positives[1] > 0);

  Checkpoint ck{rc, model.fingerprint(), 0, {}, "", model.params()};
  std::ostringstream rng;
  rng << std::mt19937_64(0);
  ck.rng_state = rng.str();
  checkpoint_save(ck, root / "perfect.rckp");

  const Result r = cli({"eval", "--checkpoint", (root / "perfect.rckp").string(), "--manifest",
                        (root / "data" / "manifest.json").string(), "--split", "val", "--out", (root / "eval").string()});
  REQUIRE(r.code == 0);
  CHECK(count(r.out, "100.00") == 8);
  CHECK(read_file(root / "eval" / "metrics.csv") ==
        "task,iou,precision,recall,f1\nbuilding,100.00,100.00,100.00,100.00\nroad,100.00,100.00,100.00,100.00\n");
  fs::remove_all(root);
}

TEST_CASE("gradcheck passes on the tiny model and reports every case") {
  const fs::path out = scratch("gradcheck");
  const Result r = cli(with({"gradcheck", "--out", out.string()}, kTiny));
  CHECK(r.code == 0);
  CHECK(r.out.rfind("case,params,tolerance,max_rel_err,result\n", 0) == 0);
  CHECK(r.out.find("FAIL") == std::string::npos);
  CHECK(r.out.find("full_crin_dense_32px") != std::string::npos);
  CHECK(read_file(out / "gradcheck.csv") == r.out);
  CHECK(cli(with({"gradcheck", "--size", "30"}, kTiny)).code == 1);
  fs::remove_all(out);
}

TEST_CASE("error raster colors") {
  const Tensor prob = Tensor::from_list({1, 1, 1, 4}, {0.9, 0.1, 0.9, 0.1});
  const Tensor truth = Tensor::from_list({1, 1, 1, 4}, {1.0, 1.0, 0.0, 0.0});
  const Raster8 r = error_raster(prob, truth);
  CHECK(r.channels == 3);
  CHECK(r.pixels == std::vector<std::uint8_t>{0, 255, 0, /**/ 0, 0, 255, /**/ 255, 0, 0, /**/ 0, 0, 0});
  CHECK_THROWS_AS(error_raster(prob, Tensor({1, 1, 2, 2})), ShapeError);
}

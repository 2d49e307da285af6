#include "crin/cli.hpp"

#include <fmt/format.h>

#include <CLI11.hpp>
#include <filesystem>
#include <json.hpp>
#include <ostream>

#include "crin/analysis.hpp"
#include "crin/gradcheck.hpp"
#include "crin/train.hpp"

namespace crin {

namespace fs = std::filesystem;

namespace {

/// Bad arguments detected after parsing; exit code 1.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ConfigArgs {
  std::string path;
  std::vector<std::string> sets;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", path, "key = value run configuration")->check(CLI::ExistingFile);
    cmd->add_option("--set", sets, "override one key, e.g. --set train.max_iters=100 (repeatable)");
  }

  RunConfig resolve() const {
    RunConfig rc = path.empty() ? RunConfig{} : load_run_config(path);
    for (const auto& s : sets) apply_override(rc, s);
    rc.validate();
    return rc;
  }
};

// Tracks whether anything has been written, so late argument errors still
// report as runtime failures.
struct Session {
  std::ostream& out;
  std::ostream& err;
  bool wrote = false;

  void write_run_files(const fs::path& dir, const RunConfig& rc) {
    wrote = true;
    fs::create_directories(dir);
    write_file(dir / "resolved_config.cfg", to_config_text(rc));
    write_file(dir / "VERSION", fmt::format("crin {}\n", kVersion));
  }
};

void require_divisible(std::int64_t size, const CrinConfig& c, const char* what) {
  if (size <= 0 || size % c.divisibility() != 0)
    throw UsageError(fmt::format("{} {} must be a positive multiple of {}", what, size, c.divisibility()));
}

std::pair<std::vector<Sample>, std::vector<Sample>> training_data(const RunConfig& rc, std::ostream& out) {
  if (!rc.train.manifest.empty()) {
    const Manifest m = load_manifest(rc.train.manifest);
    return {m.load_split(rc.train.train_split), m.load_split(rc.train.val_split)};
  }
  out << "no manifest given; generating the synthetic dataset in memory\n";
  SynthDataset data = synth_generate(rc.synth);
  std::vector<Sample> train, val;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    if (data.splits[i] == rc.train.train_split) train.push_back(std::move(data.samples[i]));
    else if (data.splits[i] == rc.train.val_split) val.push_back(std::move(data.samples[i]));
  }
  return {std::move(train), std::move(val)};
}

// ---- synth ----

struct SynthCmd {
  ConfigArgs config;
  std::string out;

  void attach(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("synth", "generate the synthetic building/road dataset and its manifest");
    config.attach(cmd);
    cmd->add_option("--out", out, "output directory")->required();
  }

  int run(Session& s) const {
    const RunConfig rc = config.resolve();
    s.write_run_files(out, rc);
    const SynthDataset data = synth_generate(rc.synth);
    write_dataset(data, out);
    s.out << fmt::format("wrote {} scenes ({} train, {} val, {} test) to {}\n", data.samples.size(),
                         rc.synth.train_scenes, rc.synth.val_scenes, rc.synth.test_scenes, out);
    if (data.skipped_buildings > 0) s.out << fmt::format("{} buildings did not fit and were skipped\n", data.skipped_buildings);
    return kExitOk;
  }
};

// ---- train ----

struct TrainCmd {
  ConfigArgs config;
  std::string variant, out, manifest, resume;
  bool allow_mismatch = false;

  void attach(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("train", "train a model variant and write logs and checkpoints");
    config.attach(cmd);
    cmd->add_option("--variant", variant, "baseline, naive_multitask, mti_only or full_crin");
    cmd->add_option("--out", out, "output directory")->required();
    cmd->add_option("--manifest", manifest, "dataset manifest (default: train.manifest, else synthetic)")
        ->check(CLI::ExistingFile);
    cmd->add_option("--resume", resume, "continue from a checkpoint")->check(CLI::ExistingFile);
    cmd->add_flag("--allow-fingerprint-mismatch", allow_mismatch,
                  "resume even if the checkpoint was trained with a different model config");
  }

  int run(Session& s) const {
    RunConfig rc = config.resolve();
    if (!variant.empty()) set_key(rc, "train.variant", variant);
    if (!manifest.empty()) rc.train.manifest = manifest;
    rc.validate();

    auto [train, val] = training_data(rc, s.out);
    if (train.empty()) throw UsageError(fmt::format("split '{}' has no samples", rc.train.train_split));

    std::unique_ptr<Trainer> trainer;
    if (!resume.empty()) {
      Checkpoint ckpt = checkpoint_load(resume);
      const std::string expected = Model(rc.train.variant, rc.model, 0, rc.train.dtype).fingerprint();
      if (ckpt.fingerprint != expected) {
        if (!allow_mismatch)
          throw UsageError(fmt::format("{}: checkpoint fingerprint {} does not match the configured model {}; "
                                       "pass --allow-fingerprint-mismatch to resume with the checkpoint's model",
                                       resume, ckpt.fingerprint, expected));
        s.err << fmt::format("warning: fingerprint mismatch ({} vs {}); keeping the checkpoint's model config\n",
                             ckpt.fingerprint, expected);
      }
      // The schedule and data come from this invocation, the network from the checkpoint.
      const ModelKind kind = ckpt.config.train.variant;
      const DType dtype = ckpt.config.train.dtype;
      ckpt.config.train = rc.train;
      ckpt.config.train.variant = kind;
      ckpt.config.train.dtype = dtype;
      ckpt.config.synth = rc.synth;
      if (ckpt.iteration >= rc.train.max_iters)
        throw UsageError(fmt::format("checkpoint is already at iteration {} and train.max_iters is {}",
                                     ckpt.iteration, rc.train.max_iters));
      trainer = std::make_unique<Trainer>(ckpt, std::move(train), std::move(val));
      s.out << fmt::format("resuming from {} at iteration {}\n", resume, ckpt.iteration);
    } else {
      trainer = std::make_unique<Trainer>(rc, std::move(train), std::move(val));
    }

    s.write_run_files(out, trainer->config());
    const fs::path last = fs::path(out) / "checkpoints" / "last.rckp";
    try {
      trainer->run(-1, {out, &s.out});
    } catch (const TrainingAborted& e) {
      s.err << "error: training aborted: " << e.what() << "\n";
      if (fs::exists(last))
        s.err << fmt::format("last good checkpoint: {} (iteration {})\n", last.string(), checkpoint_load(last).iteration);
      else
        s.err << "no checkpoint was written before the failure\n";
      return kExitRuntime;
    }
    s.out << fmt::format("finished {} iterations; checkpoint {}\n", trainer->iteration(), last.string());
    return kExitOk;
  }
};

// ---- eval ----

struct EvalCmd {
  std::string checkpoint, manifest, split, out;

  void attach(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("eval", "IoU, precision, recall and F1 per task on a manifest split");
    cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
    cmd->add_option("--manifest", manifest, "dataset manifest")->required()->check(CLI::ExistingFile);
    cmd->add_option("--split", split, "train, val or test")->required();
    cmd->add_option("--out", out, "also write metrics.csv here");
  }

  int run(Session& s) const {
    const Checkpoint ckpt = checkpoint_load(checkpoint);
    const Model model = model_from_checkpoint(ckpt);
    const std::vector<Sample> samples = load_manifest(manifest).load_split(split);
    if (samples.empty()) throw UsageError(fmt::format("split '{}' has no samples", split));
    if (!out.empty()) s.write_run_files(out, ckpt.config);
    const auto rows = evaluate(model, samples).rows();
    s.out << fmt::format("{} on {} {} samples\n", model_kind_name(model.kind()), samples.size(), split);
    s.out << metrics_table(rows);
    if (!out.empty()) write_file(fs::path(out) / "metrics.csv", metrics_csv(rows));
    return kExitOk;
  }
};

// ---- predict ----

struct PredictCmd {
  std::string checkpoint, image, out, building, road;
  std::int64_t patch = 512;

  void attach(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("predict", "probability maps and error rasters for one image");
    cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
    cmd->add_option("--image", image, "RGB image (PPM or RTEN)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--out", out, "output directory")->required();
    cmd->add_option("--building", building, "building ground-truth mask (PGM)")->check(CLI::ExistingFile);
    cmd->add_option("--road", road, "road ground-truth mask (PGM)")->check(CLI::ExistingFile);
    cmd->add_option("--patch", patch, "tile size for large images")->capture_default_str();
  }

  int run(Session& s) const {
    const Checkpoint ckpt = checkpoint_load(checkpoint);
    const Model model = model_from_checkpoint(ckpt);
    require_divisible(patch, ckpt.config.model, "--patch");
    const Tensor img = load_raster(image);
    if (img.shape().n != 1 || img.shape().c != 3)
      throw UsageError(fmt::format("{}: expected an RGB image, got shape {}", image, img.shape().str()));
    std::vector<std::pair<std::string, Tensor>> truths;
    for (const auto& [task, path] : {std::pair{"building", building}, std::pair{"road", road}}) {
      if (path.empty()) continue;
      Tensor t = load_mask(path);
      if (t.shape().h != img.shape().h || t.shape().w != img.shape().w)
        throw UsageError(fmt::format("{}: mask shape {} does not match image {}", path, t.shape().str(), img.shape().str()));
      truths.emplace_back(task, std::move(t));
    }

    s.write_run_files(out, ckpt.config);
    const Prediction p = predict(model, img, patch);
    const fs::path dir(out);
    save_image(p.building, dir / "building_prob.pgm");
    save_image(p.road, dir / "road_prob.pgm");
    s.out << fmt::format("wrote {} and {}\n", (dir / "building_prob.pgm").string(), (dir / "road_prob.pgm").string());
    if (truths.empty()) return kExitOk;

    std::vector<std::pair<std::string, Metrics>> rows;
    for (const auto& [task, truth] : truths) {
      const Tensor& prob = task == "building" ? p.building : p.road;
      write_pnm(dir / (task + "_error.ppm"), error_raster(prob, truth));
      ConfusionCounts counts;
      confusion_update(counts, prob, truth);
      rows.emplace_back(task, metrics_compute(counts));
    }
    write_file(dir / "metrics.csv", metrics_csv(rows));
    s.out << metrics_table(rows);
    return kExitOk;
  }
};

// ---- analyze ----

struct AnalyzeCmd {
  std::string checkpoint, out, manifest, split = "val", image;
  bool flops = false, params = false, fps = false, scales = false, features = false;
  std::int64_t input = 512, batch = 1, probe = static_cast<std::int64_t>(kMinProbeSamples), channels = 4;
  int warmup = 5, runs = 20;
  std::vector<int> stages;

  void attach(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("analyze", "cost, speed, scale-attention and feature-map analysis");
    cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
    cmd->add_option("--out", out, "output directory")->required();
    cmd->add_flag("--flops", flops, "per-layer MACs and FLOPs -> flops.csv");
    cmd->add_flag("--params", params, "per-layer parameter counts -> params.csv");
    cmd->add_flag("--fps", fps, "inference throughput -> fps.json");
    cmd->add_flag("--scales", scales, "winning branch per channel -> scales.csv");
    cmd->add_flag("--features", features, "f_b, f_s, f_r feature maps -> features/");
    cmd->add_option("--input", input, "square input size for --flops and --fps")->capture_default_str();
    cmd->add_option("--batch", batch, "batch size for --fps")->capture_default_str();
    cmd->add_option("--warmup", warmup, "untimed passes for --fps")->capture_default_str();
    cmd->add_option("--runs", runs, "timed passes for --fps")->capture_default_str();
    cmd->add_option("--manifest", manifest, "probe images for --scales and --features (default: synthetic)")
        ->check(CLI::ExistingFile);
    cmd->add_option("--split", split, "manifest split for probe images")->capture_default_str();
    cmd->add_option("--probe", probe, "probe images for --scales")->capture_default_str();
    cmd->add_option("--image", image, "image for --features (default: first probe image)")->check(CLI::ExistingFile);
    cmd->add_option("--stages", stages, "decoder stages for --features (default: all)");
    cmd->add_option("--channels", channels, "channels per space for --features")->capture_default_str();
  }

  std::vector<Tensor> probe_images(const RunConfig& rc, std::int64_t count) const {
    std::vector<Tensor> images;
    if (!manifest.empty()) {
      const Manifest m = load_manifest(manifest);
      for (const auto& e : m.split(split)) {
        if (static_cast<std::int64_t>(images.size()) >= count) break;
        images.push_back(m.load(e).image);
      }
      return images;
    }
    // Seeds disjoint from synth_generate's so the probe is held out.
    for (std::int64_t k = 0; k < count; ++k)
      images.push_back(synth_scene(rc.synth, 0x9e3779b97f4a7c15ULL ^ (rc.synth.seed + static_cast<std::uint64_t>(k))).image);
    return images;
  }

  int run(Session& s) const {
    if (!(flops || params || fps || scales || features))
      throw UsageError("analyze needs at least one of --flops, --params, --fps, --scales, --features");
    const Checkpoint ckpt = checkpoint_load(checkpoint);
    const Model model = model_from_checkpoint(ckpt);
    const CrinConfig& mc = ckpt.config.model;
    if (flops || fps) require_divisible(input, mc, "--input");
    if (batch < 1) throw UsageError("--batch must be >= 1");
    if (scales && !model.has_csi())
      throw UsageError(fmt::format("--scales needs scale attention; {} has none", model_kind_name(model.kind())));
    if (scales && probe < static_cast<std::int64_t>(kMinProbeSamples))
      throw UsageError(fmt::format("--probe must be at least {}", kMinProbeSamples));
    if (features && !model.has_mti())
      throw UsageError(fmt::format("--features needs task feature spaces; {} has none", model_kind_name(model.kind())));
    for (int j : stages)
      if (j < 0 || j >= mc.num_stages) throw UsageError(fmt::format("--stages: {} is not in [0, {})", j, mc.num_stages));

    s.write_run_files(out, ckpt.config);
    const fs::path dir(out);
    const Shape shape{1, mc.in_channels, input, input};
    if (params) {
      const CostReport r = count_params(model);
      write_file(dir / "params.csv", r.csv());
      s.out << fmt::format("params: {} learnable ({:.3f} M)\n", r.total_params(), r.total_params() / 1e6);
    }
    if (flops) {
      const CostReport r = count_flops(model, shape);
      write_file(dir / "flops.csv", r.csv());
      s.out << fmt::format("flops at {}x{}: {} MACs, {:.3f} GFLOPs\n", input, input, r.total_macs(), r.total_flops() / 1e9);
    }
    if (fps) {
      const FpsReport r = bench_fps(model, {batch, mc.in_channels, input, input}, warmup, runs);
      const nlohmann::json j = {{"batch", r.batch}, {"input", input},   {"runs", r.runs},
                                {"mean", r.mean},   {"median", r.median}, {"stddev", r.stddev}};
      write_file(dir / "fps.json", j.dump(2) + "\n");
      s.out << fmt::format("fps at {}x{} batch {}: mean {:.2f}, median {:.2f}, stddev {:.2f}\n", input, input, batch,
                           r.mean, r.median, r.stddev);
    }
    std::vector<Tensor> probe_set;
    if (scales) {
      probe_set = probe_images(ckpt.config, probe);
      const ScaleContribution sc = scale_contribution(model, probe_set);
      write_file(dir / "scales.csv", sc.csv());
      s.out << sc.csv();
    }
    if (features) {
      Tensor img;
      if (!image.empty()) img = load_raster(image);
      else img = probe_set.empty() ? probe_images(ckpt.config, 1).at(0) : probe_set.front();
      std::vector<int> which = stages;
      if (which.empty())
        for (int j = 0; j < mc.num_stages; ++j) which.push_back(j);
      const auto exported = export_features(model, img, which, channels, dir / "features");
      s.out << fmt::format("exported {} feature maps to {}\n", exported.size(), (dir / "features").string());
    }
    return kExitOk;
  }
};

// ---- gradcheck ----

struct GradcheckCmd {
  ConfigArgs config;
  std::string out;
  std::int64_t size = 32, coords = 3;
  std::uint64_t seed = 3;

  void attach(CLI::App& app) {
    CLI::App* cmd =
        app.add_subcommand("gradcheck", "finite-difference check of every op and of a small end-to-end model");
    config.attach(cmd);
    cmd->add_option("--size", size, "input size of the end-to-end check")->capture_default_str();
    cmd->add_option("--coords", coords, "coordinates checked per parameter tensor")->capture_default_str();
    cmd->add_option("--seed", seed, "seed of the end-to-end check")->capture_default_str();
    cmd->add_option("--out", out, "also write gradcheck.csv here");
  }

  int run(Session& s) const {
    const RunConfig rc = config.resolve();
    require_divisible(size, rc.model, "--size");
    if (coords < 1) throw UsageError("--coords must be >= 1");
    if (!out.empty()) s.write_run_files(out, rc);
    std::vector<GradCheckCase> cases = op_gradcheck_suite();
    cases.push_back(model_gradcheck(rc.model, size, seed, coords));
    const std::string summary = gradcheck_summary(cases);
    s.out << summary;
    if (!out.empty()) write_file(fs::path(out) / "gradcheck.csv", summary);
    const auto failed = std::count_if(cases.begin(), cases.end(), [](const GradCheckCase& c) { return !c.passed(); });
    if (failed > 0) {
      s.err << fmt::format("error: {} of {} gradient checks exceed their tolerance\n", failed, cases.size());
      return kExitRuntime;
    }
    return kExitOk;
  }
};

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cross-scale multi-task segmentation of buildings and roads", "crin"};
  app.require_subcommand(1, 1);
  app.set_version_flag("--version", std::string(kVersion));

  SynthCmd synth;
  TrainCmd train;
  EvalCmd eval;
  PredictCmd predict_cmd;
  AnalyzeCmd analyze;
  GradcheckCmd gradcheck;
  synth.attach(app);
  train.attach(app);
  eval.attach(app);
  predict_cmd.attach(app);
  analyze.attach(app);
  gradcheck.attach(app);

  std::vector<const char*> argv{"crin"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    const auto subs = app.get_subcommands();
    out << (subs.empty() ? app.help() : subs.front()->help());
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << "crin " << kVersion << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    const auto subs = app.get_subcommands();
    err << "error: " << e.what() << "\n\n" << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  Session session{out, err};
  const std::string name = app.get_subcommands().front()->get_name();
  try {
    if (name == "synth") return synth.run(session);
    if (name == "train") return train.run(session);
    if (name == "eval") return eval.run(session);
    if (name == "predict") return predict_cmd.run(session);
    if (name == "analyze") return analyze.run(session);
    return gradcheck.run(session);
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return session.wrote ? kExitRuntime : kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace crin

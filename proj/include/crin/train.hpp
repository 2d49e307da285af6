#pragma once

// AdamW, the poly schedule, checkpoints, evaluation and the training loop.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iosfwd>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "crin/config.hpp"
#include "crin/data.hpp"
#include "crin/loss.hpp"
#include "crin/model.hpp"

namespace crin {

/// base_lr · (1 − iter/max_iters)^power, clamped at 0 past the end.
double poly_lr(std::int64_t iter, const TrainConfig& config);

struct OptimizerState {
  std::int64_t step = 0;  // completed AdamW steps
};

/// One AdamW update of every learnable entry. Decoupled decay p ← p − lr·wd·p
/// is applied before the bias-corrected moment step. Moments are allocated
/// on first use.
void adamw_step(ParamStore& params, const GradMap& grads, OptimizerState& state, double lr, const TrainConfig& config);

// ---- Checkpoints ----

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  RunConfig config;
  std::string fingerprint;
  std::int64_t iteration = 0;
  OptimizerState optimizer;
  std::string rng_state;  // textual std::mt19937_64 state
  ParamStore params;
};

/// "RCKP", u32 version, u64 metadata length, JSON metadata, u32 tensor
/// count, then per tensor: u32 name length, name, RTEN blob, u32 crc32 of
/// the blob. Tensors are ParamStore values followed by their moments.
std::string checkpoint_encode(const Checkpoint& ckpt);
Checkpoint checkpoint_decode(std::string_view bytes);
/// Written to a temporary name and renamed into place.
void checkpoint_save(const Checkpoint& ckpt, const std::filesystem::path& path);
/// With `expected_fingerprint` non-empty, a different stored fingerprint is
/// rejected unless `allow_mismatch`.
Checkpoint checkpoint_load(const std::filesystem::path& path, const std::string& expected_fingerprint = {},
                           bool allow_mismatch = false);

/// Rebuilds the model a checkpoint describes and installs its tensors.
Model model_from_checkpoint(const Checkpoint& ckpt);

// ---- Evaluation ----

/// Sigmoid probabilities (1,1,H,W) per task for one (1,3,H,W) image in [0,1].
/// Images larger than `patch` are tiled with 50% overlap and averaged;
/// others are reflect-padded up to the encoder's divisibility.
struct Prediction {
  Tensor building, road;
};
Prediction predict(const Model& model, const Tensor& image, std::int64_t patch = 512);

struct Evaluation {
  ConfusionCounts building, road;
  std::vector<std::pair<std::string, Metrics>> rows() const;
};

/// Micro-averaged confusion counts at threshold 0.5 over every sample.
Evaluation evaluate(const Model& model, const std::vector<Sample>& samples);

/// RGB error map of a thresholded prediction: green for correct foreground,
/// blue for omitted foreground, red for false foreground, black otherwise.
Raster8 error_raster(const Tensor& prob, const Tensor& truth, double threshold = 0.5);

// ---- Training loop ----

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(std::int64_t iteration, const std::string& what)
      : std::runtime_error(what), iteration_(iteration) {}
  std::int64_t iteration() const { return iteration_; }

 private:
  std::int64_t iteration_;
};

struct TrainLogRow {
  std::int64_t iter = 0;  // 1-based
  double lr = 0;
  LossBreakdown loss;
};

struct EvalLogRow {
  std::int64_t iter = 0;
  Evaluation result;
};

/// Writes train_log.csv, eval_log.csv, checkpoints/ckpt_<iter>.rckp and
/// checkpoints/last.rckp under `out_dir` when it is set.
struct TrainOptions {
  std::filesystem::path out_dir;
  std::ostream* progress = nullptr;
};

class Trainer {
 public:
  Trainer(const RunConfig& config, std::vector<Sample> train, std::vector<Sample> val);
  Trainer(const Checkpoint& ckpt, std::vector<Sample> train, std::vector<Sample> val);

  /// Runs iterations until `until` (max_iters when negative) have completed.
  /// Throws TrainingAborted on a non-finite loss without touching files
  /// written by earlier iterations.
  void run(std::int64_t until = -1, const TrainOptions& options = {});
  /// One iteration; returns its log row.
  TrainLogRow step();

  std::int64_t iteration() const { return iteration_; }
  const Model& model() const { return model_; }
  const RunConfig& config() const { return config_; }
  const std::vector<TrainLogRow>& log() const { return log_; }
  const std::vector<EvalLogRow>& eval_log() const { return eval_log_; }
  Checkpoint checkpoint() const;

 private:
  RunConfig config_;
  Model model_;
  std::vector<Sample> train_, val_;
  OptimizerState optimizer_;
  std::mt19937_64 rng_;
  std::int64_t iteration_ = 0;
  std::vector<TrainLogRow> log_;
  std::vector<EvalLogRow> eval_log_;
};

std::string train_log_header();
std::string train_log_line(const TrainLogRow& row);

}  // namespace crin

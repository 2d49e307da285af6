#pragma once

// Parameter, MAC and FLOP accounting, inference speed, per-scale attention
// statistics and feature-map exports.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "crin/data.hpp"
#include "crin/model.hpp"

namespace crin {

struct LayerCost {
  std::string name;
  std::int64_t params = 0;
  std::int64_t macs = 0;
  std::int64_t flops() const { return 2 * macs; }
};

struct CostReport {
  Shape input{};  // zero when only parameters were counted
  std::vector<LayerCost> layers;  // sorted by name

  std::int64_t total_params() const;
  std::int64_t total_macs() const;
  std::int64_t total_flops() const { return 2 * total_macs(); }
  /// Summed over every layer whose name equals `prefix` or starts with
  /// `prefix` followed by '.'.
  LayerCost subtotal(const std::string& prefix) const;
  /// layer,params,macs,flops rows followed by a total row.
  std::string csv() const;
};

/// Learnable elements per layer; a tensor `a.b.weight` belongs to layer `a.b`.
CostReport count_params(const ParamStore& params);
CostReport count_params(const Model& model);

/// MACs of one evaluation-mode pass of `forward`, grouped by scope. Ops
/// outside any scope are reported under "(top)".
CostReport count_flops(ParamStore& params, const std::function<void(Binding&)>& forward);
/// Inference cost (no aux heads) at `input`, with parameter counts merged in.
CostReport count_flops(const Model& model, Shape input);

struct FpsReport {
  std::int64_t batch = 0;
  int runs = 0;
  double mean = 0, median = 0, stddev = 0;  // images per second
};

/// Timed evaluation-mode forward passes on a zero image of shape `input`.
FpsReport bench_fps(const Model& model, Shape input, int warmup = 5, int runs = 20);

struct ScaleRow {
  int stage = 0;  // decoder stage, 0 = deepest
  std::int64_t height = 0, width = 0;
  std::string space;  // building, shared, road
  std::int64_t channels = 0;
  std::vector<double> fractions;  // per branch, sums to 1
};

struct ScaleContribution {
  std::vector<int> kernels;
  std::vector<ScaleRow> rows;
  /// stage,height,width,space,channels, then one column per branch.
  std::string csv() const;
};

constexpr std::size_t kMinProbeSamples = 16;

/// Per-channel mean attention over the probe images, argmax over branches,
/// aggregated per task space of every scale-attention block.
ScaleContribution scale_contribution(const Model& model, const std::vector<Tensor>& probe_images);

struct FeatureExport {
  std::string file;  // relative to the export directory
  int stage = 0;
  std::string space;
  std::int64_t channel = 0;  // index within the space
  std::int64_t height = 0, width = 0;
  double min = 0, max = 0;
};

/// Min-max normalizes one (H,W) plane to 0..255; a constant plane maps to 0.
Raster8 feature_to_gray(const Tensor& plane);

/// Writes the first `channels_per_space` channels of f_b, f_s and f_r at each
/// listed decoder stage as PGM files plus index.json under `dir`.
std::vector<FeatureExport> export_features(const Model& model, const Tensor& image, const std::vector<int>& stages,
                                           std::int64_t channels_per_space, const std::filesystem::path& dir);

}  // namespace crin

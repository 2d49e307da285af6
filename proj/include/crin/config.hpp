#pragma once

// Architecture, training, and synthesis settings plus the flat
// `key = value` run-configuration format shared by every subcommand.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "crin/tensor.hpp"

namespace crin {

/// Invalid configuration value or key; maps to CLI exit code 1.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class ModelKind { baseline, naive_multitask, mti_only, full_crin };

const char* model_kind_name(ModelKind kind);
ModelKind parse_model_kind(const std::string& s);

/// How the scale-attention MLP mixes channels. `dense` reads the full
/// C-vector; `per_space` runs one MLP per task space so attention for one
/// space never depends on another space's channels.
enum class AttentionMlp { dense, per_space };

enum class UpsampleKind { bilinear, nearest };

/// Branch kernel value standing for the identity (skip) branch.
inline constexpr int kSkipBranch = 0;

struct CrinConfig {
  std::vector<std::int64_t> stage_widths{48, 96, 192, 384};
  /// Fractions of a stage width for the building / shared / road spaces.
  double w_b = 1.0 / 3.0;
  double w_s = 1.0 / 3.0;
  double w_r = 1.0 / 3.0;
  std::vector<int> branch_kernels{kSkipBranch, 7, 11, 21};
  int init_kernel = 5;
  int mlp_reduction = 4;
  int num_stages = 4;
  int in_channels = 3;
  AttentionMlp attention = AttentionMlp::dense;
  UpsampleKind upsample = UpsampleKind::bilinear;

  void validate() const;

  struct Split {
    std::int64_t b, s, r;
  };
  /// Channel counts of the three spaces for a stage of width `width`.
  Split split(std::int64_t width) const;
  /// Per-task channel count of the MTI fusion stage.
  std::int64_t task_channels(std::int64_t width) const;
  /// Input divisibility required by the encoder.
  std::int64_t divisibility() const { return std::int64_t{1} << num_stages; }
  int num_branches() const { return static_cast<int>(branch_kernels.size()); }
};

struct TrainConfig {
  ModelKind variant = ModelKind::full_crin;
  DType dtype = DType::f32;
  double base_lr = 0.001;
  double poly_power = 0.9;
  std::int64_t max_iters = 2000;
  std::int64_t batch_size = 4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double aux_weight = 0.1;
  std::uint64_t seed = 0;
  std::int64_t eval_interval = 500;
  std::int64_t checkpoint_interval = 500;
  std::int64_t log_interval = 50;
  bool augment = true;
  std::string manifest;
  std::string train_split = "train";
  std::string val_split = "val";

  void validate() const;
};

struct SynthConfig {
  std::int64_t scene_size = 128;
  std::int64_t train_scenes = 200;
  std::int64_t val_scenes = 50;
  std::int64_t test_scenes = 0;
  std::int64_t road_count_min = 2;
  std::int64_t road_count_max = 3;
  std::int64_t road_width_min = 5;
  std::int64_t road_width_max = 8;
  std::int64_t building_count = 10;
  std::int64_t building_size_min = 8;
  std::int64_t building_size_max = 16;
  double adjacency_ratio = 0.8;
  bool rotated_buildings = true;
  double noise = 0.1;
  std::uint64_t seed = 1;

  void validate() const;
};

struct RunConfig {
  CrinConfig model;
  TrainConfig train;
  SynthConfig synth;

  void validate() const;
};

/// Parses `key = value` lines on top of the defaults. `#` starts a comment.
/// Unknown keys, duplicates, and malformed values throw ConfigError naming
/// the line.
RunConfig parse_run_config(const std::string& text, const std::string& source = "<config>");
RunConfig load_run_config(const std::string& path);

/// Applies one `key=value` override (as given to --set).
void apply_override(RunConfig& config, const std::string& assignment);
void set_key(RunConfig& config, const std::string& key, const std::string& value);

/// Every key with its resolved value and a comment line documenting it.
std::string to_config_text(const RunConfig& config);
/// Only the model keys, one per line; input to the model fingerprint.
std::string model_config_text(const CrinConfig& config);

struct ConfigKeyInfo {
  std::string key;
  std::string default_value;
  std::string doc;
};
std::vector<ConfigKeyInfo> config_keys();

}  // namespace crin

#pragma once

// Encoder, MTI and CSI decoder blocks, task heads, and the four ablation
// variants built over them.

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "crin/config.hpp"
#include "crin/nn.hpp"

namespace crin {

struct EncoderOutput {
  Var stem;                 // full resolution, stage_widths[0] channels
  std::vector<Var> stages;  // stage i at H / 2^(i+1), stage_widths[i] channels

  Var bottleneck() const { return stages.back(); }
  /// Skip feature consumed by decoder stage j (0 = deepest).
  Var skip(std::size_t j) const;
};

class Encoder {
 public:
  Encoder() = default;
  Encoder(ParamStore& params, const std::string& prefix, const CrinConfig& config, std::mt19937_64& rng);

  EncoderOutput operator()(Binding& b, Var image) const;

 private:
  std::int64_t divisibility_ = 1;
  int in_channels_ = 3;
  nn::ConvBnRelu stem_;
  std::vector<std::pair<nn::ConvBnRelu, nn::ConvBnRelu>> stages_;
};

/// Multi-task interaction: alternating fusion by a two-group 3x3 conv, then
/// projection into building-specific, shared, and road-specific spaces.
class MtiBlock {
 public:
  MtiBlock() = default;
  MtiBlock(ParamStore& params, const std::string& prefix, std::int64_t decoder_width, std::int64_t skip_width,
           std::int64_t width, const CrinConfig& config, std::mt19937_64& rng);

  /// `decoder` must already be at the skip's resolution. Returns [f_b | f_s | f_r].
  Var operator()(Binding& b, Var decoder, Var skip) const;

  std::int64_t width() const { return split_.b + split_.s + split_.r; }
  CrinConfig::Split split() const { return split_; }
  std::int64_t task_channels() const { return c_task_; }

 private:
  std::string prefix_;
  std::int64_t decoder_width_ = 0, skip_width_ = 0, c_task_ = 0;
  CrinConfig::Split split_{};
  nn::ConvBnRelu lateral_, fusion_, proj_b_, proj_s_, proj_r_;
};

struct CsiOutput {
  Var features;
  Var attention;  // (N, branches, C, 1), softmax over axis 1
};

/// Cross-scale interaction: depthwise multi-branch large kernels blended per
/// channel by softmax attention over the branches.
class CsiBlock {
 public:
  CsiBlock() = default;
  CsiBlock(ParamStore& params, const std::string& prefix, std::int64_t width, const CrinConfig& config,
           std::mt19937_64& rng);

  /// With `fixed_attention` the learned attention is replaced by the given
  /// (N, branches, C, 1) tensor.
  CsiOutput operator()(Binding& b, Var f, const Tensor* fixed_attention = nullptr) const;

  std::int64_t width() const { return width_; }
  const std::vector<int>& kernels() const { return kernels_; }
  /// Names of the second MLP layers, one per attention group.
  std::vector<std::string> mlp_output_layers() const;
  /// Channel offset and count of each attention group.
  std::vector<std::pair<std::int64_t, std::int64_t>> mlp_groups() const;

 private:
  struct Branch {
    int kernel = kSkipBranch;
    nn::Conv column, row;
  };
  struct Mlp {
    std::int64_t offset = 0, channels = 0;
    nn::Linear hidden, out;
  };
  std::string prefix_;
  std::int64_t width_ = 0;
  std::vector<int> kernels_;
  nn::Conv init_;
  std::vector<Branch> branches_;
  std::vector<Mlp> mlps_;
};

/// Upsample, concatenate the skip, then two 3x3 conv + BN + ReLU layers.
class ConventionalStage {
 public:
  ConventionalStage() = default;
  ConventionalStage(ParamStore& params, const std::string& prefix, std::int64_t decoder_width,
                    std::int64_t skip_width, std::int64_t width, std::mt19937_64& rng);

  /// `decoder` must already be at the skip's resolution.
  Var operator()(Binding& b, Var decoder, Var skip) const;

 private:
  std::string prefix_;
  nn::ConvBnRelu conv1_, conv2_;
};

struct StageOutput {
  int index = 0;  // 0 = deepest decoder stage
  Var features;   // [f_b | f_s | f_r] for MTI variants
  CrinConfig::Split split{};
  Var attention;      // valid only with CSI
  Var aux_building;   // stage-resolution aux logits, valid when requested
  Var aux_road;
};

struct ModelOutput {
  Var building;  // (N,1,H,W) logits
  Var road;
  std::vector<StageOutput> stages;  // MTI variants only
};

class Model {
 public:
  Model(ModelKind kind, const CrinConfig& config, std::uint64_t seed, DType dtype = DType::f32);

  /// Aux logits are computed when `with_aux` (defaults to training mode).
  ModelOutput forward(Binding& b, Var image, std::optional<bool> with_aux = std::nullopt) const;

  ModelKind kind() const { return kind_; }
  const CrinConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  bool has_mti() const { return kind_ == ModelKind::mti_only || kind_ == ModelKind::full_crin; }
  bool has_csi() const { return kind_ == ModelKind::full_crin; }
  const std::vector<CsiBlock>& csi_blocks() const { return csi_; }
  /// Decoder stage widths, deepest first.
  std::vector<std::int64_t> decoder_widths() const;

  /// Stable hash of the variant and model configuration.
  std::string fingerprint() const;

 private:
  struct Unet {
    Encoder encoder;
    std::vector<ConventionalStage> decoder;
  };
  Var decode_conventional(Binding& b, const Unet& net, Var image, const std::string& prefix) const;
  Var up(Binding& b, Var x, const std::string& scope) const;
  Var head(Binding& b, const nn::Conv& conv, Var x, std::int64_t start, std::int64_t len, Shape image) const;

  ModelKind kind_;
  CrinConfig config_;
  ParamStore params_;
  std::vector<Unet> unets_;  // one per task for baseline, one shared otherwise
  Encoder encoder_;
  std::vector<MtiBlock> mti_;
  std::vector<CsiBlock> csi_;
  nn::Conv head_b_, head_r_;
  std::vector<std::pair<nn::Conv, nn::Conv>> aux_heads_;
};

Model build_variant(ModelKind kind, const CrinConfig& config, std::uint64_t seed, DType dtype = DType::f32);

/// 64-bit FNV-1a as 16 hex digits.
std::string fnv1a_hex(const std::string& text);

}  // namespace crin

#include "crin/model.hpp"

#include <fmt/format.h>

namespace crin {

Var EncoderOutput::skip(std::size_t j) const {
  const std::size_t n = stages.size();
  if (j + 1 < n) return stages[n - 2 - j];
  if (j + 1 == n) return stem;
  throw ShapeError(fmt::format("encoder: no skip feature for decoder stage {}", j));
}

Encoder::Encoder(ParamStore& params, const std::string& prefix, const CrinConfig& config, std::mt19937_64& rng)
    : divisibility_(config.divisibility()), in_channels_(config.in_channels) {
  const auto& w = config.stage_widths;
  stem_ = nn::ConvBnRelu::make(params, prefix + ".stem", ConvSpec::same(config.in_channels, w[0], 3, 3), rng);
  std::int64_t prev = w[0];
  for (std::size_t i = 0; i < w.size(); ++i) {
    const std::string name = fmt::format("{}.stage{}", prefix, i);
    auto down = nn::ConvBnRelu::make(params, name + ".down", ConvSpec::same(prev, w[i], 3, 3, 1, false, 2), rng);
    auto conv = nn::ConvBnRelu::make(params, name + ".conv", ConvSpec::same(w[i], w[i], 3, 3), rng);
    stages_.emplace_back(std::move(down), std::move(conv));
    prev = w[i];
  }
}

EncoderOutput Encoder::operator()(Binding& b, Var image) const {
  const Shape s = image.shape();
  if (s.c != in_channels_)
    throw ShapeError(fmt::format("encoder: image has {} channels, expected {}", s.c, in_channels_));
  if (s.h % divisibility_ != 0 || s.w % divisibility_ != 0)
    throw ShapeError(fmt::format("encoder: input {}x{} must have height and width divisible by {}", s.h, s.w,
                                 divisibility_));
  EncoderOutput out;
  out.stem = stem_(b, image);
  Var x = out.stem;
  for (const auto& [down, conv] : stages_) {
    x = conv(b, down(b, x));
    out.stages.push_back(x);
  }
  return out;
}

MtiBlock::MtiBlock(ParamStore& params, const std::string& prefix, std::int64_t decoder_width,
                   std::int64_t skip_width, std::int64_t width, const CrinConfig& config, std::mt19937_64& rng)
    : prefix_(prefix),
      decoder_width_(decoder_width),
      skip_width_(skip_width),
      c_task_(config.task_channels(width)),
      split_(config.split(width)) {
  if (decoder_width % 2 != 0)
    throw ShapeError(fmt::format("mti: decoder width {} cannot be halved between tasks", decoder_width));
  const std::int64_t c = c_task_;
  lateral_ = nn::ConvBnRelu::make(params, prefix + ".lateral", ConvSpec::same(skip_width, 2 * c, 1, 1), rng);
  fusion_ = nn::ConvBnRelu::make(params, prefix + ".fusion", ConvSpec::same(decoder_width + 2 * c, 2 * c, 3, 3, 2),
                                 rng);
  proj_b_ = nn::ConvBnRelu::make(params, prefix + ".proj_b", ConvSpec::same(c, split_.b, 1, 1), rng);
  proj_s_ = nn::ConvBnRelu::make(params, prefix + ".proj_s", ConvSpec::same(2 * c, split_.s, 1, 1), rng);
  proj_r_ = nn::ConvBnRelu::make(params, prefix + ".proj_r", ConvSpec::same(c, split_.r, 1, 1), rng);
}

Var MtiBlock::operator()(Binding& b, Var decoder, Var skip) const {
  const Shape d = decoder.shape(), s = skip.shape();
  if (d.c != decoder_width_ || s.c != skip_width_)
    throw ShapeError(fmt::format("mti {}: channel layout mismatch: decoder {} (expected {}), skip {} (expected {})",
                                 prefix_, d.c, decoder_width_, s.c, skip_width_));
  if (d.n != s.n || d.h != s.h || d.w != s.w)
    throw ShapeError(fmt::format("mti {}: decoder {} and skip {} differ in batch or resolution", prefix_, d.str(),
                                 s.str()));
  const std::int64_t c = c_task_, half = decoder_width_ / 2;
  Var lat = lateral_(b, skip);
  Var fused;
  {
    Scope scope(b.tape(), prefix_ + ".alternate");
    fused = ag::concat({ag::slice(decoder, 1, 0, half), ag::slice(lat, 1, 0, c), ag::slice(decoder, 1, half, half),
                        ag::slice(lat, 1, c, c)},
                       1);
  }
  Var g = fusion_(b, fused);
  Var g_b = ag::slice(g, 1, 0, c), g_r = ag::slice(g, 1, c, c);
  Var f_b = proj_b_(b, g_b), f_s = proj_s_(b, g), f_r = proj_r_(b, g_r);
  Scope scope(b.tape(), prefix_ + ".output");
  return ag::concat({f_b, f_s, f_r}, 1);
}

CsiBlock::CsiBlock(ParamStore& params, const std::string& prefix, std::int64_t width, const CrinConfig& config,
                   std::mt19937_64& rng)
    : prefix_(prefix), width_(width), kernels_(config.branch_kernels) {
  init_ = nn::Conv::make(params, prefix + ".init", ConvSpec::depthwise(width, config.init_kernel, config.init_kernel),
                         rng);
  for (int k : kernels_) {
    Branch br;
    br.kernel = k;
    if (k != kSkipBranch) {
      const std::string name = fmt::format("{}.k{}", prefix, k);
      br.column = nn::Conv::make(params, name + ".col", ConvSpec::depthwise(width, k, 1), rng);
      br.row = nn::Conv::make(params, name + ".row", ConvSpec::depthwise(width, 1, k), rng);
    }
    branches_.push_back(std::move(br));
  }
  std::vector<std::pair<std::string, std::pair<std::int64_t, std::int64_t>>> groups;
  if (config.attention == AttentionMlp::dense) {
    groups.push_back({"mlp", {0, width}});
  } else {
    const auto s = config.split(width);
    groups = {{"mlp_b", {0, s.b}}, {"mlp_s", {s.b, s.s}}, {"mlp_r", {s.b + s.s, s.r}}};
  }
  const auto nb = static_cast<std::int64_t>(kernels_.size());
  for (const auto& [name, range] : groups) {
    const std::int64_t hidden = std::max<std::int64_t>(1, range.second / config.mlp_reduction);
    Mlp m;
    m.offset = range.first;
    m.channels = range.second;
    m.hidden = nn::Linear::make(params, prefix + "." + name + ".fc1", range.second, hidden, rng);
    m.out = nn::Linear::make(params, prefix + "." + name + ".fc2", hidden, nb * range.second, rng);
    mlps_.push_back(std::move(m));
  }
}

std::vector<std::string> CsiBlock::mlp_output_layers() const {
  std::vector<std::string> out;
  for (const auto& m : mlps_) out.push_back(m.out.name);
  return out;
}

std::vector<std::pair<std::int64_t, std::int64_t>> CsiBlock::mlp_groups() const {
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  for (const auto& m : mlps_) out.emplace_back(m.offset, m.channels);
  return out;
}

CsiOutput CsiBlock::operator()(Binding& b, Var f, const Tensor* fixed_attention) const {
  const Shape s = f.shape();
  if (s.c != width_) throw ShapeError(fmt::format("csi {}: input has {} channels, expected {}", prefix_, s.c, width_));
  const auto nb = static_cast<std::int64_t>(branches_.size());
  Var f_init = init_(b, f);
  std::vector<Var> outs;
  for (const auto& br : branches_) outs.push_back(br.kernel == kSkipBranch ? f_init : br.row(b, br.column(b, f_init)));

  Var attn;
  if (fixed_attention) {
    if (fixed_attention->shape() != Shape{s.n, nb, s.c, 1})
      throw ShapeError(fmt::format("csi {}: fixed attention must be {}, got {}", prefix_,
                                   Shape{s.n, nb, s.c, 1}.str(), fixed_attention->shape().str()));
    attn = b.tape().constant(fixed_attention->to(f.value().dtype()));
  } else {
    Var fuse;
    {
      Scope scope(b.tape(), prefix_ + ".fuse");
      fuse = outs[0];
      for (std::int64_t i = 1; i < nb; ++i) fuse = ag::add(fuse, outs[i]);
      fuse = ag::global_avg_pool(fuse);
    }
    std::vector<Var> logits;
    for (const auto& m : mlps_) {
      Var in = m.channels == width_ ? fuse : ag::slice(fuse, 1, m.offset, m.channels);
      Var h = m.hidden(b, in);
      {
        Scope scope(b.tape(), m.hidden.name);
        h = ag::relu(h);
      }
      logits.push_back(ag::reshape(m.out(b, h), {s.n, nb, m.channels, 1}));
    }
    Scope scope(b.tape(), prefix_ + ".softmax");
    attn = ag::softmax(logits.size() == 1 ? logits[0] : ag::concat(logits, 2), 1);
  }

  Scope scope(b.tape(), prefix_ + ".blend");
  Var out;
  for (std::int64_t i = 0; i < nb; ++i) {
    Var a = ag::reshape(ag::slice(attn, 1, i, 1), {s.n, s.c, 1, 1});
    Var term = ag::scale_channels(outs[i], a);
    out = i == 0 ? term : ag::add(out, term);
  }
  return {out, attn};
}

ConventionalStage::ConventionalStage(ParamStore& params, const std::string& prefix, std::int64_t decoder_width,
                                     std::int64_t skip_width, std::int64_t width, std::mt19937_64& rng)
    : prefix_(prefix) {
  conv1_ = nn::ConvBnRelu::make(params, prefix + ".conv1", ConvSpec::same(decoder_width + skip_width, width, 3, 3),
                                rng);
  conv2_ = nn::ConvBnRelu::make(params, prefix + ".conv2", ConvSpec::same(width, width, 3, 3), rng);
}

Var ConventionalStage::operator()(Binding& b, Var decoder, Var skip) const {
  Var x;
  {
    Scope scope(b.tape(), prefix_ + ".concat");
    x = ag::channel_concat(decoder, skip);
  }
  return conv2_(b, conv1_(b, x));
}

std::vector<std::int64_t> Model::decoder_widths() const {
  const auto& w = config_.stage_widths;
  const std::size_t n = w.size();
  std::vector<std::int64_t> out;
  for (std::size_t j = 0; j < n; ++j) out.push_back(j + 1 < n ? w[n - 2 - j] : w[0]);
  return out;
}

Model::Model(ModelKind kind, const CrinConfig& config, std::uint64_t seed, DType dtype)
    : kind_(kind), config_(config), params_(dtype) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const auto widths = decoder_widths();
  const std::int64_t n = config_.num_stages;

  auto conv1x1 = [&](const std::string& name, std::int64_t in) {
    return nn::Conv::make(params_, name, ConvSpec::same(in, 1, 1, 1), rng);
  };

  if (has_mti()) {
    encoder_ = Encoder(params_, "encoder", config_, rng);
    std::int64_t prev = config_.stage_widths.back();
    for (std::int64_t j = 0; j < n; ++j) {
      const std::string name = fmt::format("decoder.{}", j);
      mti_.emplace_back(params_, name + ".mti", prev, widths[j], widths[j], config_, rng);
      if (has_csi()) csi_.emplace_back(params_, name + ".csi", widths[j], config_, rng);
      prev = widths[j];
    }
    const auto s = config_.split(widths.back());
    head_b_ = conv1x1("head.building", s.b + s.s);
    head_r_ = conv1x1("head.road", s.s + s.r);
    for (std::int64_t j = 0; j < n; ++j) {
      const auto sj = config_.split(widths[j]);
      auto hb = conv1x1(fmt::format("aux.{}.building", j), sj.b + sj.s);
      auto hr = conv1x1(fmt::format("aux.{}.road", j), sj.s + sj.r);
      aux_heads_.emplace_back(std::move(hb), std::move(hr));
    }
    return;
  }

  const std::vector<std::string> prefixes =
      kind_ == ModelKind::baseline ? std::vector<std::string>{"building.", "road."} : std::vector<std::string>{""};
  for (const auto& p : prefixes) {
    Unet net;
    net.encoder = Encoder(params_, p + "encoder", config_, rng);
    std::int64_t prev = config_.stage_widths.back();
    for (std::int64_t j = 0; j < n; ++j) {
      net.decoder.emplace_back(params_, fmt::format("{}decoder.{}", p, j), prev, widths[j], widths[j], rng);
      prev = widths[j];
    }
    unets_.push_back(std::move(net));
  }
  if (kind_ == ModelKind::baseline) {
    head_b_ = conv1x1("building.head", widths.back());
    head_r_ = conv1x1("road.head", widths.back());
  } else {
    head_b_ = conv1x1("head.building", widths.back());
    head_r_ = conv1x1("head.road", widths.back());
  }
}

Var Model::up(Binding& b, Var x, const std::string& scope) const {
  Scope s(b.tape(), scope);
  return ag::upsample(x, 2,
                      config_.upsample == UpsampleKind::bilinear ? ops::UpsampleMode::bilinear
                                                                 : ops::UpsampleMode::nearest);
}

Var Model::head(Binding& b, const nn::Conv& conv, Var x, std::int64_t start, std::int64_t len, Shape image) const {
  if (start != 0 || len != x.shape().c) {
    Scope scope(b.tape(), conv.name);
    x = ag::slice(x, 1, start, len);
  }
  Var y = conv(b, x);
  if (y.shape().h != image.h || y.shape().w != image.w) {
    Scope scope(b.tape(), conv.name);
    y = ag::resize_bilinear(y, image.h, image.w);
  }
  return y;
}

Var Model::decode_conventional(Binding& b, const Unet& net, Var image, const std::string& prefix) const {
  EncoderOutput e = net.encoder(b, image);
  Var d = e.bottleneck();
  for (std::size_t j = 0; j < net.decoder.size(); ++j)
    d = net.decoder[j](b, up(b, d, fmt::format("{}decoder.{}.upsample", prefix, j)), e.skip(j));
  return d;
}

ModelOutput Model::forward(Binding& b, Var image, std::optional<bool> with_aux) const {
  const bool aux = with_aux.value_or(b.training());
  const Shape in = image.shape();
  ModelOutput out;
  if (!has_mti()) {
    if (kind_ == ModelKind::baseline) {
      Var db = decode_conventional(b, unets_[0], image, "building.");
      out.building = head(b, head_b_, db, 0, db.shape().c, in);
      Var dr = decode_conventional(b, unets_[1], image, "road.");
      out.road = head(b, head_r_, dr, 0, dr.shape().c, in);
    } else {
      Var d = decode_conventional(b, unets_[0], image, "");
      out.building = head(b, head_b_, d, 0, d.shape().c, in);
      out.road = head(b, head_r_, d, 0, d.shape().c, in);
    }
    return out;
  }

  EncoderOutput e = encoder_(b, image);
  Var d = e.bottleneck();
  for (std::size_t j = 0; j < mti_.size(); ++j) {
    const std::string name = fmt::format("decoder.{}", j);
    StageOutput st;
    st.index = static_cast<int>(j);
    st.split = mti_[j].split();
    Var f = mti_[j](b, up(b, d, name + ".upsample"), e.skip(j));
    if (has_csi()) {
      CsiOutput c = csi_[j](b, f);
      f = c.features;
      st.attention = c.attention;
    }
    st.features = f;
    if (aux) {
      const auto& [hb, hr] = aux_heads_[j];
      const Shape fs = f.shape();
      st.aux_building = head(b, hb, f, 0, st.split.b + st.split.s, fs);
      st.aux_road = head(b, hr, f, st.split.b, st.split.s + st.split.r, fs);
    }
    out.stages.push_back(st);
    d = f;
  }
  // Road head reads [f_s | f_r]; channel order within a 1x1 conv is immaterial.
  const auto s = mti_.back().split();
  out.building = head(b, head_b_, d, 0, s.b + s.s, in);
  out.road = head(b, head_r_, d, s.b, s.s + s.r, in);
  return out;
}

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return fmt::format("{:016x}", h);
}

std::string Model::fingerprint() const {
  return fnv1a_hex(std::string("variant = ") + model_kind_name(kind_) + "\n" + model_config_text(config_));
}

Model build_variant(ModelKind kind, const CrinConfig& config, std::uint64_t seed, DType dtype) {
  return Model(kind, config, seed, dtype);
}

}  // namespace crin

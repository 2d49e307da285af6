#include "crin/analysis.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <json.hpp>
#include <map>
#include <numeric>

#include "crin/ops.hpp"

namespace crin {

namespace {

std::string layer_of(const std::string& tensor_name) {
  const auto dot = tensor_name.rfind('.');
  return dot == std::string::npos ? tensor_name : tensor_name.substr(0, dot);
}

CostReport from_map(const std::map<std::string, LayerCost>& m) {
  CostReport r;
  for (const auto& [name, cost] : m) r.layers.push_back(cost);
  return r;
}

}  // namespace

std::int64_t CostReport::total_params() const {
  return std::accumulate(layers.begin(), layers.end(), std::int64_t{0},
                         [](std::int64_t a, const LayerCost& l) { return a + l.params; });
}

std::int64_t CostReport::total_macs() const {
  return std::accumulate(layers.begin(), layers.end(), std::int64_t{0},
                         [](std::int64_t a, const LayerCost& l) { return a + l.macs; });
}

LayerCost CostReport::subtotal(const std::string& prefix) const {
  LayerCost out{prefix};
  for (const auto& l : layers) {
    if (l.name == prefix || (l.name.size() > prefix.size() && l.name.compare(0, prefix.size(), prefix) == 0 &&
                             l.name[prefix.size()] == '.')) {
      out.params += l.params;
      out.macs += l.macs;
    }
  }
  return out;
}

std::string CostReport::csv() const {
  std::string out = "layer,params,macs,flops\n";
  for (const auto& l : layers) out += fmt::format("{},{},{},{}\n", l.name, l.params, l.macs, l.flops());
  out += fmt::format("total,{},{},{}\n", total_params(), total_macs(), total_flops());
  return out;
}

CostReport count_params(const ParamStore& params) {
  std::map<std::string, LayerCost> m;
  for (const auto& e : params.entries()) {
    if (!e.learnable) continue;
    const std::string layer = layer_of(e.name);
    m[layer].name = layer;
    m[layer].params += e.value.numel();
  }
  return from_map(m);
}

CostReport count_params(const Model& model) { return count_params(model.params()); }

CostReport count_flops(ParamStore& params, const std::function<void(Binding&)>& forward) {
  Tape tape(false);
  Binding b(tape, params, false);
  forward(b);
  std::map<std::string, LayerCost> m;
  for (const auto& c : tape.costs()) {
    const std::string layer = c.scope.empty() ? "(top)" : c.scope;
    m[layer].name = layer;
    m[layer].macs += c.macs;
  }
  return from_map(m);
}

CostReport count_flops(const Model& model, Shape input) {
  ParamStore snapshot = model.params();
  CostReport flops = count_flops(snapshot, [&](Binding& b) {
    model.forward(b, b.tape().constant(Tensor::zeros(input, snapshot.dtype())), false);
  });
  std::map<std::string, LayerCost> m;
  for (const auto& l : flops.layers) m[l.name] = l;
  for (const auto& l : count_params(model).layers) {
    m[l.name].name = l.name;
    m[l.name].params = l.params;
  }
  CostReport r = from_map(m);
  r.input = input;
  return r;
}

FpsReport bench_fps(const Model& model, Shape input, int warmup, int runs) {
  if (runs <= 0) throw std::invalid_argument(fmt::format("bench_fps: runs must be positive, got {}", runs));
  if (warmup < 0) throw std::invalid_argument(fmt::format("bench_fps: warmup must be non-negative, got {}", warmup));
  ParamStore snapshot = model.params();
  const Tensor image = Tensor::zeros(input, snapshot.dtype());
  auto once = [&] {
    Tape tape(false);
    Binding b(tape, snapshot, false);
    model.forward(b, tape.constant(image), false);
  };
  for (int i = 0; i < warmup; ++i) once();
  std::vector<double> fps;
  for (int i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    once();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    fps.push_back(static_cast<double>(input.n) / std::max(secs, 1e-12));
  }
  FpsReport r{input.n, runs};
  r.mean = std::accumulate(fps.begin(), fps.end(), 0.0) / runs;
  double var = 0;
  for (double f : fps) var += (f - r.mean) * (f - r.mean);
  r.stddev = std::sqrt(var / runs);
  std::sort(fps.begin(), fps.end());
  r.median = runs % 2 ? fps[runs / 2] : 0.5 * (fps[runs / 2 - 1] + fps[runs / 2]);
  return r;
}

std::string ScaleContribution::csv() const {
  std::string out = "stage,height,width,space,channels";
  for (int k : kernels) out += k == kSkipBranch ? std::string(",skip") : fmt::format(",k{}", k);
  out += "\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{},{},{},{}", r.stage, r.height, r.width, r.space, r.channels);
    for (double f : r.fractions) out += fmt::format(",{:.6f}", f);
    out += "\n";
  }
  return out;
}

ScaleContribution scale_contribution(const Model& model, const std::vector<Tensor>& probe_images) {
  if (!model.has_csi())
    throw std::invalid_argument(
        fmt::format("scale_contribution: variant {} has no scale attention", model_kind_name(model.kind())));
  if (probe_images.size() < kMinProbeSamples)
    throw std::invalid_argument(fmt::format("scale_contribution: probe set has {} images, at least {} required",
                                            probe_images.size(), kMinProbeSamples));
  ParamStore snapshot = model.params();
  const auto& cfg = model.config();
  const int nb = cfg.num_branches();

  struct Acc {
    std::vector<double> sum;  // branch-major nb x C
    std::int64_t h = 0, w = 0;
    CrinConfig::Split split{};
  };
  std::vector<Acc> acc;
  for (const auto& img : probe_images) {
    Tape tape(false);
    Binding b(tape, snapshot, false);
    const ModelOutput out = model.forward(b, tape.constant(normalize_image(img).to(snapshot.dtype())), false);
    acc.resize(out.stages.size());
    for (std::size_t j = 0; j < out.stages.size(); ++j) {
      const auto& st = out.stages[j];
      const Tensor& a = st.attention.value();
      const Shape as = a.shape();  // (N, branches, C, 1)
      const std::int64_t channels = as.h;
      auto& A = acc[j];
      A.sum.resize(static_cast<std::size_t>(nb * channels), 0.0);
      A.h = st.features.shape().h;
      A.w = st.features.shape().w;
      A.split = st.split;
      for (std::int64_t n = 0; n < as.n; ++n)
        for (int i = 0; i < nb; ++i)
          for (std::int64_t c = 0; c < channels; ++c) A.sum[static_cast<std::size_t>(i * channels + c)] += a.at(n, i, c, 0);
    }
  }

  ScaleContribution sc;
  sc.kernels = cfg.branch_kernels;
  for (std::size_t j = 0; j < acc.size(); ++j) {
    const auto& A = acc[j];
    const std::int64_t channels = static_cast<std::int64_t>(A.sum.size()) / nb;
    const std::pair<const char*, std::pair<std::int64_t, std::int64_t>> spaces[] = {
        {"building", {0, A.split.b}}, {"shared", {A.split.b, A.split.s}}, {"road", {A.split.b + A.split.s, A.split.r}}};
    for (const auto& [name, range] : spaces) {
      ScaleRow row{static_cast<int>(j), A.h, A.w, name, range.second, std::vector<double>(nb, 0.0)};
      for (std::int64_t c = range.first; c < range.first + range.second; ++c) {
        int best = 0;
        for (int i = 1; i < nb; ++i)
          if (A.sum[static_cast<std::size_t>(i * channels + c)] > A.sum[static_cast<std::size_t>(best * channels + c)])
            best = i;
        row.fractions[best] += 1.0;
      }
      if (range.second > 0)
        for (double& f : row.fractions) f /= static_cast<double>(range.second);
      sc.rows.push_back(std::move(row));
    }
  }
  return sc;
}

Raster8 feature_to_gray(const Tensor& plane) {
  const Shape s = plane.shape();
  Raster8 r{s.h, s.w, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(s.h * s.w), 0)};
  double lo = plane.at(0), hi = lo;
  for (std::int64_t i = 0; i < plane.numel(); ++i) {
    lo = std::min(lo, plane.at(i));
    hi = std::max(hi, plane.at(i));
  }
  if (hi > lo)
    for (std::int64_t i = 0; i < s.h * s.w; ++i)
      r.pixels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::lround((plane.at(i) - lo) / (hi - lo) * 255));
  return r;
}

std::vector<FeatureExport> export_features(const Model& model, const Tensor& image, const std::vector<int>& stages,
                                           std::int64_t channels_per_space, const std::filesystem::path& dir) {
  if (!model.has_mti())
    throw std::invalid_argument(
        fmt::format("export_features: variant {} has no task feature spaces", model_kind_name(model.kind())));
  if (image.shape().n != 1) throw ShapeError("export_features: expected a single (1,3,H,W) image");
  ParamStore snapshot = model.params();
  Tape tape(false);
  Binding b(tape, snapshot, false);
  const ModelOutput out = model.forward(b, tape.constant(normalize_image(image).to(snapshot.dtype())), false);

  std::filesystem::create_directories(dir);
  std::vector<FeatureExport> exports;
  nlohmann::json index = nlohmann::json::array();
  for (int j : stages) {
    if (j < 0 || j >= static_cast<int>(out.stages.size()))
      throw std::invalid_argument(
          fmt::format("export_features: stage {} out of range [0, {})", j, out.stages.size()));
    const auto& st = out.stages[static_cast<std::size_t>(j)];
    const Tensor& f = st.features.value();
    const std::pair<const char*, std::pair<std::int64_t, std::int64_t>> spaces[] = {
        {"building", {0, st.split.b}}, {"shared", {st.split.b, st.split.s}}, {"road", {st.split.b + st.split.s, st.split.r}}};
    for (const auto& [space, range] : spaces) {
      for (std::int64_t k = 0; k < std::min(channels_per_space, range.second); ++k) {
        const Tensor plane = ops::slice(f, 1, range.first + k, 1);
        FeatureExport e{fmt::format("stage{}_{}_c{}.pgm", j, space, k), j, space, k, f.shape().h, f.shape().w};
        e.min = plane.at(0);
        e.max = e.min;
        for (std::int64_t i = 0; i < plane.numel(); ++i) {
          e.min = std::min(e.min, plane.at(i));
          e.max = std::max(e.max, plane.at(i));
        }
        write_pnm(dir / e.file, feature_to_gray(plane));
        index.push_back({{"file", e.file},
                         {"stage", e.stage},
                         {"space", e.space},
                         {"channel", e.channel},
                         {"height", e.height},
                         {"width", e.width},
                         {"min", e.min},
                         {"max", e.max}});
        exports.push_back(std::move(e));
      }
    }
  }
  write_file(dir / "index.json", index.dump(2) + "\n");
  return exports;
}

}  // namespace crin

#include "crin/train.hpp"

#include <fmt/format.h>
#include <zlib.h>

#include <cmath>
#include <cstring>
#include <json.hpp>
#include <ostream>
#include <sstream>

#include "crin/ops.hpp"

namespace crin {

double poly_lr(std::int64_t iter, const TrainConfig& config) {
  if (iter >= config.max_iters) return 0.0;
  if (iter <= 0) return config.base_lr;
  const double progress = static_cast<double>(iter) / static_cast<double>(config.max_iters);
  return config.base_lr * std::pow(1.0 - progress, config.poly_power);
}

void adamw_step(ParamStore& params, const GradMap& grads, OptimizerState& state, double lr, const TrainConfig& config) {
  for (const auto& [name, g] : grads) {
    const auto& e = params.entry(name);
    if (!e.learnable) throw ShapeError(fmt::format("adamw_step: gradient given for buffer '{}'", name));
    if (g.shape() != e.value.shape())
      throw ShapeError(fmt::format("adamw_step: gradient {} for '{}' does not match parameter {}", g.shape().str(), name,
                                   e.value.shape().str()));
  }
  for (auto& e : params.entries()) {
    if (!e.learnable) continue;
    if (!grads.contains(e.name)) throw ShapeError(fmt::format("adamw_step: no gradient for '{}'", e.name));
    for (const Tensor* m : {&e.first_moment, &e.second_moment})
      if (!m->empty() && m->shape() != e.value.shape())
        throw ShapeError(fmt::format("adamw_step: moment {} for '{}' does not match parameter {}", m->shape().str(),
                                     e.name, e.value.shape().str()));
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double b1 = config.beta1, b2 = config.beta2;
  const double bc1 = 1.0 - std::pow(b1, t), bc2 = 1.0 - std::pow(b2, t);
  const double decay = lr * config.weight_decay;
  for (auto& e : params.entries()) {
    if (!e.learnable) continue;
    if (e.first_moment.empty()) e.first_moment = Tensor::zeros(e.value.shape(), e.value.dtype());
    if (e.second_moment.empty()) e.second_moment = Tensor::zeros(e.value.shape(), e.value.dtype());
    const Tensor grad = grads.at(e.name).to(e.value.dtype());
    dispatch(e.value.dtype(), [&]<typename T>() {
      auto p = e.value.data<T>();
      auto m = e.first_moment.data<T>();
      auto v = e.second_moment.data<T>();
      auto g = grad.data<T>();
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i];
        double pi = p[i];
        pi -= decay * pi;
        const double mi = b1 * m[i] + (1 - b1) * gi;
        const double vi = b2 * v[i] + (1 - b2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        pi -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + config.adam_eps);
        p[i] = static_cast<T>(pi);
      }
    });
  }
}

// ---- Checkpoints ----

namespace {

constexpr char kMagic[4] = {'R', 'C', 'K', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(std::string_view b, std::size_t& pos, const char* what) {
  if (pos > b.size() || b.size() - pos < sizeof(T))
    throw CheckpointError(fmt::format("checkpoint: truncated {} at byte offset {}", what, pos));
  T v;
  std::memcpy(&v, b.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

std::uint32_t crc_of(std::string_view bytes) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

void put_tensor(std::string& out, const std::string& name, const Tensor& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  const std::string blob = rten_encode(t);
  out += blob;
  put<std::uint32_t>(out, crc_of(blob));
}

}  // namespace

std::string checkpoint_encode(const Checkpoint& ckpt) {
  nlohmann::json meta;
  meta["format"] = "crin-checkpoint";
  meta["variant"] = model_kind_name(ckpt.config.train.variant);
  meta["fingerprint"] = ckpt.fingerprint;
  meta["iteration"] = ckpt.iteration;
  meta["adam_step"] = ckpt.optimizer.step;
  meta["rng"] = ckpt.rng_state;
  meta["dtype"] = dtype_name(ckpt.params.dtype());
  meta["config"] = to_config_text(ckpt.config);
  const std::string text = meta.dump(1);

  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, text.size());
  out += text;

  std::uint32_t count = 0;
  for (const auto& e : ckpt.params.entries()) count += e.learnable ? 3 : 1;
  put<std::uint32_t>(out, count);
  for (const auto& e : ckpt.params.entries()) {
    if (!e.learnable) {
      put_tensor(out, "buffer:" + e.name, e.value);
      continue;
    }
    put_tensor(out, "param:" + e.name, e.value);
    const Tensor zero = Tensor::zeros(e.value.shape(), e.value.dtype());
    put_tensor(out, "adam_m:" + e.name, e.first_moment.empty() ? zero : e.first_moment);
    put_tensor(out, "adam_v:" + e.name, e.second_moment.empty() ? zero : e.second_moment);
  }
  return out;
}

Checkpoint checkpoint_decode(std::string_view b) {
  if (b.size() < 4 || std::memcmp(b.data(), kMagic, 4) != 0)
    throw CheckpointError("checkpoint: bad magic at byte offset 0 (expected RCKP)");
  std::size_t pos = 4;
  const auto version = get<std::uint32_t>(b, pos, "version");
  if (version != kCheckpointVersion)
    throw CheckpointError(fmt::format("checkpoint: unsupported version {} at byte offset 4", version));
  const auto meta_len = get<std::uint64_t>(b, pos, "metadata length");
  if (meta_len > b.size() - pos)
    throw CheckpointError(fmt::format("checkpoint: metadata length {} at byte offset {} runs past the end of the file",
                                      meta_len, pos - 8));
  const std::size_t meta_at = pos;
  Checkpoint ckpt;
  try {
    const auto meta = nlohmann::json::parse(b.substr(pos, meta_len));
    ckpt.config = parse_run_config(meta.at("config").get<std::string>(), "<checkpoint>");
    ckpt.fingerprint = meta.at("fingerprint").get<std::string>();
    ckpt.iteration = meta.at("iteration").get<std::int64_t>();
    ckpt.optimizer.step = meta.at("adam_step").get<std::int64_t>();
    ckpt.rng_state = meta.at("rng").get<std::string>();
    if (meta.at("variant").get<std::string>() != model_kind_name(ckpt.config.train.variant))
      throw CheckpointError("variant does not match the embedded config");
  } catch (const std::exception& e) {
    throw CheckpointError(fmt::format("checkpoint: bad metadata at byte offset {}: {}", meta_at, e.what()));
  }
  pos += meta_len;

  ckpt.params = ParamStore(ckpt.config.train.dtype);
  const auto count = get<std::uint32_t>(b, pos, "tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t entry_at = pos;
    const auto name_len = get<std::uint32_t>(b, pos, "tensor name length");
    if (name_len > b.size() - pos)
      throw CheckpointError(fmt::format("checkpoint: tensor name at byte offset {} runs past the end", pos));
    const std::string name(b.substr(pos, name_len));
    pos += name_len;
    const std::size_t blob_at = pos;
    std::size_t blob_len = 0;
    Tensor t;
    try {
      blob_len = rten_size(b.substr(pos), pos);
      t = rten_decode(b.substr(pos, blob_len), pos);
    } catch (const DataError& e) {
      throw CheckpointError(fmt::format("checkpoint: tensor '{}': {}", name, e.what()));
    }
    pos += blob_len;
    const auto crc = get<std::uint32_t>(b, pos, "crc32");
    if (crc != crc_of(b.substr(blob_at, blob_len)))
      throw CheckpointError(
          fmt::format("checkpoint: crc32 mismatch for tensor '{}' (payload at byte offset {})", name, blob_at));

    const auto colon = name.find(':');
    const std::string kind = name.substr(0, colon == std::string::npos ? 0 : colon);
    const std::string key = colon == std::string::npos ? name : name.substr(colon + 1);
    if (kind == "param" || kind == "buffer") {
      if (ckpt.params.contains(key))
        throw CheckpointError(fmt::format("checkpoint: duplicate tensor '{}' at byte offset {}", name, entry_at));
      ckpt.params.add(key, std::move(t), kind == "param");
    } else if (kind == "adam_m" || kind == "adam_v") {
      if (!ckpt.params.contains(key) || !ckpt.params.entry(key).learnable)
        throw CheckpointError(
            fmt::format("checkpoint: moment '{}' at byte offset {} has no learnable parameter", name, entry_at));
      auto& e = ckpt.params.entry(key);
      if (t.shape() != e.value.shape())
        throw CheckpointError(fmt::format("checkpoint: moment '{}' at byte offset {} has shape {}, parameter has {}",
                                          name, entry_at, t.shape().str(), e.value.shape().str()));
      (kind == "adam_m" ? e.first_moment : e.second_moment) = t.to(ckpt.params.dtype());
    } else {
      throw CheckpointError(fmt::format("checkpoint: unknown tensor '{}' at byte offset {}", name, entry_at));
    }
  }
  if (pos != b.size())
    throw CheckpointError(fmt::format("checkpoint: {} trailing bytes at byte offset {}", b.size() - pos, pos));
  return ckpt;
}

void checkpoint_save(const Checkpoint& ckpt, const std::filesystem::path& path) {
  auto tmp = path;
  tmp += ".tmp";
  write_file(tmp, checkpoint_encode(ckpt));
  std::filesystem::rename(tmp, path);
}

Checkpoint checkpoint_load(const std::filesystem::path& path, const std::string& expected_fingerprint,
                           bool allow_mismatch) {
  Checkpoint ckpt;
  try {
    ckpt = checkpoint_decode(read_file(path));
  } catch (const CheckpointError& e) {
    throw CheckpointError(fmt::format("{}: {}", path.string(), e.what()));
  }
  if (!expected_fingerprint.empty() && ckpt.fingerprint != expected_fingerprint && !allow_mismatch)
    throw CheckpointError(fmt::format(
        "{}: config fingerprint {} does not match the requested model {} (override to load anyway)", path.string(),
        ckpt.fingerprint, expected_fingerprint));
  return ckpt;
}

namespace {

void install_params(ParamStore& dst, const ParamStore& src) {
  for (const auto& e : dst.entries()) {
    if (!src.contains(e.name)) throw CheckpointError(fmt::format("checkpoint: missing tensor '{}'", e.name));
  }
  for (const auto& s : src.entries()) {
    if (!dst.contains(s.name))
      throw CheckpointError(fmt::format("checkpoint: tensor '{}' is not part of this model", s.name));
    auto& d = dst.entry(s.name);
    if (d.learnable != s.learnable || d.value.shape() != s.value.shape())
      throw CheckpointError(fmt::format("checkpoint: tensor '{}' has shape {}, model expects {}", s.name,
                                        s.value.shape().str(), d.value.shape().str()));
    d.value = s.value.to(dst.dtype());
    d.first_moment = s.first_moment.empty() ? Tensor{} : s.first_moment.to(dst.dtype());
    d.second_moment = s.second_moment.empty() ? Tensor{} : s.second_moment.to(dst.dtype());
  }
}

}  // namespace

Model model_from_checkpoint(const Checkpoint& ckpt) {
  const auto& c = ckpt.config;
  Model model(c.train.variant, c.model, c.train.seed, c.train.dtype);
  install_params(model.params(), ckpt.params);
  return model;
}

// ---- Evaluation ----

namespace {

Tensor pad_reflect(const Tensor& x, std::int64_t h, std::int64_t w) {
  const Shape s = x.shape();
  if (s.h == h && s.w == w) return x;
  auto reflect = [](std::int64_t i, std::int64_t n) {
    if (n == 1) return std::int64_t{0};
    const std::int64_t period = 2 * (n - 1);
    i %= period;
    return i < n ? i : period - i;
  };
  Tensor out({s.n, s.c, h, w}, x.dtype());
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t xx = 0; xx < w; ++xx) out.set(n, c, y, xx, x.at(n, c, reflect(y, s.h), reflect(xx, s.w)));
  return out;
}

Tensor crop_hw(const Tensor& x, std::int64_t row, std::int64_t col, std::int64_t h, std::int64_t w) {
  return ops::slice(ops::slice(x, 2, row, h), 3, col, w);
}

std::int64_t round_up(std::int64_t v, std::int64_t m) { return (v + m - 1) / m * m; }

Prediction run_model(const Model& model, ParamStore& store, const Tensor& image) {
  Tape tape(false);
  Binding b(tape, store, false);
  const Var x = tape.constant(normalize_image(image).to(store.dtype()));
  const ModelOutput out = model.forward(b, x, false);
  return {ops::sigmoid(out.building.value()), ops::sigmoid(out.road.value())};
}

Prediction predict_with(const Model& model, ParamStore& store, const Tensor& image, std::int64_t patch) {
  const Shape s = image.shape();
  if (s.n != 1 || s.c != 3) throw ShapeError(fmt::format("predict: expected a (1,3,H,W) image, got {}", s.str()));
  const std::int64_t d = model.config().divisibility();
  if (s.h <= patch && s.w <= patch) {
    const Tensor padded = pad_reflect(image, round_up(s.h, d), round_up(s.w, d));
    Prediction p = run_model(model, store, padded);
    return {crop_hw(p.building, 0, 0, s.h, s.w), crop_hw(p.road, 0, 0, s.h, s.w)};
  }
  if (patch % d != 0) throw ShapeError(fmt::format("predict: patch {} must be divisible by {}", patch, d));
  const std::int64_t h = std::max(s.h, patch), w = std::max(s.w, patch);
  const Tensor padded = pad_reflect(image, h, w);
  Tensor sum_b = Tensor::zeros({1, 1, h, w}, DType::f64), sum_r = sum_b, hits = sum_b;
  for (const auto& [row, col] : clip_patches(h, w, patch, 0.5)) {
    const Prediction p = run_model(model, store, crop_hw(padded, row, col, patch, patch));
    for (std::int64_t y = 0; y < patch; ++y)
      for (std::int64_t x = 0; x < patch; ++x) {
        const std::int64_t i = (row + y) * w + col + x;
        sum_b.set(i, sum_b.at(i) + p.building.at(0, 0, y, x));
        sum_r.set(i, sum_r.at(i) + p.road.at(0, 0, y, x));
        hits.set(i, hits.at(i) + 1);
      }
  }
  Tensor pb({1, 1, s.h, s.w}, store.dtype()), pr = pb;
  for (std::int64_t y = 0; y < s.h; ++y)
    for (std::int64_t x = 0; x < s.w; ++x) {
      const std::int64_t i = y * w + x;
      pb.set(y * s.w + x, sum_b.at(i) / hits.at(i));
      pr.set(y * s.w + x, sum_r.at(i) / hits.at(i));
    }
  return {pb, pr};
}

}  // namespace

Prediction predict(const Model& model, const Tensor& image, std::int64_t patch) {
  ParamStore snapshot = model.params();
  return predict_with(model, snapshot, image, patch);
}

std::vector<std::pair<std::string, Metrics>> Evaluation::rows() const {
  return {{"building", metrics_compute(building)}, {"road", metrics_compute(road)}};
}

Evaluation evaluate(const Model& model, const std::vector<Sample>& samples) {
  ParamStore snapshot = model.params();
  Evaluation ev;
  for (const auto& s : samples) {
    const Prediction p = predict_with(model, snapshot, s.image, 512);
    confusion_update(ev.building, p.building, s.building);
    confusion_update(ev.road, p.road, s.road);
  }
  return ev;
}

Raster8 error_raster(const Tensor& prob, const Tensor& truth, double threshold) {
  if (prob.shape() != truth.shape() || prob.shape().n != 1 || prob.shape().c != 1)
    throw ShapeError(fmt::format("error_raster: prediction {} and truth {} must both be (1,1,H,W)",
                                 prob.shape().str(), truth.shape().str()));
  const Shape s = prob.shape();
  Raster8 r{s.h, s.w, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(3 * s.h * s.w), 0)};
  for (std::int64_t i = 0; i < s.h * s.w; ++i) {
    const bool pred = prob.at(i) >= threshold, fg = truth.at(i) >= 0.5;
    int channel = -1;
    if (pred && fg) channel = 1;        // correct
    else if (!pred && fg) channel = 2;  // omitted
    else if (pred) channel = 0;         // misclassified
    if (channel >= 0) r.pixels[static_cast<std::size_t>(3 * i + channel)] = 255;
  }
  return r;
}

// ---- Training loop ----

std::string train_log_header() { return "iter,lr,l_building,l_road,l_aux,l_total\n"; }

std::string train_log_line(const TrainLogRow& r) {
  return fmt::format("{},{},{},{},{},{}\n", r.iter, r.lr, r.loss.l_building, r.loss.l_road, r.loss.l_aux, r.loss.l_total);
}

Trainer::Trainer(const RunConfig& config, std::vector<Sample> train, std::vector<Sample> val)
    : config_(config),
      model_(config.train.variant, config.model, config.train.seed, config.train.dtype),
      train_(std::move(train)),
      val_(std::move(val)),
      rng_(config.train.seed) {
  config_.validate();
  if (train_.empty()) throw std::invalid_argument("train: the training split is empty");
}

Trainer::Trainer(const Checkpoint& ckpt, std::vector<Sample> train, std::vector<Sample> val)
    : config_(ckpt.config),
      model_(ckpt.config.train.variant, ckpt.config.model, ckpt.config.train.seed, ckpt.config.train.dtype),
      train_(std::move(train)),
      val_(std::move(val)),
      optimizer_(ckpt.optimizer),
      iteration_(ckpt.iteration) {
  config_.validate();
  if (train_.empty()) throw std::invalid_argument("train: the training split is empty");
  install_params(model_.params(), ckpt.params);
  std::istringstream in(ckpt.rng_state);
  in >> rng_;
  if (!in) throw CheckpointError("checkpoint: unreadable RNG state");
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.config = config_;
  c.fingerprint = model_.fingerprint();
  c.iteration = iteration_;
  c.optimizer = optimizer_;
  std::ostringstream out;
  out << rng_;
  c.rng_state = out.str();
  c.params = model_.params();
  return c;
}

TrainLogRow Trainer::step() {
  const auto& tc = config_.train;
  const double lr = poly_lr(iteration_, tc);
  std::uniform_int_distribution<std::size_t> pick(0, train_.size() - 1);
  std::vector<Sample> batch_samples;
  for (std::int64_t i = 0; i < tc.batch_size; ++i) {
    const std::size_t index = pick(rng_);
    const std::uint64_t seed = rng_();
    batch_samples.push_back(tc.augment ? augment(train_[index], seed) : train_[index]);
  }
  const Batch batch = make_batch(batch_samples, tc.dtype);

  Tape tape;
  Binding bind(tape, model_.params(), true);
  const ModelOutput out = model_.forward(bind, tape.constant(batch.image));
  const LossTerms terms = total_loss(tape, model_, out, batch.building, batch.road, tc.aux_weight);
  TrainLogRow row{iteration_ + 1, lr, terms.values()};
  if (!std::isfinite(row.loss.l_total))
    throw TrainingAborted(row.iter, fmt::format("non-finite loss at iteration {} (l_building = {}, l_road = {}, "
                                                "l_aux = {})",
                                                row.iter, row.loss.l_building, row.loss.l_road, row.loss.l_aux));
  const GradMap grads = backward(terms.total, bind);
  adamw_step(model_.params(), grads, optimizer_, lr, tc);
  ++iteration_;
  log_.push_back(row);
  return row;
}

void Trainer::run(std::int64_t until, const TrainOptions& options) {
  const auto& tc = config_.train;
  if (until < 0 || until > tc.max_iters) until = tc.max_iters;
  std::ofstream log_file, eval_file;
  std::filesystem::path ckpt_dir;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    ckpt_dir = options.out_dir / "checkpoints";
    std::filesystem::create_directories(ckpt_dir);
    auto open = [&](std::ofstream& f, const std::string& name, const std::string& header) {
      const auto path = options.out_dir / name;
      const bool fresh = iteration_ == 0 || !std::filesystem::exists(path);
      f.open(path, fresh ? std::ios::trunc : std::ios::app);
      if (!f) throw std::runtime_error("cannot open " + path.string());
      if (fresh) f << header;
    };
    open(log_file, "train_log.csv", train_log_header());
    open(eval_file, "eval_log.csv", "iter,task,iou,precision,recall,f1,tp,fp,fn\n");
  }

  auto due = [&](std::int64_t interval) {
    return iteration_ == tc.max_iters || (interval > 0 && iteration_ % interval == 0);
  };
  while (iteration_ < until) {
    const TrainLogRow row = step();
    if (log_file.is_open()) log_file << train_log_line(row) << std::flush;
    if (options.progress && (row.iter == 1 || row.iter % std::max<std::int64_t>(tc.log_interval, 1) == 0 ||
                             row.iter == until))
      *options.progress << fmt::format("iter {}/{}  lr {:.4e}  building {:.4f}  road {:.4f}  aux {:.4f}  total {:.4f}\n",
                                       row.iter, tc.max_iters, row.lr, row.loss.l_building, row.loss.l_road, row.loss.l_aux,
                                       row.loss.l_total)
                        << std::flush;
    if (!val_.empty() && due(tc.eval_interval)) {
      EvalLogRow er{iteration_, evaluate(model_, val_)};
      const ConfusionCounts* counts[] = {&er.result.building, &er.result.road};
      std::size_t k = 0;
      for (const auto& [task, m] : er.result.rows()) {
        const auto& c = *counts[k++];
        if (eval_file.is_open())
          eval_file << fmt::format("{},{},{:.2f},{:.2f},{:.2f},{:.2f},{},{},{}\n", er.iter, task, 100 * m.iou,
                                   100 * m.precision, 100 * m.recall, 100 * m.f1, c.tp, c.fp, c.fn);
        if (options.progress)
          *options.progress << fmt::format("eval {}  {:<8} IoU {:.2f}  P {:.2f}  R {:.2f}  F1 {:.2f}\n", er.iter, task,
                                           100 * m.iou, 100 * m.precision, 100 * m.recall, 100 * m.f1);
      }
      if (eval_file.is_open()) eval_file << std::flush;
      eval_log_.push_back(std::move(er));
    }
    if (!ckpt_dir.empty() && due(tc.checkpoint_interval)) {
      const Checkpoint c = checkpoint();
      checkpoint_save(c, ckpt_dir / fmt::format("ckpt_{:06}.rckp", iteration_));
      checkpoint_save(c, ckpt_dir / "last.rckp");
    }
  }
}

}  // namespace crin

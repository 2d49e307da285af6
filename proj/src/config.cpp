#include "crin/config.hpp"

#include <fmt/format.h>

#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>

namespace crin {

const char* model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::baseline: return "baseline";
    case ModelKind::naive_multitask: return "naive_multitask";
    case ModelKind::mti_only: return "mti_only";
    case ModelKind::full_crin: return "full_crin";
  }
  return "?";
}

ModelKind parse_model_kind(const std::string& s) {
  for (ModelKind k : {ModelKind::baseline, ModelKind::naive_multitask, ModelKind::mti_only, ModelKind::full_crin})
    if (s == model_kind_name(k)) return k;
  throw ConfigError("unknown model variant '" + s + "' (expected baseline, naive_multitask, mti_only, full_crin)");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  if (out.empty()) throw ConfigError("empty list");
  return out;
}

std::int64_t parse_int(const std::string& s) {
  std::size_t used = 0;
  std::int64_t v = 0;
  try {
    v = std::stoll(s, &used);
  } catch (const std::exception&) {
    throw ConfigError("expected an integer, got '" + s + "'");
  }
  if (used != s.size()) throw ConfigError("expected an integer, got '" + s + "'");
  return v;
}

std::uint64_t parse_uint(const std::string& s) {
  if (!s.empty() && s[0] == '-') throw ConfigError("expected a non-negative integer, got '" + s + "'");
  std::size_t used = 0;
  std::uint64_t v = 0;
  try {
    v = std::stoull(s, &used);
  } catch (const std::exception&) {
    throw ConfigError("expected a non-negative integer, got '" + s + "'");
  }
  if (used != s.size()) throw ConfigError("expected a non-negative integer, got '" + s + "'");
  return v;
}

// Accepts decimals and simple fractions such as 1/3.
double parse_double(const std::string& s) {
  const auto slash = s.find('/');
  if (slash != std::string::npos) {
    const double den = parse_double(trim(s.substr(slash + 1)));
    if (den == 0) throw ConfigError("zero denominator in '" + s + "'");
    return parse_double(trim(s.substr(0, slash))) / den;
  }
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw ConfigError("expected a number, got '" + s + "'");
  }
  if (used != s.size() || !std::isfinite(v)) throw ConfigError("expected a number, got '" + s + "'");
  return v;
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError("expected true or false, got '" + s + "'");
}

std::string fmt_double(double v) { return fmt::format("{}", v); }

std::string fmt_fraction(double v) {
  for (int den = 2; den <= 12; ++den) {
    const double num = v * den;
    if (std::abs(num - std::round(num)) < 1e-12 && std::abs(v - std::round(num) / den) == 0.0)
      return fmt::format("{}/{}", static_cast<long long>(std::round(num)), den);
  }
  return fmt_double(v);
}

template <typename T>
std::string join(const std::vector<T>& v, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + f(v[i]);
  return out;
}

struct Key {
  std::string name;
  std::string doc;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define CRIN_INT_KEY(NAME, FIELD, DOC)                                                      \
  Key {                                                                                     \
    NAME, DOC, [](RunConfig& c, const std::string& v) { c.FIELD = parse_int(v); },          \
        [](const RunConfig& c) { return std::to_string(c.FIELD); }                          \
  }
#define CRIN_UINT_KEY(NAME, FIELD, DOC)                                                     \
  Key {                                                                                     \
    NAME, DOC, [](RunConfig& c, const std::string& v) { c.FIELD = parse_uint(v); },         \
        [](const RunConfig& c) { return std::to_string(c.FIELD); }                          \
  }
#define CRIN_DOUBLE_KEY(NAME, FIELD, DOC)                                                   \
  Key {                                                                                     \
    NAME, DOC, [](RunConfig& c, const std::string& v) { c.FIELD = parse_double(v); },       \
        [](const RunConfig& c) { return fmt_double(c.FIELD); }                              \
  }
#define CRIN_BOOL_KEY(NAME, FIELD, DOC)                                                     \
  Key {                                                                                     \
    NAME, DOC, [](RunConfig& c, const std::string& v) { c.FIELD = parse_bool(v); },         \
        [](const RunConfig& c) { return std::string(c.FIELD ? "true" : "false"); }          \
  }
#define CRIN_STRING_KEY(NAME, FIELD, DOC)                                                   \
  Key {                                                                                     \
    NAME, DOC, [](RunConfig& c, const std::string& v) { c.FIELD = v; },                     \
        [](const RunConfig& c) { return c.FIELD; }                                          \
  }

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      {"model.stage_widths", "encoder stage channel counts, shallow to deep",
       [](RunConfig& c, const std::string& v) {
         c.model.stage_widths.clear();
         for (const auto& s : split_list(v)) c.model.stage_widths.push_back(parse_int(s));
       },
       [](const RunConfig& c) {
         return join<std::int64_t>(c.model.stage_widths, [](const std::int64_t& w) { return std::to_string(w); });
       }},
      {"model.task_split", "fractions of each stage width for building, shared, road spaces",
       [](RunConfig& c, const std::string& v) {
         const auto parts = split_list(v);
         if (parts.size() != 3) throw ConfigError("task_split needs three fractions");
         c.model.w_b = parse_double(parts[0]);
         c.model.w_s = parse_double(parts[1]);
         c.model.w_r = parse_double(parts[2]);
       },
       [](const RunConfig& c) {
         return fmt_fraction(c.model.w_b) + "," + fmt_fraction(c.model.w_s) + "," + fmt_fraction(c.model.w_r);
       }},
      {"model.branch_kernels", "cross-scale branches in order; 'skip' is the identity branch",
       [](RunConfig& c, const std::string& v) {
         c.model.branch_kernels.clear();
         for (const auto& s : split_list(v))
           c.model.branch_kernels.push_back(s == "skip" ? kSkipBranch : static_cast<int>(parse_int(s)));
       },
       [](const RunConfig& c) {
         return join<int>(c.model.branch_kernels,
                          [](const int& k) { return k == kSkipBranch ? std::string("skip") : std::to_string(k); });
       }},
      CRIN_INT_KEY("model.init_kernel", model.init_kernel, "depthwise kernel applied before the branches"),
      CRIN_INT_KEY("model.mlp_reduction", model.mlp_reduction, "hidden width divisor of the attention MLP"),
      CRIN_INT_KEY("model.num_stages", model.num_stages, "encoder and decoder stage count"),
      CRIN_INT_KEY("model.in_channels", model.in_channels, "image channels"),
      {"model.attention_mlp", "dense or per_space",
       [](RunConfig& c, const std::string& v) {
         if (v == "dense") c.model.attention = AttentionMlp::dense;
         else if (v == "per_space") c.model.attention = AttentionMlp::per_space;
         else throw ConfigError("attention_mlp must be dense or per_space, got '" + v + "'");
       },
       [](const RunConfig& c) {
         return std::string(c.model.attention == AttentionMlp::dense ? "dense" : "per_space");
       }},
      {"model.upsample", "decoder upsampling: bilinear or nearest",
       [](RunConfig& c, const std::string& v) {
         if (v == "bilinear") c.model.upsample = UpsampleKind::bilinear;
         else if (v == "nearest") c.model.upsample = UpsampleKind::nearest;
         else throw ConfigError("upsample must be bilinear or nearest, got '" + v + "'");
       },
       [](const RunConfig& c) {
         return std::string(c.model.upsample == UpsampleKind::bilinear ? "bilinear" : "nearest");
       }},
      {"train.variant", "baseline, naive_multitask, mti_only or full_crin",
       [](RunConfig& c, const std::string& v) { c.train.variant = parse_model_kind(v); },
       [](const RunConfig& c) { return std::string(model_kind_name(c.train.variant)); }},
      {"train.dtype", "f32 or f64",
       [](RunConfig& c, const std::string& v) {
         if (v == "f32") c.train.dtype = DType::f32;
         else if (v == "f64") c.train.dtype = DType::f64;
         else throw ConfigError("dtype must be f32 or f64, got '" + v + "'");
       },
       [](const RunConfig& c) { return std::string(dtype_name(c.train.dtype)); }},
      CRIN_DOUBLE_KEY("train.base_lr", train.base_lr, "initial learning rate"),
      CRIN_DOUBLE_KEY("train.poly_power", train.poly_power, "exponent of the poly schedule"),
      CRIN_INT_KEY("train.max_iters", train.max_iters, "training iterations"),
      CRIN_INT_KEY("train.batch_size", train.batch_size, "samples per iteration"),
      CRIN_DOUBLE_KEY("train.weight_decay", train.weight_decay, "decoupled weight decay"),
      CRIN_DOUBLE_KEY("train.beta1", train.beta1, "first-moment decay"),
      CRIN_DOUBLE_KEY("train.beta2", train.beta2, "second-moment decay"),
      CRIN_DOUBLE_KEY("train.adam_eps", train.adam_eps, "optimizer epsilon"),
      CRIN_DOUBLE_KEY("train.aux_weight", train.aux_weight, "weight of the deep-supervision loss"),
      CRIN_UINT_KEY("train.seed", train.seed, "seed for initialization, sampling and augmentation"),
      CRIN_INT_KEY("train.eval_interval", train.eval_interval, "iterations between validations (0 = end only)"),
      CRIN_INT_KEY("train.checkpoint_interval", train.checkpoint_interval,
                   "iterations between checkpoints (0 = end only)"),
      CRIN_INT_KEY("train.log_interval", train.log_interval, "iterations between progress lines"),
      CRIN_BOOL_KEY("train.augment", train.augment, "random rotation, flips and scaling"),
      CRIN_STRING_KEY("train.manifest", train.manifest, "dataset manifest path"),
      CRIN_STRING_KEY("train.train_split", train.train_split, "manifest split used for training"),
      CRIN_STRING_KEY("train.val_split", train.val_split, "manifest split used for validation"),
      CRIN_INT_KEY("synth.scene_size", synth.scene_size, "scene height and width in pixels"),
      CRIN_INT_KEY("synth.train_scenes", synth.train_scenes, "scenes in the train split"),
      CRIN_INT_KEY("synth.val_scenes", synth.val_scenes, "scenes in the val split"),
      CRIN_INT_KEY("synth.test_scenes", synth.test_scenes, "scenes in the test split"),
      CRIN_INT_KEY("synth.road_count_min", synth.road_count_min, "fewest roads per scene"),
      CRIN_INT_KEY("synth.road_count_max", synth.road_count_max, "most roads per scene"),
      CRIN_INT_KEY("synth.road_width_min", synth.road_width_min, "narrowest road corridor"),
      CRIN_INT_KEY("synth.road_width_max", synth.road_width_max, "widest road corridor"),
      CRIN_INT_KEY("synth.building_count", synth.building_count, "buildings attempted per scene"),
      CRIN_INT_KEY("synth.building_size_min", synth.building_size_min, "smallest building side"),
      CRIN_INT_KEY("synth.building_size_max", synth.building_size_max, "largest building side"),
      CRIN_DOUBLE_KEY("synth.adjacency_ratio", synth.adjacency_ratio, "fraction of buildings placed near a road"),
      CRIN_BOOL_KEY("synth.rotated_buildings", synth.rotated_buildings, "allow rotated rectangles"),
      CRIN_DOUBLE_KEY("synth.noise", synth.noise, "per-pixel uniform noise amplitude"),
      CRIN_UINT_KEY("synth.seed", synth.seed, "scene generator seed"),
  };
  return table;
}

const Key& find_key(const std::string& name) {
  for (const auto& k : keys())
    if (k.name == name) return k;
  throw ConfigError("unknown config key '" + name + "'");
}

void check(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

}  // namespace

void CrinConfig::validate() const {
  check(num_stages >= 1, "model.num_stages must be >= 1");
  check(static_cast<int>(stage_widths.size()) == num_stages,
        fmt::format("model.stage_widths has {} entries but model.num_stages is {}", stage_widths.size(), num_stages));
  check(std::abs(w_b + w_s + w_r - 1.0) < 1e-9, "model.task_split fractions must sum to 1");
  for (std::int64_t w : stage_widths) {
    check(w > 0 && w % 2 == 0, fmt::format("stage width {} must be positive and even", w));
    split(w);
  }
  int skips = 0;
  for (int k : branch_kernels) {
    if (k == kSkipBranch) ++skips;
    else check(k > 0 && k % 2 == 1, fmt::format("branch kernel {} must be odd and positive", k));
  }
  check(skips == 1, "model.branch_kernels must contain 'skip' exactly once");
  check(init_kernel > 0 && init_kernel % 2 == 1, "model.init_kernel must be odd and positive");
  check(mlp_reduction >= 1, "model.mlp_reduction must be >= 1");
  check(in_channels >= 1, "model.in_channels must be >= 1");
}

CrinConfig::Split CrinConfig::split(std::int64_t width) const {
  auto part = [&](double frac, const char* name) {
    const double exact = static_cast<double>(width) * frac;
    const auto n = static_cast<std::int64_t>(std::llround(exact));
    check(std::abs(exact - static_cast<double>(n)) < 1e-6 && n > 0,
          fmt::format("stage width {} times {} fraction {} is not a positive integer", width, name, frac));
    return n;
  };
  Split s{part(w_b, "building"), part(w_s, "shared"), part(w_r, "road")};
  check(s.b + s.s + s.r == width, fmt::format("task split does not partition stage width {}", width));
  return s;
}

std::int64_t CrinConfig::task_channels(std::int64_t width) const {
  const Split s = split(width);
  return (s.b + s.r + 1) / 2;
}

void TrainConfig::validate() const {
  check(max_iters > 0, "train.max_iters must be > 0");
  check(batch_size >= 1, "train.batch_size must be >= 1");
  check(base_lr > 0, "train.base_lr must be > 0");
  check(poly_power >= 0, "train.poly_power must be >= 0");
  check(weight_decay >= 0, "train.weight_decay must be >= 0");
  check(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "train.beta1 and train.beta2 must lie in [0,1)");
  check(adam_eps > 0, "train.adam_eps must be > 0");
  check(aux_weight >= 0, "train.aux_weight must be >= 0");
  check(eval_interval >= 0 && checkpoint_interval >= 0 && log_interval >= 0, "intervals must be >= 0");
}

void SynthConfig::validate() const {
  check(scene_size > 0, "synth.scene_size must be > 0");
  check(train_scenes >= 0 && val_scenes >= 0 && test_scenes >= 0, "scene counts must be >= 0");
  check(road_count_min >= 0 && road_count_max >= road_count_min, "synth.road_count range is invalid");
  check(road_width_min > 0 && road_width_max >= road_width_min, "synth.road_width range must be positive");
  check(building_count >= 0, "synth.building_count must be >= 0");
  check(building_size_min > 0 && building_size_max >= building_size_min, "synth.building_size range must be positive");
  check(adjacency_ratio >= 0 && adjacency_ratio <= 1, "synth.adjacency_ratio must lie in [0,1]");
  check(noise >= 0, "synth.noise must be >= 0");
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  synth.validate();
}

void set_key(RunConfig& config, const std::string& key, const std::string& value) {
  const Key& k = find_key(key);
  try {
    k.set(config, value);
  } catch (const ConfigError& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

RunConfig parse_run_config(const std::string& text, const std::string& source) {
  RunConfig config;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto where = fmt::format("{}:{}: ", source, line_no);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    try {
      set_key(config, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return config;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str(), path);
}

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' must have the form key=value");
  set_key(config, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

std::string to_config_text(const RunConfig& config) {
  std::string out;
  for (const auto& k : keys()) out += "# " + k.doc + "\n" + k.name + " = " + k.get(config) + "\n";
  return out;
}

std::string model_config_text(const CrinConfig& config) {
  RunConfig rc;
  rc.model = config;
  std::string out;
  for (const auto& k : keys())
    if (k.name.rfind("model.", 0) == 0) out += k.name + " = " + k.get(rc) + "\n";
  return out;
}

std::vector<ConfigKeyInfo> config_keys() {
  const RunConfig defaults;
  std::vector<ConfigKeyInfo> out;
  for (const auto& k : keys()) out.push_back({k.name, k.get(defaults), k.doc});
  return out;
}

}  // namespace crin

#include "crin/data.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "crin/ops.hpp"

namespace crin {

namespace fs = std::filesystem;
static_assert(std::endian::native == std::endian::little, "RTEN payloads are written in host order");

std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open '" + path.string() + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("write to '" + path.string() + "' failed");
}

// ---- PNM ----

namespace {

struct PnmHeader {
  Raster8 raster;
  std::size_t data_offset = 0;
};

PnmHeader decode_pnm_impl(std::string_view b, const std::string& source) {
  auto fail = [&](std::size_t off, const std::string& msg) {
    throw DataError(fmt::format("{}: byte offset {}: {}", source, off, msg));
  };
  if (b.size() < 2 || b[0] != 'P' || (b[1] != '5' && b[1] != '6')) fail(0, "not a binary PGM (P5) or PPM (P6) file");
  PnmHeader h;
  h.raster.channels = b[1] == '6' ? 3 : 1;
  std::size_t pos = 2;
  auto read_number = [&](const char* what) {
    for (;;) {
      while (pos < b.size() && std::isspace(static_cast<unsigned char>(b[pos]))) ++pos;
      if (pos < b.size() && b[pos] == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    const std::size_t start = pos;
    std::int64_t v = 0;
    while (pos < b.size() && std::isdigit(static_cast<unsigned char>(b[pos]))) {
      v = v * 10 + (b[pos] - '0');
      if (v > (std::int64_t{1} << 31)) fail(start, fmt::format("{} is too large", what));
      ++pos;
    }
    if (pos == start) fail(start, fmt::format("malformed header: expected {}", what));
    return v;
  };
  h.raster.width = read_number("width");
  h.raster.height = read_number("height");
  const std::int64_t maxval = read_number("maxval");
  if (h.raster.width <= 0 || h.raster.height <= 0) fail(pos, "zero image dimension");
  if (maxval != 255) fail(pos, fmt::format("unsupported maxval {} (only 8-bit 255 is supported)", maxval));
  if (pos >= b.size() || !std::isspace(static_cast<unsigned char>(b[pos])))
    fail(pos, "malformed header: expected whitespace before pixel data");
  ++pos;
  h.data_offset = pos;
  const auto need = static_cast<std::size_t>(h.raster.width * h.raster.height * h.raster.channels);
  if (b.size() - pos < need)
    fail(b.size(), fmt::format("truncated payload: expected {} bytes after offset {}, found {}", need, pos,
                               b.size() - pos));
  h.raster.pixels.assign(b.begin() + static_cast<std::ptrdiff_t>(pos),
                         b.begin() + static_cast<std::ptrdiff_t>(pos + need));
  return h;
}

Tensor raster_to_tensor(const Raster8& r) {
  Tensor t({1, r.channels, r.height, r.width});
  auto d = t.data<float>();
  const std::int64_t plane = r.height * r.width;
  for (std::int64_t i = 0; i < plane; ++i)
    for (int c = 0; c < r.channels; ++c)
      d[static_cast<std::size_t>(c * plane + i)] = static_cast<float>(r.pixels[static_cast<std::size_t>(i * r.channels + c)]) / 255.0f;
  return t;
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

Raster8 tensor_to_raster(const Tensor& t, const char* op) {
  const Shape s = t.shape();
  if (s.n != 1 || (s.c != 1 && s.c != 3))
    throw ShapeError(fmt::format("{}: expected (1,1,H,W) or (1,3,H,W), got {}", op, s.str()));
  Raster8 r;
  r.channels = static_cast<int>(s.c);
  r.height = s.h;
  r.width = s.w;
  r.pixels.resize(static_cast<std::size_t>(s.numel()));
  const std::int64_t plane = s.h * s.w;
  for (std::int64_t i = 0; i < plane; ++i)
    for (std::int64_t c = 0; c < s.c; ++c) r.pixels[static_cast<std::size_t>(i * s.c + c)] = to_byte(t.at(c * plane + i));
  return r;
}

}  // namespace

Raster8 decode_pnm(std::string_view bytes, const std::string& source) { return decode_pnm_impl(bytes, source).raster; }

std::string encode_pnm(const Raster8& r) {
  if (r.channels != 1 && r.channels != 3) throw DataError("encode_pnm: channels must be 1 or 3");
  if (r.pixels.size() != static_cast<std::size_t>(r.width * r.height * r.channels))
    throw DataError("encode_pnm: pixel buffer size does not match dimensions");
  std::string out = fmt::format("P{}\n{} {}\n255\n", r.channels == 3 ? 6 : 5, r.width, r.height);
  out.append(reinterpret_cast<const char*>(r.pixels.data()), r.pixels.size());
  return out;
}

Raster8 read_pnm(const fs::path& path) { return decode_pnm(read_file(path), path.string()); }
void write_pnm(const fs::path& path, const Raster8& raster) { write_file(path, encode_pnm(raster)); }

Tensor load_image(const fs::path& path) {
  Raster8 r = read_pnm(path);
  if (r.channels != 3) throw DataError(path.string() + ": expected an RGB (P6) image");
  return raster_to_tensor(r);
}

Tensor load_gray(const fs::path& path) {
  Raster8 r = read_pnm(path);
  if (r.channels != 1) throw DataError(path.string() + ": expected a grayscale (P5) raster");
  return raster_to_tensor(r);
}

Tensor load_mask(const fs::path& path) {
  const std::string bytes = read_file(path);
  PnmHeader h = decode_pnm_impl(bytes, path.string());
  if (h.raster.channels != 1) throw DataError(path.string() + ": expected a grayscale (P5) mask");
  for (std::size_t i = 0; i < h.raster.pixels.size(); ++i) {
    const auto v = h.raster.pixels[i];
    if (v != 0 && v != 255) {
      const auto row = static_cast<std::int64_t>(i) / h.raster.width, col = static_cast<std::int64_t>(i) % h.raster.width;
      throw DataError(fmt::format("{}: byte offset {}: mask pixel (row {}, col {}) has value {}; masks must be 0 or 255",
                                  path.string(), h.data_offset + i, row, col, v));
    }
  }
  return raster_to_tensor(h.raster);
}

void save_image(const Tensor& image, const fs::path& path) { write_pnm(path, tensor_to_raster(image, "save_image")); }

void save_mask(const Tensor& mask, const fs::path& path) {
  for (std::int64_t i = 0; i < mask.numel(); ++i) {
    const double v = mask.at(i);
    if (v != 0.0 && v != 1.0) throw DataError(fmt::format("save_mask: value {} at index {} is not binary", v, i));
  }
  write_pnm(path, tensor_to_raster(mask, "save_mask"));
}

Tensor load_raster(const fs::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.rfind("RTEN", 0) == 0) return rten_decode(bytes);
  if (bytes.rfind("P6", 0) == 0) return load_image(path);
  if (bytes.rfind("P5", 0) == 0) return load_mask(path);
  throw DataError(path.string() + ": byte offset 0: unrecognized raster format");
}

void save_raster(const Tensor& tensor, const fs::path& path) {
  if (path.extension() == ".rten") write_rten(tensor, path);
  else save_image(tensor, path);
}

// ---- RTEN ----

namespace {

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(std::string_view b, std::size_t& pos, std::uint64_t base, const char* what) {
  if (pos > b.size() || b.size() - pos < sizeof(T))
    throw DataError(fmt::format("RTEN: byte offset {}: truncated while reading {}", base + pos, what));
  T v;
  std::memcpy(&v, b.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

struct RtenHeader {
  DType dtype;
  Shape shape;
  std::size_t payload_offset;
};

RtenHeader rten_header(std::string_view b, std::uint64_t base) {
  if (b.size() < 4 || b.substr(0, 4) != "RTEN") throw DataError(fmt::format("RTEN: byte offset {}: bad magic", base));
  std::size_t pos = 4;
  const auto version = get<std::uint32_t>(b, pos, base, "version");
  if (version != 1) throw DataError(fmt::format("RTEN: byte offset {}: unsupported version {}", base + 4, version));
  const auto code = get<std::uint8_t>(b, pos, base, "dtype");
  if (code > 1) throw DataError(fmt::format("RTEN: byte offset {}: unknown dtype code {}", base + 8, code));
  const auto ndim = get<std::uint8_t>(b, pos, base, "ndim");
  if (ndim < 1 || ndim > 4) throw DataError(fmt::format("RTEN: byte offset {}: unsupported rank {}", base + 9, ndim));
  std::int64_t dims[4] = {1, 1, 1, 1};
  for (int i = 0; i < ndim; ++i) {
    const auto d = get<std::uint64_t>(b, pos, base, "dims");
    if (d > (std::uint64_t{1} << 40)) throw DataError(fmt::format("RTEN: byte offset {}: dimension too large", base + pos - 8));
    dims[4 - ndim + i] = static_cast<std::int64_t>(d);
  }
  return {code == 0 ? DType::f32 : DType::f64, Shape{dims[0], dims[1], dims[2], dims[3]}, pos};
}

}  // namespace

std::string rten_encode(const Tensor& t) {
  std::string out = "RTEN";
  put<std::uint32_t>(out, 1);
  put<std::uint8_t>(out, t.dtype() == DType::f32 ? 0 : 1);
  put<std::uint8_t>(out, 4);
  for (int i = 0; i < 4; ++i) put<std::uint64_t>(out, static_cast<std::uint64_t>(t.shape()[i]));
  const auto bytes = t.bytes();
  out.append(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  return out;
}

std::size_t rten_size(std::string_view bytes, std::uint64_t base_offset) {
  const RtenHeader h = rten_header(bytes, base_offset);
  const std::size_t elem = h.dtype == DType::f32 ? 4 : 8;
  return h.payload_offset + static_cast<std::size_t>(h.shape.numel()) * elem;
}

Tensor rten_decode(std::string_view bytes, std::uint64_t base_offset) {
  const RtenHeader h = rten_header(bytes, base_offset);
  const std::size_t elem = h.dtype == DType::f32 ? 4 : 8;
  const auto need = static_cast<std::size_t>(h.shape.numel()) * elem;
  if (bytes.size() - h.payload_offset < need)
    throw DataError(fmt::format("RTEN: byte offset {}: truncated payload, expected {} bytes, found {}",
                                base_offset + bytes.size(), need, bytes.size() - h.payload_offset));
  Tensor t(h.shape, h.dtype);
  dispatch(h.dtype, [&]<typename T>() {
    std::memcpy(t.data<T>().data(), bytes.data() + h.payload_offset, need);
  });
  return t;
}

void write_rten(const Tensor& t, const fs::path& path) { write_file(path, rten_encode(t)); }

Tensor read_rten(const fs::path& path) {
  const std::string bytes = read_file(path);
  try {
    return rten_decode(bytes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// ---- Manifest ----

std::vector<ManifestEntry> Manifest::split(const std::string& name) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries)
    if (e.split == name) out.push_back(e);
  return out;
}

Sample Manifest::load(const ManifestEntry& e) const {
  Sample s;
  s.image = load_image(base / e.image);
  s.building = load_mask(base / e.building);
  s.road = load_mask(base / e.road);
  s.id = fs::path(e.image).stem().string();
  s.source = SampleSource::file;
  const Shape a = s.image.shape(), b = s.building.shape(), r = s.road.shape();
  if (a.h != b.h || a.w != b.w || a.h != r.h || a.w != r.w)
    throw DataError(fmt::format("sample '{}': image {}x{}, building {}x{}, road {}x{} differ", s.id, a.h, a.w, b.h, b.w,
                                r.h, r.w));
  return s;
}

std::vector<Sample> Manifest::load_split(const std::string& name) const {
  std::vector<Sample> out;
  for (const auto& e : split(name)) out.push_back(load(e));
  return out;
}

Manifest load_manifest(const fs::path& path) {
  const std::string text = read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(fmt::format("{}: byte offset {}: invalid JSON", path.string(), e.byte));
  }
  if (!j.is_array()) throw DataError(path.string() + ": manifest must be a JSON array of records");
  Manifest m;
  m.base = path.parent_path();
  std::set<std::string> seen;
  static const std::set<std::string> splits = {"train", "val", "test"};
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& rec = j[i];
    auto field = [&](const char* key) {
      if (!rec.is_object() || !rec.contains(key) || !rec[key].is_string())
        throw DataError(fmt::format("{}: record {} lacks string field '{}'", path.string(), i, key));
      return rec[key].get<std::string>();
    };
    ManifestEntry e{field("image"), field("building"), field("road"), field("split")};
    if (!splits.count(e.split))
      throw DataError(fmt::format("{}: record {} has split '{}' (expected train, val or test)", path.string(), i,
                                  e.split));
    for (const auto* p : {&e.image, &e.building, &e.road}) {
      if (!seen.insert(*p).second)
        throw DataError(fmt::format("{}: record {} repeats path '{}'", path.string(), i, *p));
      if (!fs::exists(m.base / *p))
        throw DataError(fmt::format("{}: record {} references missing file '{}'", path.string(), i, *p));
    }
    m.entries.push_back(std::move(e));
  }
  return m;
}

void save_manifest(const Manifest& m, const fs::path& path) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : m.entries)
    j.push_back({{"image", e.image}, {"building", e.building}, {"road", e.road}, {"split", e.split}});
  write_file(path, j.dump(2) + "\n");
}

// ---- Tiling ----

std::vector<std::int64_t> clip_axis(std::int64_t extent, std::int64_t patch, double stride_ratio) {
  if (patch <= 0) throw std::invalid_argument("clip_patches: patch must be positive");
  if (!(stride_ratio > 0 && stride_ratio <= 1)) throw std::invalid_argument("clip_patches: stride_ratio must be in (0,1]");
  if (extent < patch)
    throw std::invalid_argument(fmt::format("clip_patches: extent {} is smaller than patch {}", extent, patch));
  const std::int64_t stride = std::max<std::int64_t>(1, std::llround(static_cast<double>(patch) * stride_ratio));
  std::vector<std::int64_t> out;
  for (std::int64_t o = 0; o + patch <= extent; o += stride) out.push_back(o);
  if (out.back() + patch < extent) out.push_back(extent - patch);
  return out;
}

std::vector<std::pair<std::int64_t, std::int64_t>> clip_patches(std::int64_t height, std::int64_t width,
                                                                std::int64_t patch, double stride_ratio) {
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  const auto rows = clip_axis(height, patch, stride_ratio), cols = clip_axis(width, patch, stride_ratio);
  for (auto r : rows)
    for (auto c : cols) out.emplace_back(r, c);
  return out;
}

namespace {

Tensor crop(const Tensor& t, std::int64_t row, std::int64_t col, std::int64_t h, std::int64_t w) {
  const Shape s = t.shape();
  if (row < 0 || col < 0 || row + h > s.h || col + w > s.w)
    throw ShapeError(fmt::format("crop: window {}x{} at ({},{}) exceeds {}", h, w, row, col, s.str()));
  Tensor out({s.n, s.c, h, w}, t.dtype());
  dispatch(t.dtype(), [&]<typename T>() {
    auto src = t.data<T>();
    auto dst = out.data<T>();
    for (std::int64_t p = 0; p < s.n * s.c; ++p)
      for (std::int64_t y = 0; y < h; ++y)
        std::copy_n(src.begin() + (p * s.h + row + y) * s.w + col, w, dst.begin() + (p * h + y) * w);
  });
  return out;
}

// Generic pixel remap: out(y, x) = in(map(y, x)).
template <typename F>
Tensor remap(const Tensor& t, std::int64_t oh, std::int64_t ow, F map) {
  const Shape s = t.shape();
  Tensor out({s.n, s.c, oh, ow}, t.dtype());
  dispatch(t.dtype(), [&]<typename T>() {
    auto src = t.data<T>();
    auto dst = out.data<T>();
    for (std::int64_t p = 0; p < s.n * s.c; ++p)
      for (std::int64_t y = 0; y < oh; ++y)
        for (std::int64_t x = 0; x < ow; ++x) {
          const auto [sy, sx] = map(y, x);
          dst[static_cast<std::size_t>((p * oh + y) * ow + x)] = src[static_cast<std::size_t>((p * s.h + sy) * s.w + sx)];
        }
  });
  return out;
}

std::int64_t reflect(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

Tensor geometric(const Tensor& t, const AugmentParams& p) {
  const std::int64_t n = t.shape().h;
  Tensor out = t;
  for (int k = 0; k < ((p.quarter_turns % 4) + 4) % 4; ++k)
    out = remap(out, n, n, [n](std::int64_t y, std::int64_t x) { return std::pair{x, n - 1 - y}; });
  if (p.hflip) out = remap(out, n, n, [n](std::int64_t y, std::int64_t x) { return std::pair{y, n - 1 - x}; });
  if (p.vflip) out = remap(out, n, n, [n](std::int64_t y, std::int64_t x) { return std::pair{n - 1 - y, x}; });
  return out;
}

Tensor fit_square(const Tensor& r, std::int64_t n) {
  const std::int64_t m = r.shape().h;
  if (m == n) return r;
  if (m > n) {
    const std::int64_t off = (m - n) / 2;
    return crop(r, off, off, n, n);
  }
  const std::int64_t off = (n - m) / 2;
  return remap(r, n, n, [off, m](std::int64_t y, std::int64_t x) { return std::pair{reflect(y - off, m), reflect(x - off, m)}; });
}

Tensor resample_square(const Tensor& t, double scale) {
  const std::int64_t n = t.shape().h;
  const std::int64_t m = std::max<std::int64_t>(1, std::llround(static_cast<double>(n) * scale));
  return m == n ? t : ops::resize_bilinear(t, m, m);
}

}  // namespace

Tensor rescale_mask(const Tensor& mask, double scale) {
  Tensor r = resample_square(mask, scale);
  for (std::int64_t i = 0; i < r.numel(); ++i) r.set(i, r.at(i) >= 0.5 ? 1.0 : 0.0);
  return r;
}

Sample crop_sample(const Sample& s, std::int64_t row, std::int64_t col, std::int64_t patch) {
  Sample out = s;
  out.image = crop(s.image, row, col, patch, patch);
  out.building = crop(s.building, row, col, patch, patch);
  out.road = crop(s.road, row, col, patch, patch);
  out.id = fmt::format("{}_r{}_c{}", s.id, row, col);
  return out;
}

AugmentParams draw_augment(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  AugmentParams p;
  p.quarter_turns = std::uniform_int_distribution<int>(0, 3)(rng);
  p.hflip = std::bernoulli_distribution(0.5)(rng);
  p.vflip = std::bernoulli_distribution(0.5)(rng);
  p.scale = std::uniform_real_distribution<double>(0.75, 1.25)(rng);
  return p;
}

Sample apply_augment(const Sample& s, const AugmentParams& p) {
  const Shape sh = s.image.shape();
  if (sh.h != sh.w) throw ShapeError(fmt::format("augment: patch must be square, got {}x{}", sh.h, sh.w));
  Sample out = s;
  const std::int64_t n = sh.h;
  out.image = fit_square(resample_square(geometric(s.image, p), p.scale), n);
  out.building = fit_square(rescale_mask(geometric(s.building, p), p.scale), n);
  out.road = fit_square(rescale_mask(geometric(s.road, p), p.scale), n);
  return out;
}

Sample augment(const Sample& s, std::uint64_t seed) { return apply_augment(s, draw_augment(seed)); }

Tensor normalize_image(const Tensor& image) { return ops::scale(ops::add_scalar(image, -0.5), 2.0); }

Batch make_batch(const std::vector<Sample>& samples, DType dtype) {
  if (samples.empty()) throw ShapeError("make_batch: no samples");
  std::vector<const Tensor*> im, b, r;
  for (const auto& s : samples) {
    im.push_back(&s.image);
    b.push_back(&s.building);
    r.push_back(&s.road);
  }
  return {normalize_image(ops::concat(im, 0)).to(dtype), ops::concat(b, 0).to(dtype), ops::concat(r, 0).to(dtype)};
}

// ---- Synthetic scenes ----

namespace {

struct Segment {
  double y0, x0, y1, x1;
};

double segment_distance(double py, double px, const Segment& s) {
  const double dy = s.y1 - s.y0, dx = s.x1 - s.x0;
  const double len2 = dy * dy + dx * dx;
  double t = len2 > 0 ? ((py - s.y0) * dy + (px - s.x0) * dx) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ey = s.y0 + t * dy - py, ex = s.x0 + t * dx - px;
  return std::sqrt(ey * ey + ex * ex);
}

struct Road {
  std::vector<Segment> segments;
  std::int64_t width;
};

struct Rect {
  double cy, cx, h, w, angle;

  bool contains(double py, double px, double margin = 0) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double dy = py - cy, dx = px - cx;
    const double u = dx * c + dy * s, v = -dx * s + dy * c;
    return std::abs(u) <= w / 2 + margin && std::abs(v) <= h / 2 + margin;
  }
};

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

Sample synth_scene(const SynthConfig& cfg, std::uint64_t scene_seed, SceneInfo* info) {
  cfg.validate();
  std::mt19937_64 rng(scene_seed);
  auto uni = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  auto uint = [&](std::int64_t a, std::int64_t b) { return std::uniform_int_distribution<std::int64_t>(a, b)(rng); };
  const std::int64_t S = cfg.scene_size;
  const double Sd = static_cast<double>(S);

  // Roads: polylines from one border through an interior point to another border.
  std::vector<Road> roads;
  const std::int64_t n_roads = uint(cfg.road_count_min, cfg.road_count_max);
  auto border_point = [&](int side) {
    const double t = uni(0.1 * Sd, 0.9 * Sd);
    switch (side) {
      case 0: return std::pair{0.0, t};
      case 1: return std::pair{t, Sd};
      case 2: return std::pair{Sd, t};
      default: return std::pair{t, 0.0};
    }
  };
  for (std::int64_t i = 0; i < n_roads; ++i) {
    const int a = static_cast<int>(uint(0, 3));
    const int b = (a + static_cast<int>(uint(1, 3))) % 4;
    const auto [y0, x0] = border_point(a);
    const auto [y2, x2] = border_point(b);
    const double y1 = uni(0.25 * Sd, 0.75 * Sd), x1 = uni(0.25 * Sd, 0.75 * Sd);
    roads.push_back({{{y0, x0, y1, x1}, {y1, x1, y2, x2}}, uint(cfg.road_width_min, cfg.road_width_max)});
  }
  std::vector<std::uint8_t> road(static_cast<std::size_t>(S * S), 0), building(road.size(), 0);
  for (std::int64_t y = 0; y < S; ++y)
    for (std::int64_t x = 0; x < S; ++x)
      for (const auto& r : roads)
        for (const auto& seg : r.segments)
          if (segment_distance(y + 0.5, x + 0.5, seg) <= r.width / 2.0) road[static_cast<std::size_t>(y * S + x)] = 1;

  std::vector<std::pair<double, double>> road_pixels;
  for (std::int64_t i = 0; i < S * S; ++i)
    if (road[static_cast<std::size_t>(i)]) road_pixels.emplace_back((i / S) + 0.5, (i % S) + 0.5);
  auto road_distance = [&](double py, double px) {
    double best = INFINITY;
    for (const auto& [ry, rx] : road_pixels) best = std::min(best, std::hypot(ry - py, rx - px));
    return best;
  };

  SceneInfo local;
  const auto n_near = static_cast<std::int64_t>(std::llround(cfg.adjacency_ratio * static_cast<double>(cfg.building_count)));
  for (std::int64_t i = 0; i < cfg.building_count; ++i) {
    const bool near = i < n_near && !roads.empty();
    const double h = static_cast<double>(uint(cfg.building_size_min, cfg.building_size_max));
    const double w = static_cast<double>(uint(cfg.building_size_min, cfg.building_size_max));
    const double angle = cfg.rotated_buildings ? uni(0.0, std::numbers::pi / 2) : 0.0;
    const double half_diag = 0.5 * std::hypot(h, w);
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      Rect rect{0, 0, h, w, angle};
      double d_max = 0;
      if (near) {
        const Road& r = roads[static_cast<std::size_t>(uint(0, static_cast<std::int64_t>(roads.size()) - 1))];
        const Segment& seg = r.segments[static_cast<std::size_t>(uint(0, 1))];
        d_max = 3.0 * static_cast<double>(r.width);
        const double t = uni(0.0, 1.0);
        const double py = seg.y0 + t * (seg.y1 - seg.y0), px = seg.x0 + t * (seg.x1 - seg.x0);
        const double len = std::hypot(seg.y1 - seg.y0, seg.x1 - seg.x0);
        if (len == 0) continue;
        const double ny = -(seg.x1 - seg.x0) / len, nx = (seg.y1 - seg.y0) / len;
        const double side = uni(0.0, 1.0) < 0.5 ? -1.0 : 1.0;
        const double off = r.width / 2.0 + uni(0.0, d_max);
        rect.cy = py + side * off * ny;
        rect.cx = px + side * off * nx;
      } else {
        rect.cy = uni(0.0, Sd);
        rect.cx = uni(0.0, Sd);
      }
      if (rect.cy - half_diag < 0 || rect.cx - half_diag < 0 || rect.cy + half_diag > Sd || rect.cx + half_diag > Sd)
        continue;
      if (near && road_distance(rect.cy, rect.cx) > d_max) continue;
      // Footprint must avoid roads and keep a one-pixel gap to other buildings.
      std::vector<std::size_t> pixels;
      bool clash = false;
      const auto y_lo = static_cast<std::int64_t>(rect.cy - half_diag - 2), y_hi = static_cast<std::int64_t>(rect.cy + half_diag + 2);
      const auto x_lo = static_cast<std::int64_t>(rect.cx - half_diag - 2), x_hi = static_cast<std::int64_t>(rect.cx + half_diag + 2);
      for (std::int64_t y = std::max<std::int64_t>(0, y_lo); y <= std::min(S - 1, y_hi) && !clash; ++y)
        for (std::int64_t x = std::max<std::int64_t>(0, x_lo); x <= std::min(S - 1, x_hi); ++x) {
          const auto idx = static_cast<std::size_t>(y * S + x);
          if (rect.contains(y + 0.5, x + 0.5, 1.5) && (building[idx] || road[idx])) {
            clash = true;
            break;
          }
          if (rect.contains(y + 0.5, x + 0.5)) pixels.push_back(idx);
        }
      if (clash || pixels.empty()) continue;
      for (auto idx : pixels) building[idx] = 1;
      local.buildings.push_back({rect.cy, rect.cx, near, d_max});
      placed = true;
    }
    if (!placed) ++local.skipped_buildings;
  }
  for (const auto& r : roads) local.road_widths.push_back(r.width);

  static constexpr double kBackground[3] = {0.30, 0.42, 0.25};
  static constexpr double kRoad[3] = {0.52, 0.52, 0.55};
  static constexpr double kBuilding[3] = {0.80, 0.45, 0.35};
  Sample s;
  s.source = SampleSource::synthetic;
  s.image = Tensor({1, 3, S, S});
  s.building = Tensor({1, 1, S, S});
  s.road = Tensor({1, 1, S, S});
  for (std::int64_t i = 0; i < S * S; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    const double* base = building[idx] ? kBuilding : road[idx] ? kRoad : kBackground;
    for (int c = 0; c < 3; ++c) {
      const double v = base[c] + uni(-cfg.noise, cfg.noise);
      s.image.set(c * S * S + i, std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0);
    }
    s.building.set(i, building[idx]);
    s.road.set(i, road[idx]);
  }
  if (info) *info = std::move(local);
  return s;
}

SynthDataset synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  SynthDataset out;
  std::uint64_t index = 0;
  for (const auto& [split, count] : {std::pair<std::string, std::int64_t>{"train", cfg.train_scenes},
                                     {"val", cfg.val_scenes},
                                     {"test", cfg.test_scenes}}) {
    for (std::int64_t i = 0; i < count; ++i) {
      SceneInfo info;
      Sample s = synth_scene(cfg, splitmix64(cfg.seed * 0x100000001B3ULL + ++index), &info);
      s.id = fmt::format("{}_{:04d}", split, i);
      out.skipped_buildings += info.skipped_buildings;
      out.samples.push_back(std::move(s));
      out.splits.push_back(split);
    }
  }
  return out;
}

void write_dataset(const SynthDataset& data, const fs::path& dir) {
  Manifest m;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const Sample& s = data.samples[i];
    ManifestEntry e{"images/" + s.id + ".ppm", "building/" + s.id + ".pgm", "road/" + s.id + ".pgm", data.splits[i]};
    save_image(s.image, dir / e.image);
    save_mask(s.building, dir / e.building);
    save_mask(s.road, dir / e.road);
    m.entries.push_back(std::move(e));
  }
  save_manifest(m, dir / "manifest.json");
}

}  // namespace crin

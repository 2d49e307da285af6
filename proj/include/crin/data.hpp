#pragma once

// Raster and tensor I/O, dataset manifests, patch tiling, augmentation, and
// the procedural building/road scene generator.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "crin/config.hpp"
#include "crin/tensor.hpp"

namespace crin {

/// Malformed or unreadable data file. Messages carry a byte offset when one
/// applies.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- 8-bit rasters (binary PPM / PGM) ----

struct Raster8 {
  std::int64_t height = 0, width = 0;
  int channels = 1;  // 3 for P6, 1 for P5
  std::vector<std::uint8_t> pixels;  // interleaved, row-major
};

Raster8 read_pnm(const std::filesystem::path& path);
void write_pnm(const std::filesystem::path& path, const Raster8& raster);
Raster8 decode_pnm(std::string_view bytes, const std::string& source = "<memory>");
std::string encode_pnm(const Raster8& raster);

/// RGB image as (1,3,H,W) in [0,1].
Tensor load_image(const std::filesystem::path& path);
/// Mask with pixel values 0 -> 0 and 255 -> 1; anything else is rejected.
Tensor load_mask(const std::filesystem::path& path);
/// Any 8-bit grayscale raster as (1,1,H,W) in [0,1].
Tensor load_gray(const std::filesystem::path& path);
/// Channel count picks P6 (3) or P5 (1). Values in [0,1] are scaled to 0..255.
void save_image(const Tensor& image, const std::filesystem::path& path);
/// Binary mask written as 0 / 255.
void save_mask(const Tensor& mask, const std::filesystem::path& path);
/// Dispatches on the file magic: P6 image, P5 mask, or RTEN tensor.
Tensor load_raster(const std::filesystem::path& path);
/// `.rten` writes the tensor format; otherwise save_image.
void save_raster(const Tensor& tensor, const std::filesystem::path& path);

// ---- RTEN tensors ----

std::string rten_encode(const Tensor& t);
/// `base_offset` is added to reported byte offsets when the blob sits inside
/// a larger file.
Tensor rten_decode(std::string_view bytes, std::uint64_t base_offset = 0);
/// Bytes consumed by the RTEN blob at the start of `bytes`.
std::size_t rten_size(std::string_view bytes, std::uint64_t base_offset = 0);
void write_rten(const Tensor& t, const std::filesystem::path& path);
Tensor read_rten(const std::filesystem::path& path);

// ---- Samples and manifests ----

enum class SampleSource { file, synthetic };

struct Sample {
  Tensor image;     // (1,3,H,W) in [0,1]
  Tensor building;  // (1,1,H,W) in {0,1}
  Tensor road;
  std::string id;
  SampleSource source = SampleSource::file;
};

struct ManifestEntry {
  std::string image, building, road, split;
};

struct Manifest {
  static constexpr int kVersion = 1;
  std::filesystem::path base;  // directory the relative paths resolve against
  std::vector<ManifestEntry> entries;

  /// Entries of one split, in file order.
  std::vector<ManifestEntry> split(const std::string& name) const;
  Sample load(const ManifestEntry& entry) const;
  std::vector<Sample> load_split(const std::string& name) const;
};

/// JSON array of {image, building, road, split}. Checks that paths are
/// unique, splits are train/val/test, and every file exists.
Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);

// ---- Tiling and augmentation ----

/// Grid origins (row, col) with stride patch·stride_ratio plus an
/// edge-aligned final origin per axis.
std::vector<std::pair<std::int64_t, std::int64_t>> clip_patches(std::int64_t height, std::int64_t width,
                                                                std::int64_t patch = 512, double stride_ratio = 0.5);
std::vector<std::int64_t> clip_axis(std::int64_t extent, std::int64_t patch, double stride_ratio);

Sample crop_sample(const Sample& s, std::int64_t row, std::int64_t col, std::int64_t patch);

struct AugmentParams {
  int quarter_turns = 0;  // counter-clockwise
  bool hflip = false;
  bool vflip = false;
  double scale = 1.0;
};

AugmentParams draw_augment(std::uint64_t seed);
/// Square samples only. Rotation and flips permute pixels exactly; scaling
/// resamples bilinearly, re-binarizes masks at 0.5, then center-crops or
/// reflect-pads back to the original size.
Sample apply_augment(const Sample& s, const AugmentParams& p);
Sample augment(const Sample& s, std::uint64_t seed);
/// The scaling step on a square mask: bilinear resample to round(n·scale),
/// re-binarized at 0.5. No crop or pad.
Tensor rescale_mask(const Tensor& mask, double scale);

/// (x - 0.5) / 0.5 per channel.
Tensor normalize_image(const Tensor& image);

struct Batch {
  Tensor image;  // normalized
  Tensor building;
  Tensor road;
};

/// Stacks samples into one batch, converting to `dtype`.
Batch make_batch(const std::vector<Sample>& samples, DType dtype);

// ---- Synthetic scenes ----

struct SceneBuilding {
  double cy = 0, cx = 0;  // centroid
  bool near_road = false;
  double max_road_distance = 0;  // d_max for this building when near_road
};

struct SceneInfo {
  std::vector<SceneBuilding> buildings;
  std::vector<std::int64_t> road_widths;
  std::int64_t skipped_buildings = 0;
};

/// One scene from its own seed.
Sample synth_scene(const SynthConfig& config, std::uint64_t scene_seed, SceneInfo* info = nullptr);

struct SynthDataset {
  std::vector<Sample> samples;
  std::vector<std::string> splits;  // parallel to samples
  std::int64_t skipped_buildings = 0;
};

/// train_scenes + val_scenes + test_scenes scenes, deterministic in config.seed.
SynthDataset synth_generate(const SynthConfig& config);

/// Writes images/, building/, road/ rasters and manifest.json under `dir`.
void write_dataset(const SynthDataset& data, const std::filesystem::path& dir);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace crin

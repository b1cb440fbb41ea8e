#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hydra/raster.hpp"
#include "hydra/tensor.hpp"

namespace hydra::data {

struct SampleRecord {
  std::string path;  // relative to the manifest directory
  std::vector<std::uint8_t> attrs;
  std::int64_t id = 0;
  std::int64_t tracklet = 0;
  std::int64_t camera = 0;
  std::int64_t scene = 0;
  std::size_t w = 0;
  std::size_t h = 0;

  bool operator==(const SampleRecord&) const = default;
};

struct Manifest {
  std::vector<std::string> attributes;
  std::vector<SampleRecord> records;

  bool operator==(const Manifest&) const = default;
};

// JSON-lines: a header line {"attributes": [...], "version": 1}, then one
// record per line. Errors carry the 1-based line number.
Manifest parse_manifest(std::string_view text, const std::string& origin = "<memory>");
std::string format_manifest(const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);

enum class Split { kTrain, kVal, kTest };
std::string_view split_name(Split split);
Split parse_split(std::string_view name);

struct SplitAssignment {
  std::map<std::int64_t, Split> tracklets;
  std::uint64_t seed = 0;
  std::array<std::size_t, 3> ratio{8, 1, 1};

  // Record indices of `manifest` belonging to `split`, in manifest order.
  std::vector<std::size_t> indices(const Manifest& manifest, Split split) const;
  bool operator==(const SplitAssignment&) const = default;
};

// Shuffles tracklets with `seed`, cuts them by `ratio` (largest-remainder
// rounding, so each count is within one tracklet of its target) and redraws
// until every split holds a positive and a negative of every attribute.
// Throws InfeasibleError naming the attributes that could not be covered.
SplitAssignment tracklet_split(const Manifest& manifest, std::uint64_t seed,
                               std::array<std::size_t, 3> ratio = {8, 1, 1}, std::size_t max_attempts = 200);

std::string format_split(const SplitAssignment& split);
SplitAssignment parse_split_file(std::string_view text, const std::string& origin = "<memory>");
void write_split(const SplitAssignment& split, const std::filesystem::path& path);
SplitAssignment read_split(const std::filesystem::path& path);

// ----------------------------------------------------------------- synthesis

enum class Level { kTexture, kObject, kGlobal };
std::string_view level_name(Level level);
Level parse_level(std::string_view name);

// Pattern kinds. Texture: "hstripes_upper", "vstripes_upper", "checker_lower".
// Object: "blob_head", "blob_hip", "blob_feet". Global: "tint_warm",
// "tint_green".
struct AttributePlan {
  std::string name;
  Level level = Level::kTexture;
  std::string pattern;
  double positive_rate = 0.5;
  double contrast = 0.25;  // stripe/checker amplitude or tint strength
  std::size_t size = 4;    // stripe period, checker cell, or blob side in pixels
};

struct SynthSpec {
  std::size_t num_identities = 125;
  std::size_t cameras = 2;
  std::size_t images_per_tracklet = 10;  // one tracklet per (identity, camera)
  std::size_t height = 96;
  std::size_t width = 64;
  std::vector<AttributePlan> attributes;
  // When set, attribute bits are drawn once per identity instead of per image.
  bool attributes_per_identity = false;
  double brightness_jitter = 0.3;
  double shift_jitter = 0.1;
  double max_noise = 0.05;
  std::uint64_t seed = 1;

  static SynthSpec defaults();  // 8 attributes, 250 tracklets, 2500 images
  static SynthSpec reid_defaults();  // 100 identities x 2 cameras
  void validate() const;
  std::size_t total_images() const { return num_identities * cameras * images_per_tracklet; }
};

// Renders one image; also used by tests probing planted zones.
Raster render_sample(const SynthSpec& spec, std::size_t identity, std::size_t camera, std::size_t index,
                     std::span<const std::uint8_t> attrs);

// Labels, identities and paths of the dataset `spec` describes, without
// rendering any pixels.
Manifest plan_synthetic(const SynthSpec& spec);

// Writes images/NNNNNN.ppm and manifest.jsonl under out_dir. The manifest is
// written last and atomically, so a failed run leaves no manifest behind.
Manifest generate_synthetic(const SynthSpec& spec, const std::filesystem::path& out_dir);

std::string format_synth_spec(const SynthSpec& spec);
SynthSpec parse_synth_spec(std::string_view text, const std::string& origin = "<memory>");

// ------------------------------------------------------------------ loading

struct Normalization {
  std::array<float, 3> mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> std{0.25f, 0.25f, 0.25f};
};

// Decodes a P6 file into [3,H,W]: bilinear resize, scale to [0,1], then
// (x - mean) / std per channel.
Tensor load_image(const std::filesystem::path& path, std::size_t height, std::size_t width,
                  const Normalization& norm = {});
Tensor raster_to_tensor(const Raster& raster, std::size_t height, std::size_t width,
                        const Normalization& norm = {});

struct LoadedSplit {
  Tensor images;  // [N,3,H,W]
  std::vector<std::uint8_t> attrs;  // N x M, row-major
  std::size_t num_attributes = 0;
  std::vector<std::int64_t> ids;
  std::vector<std::int64_t> cameras;

  std::size_t size() const { return ids.size(); }
  std::span<const std::uint8_t> labels(std::size_t row) const {
    return {attrs.data() + row * num_attributes, num_attributes};
  }
};

LoadedSplit load_records(const Manifest& manifest, const std::filesystem::path& root,
                         std::span<const std::size_t> indices, std::size_t height, std::size_t width,
                         const Normalization& norm = {});
LoadedSplit subset(const LoadedSplit& split, std::span<const std::size_t> rows);
Tensor gather_images(const LoadedSplit& split, std::span<const std::size_t> rows);

// Identity-disjoint halves for re-identification: the first `train_fraction`
// of shuffled identities train, the rest are probes and gallery.
struct ReidSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};
ReidSplit reid_identity_split(const Manifest& manifest, std::uint64_t seed, double train_fraction = 0.5);

}  // namespace hydra::data

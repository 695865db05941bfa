#pragma once

#include "ldic/image.hpp"

#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace ldic::data {

// Depth values are divided by this range and clamped to [0, 1].
inline constexpr double kDepthRangeMeters = 10.0;

enum class Interpolation { Bilinear, Nearest };

// meters -> [0, 1]; non-finite and non-positive returns become 0.
torch::Tensor normalize_depth(const torch::Tensor& meters);

// Resamples a (h, w) plane to (height, width), pixel-center aligned.
torch::Tensor resize_plane(const torch::Tensor& plane, int64_t height, int64_t width,
                           Interpolation mode = Interpolation::Bilinear);

// Resample to the image grid, then normalize. Target must not be smaller than
// the source.
AlignedDepth upsample_depth(const DepthMap& depth, int64_t height, int64_t width,
                            Interpolation mode = Interpolation::Bilinear);

struct RgbdPair {
    std::string id;
    RgbImage image;
    DepthMap depth_raw;
    AlignedDepth depth_aligned;
};

struct AlignedCrop {
    RgbImage image;
    AlignedDepth depth;
    int64_t top = 0;
    int64_t left = 0;
};

// Same window for image and aligned depth. Throws UsageError when the image is
// smaller than the crop.
AlignedCrop random_aligned_crop(const RgbdPair& pair, int64_t size, std::mt19937_64& rng);

struct SynthOptions {
    int depth_downscale = 4;  // native depth grid is size / depth_downscale
    int depth_regions_min = 3;
    int depth_regions_max = 6;
    int texture_regions_min = 3;
    int texture_regions_max = 8;
};

// Colour the depth-driven part of a synthetic image takes at normalized depth d.
// Returns (3, ...) for a (...) input.
torch::Tensor depth_palette(const torch::Tensor& normalized_depth);

// Piecewise-planar depth (Voronoi regions, one random plane each) at a reduced
// native grid, and an image blending depth_palette(aligned depth) with an
// independent piecewise-constant texture:
//   image = informativeness * palette + (1 - informativeness) * texture.
RgbdPair synth_rgbd(uint64_t seed, int64_t size, double informativeness, const SynthOptions& options = {});

struct ManifestEntry {
    std::string id;
    std::filesystem::path image;
    std::filesystem::path depth;

    bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
    std::string split;
    std::vector<ManifestEntry> entries;
    // Identifiers that had only one of the two files, with a reason.
    std::vector<std::string> skipped;

    size_t size() const { return entries.size(); }
};

// Scans <root>/<split>/ for <id>_rgb.png + <id>_depth.png, sorted by id.
DatasetManifest load_manifest(const std::filesystem::path& root, const std::string& split);

// Throws DataError when two manifests share an identifier or a file.
void check_disjoint(const DatasetManifest& a, const DatasetManifest& b);

// Line-oriented cache: "split <name>" then "<id>\t<image>\t<depth>" per entry.
void write_manifest_cache(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest read_manifest_cache(const std::filesystem::path& path);

// 8-bit RGB PNG <-> RgbImage. Throws DataError on unreadable files.
RgbImage read_rgb_png(const std::filesystem::path& path);
void write_rgb_png(const RgbImage& image, const std::filesystem::path& path);
// 16-bit single-channel PNG in millimetres <-> DepthMap in meters.
DepthMap read_depth_png(const std::filesystem::path& path);
void write_depth_png(const DepthMap& depth, const std::filesystem::path& path);

RgbdPair load_pair(const ManifestEntry& entry);
void save_pair(const RgbdPair& pair, const std::filesystem::path& dir);

std::vector<RgbdPair> load_split(const std::filesystem::path& root, const std::string& split);

// Writes `count` synthetic pairs to <root>/<split>/. Pair i uses seed + i and is
// named after it (zero-padded to 8 digits).
void write_synthetic_split(const std::filesystem::path& root, const std::string& split, int count, int64_t size,
                           double informativeness, uint64_t seed);

}  // namespace ldic::data

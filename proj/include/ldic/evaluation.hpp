#pragma once

#include "ldic/data.hpp"
#include "ldic/image.hpp"
#include "ldic/model.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace ldic::eval {

// 10 log10(255^2 / MSE) on 8-bit rounded images; +inf when they are identical.
double psnr(const RgbImage& x, const RgbImage& x_hat);

// Mean SSIM of BT.601 luma (8-bit scale), 11-tap Gaussian window (sigma 1.5),
// K1 = 0.01, K2 = 0.03, valid-region windows only.
double ssim(const RgbImage& x, const RgbImage& x_hat);

enum class Scenario { NoLidar, UncompressedLidar, CompressedLidar, RandomMap };

std::string to_string(Scenario s);
// Throws UsageError for unknown names.
Scenario scenario_from_string(const std::string& name);

struct RdPoint {
    double m_lambda = 0.0;
    double bpp = 0.0;
    double psnr_db = 0.0;
    double ssim = 0.0;
    // Part of bpp spent on the depth sub-stream (compressed_lidar only).
    double depth_bpp = 0.0;

    bool operator==(const RdPoint&) const = default;
};

struct RdCurve {
    std::string label;
    std::vector<RdPoint> points;

    // Throws UsageError unless bpp strictly increases and every value is finite.
    void validate() const;
    bool operator==(const RdCurve&) const = default;
};

void to_json(nlohmann::json& j, const RdPoint& p);
void from_json(const nlohmann::json& j, RdPoint& p);
void to_json(nlohmann::json& j, const RdCurve& c);
void from_json(const nlohmann::json& j, RdCurve& c);

enum class BdInterpolation { Cubic, Pchip };

struct BdMetrics {
    std::string baseline;
    std::string test;
    double bd_rate_percent = 0.0;
    double bd_psnr_db = 0.0;
};

// Average log-rate difference of `test` over `baseline` across their common
// PSNR interval, as a percentage. Each curve needs >= 4 points. Throws
// UsageError when the PSNR ranges do not overlap.
double bd_rate(const RdCurve& baseline, const RdCurve& test, BdInterpolation interp = BdInterpolation::Cubic);
// Average PSNR difference across the common log-rate interval, in dB.
double bd_psnr(const RdCurve& baseline, const RdCurve& test, BdInterpolation interp = BdInterpolation::Cubic);
BdMetrics bd_metrics(const RdCurve& baseline, const RdCurve& test, BdInterpolation interp = BdInterpolation::Cubic);

// One encode/decode of one image.
struct ImageReport {
    std::string id;
    double m_lambda = 0.0;
    double bpp = 0.0;
    double depth_bpp = 0.0;
    double psnr_db = 0.0;
    double ssim = 0.0;
};

struct ScenarioOptions {
    std::vector<double> m_grid{0.0, 0.25, 0.5, 0.75, 1.0};
    uint64_t random_seed = 7;  // random_map noise: seed + image index
    int jobs = 1;
};

// Runs every image of `set` at every grid value. NoLidar uses `baseline`
// without depth; the other scenarios use `guided`. Points average the
// per-image values. Throws UsageError on an empty set or a missing model.
RdCurve run_scenario(Scenario scenario, model::Model* guided, model::Model* baseline,
                     const std::vector<data::RgbdPair>& set, const ScenarioOptions& options = {},
                     std::vector<ImageReport>* per_image = nullptr);

// Uniform noise in [0, 1] on the image grid.
AlignedDepth random_map(int64_t height, int64_t width, uint64_t seed);

// <prefix>_psnr.png, <prefix>_ssim.png and the plotted data as <prefix>.tsv.
// Returns the three paths.
std::vector<std::filesystem::path> emit_rd_plot(const std::vector<RdCurve>& curves,
                                                const std::filesystem::path& prefix);

// One JSON object per line.
void write_curves(const std::vector<RdCurve>& curves, const std::filesystem::path& path);
std::vector<RdCurve> read_curves(const std::filesystem::path& path);

}  // namespace ldic::eval

#include "ldic/data.hpp"

#include "ldic/errors.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

namespace ldic::data {

namespace fs = std::filesystem;
namespace F = torch::nn::functional;

namespace {

constexpr const char* kRgbSuffix = "_rgb.png";
constexpr const char* kDepthSuffix = "_depth.png";

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() > suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

struct Site {
    double u, v;
};

std::vector<Site> random_sites(std::mt19937_64& rng, int count) {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::vector<Site> sites(static_cast<size_t>(count));
    for (auto& s : sites) {
        s.u = uni(rng);
        s.v = uni(rng);
    }
    return sites;
}

// Label of the nearest site for every pixel center of an n x n grid.
std::vector<int> voronoi_labels(const std::vector<Site>& sites, int64_t n) {
    std::vector<int> labels(static_cast<size_t>(n * n));
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            const double u = (static_cast<double>(j) + 0.5) / n;
            const double v = (static_cast<double>(i) + 0.5) / n;
            int best = 0;
            double best_d = 1e9;
            for (size_t k = 0; k < sites.size(); ++k) {
                const double d = (sites[k].u - u) * (sites[k].u - u) + (sites[k].v - v) * (sites[k].v - v);
                if (d < best_d) {
                    best_d = d;
                    best = static_cast<int>(k);
                }
            }
            labels[static_cast<size_t>(i * n + j)] = best;
        }
    }
    return labels;
}

}  // namespace

torch::Tensor normalize_depth(const torch::Tensor& meters) {
    auto d = meters.to(torch::kFloat32);
    d = torch::where(torch::isfinite(d), d, torch::zeros_like(d));
    return (d / kDepthRangeMeters).clamp(0.0, 1.0);
}

torch::Tensor resize_plane(const torch::Tensor& plane, int64_t height, int64_t width, Interpolation mode) {
    if (plane.dim() != 2) {
        throw DataError("resize_plane expects a (h, w) tensor");
    }
    if (plane.size(0) == height && plane.size(1) == width) {
        return plane.to(torch::kFloat32);
    }
    auto opts = F::InterpolateFuncOptions().size(std::vector<int64_t>{height, width});
    if (mode == Interpolation::Bilinear) {
        opts.mode(torch::kBilinear).align_corners(false);
    } else {
        opts.mode(torch::kNearest);
    }
    return F::interpolate(plane.to(torch::kFloat32).unsqueeze(0).unsqueeze(0), opts).squeeze(0).squeeze(0);
}

AlignedDepth upsample_depth(const DepthMap& depth, int64_t height, int64_t width, Interpolation mode) {
    if (!depth.meters.defined() || depth.meters.dim() != 2) {
        throw DataError("depth map must be a (h, w) tensor");
    }
    if (height <= 0 || width <= 0) {
        throw UsageError("upsample_depth needs a positive target size");
    }
    if (height < depth.height() || width < depth.width()) {
        throw AlignmentError("depth " + std::to_string(depth.width()) + "x" + std::to_string(depth.height()) +
                             " is larger than the image " + std::to_string(width) + "x" + std::to_string(height));
    }
    AlignedDepth out;
    out.values = normalize_depth(resize_plane(depth.meters, height, width, mode)).unsqueeze(0).contiguous();
    out.source_height = depth.height();
    out.source_width = depth.width();
    return out;
}

AlignedCrop random_aligned_crop(const RgbdPair& pair, int64_t size, std::mt19937_64& rng) {
    const auto H = pair.image.height(), W = pair.image.width();
    if (pair.depth_aligned.height() != H || pair.depth_aligned.width() != W) {
        throw AlignmentError("pair " + pair.id + ": aligned depth does not match the image grid");
    }
    if (H < size || W < size) {
        throw UsageError("crop of " + std::to_string(size) + " does not fit image " + std::to_string(W) + "x" +
                         std::to_string(H));
    }
    AlignedCrop c;
    c.top = std::uniform_int_distribution<int64_t>(0, H - size)(rng);
    c.left = std::uniform_int_distribution<int64_t>(0, W - size)(rng);
    c.image.values = pair.image.values.narrow(1, c.top, size).narrow(2, c.left, size).contiguous();
    c.depth.values = pair.depth_aligned.values.narrow(1, c.top, size).narrow(2, c.left, size).contiguous();
    c.depth.source_height = pair.depth_aligned.source_height;
    c.depth.source_width = pair.depth_aligned.source_width;
    return c;
}

torch::Tensor depth_palette(const torch::Tensor& normalized_depth) {
    // Smooth monotone ramps: nearby depths give nearby colours.
    const auto& d = normalized_depth;
    auto r = 0.1 + 0.8 * d;
    auto g = 0.1 + 0.8 * d * d;
    auto b = 0.9 - 0.8 * d * d * (3.0 - 2.0 * d);
    return torch::stack({r, g, b}, 0);
}

RgbdPair synth_rgbd(uint64_t seed, int64_t size, double informativeness, const SynthOptions& options) {
    if (!(informativeness >= 0.0 && informativeness <= 1.0)) {
        throw UsageError("informativeness must lie in [0, 1]");
    }
    if (size <= 0 || options.depth_downscale < 1 || size % options.depth_downscale != 0) {
        throw UsageError("synthetic size must be a positive multiple of the depth downscale");
    }
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

    // Depth: one plane per Voronoi region on the native grid.
    const int64_t n = size / options.depth_downscale;
    const auto depth_sites = random_sites(rng, pick(options.depth_regions_min, options.depth_regions_max));
    struct Plane {
        double a, b, c;
    };
    std::vector<Plane> planes;
    for (size_t k = 0; k < depth_sites.size(); ++k) {
        planes.push_back({1.0 + 8.0 * uni(rng), 3.0 * (uni(rng) - 0.5), 3.0 * (uni(rng) - 0.5)});
    }
    const auto depth_labels = voronoi_labels(depth_sites, n);
    auto meters = torch::empty({n, n}, torch::kFloat32);
    auto dm = meters.accessor<float, 2>();
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            const auto& p = planes[static_cast<size_t>(depth_labels[static_cast<size_t>(i * n + j)])];
            const double u = (static_cast<double>(j) + 0.5) / n - 0.5;
            const double v = (static_cast<double>(i) + 0.5) / n - 0.5;
            dm[i][j] = static_cast<float>(std::clamp(p.a + p.b * u + p.c * v, 0.3, 9.9));
        }
    }

    // Texture independent of depth.
    const auto tex_sites = random_sites(rng, pick(options.texture_regions_min, options.texture_regions_max));
    std::vector<float> colours;
    for (size_t k = 0; k < tex_sites.size() * 3; ++k) {
        colours.push_back(static_cast<float>(uni(rng)));
    }
    const auto tex_labels = voronoi_labels(tex_sites, size);
    auto texture = torch::empty({3, size, size}, torch::kFloat32);
    auto tm = texture.accessor<float, 3>();
    for (int64_t i = 0; i < size; ++i) {
        for (int64_t j = 0; j < size; ++j) {
            const auto k = static_cast<size_t>(tex_labels[static_cast<size_t>(i * size + j)]);
            for (int c = 0; c < 3; ++c) {
                tm[c][i][j] = colours[k * 3 + static_cast<size_t>(c)];
            }
        }
    }

    RgbdPair pair;
    pair.id = "synth" + std::to_string(seed);
    // Millimetre steps, as stored in depth PNGs.
    pair.depth_raw.meters = meters.mul(1000.0).round().div(1000.0);
    pair.depth_aligned = upsample_depth(pair.depth_raw, size, size);
    auto palette = depth_palette(pair.depth_aligned.values.squeeze(0));
    pair.image.values = (informativeness * palette + (1.0 - informativeness) * texture).clamp(0.0, 1.0);
    // Quantize to 8 bits so the pair survives a PNG round trip unchanged.
    pair.image.values = pair.image.values.mul(255.0).round().div(255.0).contiguous();
    return pair;
}

RgbImage read_rgb_png(const fs::path& path) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) {
        throw DataError("cannot read image " + path.string());
    }
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    if (!rgb.isContinuous()) {
        rgb = rgb.clone();
    }
    return RgbImage::from_u8({rgb.data, rgb.total() * 3}, rgb.rows, rgb.cols);
}

void write_rgb_png(const RgbImage& image, const fs::path& path) {
    auto bytes = image.to_u8();
    cv::Mat rgb(static_cast<int>(image.height()), static_cast<int>(image.width()), CV_8UC3, bytes.data());
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    if (!cv::imwrite(path.string(), bgr)) {
        throw DataError("cannot write image " + path.string());
    }
}

DepthMap read_depth_png(const fs::path& path) {
    cv::Mat raw = cv::imread(path.string(), cv::IMREAD_ANYDEPTH | cv::IMREAD_GRAYSCALE);
    if (raw.empty()) {
        throw DataError("cannot read depth " + path.string());
    }
    if (raw.depth() != CV_16U) {
        throw DataError("depth file " + path.string() + " is not a 16-bit PNG");
    }
    cv::Mat mm;
    raw.convertTo(mm, CV_32F, 1.0 / 1000.0);
    return {torch::from_blob(mm.data, {mm.rows, mm.cols}, torch::kFloat32).clone()};
}

void write_depth_png(const DepthMap& depth, const fs::path& path) {
    auto mm = (depth.meters.to(torch::kFloat64) * 1000.0).round().clamp(0.0, 65535.0).to(torch::kInt32).contiguous();
    cv::Mat out(static_cast<int>(depth.height()), static_cast<int>(depth.width()), CV_16UC1);
    const auto* p = mm.data_ptr<int32_t>();
    for (int i = 0; i < out.rows; ++i) {
        for (int j = 0; j < out.cols; ++j) {
            out.at<uint16_t>(i, j) = static_cast<uint16_t>(p[i * out.cols + j]);
        }
    }
    if (!cv::imwrite(path.string(), out)) {
        throw DataError("cannot write depth " + path.string());
    }
}

DatasetManifest load_manifest(const fs::path& root, const std::string& split) {
    const auto dir = root / split;
    if (!fs::is_directory(dir)) {
        throw DataError("no split directory " + dir.string());
    }
    std::map<std::string, ManifestEntry> found;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const auto name = e.path().filename().string();
        if (ends_with(name, kRgbSuffix)) {
            auto id = name.substr(0, name.size() - std::char_traits<char>::length(kRgbSuffix));
            found[id].id = id;
            found[id].image = e.path();
        } else if (ends_with(name, kDepthSuffix)) {
            auto id = name.substr(0, name.size() - std::char_traits<char>::length(kDepthSuffix));
            found[id].id = id;
            found[id].depth = e.path();
        }
    }
    DatasetManifest m;
    m.split = split;
    for (auto& [id, entry] : found) {
        if (entry.image.empty()) {
            m.skipped.push_back(id + ": missing image");
        } else if (entry.depth.empty()) {
            m.skipped.push_back(id + ": missing depth");
        } else {
            m.entries.push_back(entry);
        }
    }
    return m;
}

void check_disjoint(const DatasetManifest& a, const DatasetManifest& b) {
    for (const auto& x : a.entries) {
        for (const auto& y : b.entries) {
            if (x.id == y.id || x.image == y.image || x.depth == y.depth) {
                throw DataError("entry " + x.id + " appears in both " + a.split + " and " + b.split);
            }
        }
    }
}

void write_manifest_cache(const DatasetManifest& manifest, const fs::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw DataError("cannot write manifest cache " + path.string());
    }
    out << "split " << manifest.split << "\n";
    for (const auto& e : manifest.entries) {
        out << e.id << "\t" << e.image.string() << "\t" << e.depth.string() << "\n";
    }
    for (const auto& s : manifest.skipped) {
        out << "#skipped\t" << s << "\n";
    }
}

DatasetManifest read_manifest_cache(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot read manifest cache " + path.string());
    }
    DatasetManifest m;
    std::string line;
    if (!std::getline(in, line) || line.rfind("split ", 0) != 0) {
        throw DataError("manifest cache " + path.string() + " has no split line");
    }
    m.split = line.substr(6);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto a = line.find('\t');
        if (a == std::string::npos) {
            throw DataError("malformed manifest line: " + line);
        }
        if (line.compare(0, a, "#skipped") == 0) {
            m.skipped.push_back(line.substr(a + 1));
            continue;
        }
        const auto b = line.find('\t', a + 1);
        if (b == std::string::npos) {
            throw DataError("malformed manifest line: " + line);
        }
        m.entries.push_back({line.substr(0, a), line.substr(a + 1, b - a - 1), line.substr(b + 1)});
    }
    return m;
}

RgbdPair load_pair(const ManifestEntry& entry) {
    RgbdPair p;
    p.id = entry.id;
    p.image = read_rgb_png(entry.image);
    p.depth_raw = read_depth_png(entry.depth);
    p.depth_aligned = upsample_depth(p.depth_raw, p.image.height(), p.image.width());
    return p;
}

void save_pair(const RgbdPair& pair, const fs::path& dir) {
    fs::create_directories(dir);
    write_rgb_png(pair.image, dir / (pair.id + kRgbSuffix));
    write_depth_png(pair.depth_raw, dir / (pair.id + kDepthSuffix));
}

std::vector<RgbdPair> load_split(const fs::path& root, const std::string& split) {
    const auto manifest = load_manifest(root, split);
    std::vector<RgbdPair> pairs;
    pairs.reserve(manifest.size());
    for (const auto& e : manifest.entries) {
        pairs.push_back(load_pair(e));
    }
    return pairs;
}

void write_synthetic_split(const fs::path& root, const std::string& split, int count, int64_t size,
                           double informativeness, uint64_t seed) {
    for (int i = 0; i < count; ++i) {
        const uint64_t pair_seed = seed + static_cast<uint64_t>(i);
        auto pair = synth_rgbd(pair_seed, size, informativeness);
        // Named after the seed so splits drawn from disjoint seed ranges never share ids.
        char id[32];
        std::snprintf(id, sizeof(id), "%08llu", static_cast<unsigned long long>(pair_seed));
        pair.id = id;
        save_pair(pair, root / split);
    }
}

}  // namespace ldic::data

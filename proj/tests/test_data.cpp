#include "ldic/data.hpp"
#include "ldic/errors.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace ldic;
using namespace ldic::data;

namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

// Interior mask of depth kinks: planes have zero second difference.
torch::Tensor depth_boundaries(const AlignedDepth& d) {
    auto v = d.values[0].to(torch::kFloat64);
    auto lap = (v.slice(0, 2) + v.slice(0, 0, -2) - 2 * v.slice(0, 1, -1)).slice(1, 1, -1).abs() +
               (v.slice(1, 2) + v.slice(1, 0, -2) - 2 * v.slice(1, 1, -1)).slice(0, 1, -1).abs();
    return (lap > 2e-3).to(torch::kFloat64);
}

torch::Tensor image_boundaries(const RgbImage& x) {
    auto v = x.values.to(torch::kFloat64);
    auto dy = (v.slice(1, 2) - v.slice(1, 0, -2)).slice(2, 1, -1).abs().sum(0);
    auto dx = (v.slice(2, 2) - v.slice(2, 0, -2)).slice(1, 1, -1).abs().sum(0);
    return ((dy + dx) > 0.08).to(torch::kFloat64);
}

double correlation(const torch::Tensor& a, const torch::Tensor& b) {
    auto x = a.flatten() - a.mean();
    auto y = b.flatten() - b.mean();
    const double den = std::sqrt((x * x).sum().item<double>() * (y * y).sum().item<double>());
    return den > 0 ? (x * y).sum().item<double>() / den : 0.0;
}

}  // namespace

TEST_CASE("depth normalization") {
    auto m = torch::tensor({0.0f, -1.0f, 5.0f, 10.0f, 25.0f, std::nanf(""), INFINITY});
    auto n = normalize_depth(m);
    CHECK(n[0].item<float>() == 0.0f);
    CHECK(n[1].item<float>() == 0.0f);
    CHECK(n[2].item<float>() == doctest::Approx(0.5));
    CHECK(n[3].item<float>() == 1.0f);
    CHECK(n[4].item<float>() == 1.0f);
    CHECK(n[5].item<float>() == 0.0f);
    CHECK(n[6].item<float>() == 0.0f);
}

TEST_CASE("upsampling identity and constants") {
    DepthMap d{torch::rand({12, 20}) * 8.0};
    auto same = upsample_depth(d, 12, 20);
    CHECK(torch::allclose(same.values[0], normalize_depth(d.meters)));
    CHECK(same.source_height == 12);
    CHECK(same.source_width == 20);

    DepthMap c{torch::full({16, 16}, 3.0f)};
    for (auto mode : {Interpolation::Bilinear, Interpolation::Nearest}) {
        auto up = upsample_depth(c, 64, 96, mode);
        CHECK(up.values.sizes() == torch::IntArrayRef({1, 64, 96}));
        CHECK(torch::allclose(up.values, torch::full({1, 64, 96}, 0.3f)));
    }
}

TEST_CASE("tablet-scale depth goes up by 7.5 on both axes") {
    DepthMap d{torch::rand({192, 256}) * 12.0};
    auto up = upsample_depth(d, 1440, 1920);
    CHECK(up.values.sizes() == torch::IntArrayRef({1, 1440, 1920}));
    CHECK(up.values.min().item<float>() >= 0.0f);
    CHECK(up.values.max().item<float>() <= 1.0f);
}

TEST_CASE("bilinear upsampling reproduces a linear ramp in the interior") {
    auto ramp = torch::arange(0, 8, torch::kFloat32).view({1, 8}).expand({4, 8}).contiguous();
    auto up = resize_plane(ramp, 8, 16);
    // Pixel centres: target j maps to source (j + 0.5) / 2 - 0.5.
    for (int64_t j = 1; j < 15; ++j) {
        CHECK(up[3][j].item<float>() == doctest::Approx((j + 0.5) / 2.0 - 0.5));
    }
}

TEST_CASE("bad upsampling targets") {
    DepthMap d{torch::ones({16, 16})};
    CHECK_THROWS_AS(upsample_depth(d, 0, 16), UsageError);
    CHECK_THROWS_AS(upsample_depth(d, 16, -4), UsageError);
    CHECK_THROWS_AS(upsample_depth(d, 8, 16), AlignmentError);
}

TEST_CASE("aligned crops") {
    auto pair = synth_rgbd(2, 128, 0.5);
    std::mt19937_64 a(99), b(99);
    for (int i = 0; i < 1000; ++i) {
        auto ca = random_aligned_crop(pair, 64, a);
        auto cb = random_aligned_crop(pair, 64, b);
        REQUIRE(ca.top == cb.top);
        REQUIRE(ca.left == cb.left);
        REQUIRE(ca.top >= 0);
        REQUIRE(ca.top <= 64);
        REQUIRE(ca.left <= 64);
        if (i % 50 == 0) {
            CHECK(torch::equal(ca.image.values,
                               pair.image.values.slice(1, ca.top, ca.top + 64).slice(2, ca.left, ca.left + 64)));
            CHECK(torch::equal(ca.depth.values, pair.depth_aligned.values.slice(1, ca.top, ca.top + 64)
                                                    .slice(2, ca.left, ca.left + 64)));
        }
    }
    std::mt19937_64 r(1);
    CHECK_THROWS_AS(random_aligned_crop(pair, 256, r), UsageError);
    auto full = random_aligned_crop(pair, 128, r);
    CHECK(full.top == 0);
    CHECK(full.left == 0);
}

TEST_CASE("synthetic pairs are deterministic and well formed") {
    auto a = synth_rgbd(42, 64, 0.9);
    auto b = synth_rgbd(42, 64, 0.9);
    auto c = synth_rgbd(43, 64, 0.9);
    CHECK(a.id == "synth42");
    CHECK(torch::equal(a.image.values, b.image.values));
    CHECK(torch::equal(a.depth_raw.meters, b.depth_raw.meters));
    CHECK(!torch::equal(a.image.values, c.image.values));
    CHECK(a.image.values.sizes() == torch::IntArrayRef({3, 64, 64}));
    CHECK(a.depth_raw.meters.sizes() == torch::IntArrayRef({16, 16}));
    CHECK(a.depth_aligned.values.sizes() == torch::IntArrayRef({1, 64, 64}));
    CHECK(a.depth_raw.meters.min().item<float>() > 0.0f);
    // 8-bit representable.
    auto scaled = a.image.values * 255.0f;
    CHECK(torch::allclose(scaled, scaled.round(), 0.0, 1e-3));
    CHECK_THROWS_AS(synth_rgbd(1, 64, 1.5), UsageError);
    CHECK_THROWS_AS(synth_rgbd(1, 66, 0.5), UsageError);
}

TEST_CASE("fully informative depth determines the image") {
    for (uint64_t s = 0; s < 5; ++s) {
        auto p = synth_rgbd(s, 64, 1.0);
        auto expected = (depth_palette(p.depth_aligned.values[0]) * 255.0f).round() / 255.0f;
        CHECK(torch::allclose(p.image.values, expected, 0.0, 1e-6));
    }
}

TEST_CASE("image structure follows depth only when informative") {
    double independent = 0.0, coupled = 0.0;
    const int n = 20;
    for (int s = 0; s < n; ++s) {
        auto p0 = synth_rgbd(100 + s, 128, 0.0);
        auto p1 = synth_rgbd(100 + s, 128, 1.0);
        independent += correlation(image_boundaries(p0.image), depth_boundaries(p0.depth_aligned)) / n;
        coupled += correlation(image_boundaries(p1.image), depth_boundaries(p1.depth_aligned)) / n;
    }
    CHECK(std::abs(independent) < 0.05);
    CHECK(coupled > 0.3);
}

TEST_CASE("PNG round trips") {
    TempDir dir("ldic_png_test");
    auto pair = synth_rgbd(5, 64, 0.7);
    write_rgb_png(pair.image, dir.path / "a.png");
    CHECK(torch::equal(read_rgb_png(dir.path / "a.png").values, pair.image.values));

    write_depth_png(pair.depth_raw, dir.path / "d.png");
    auto back = read_depth_png(dir.path / "d.png");
    CHECK(torch::allclose(back.meters, pair.depth_raw.meters, 0.0, 5e-4));

    CHECK_THROWS_AS(read_rgb_png(dir.path / "missing.png"), DataError);
    CHECK_THROWS_AS(read_depth_png(dir.path / "a.png"), DataError);
}

TEST_CASE("manifest scanning, skipping and caching") {
    TempDir root("ldic_manifest_test");
    write_synthetic_split(root.path, "train", 4, 64, 0.9, 10);
    write_synthetic_split(root.path, "test", 2, 64, 0.9, 500);
    std::ofstream(root.path / "train" / "zzz_rgb.png") << "orphan";

    auto train = load_manifest(root.path, "train");
    CHECK(train.split == "train");
    REQUIRE(train.size() == 4);
    CHECK(train.entries[0].id == "00000010");
    CHECK(train.entries[3].id == "00000013");
    REQUIRE(train.skipped.size() == 1);
    CHECK(train.skipped[0].find("zzz") != std::string::npos);

    auto test = load_manifest(root.path, "test");
    CHECK(test.size() == 2);
    CHECK_NOTHROW(check_disjoint(train, test));
    CHECK_THROWS_AS(check_disjoint(train, train), DataError);

    fs::create_directories(root.path / "empty");
    CHECK(load_manifest(root.path, "empty").size() == 0);
    CHECK_THROWS_AS(load_manifest(root.path, "nope"), DataError);

    write_manifest_cache(train, root.path / "train.cache");
    auto cached = read_manifest_cache(root.path / "train.cache");
    CHECK(cached.split == "train");
    CHECK((cached.entries == train.entries));
    CHECK(cached.skipped == train.skipped);

    auto pairs = load_split(root.path, "train");
    REQUIRE(pairs.size() == 4);
    auto direct = synth_rgbd(12, 64, 0.9);
    CHECK(torch::equal(pairs[2].image.values, direct.image.values));
    CHECK(pairs[2].depth_aligned.values.sizes() == torch::IntArrayRef({1, 64, 64}));
}

TEST_CASE("splits sharing an identifier are not disjoint") {
    TempDir a("ldic_split_a");
    write_synthetic_split(a.path, "train", 2, 64, 0.5, 1);
    write_synthetic_split(a.path, "test", 2, 64, 0.5, 2);
    auto tr = load_manifest(a.path, "train");
    auto te = load_manifest(a.path, "test");
    // Overlapping seed ranges: pair 2 lands in both splits.
    CHECK_THROWS_AS(check_disjoint(tr, te), DataError);
    DatasetManifest other{"test", {{"x9", a.path / "x9_rgb.png", a.path / "x9_depth.png"}}, {}};
    CHECK_NOTHROW(check_disjoint(tr, other));
}

#include "ldic/checkpoint.hpp"
#include "ldic/errors.hpp"
#include "ldic/model.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace ldic;
using namespace ldic::model;

namespace fs = std::filesystem;

namespace {

ModelConfig toy(bool guided = true) {
    auto c = ModelConfig::toy();
    c.depth_guided = guided;
    return c;
}

AlignedDepth depth_like(int64_t H, int64_t W, double v) {
    return AlignedDepth{torch::full({1, H, W}, v), H / 4, W / 4};
}

struct Pass {
    torch::Tensor y, z, x_hat;
    EntropyParams params;
};

Pass run(Model& m, const RgbImage& x, double mlambda, const std::optional<AlignedDepth>& depth) {
    torch::NoGradGuard g;
    auto ctl = ControlInput::make(mlambda, x.height(), x.width());
    Pass p;
    p.y = analysis_transform(m, x, build_encoder_prompts(m, x, ctl, depth));
    p.z = m->hyper_analysis(p.y.unsqueeze(0));
    p.params = m->hyper_synthesis(torch::round(p.z));
    auto y_hat = torch::round(p.y);
    p.x_hat = synthesis_transform(m, y_hat, build_decoder_prompts(m, y_hat, ctl, depth)).values;
    return p;
}

}  // namespace

TEST_CASE("toy shape chain over several sizes") {
    torch::manual_seed(1);
    Model m(toy());
    m->eval();
    const std::vector<std::pair<int64_t, int64_t>> sizes{{64, 64}, {128, 64}, {64, 192}, {128, 128}, {192, 128}};
    for (auto [H, W] : sizes) {
        RgbImage x{torch::rand({3, H, W})};
        auto p = run(m, x, 0.5, depth_like(H, W, 0.3));
        CHECK(p.y.sizes() == torch::IntArrayRef({32, H / 16, W / 16}));
        CHECK(p.z.sizes() == torch::IntArrayRef({1, 16, H / 64, W / 64}));
        CHECK(p.params.mean.sizes() == torch::IntArrayRef({1, 32, H / 16, W / 16}));
        CHECK(p.params.scale.sizes() == p.params.mean.sizes());
        CHECK(p.x_hat.sizes() == torch::IntArrayRef({3, H, W}));
        CHECK(p.x_hat.min().item<float>() >= 0.0f);
        CHECK(p.x_hat.max().item<float>() <= 1.0f);
    }
}

TEST_CASE("full preset at 256x256") {
    torch::manual_seed(2);
    Model m(ModelConfig::full());
    m->eval();
    RgbImage x{torch::rand({3, 256, 256})};
    torch::NoGradGuard g;
    auto ctl = ControlInput::make(1.0, 256, 256);
    auto prompts = build_encoder_prompts(m, x, ctl, std::nullopt);
    REQUIRE(prompts.size() == 4);
    const int64_t grids[] = {128, 64, 32, 16};
    for (size_t s = 0; s < 4; ++s) {
        CHECK(prompts.blocks[s].size(1) == grids[s]);
        CHECK(prompts.blocks[s].size(2) == grids[s]);
    }
    auto y = analysis_transform(m, x, prompts);
    CHECK(y.sizes() == torch::IntArrayRef({192, 16, 16}));
    auto z = m->hyper_analysis(y.unsqueeze(0));
    CHECK(z.sizes() == torch::IntArrayRef({1, 192, 4, 4}));
    auto dec = build_decoder_prompts(m, torch::round(y), ctl, std::nullopt);
    REQUIRE(dec.size() == 4);
    for (size_t s = 0; s < 4; ++s) {
        CHECK(dec.blocks[s].size(1) == grids[3 - s]);
    }
    auto xh = synthesis_transform(m, torch::round(y), dec);
    CHECK(xh.values.sizes() == torch::IntArrayRef({3, 256, 256}));
}

TEST_CASE("toy 64x64 gives a 4x4x32 latent and back") {
    torch::manual_seed(3);
    Model m(toy(false));
    auto p = run(m, RgbImage{torch::rand({3, 64, 64})}, 1.0, std::nullopt);
    CHECK(p.y.sizes() == torch::IntArrayRef({32, 4, 4}));
    CHECK(p.x_hat.sizes() == torch::IntArrayRef({3, 64, 64}));
}

TEST_CASE("training pass on grids whose latent is not a multiple of the hyper stride") {
    torch::manual_seed(12);
    Model m(toy());
    for (int64_t side : {16, 32, 48, 80}) {
        auto x = torch::rand({2, 3, side, side});
        NoiseSource noise;
        auto out = m->forward_train(x, torch::full({2}, 0.5), torch::Tensor(), noise);
        CHECK(out.x_hat.sizes() == x.sizes());
        CHECK(out.y_likelihoods.sizes() == torch::IntArrayRef({2, 32, side / 16, side / 16}));
        const int64_t zs = (side / 16 + 3) / 4;
        CHECK(out.z_likelihoods.sizes() == torch::IntArrayRef({2, 16, zs, zs}));
        CHECK(torch::isfinite(out.x_hat).all().item<bool>());
    }
    auto y = torch::rand({1, 2, 5, 6});
    auto p = pad_for_hyper(y);
    CHECK(p.sizes() == torch::IntArrayRef({1, 2, 8, 8}));
    CHECK(torch::equal(p.narrow(2, 0, 5).narrow(3, 0, 6), y));
    CHECK(torch::equal(p[0][1][7][7], y[0][1][4][5]));
    CHECK(pad_for_hyper(torch::rand({1, 1, 4, 8})).sizes() == torch::IntArrayRef({1, 1, 4, 8}));
}

TEST_CASE("scales respect the floor for any hyper latent") {
    torch::manual_seed(4);
    Model m(toy());
    torch::NoGradGuard g;
    for (double mag : {0.0, 1.0, 100.0, -100.0}) {
        auto z = torch::randn({1, 16, 2, 2}) * mag;
        CHECK(m->hyper_synthesis(z).scale.min().item<float>() >= 0.11f);
    }
}

TEST_CASE("absent depth equals an explicit zero map bit-exactly") {
    torch::manual_seed(5);
    Model m(toy());
    RgbImage x{torch::rand({3, 64, 128})};
    auto a = run(m, x, 0.3, std::nullopt);
    auto b = run(m, x, 0.3, depth_like(64, 128, 0.0));
    CHECK(torch::equal(a.y, b.y));
    CHECK(torch::equal(a.x_hat, b.x_hat));
    auto c = run(m, x, 0.3, depth_like(64, 128, 0.7));
    CHECK(!torch::equal(a.y, c.y));
}

TEST_CASE("forward passes are deterministic") {
    torch::manual_seed(6);
    Model m(toy());
    RgbImage x{torch::rand({3, 64, 64})};
    auto d = depth_like(64, 64, 0.4);
    auto a = run(m, x, 0.8, d);
    auto b = run(m, x, 0.8, d);
    CHECK(torch::equal(a.y, b.y));
    CHECK(torch::equal(a.x_hat, b.x_hat));
    CHECK(torch::equal(a.params.scale, b.params.scale));
}

TEST_CASE("the control input changes the prompts") {
    torch::manual_seed(7);
    Model m(toy());
    RgbImage x{torch::rand({3, 64, 64})};
    torch::NoGradGuard g;
    auto lo = build_encoder_prompts(m, x, ControlInput::make(0.0, 64, 64), std::nullopt);
    auto hi = build_encoder_prompts(m, x, ControlInput::make(1.0, 64, 64), std::nullopt);
    CHECK(!torch::equal(lo.blocks[0], hi.blocks[0]));
}

TEST_CASE("no NaN or Inf over 100 random inputs") {
    torch::manual_seed(8);
    Model m(toy());
    bool finite = true;
    for (int i = 0; i < 100; ++i) {
        RgbImage x{i == 0 ? torch::zeros({3, 64, 64}) : (i == 1 ? torch::ones({3, 64, 64}) : torch::rand({3, 64, 64}))};
        auto p = run(m, x, (i % 5) / 4.0, depth_like(64, 64, (i % 7) / 6.0));
        finite = finite && torch::isfinite(p.y).all().item<bool>() && torch::isfinite(p.x_hat).all().item<bool>() &&
                 torch::isfinite(p.params.scale).all().item<bool>();
    }
    CHECK(finite);
}

TEST_CASE("misaligned depth is rejected") {
    torch::manual_seed(9);
    Model m(toy());
    RgbImage x{torch::rand({3, 64, 64})};
    auto ctl = ControlInput::make(0.5, 64, 64);
    CHECK_THROWS_AS(build_encoder_prompts(m, x, ctl, depth_like(64, 128, 0.1)), AlignmentError);
    CHECK_THROWS_AS(build_decoder_prompts(m, torch::zeros({32, 4, 4}), ctl, depth_like(128, 64, 0.1)),
                    AlignmentError);
}

TEST_CASE("prompt and channel mismatches are configuration errors") {
    torch::manual_seed(10);
    Model m(toy());
    PromptSet three;
    three.blocks.resize(3);
    CHECK_THROWS_AS(m->analysis_transform(torch::rand({1, 3, 64, 64}), three), ConfigError);
    CHECK_THROWS_AS(m->synthesis_transform(torch::zeros({1, 8, 4, 4}), PromptSet{}), ConfigError);
    CHECK_THROWS_AS(m->hyper_synthesis(torch::zeros({1, 3, 1, 1})), ConfigError);
    auto bad = ModelConfig::toy();
    bad.lambda_min = 0.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = ModelConfig::toy();
    bad.prompt_dim_per_stage[1] = 7;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("the baseline model has no depth prompt networks") {
    Model guided(toy(true));
    Model base(toy(false));
    auto names = [](Model& m) {
        std::vector<std::string> out;
        for (const auto& kv : m->named_parameters()) out.push_back(kv.key());
        return out;
    };
    auto has = [](const std::vector<std::string>& v, const std::string& prefix) {
        return std::any_of(v.begin(), v.end(), [&](const auto& s) { return s.rfind(prefix, 0) == 0; });
    };
    CHECK(has(names(guided), "l_a."));
    CHECK(has(names(guided), "l_s."));
    CHECK_FALSE(has(names(base), "l_a."));
    CHECK_FALSE(has(names(base), "l_s."));
    CHECK(names(base).size() < names(guided).size());
}

TEST_CASE("checkpoint round trip and config mismatch") {
    torch::manual_seed(11);
    const auto dir = fs::temp_directory_path() / "ldic_model_test";
    fs::create_directories(dir);
    const auto path = dir / "m.ckpt";
    Model m(toy());
    save_checkpoint(m, path);
    REQUIRE(m->tables().has_value());

    auto back = load_checkpoint(path);
    CHECK(back->config() == m->config());
    RgbImage x{torch::rand({3, 64, 64})};
    CHECK(torch::equal(run(m, x, 0.5, std::nullopt).x_hat, run(back, x, 0.5, std::nullopt).x_hat));
    REQUIRE(back->tables().has_value());
    CHECK(back->tables()->z_tables.size() == m->tables()->z_tables.size());
    for (size_t i = 0; i < m->tables()->z_tables.size(); ++i) {
        CHECK(back->tables()->z_tables[i] == m->tables()->z_tables[i]);
    }

    CHECK_THROWS_AS(load_checkpoint(path, toy(false)), CheckpointError);
    Model other(toy(false));
    CHECK_THROWS_AS(load_weights(other, path), CheckpointError);
    CHECK(read_checkpoint_config(path) == toy());

    std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
    CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), CheckpointError);
    fs::remove_all(dir);
}

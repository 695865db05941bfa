#include "ldic/checkpoint.hpp"
#include "ldic/errors.hpp"
#include "ldic/training.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace ldic;
using namespace ldic::train;

namespace fs = std::filesystem;

namespace {

TrainConfig tiny_run(bool guided) {
    TrainConfig c;
    c.preset = "tiny";
    c.steps = 4;
    c.batch_size = 2;
    c.crop_size = 64;
    c.checkpoint_every = 2;
    c.log_every = 1;
    c.synth_count = 3;
    c.synth_size = 64;
    c.depth_guided = guided;
    return c;
}

bool same_weights(model::Model& a, model::Model& b) {
    auto pa = a->named_parameters();
    auto pb = b->named_parameters();
    if (pa.size() != pb.size()) return false;
    for (const auto& kv : pa) {
        if (!torch::equal(kv.value(), pb[kv.key()])) return false;
    }
    return true;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("lambda from the control value") {
    CHECK(lambda_from_control(0.0, 0.003, 0.2) == doctest::Approx(0.003).epsilon(1e-12));
    CHECK(lambda_from_control(1.0, 0.003, 0.2) == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(lambda_from_control(0.5, 0.003, 0.2) == doctest::Approx(std::sqrt(0.003 * 0.2)).epsilon(1e-12));
    double prev = 0.0;
    for (int i = 0; i <= 100; ++i) {
        const double l = lambda_from_control(i / 100.0, 0.003, 0.2);
        CHECK(l > prev);
        prev = l;
    }
    CHECK_THROWS_AS(lambda_from_control(1.01, 0.003, 0.2), UsageError);
    CHECK_THROWS_AS(lambda_from_control(-0.5, 0.003, 0.2), UsageError);
}

TEST_CASE("rd_loss small cases") {
    RgbImage x{torch::rand({3, 8, 8})};
    entropy::RateEstimate r{96.0, 32.0};
    CHECK(rd_loss(x, x, r, 0.7) == doctest::Approx(128.0 / 64.0));

    // One pixel, every channel off by one: MSE = 1.
    RgbImage one{torch::ones({3, 1, 1})};
    RgbImage zero{torch::zeros({3, 1, 1})};
    CHECK(rd_loss(one, zero, entropy::RateEstimate{3.0, 0.0}, 2.0) == doctest::Approx(5.0));
}

TEST_CASE("batched rd_loss against a loop over raw values") {
    torch::manual_seed(3);
    auto x = torch::rand({4, 3, 16, 8}, torch::kFloat64);
    auto xh = torch::rand({4, 3, 16, 8}, torch::kFloat64);
    auto bits = torch::rand({4}, torch::kFloat64) * 500.0;
    auto lam = torch::rand({4}, torch::kFloat64) * 100.0;
    double ref = 0.0;
    auto xa = x.accessor<double, 4>();
    auto ha = xh.accessor<double, 4>();
    for (int b = 0; b < 4; ++b) {
        double se = 0.0;
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < 16; ++i)
                for (int j = 0; j < 8; ++j) se += (xa[b][c][i][j] - ha[b][c][i][j]) * (xa[b][c][i][j] - ha[b][c][i][j]);
        ref += (lam[b].item<double>() * se / 384.0 + bits[b].item<double>() / 128.0) / 4.0;
    }
    CHECK(rd_loss(x, xh, bits, lam).item<double>() == doctest::Approx(ref).epsilon(1e-9));
}

TEST_CASE("m_lambda draws are uniform") {
    auto cfg = tiny_run(true);
    Trainer t(model::Model(model_config_for(cfg)), cfg);
    auto m = t.draw_m_lambda(10000);
    CHECK(m.min().item<double>() >= 0.0);
    CHECK(m.max().item<double>() < 1.0);
    CHECK(std::abs(m.mean().item<double>() - 0.5) < 0.02);
}

TEST_CASE("end-to-end gradient of the RD loss matches finite differences") {
    torch::manual_seed(12);
    auto mc = ModelConfig::tiny();
    model::Model m(mc);
    m->to(torch::kFloat64);
    auto x = torch::rand({1, 3, 64, 64}, torch::kFloat64);
    auto depth = torch::rand({1, 1, 64, 64}, torch::kFloat64);
    auto ml = torch::tensor({0.6}, torch::kFloat64);
    model::NoiseSource noise;
    noise.fixed_y = torch::rand({1, 4, 4, 4}, torch::kFloat64) - 0.5;
    noise.fixed_z = torch::rand({1, 2, 1, 1}, torch::kFloat64) - 0.5;
    auto lam = torch::tensor({lambda_from_control(0.6, mc.lambda_min, mc.lambda_max) * 1000.0}, torch::kFloat64);

    auto loss_fn = [&] {
        auto out = m->forward_train(x, ml, depth, noise);
        auto bits = bits_per_element(out.y_likelihoods) + bits_per_element(out.z_likelihoods);
        return rd_loss(x, out.x_hat, bits, lam);
    };
    m->zero_grad();
    loss_fn().backward();

    torch::NoGradGuard g;
    int checked = 0;
    double worst = 0.0;
    for (const auto& kv : m->named_parameters()) {
        auto p = kv.value();
        auto grad = p.grad();
        if (!grad.defined()) continue;
        auto flat = p.view(-1);
        auto gflat = grad.view(-1);
        // Two entries per tensor: the largest-gradient one and the middle one.
        for (int64_t idx : {gflat.abs().argmax().item<int64_t>(), flat.numel() / 2}) {
            const double analytic = gflat[idx].item<double>();
            if (std::abs(analytic) < 1e-6) continue;
            const double orig = flat[idx].item<double>();
            const double h = 1e-5 * std::max(1.0, std::abs(orig));
            flat[idx] = orig + h;
            const double up = loss_fn().item<double>();
            flat[idx] = orig - h;
            const double down = loss_fn().item<double>();
            flat[idx] = orig;
            const double numeric = (up - down) / (2 * h);
            const double rel = std::abs(numeric - analytic) / std::max(std::abs(numeric), std::abs(analytic));
            worst = std::max(worst, rel);
            ++checked;
        }
    }
    MESSAGE("checked " << checked << " weights, worst relative error " << worst);
    CHECK(checked > 40);
    CHECK(worst < 1e-2);
}

TEST_CASE("non-finite batches are skipped without touching weights") {
    auto cfg = tiny_run(true);
    torch::manual_seed(4);
    model::Model m(model_config_for(cfg));
    Trainer t(m, cfg);
    std::mt19937_64 rng(1);
    auto batch = sample_batch({data::synth_rgbd(1, 64, 0.9)}, 2, 64, rng);
    std::vector<torch::Tensor> before;
    for (const auto& p : m->parameters()) before.push_back(p.detach().clone());
    auto bad = batch;
    bad.images = bad.images.clone();
    bad.images[0][0][0][0] = std::nan("");
    auto r = t.step(bad);
    CHECK(r.skipped);
    size_t i = 0;
    for (const auto& p : m->parameters()) CHECK(torch::equal(p, before[i++]));

    auto ok = t.step(batch);
    CHECK_FALSE(ok.skipped);
    CHECK(std::isfinite(ok.loss));
    CHECK(ok.step == 2);
}

TEST_CASE("native depth crops for the self-compression term") {
    CHECK(depth_crop_size(64) == 16);
    CHECK(depth_crop_size(128) == 32);
    CHECK(depth_crop_size(256) == 64);
    CHECK(depth_crop_size(192) == 48);

    std::mt19937_64 rng(9);
    std::vector<data::RgbdPair> pool{data::synth_rgbd(5, 64, 0.9), data::synth_rgbd(6, 128, 0.9)};
    auto d = sample_depth_images(pool, 6, 16, rng);
    REQUIRE(d.defined());
    CHECK(d.sizes() == torch::IntArrayRef({6, 3, 16, 16}));
    CHECK(torch::equal(d.select(1, 0), d.select(1, 2)));
    CHECK(d.min().item<float>() >= 0.0f);
    CHECK(d.max().item<float>() <= 1.0f);
    // A 16x16 crop of a 16x16 native map is the whole map, normalized.
    auto one = sample_depth_images({pool[0]}, 1, 16, rng);
    CHECK(torch::allclose(one[0][1], data::normalize_depth(pool[0].depth_raw.meters)));
    // 32x32 crops only fit the second pair's native map.
    auto big = sample_depth_images(pool, 3, 32, rng);
    REQUIRE(big.defined());
    CHECK(big.size(2) == 32);
    CHECK_FALSE(sample_depth_images(pool, 2, 64, rng).defined());
}

TEST_CASE("the self-compression term enters the loss") {
    auto cfg = tiny_run(true);
    std::mt19937_64 rng(10);
    std::vector<data::RgbdPair> pool{data::synth_rgbd(7, 64, 0.9)};
    auto batch = sample_batch(pool, 2, 64, rng);
    batch.depth_images = sample_depth_images(pool, 2, 16, rng);
    auto loss_with = [&](double w) {
        auto c = cfg;
        c.self_compression_weight = w;
        torch::manual_seed(11);
        Trainer t(model::Model(model_config_for(c)), c);
        return t.step(batch).loss;
    };
    const double none = loss_with(0.0), some = loss_with(0.5), more = loss_with(1.0);
    CHECK(some > none);
    // Same noise draws, so the extra term scales linearly with its weight.
    CHECK((more - none) == doctest::Approx(2.0 * (some - none)).epsilon(1e-4));
}

TEST_CASE("lambda balancing reweights gradients but not the reported loss") {
    auto cfg = tiny_run(true);
    cfg.self_compression_weight = 0.0;
    std::mt19937_64 rng(10);
    std::vector<data::RgbdPair> pool{data::synth_rgbd(7, 64, 0.9), data::synth_rgbd(8, 64, 0.9)};
    auto batch = sample_batch(pool, 4, 64, rng);
    auto run = [&](bool balance) {
        auto c = cfg;
        c.balance_lambdas = balance;
        torch::manual_seed(11);
        model::Model m(model_config_for(c));
        Trainer t(m, c);
        const double loss = t.step(batch).loss;
        return std::make_pair(loss, m->parameters().front().grad().detach().clone());
    };
    auto [plain_loss, plain_g] = run(false);
    auto [bal_loss, bal_g] = run(true);
    CHECK(bal_loss == doctest::Approx(plain_loss).epsilon(1e-9));
    CHECK_FALSE(torch::allclose(plain_g, bal_g, 1e-6, 1e-9));
}

TEST_CASE("prior CDF stays monotone while training") {
    auto cfg = tiny_run(true);
    torch::manual_seed(5);
    model::Model m(model_config_for(cfg));
    Trainer t(m, cfg);
    std::mt19937_64 rng(2);
    std::vector<data::RgbdPair> pool{data::synth_rgbd(2, 64, 0.9), data::synth_rgbd(3, 64, 0.9)};
    auto pts = torch::linspace(-30, 30, 601, torch::kFloat64);
    for (int s = 0; s < 5; ++s) {
        t.step(sample_batch(pool, 2, 64, rng));
        for (int64_t c = 0; c < m->prior->channels(); ++c) {
            auto cdf = m->prior->cdf(c, pts);
            REQUIRE((cdf.slice(0, 1) - cdf.slice(0, 0, -1)).min().item<double>() >= 0.0);
        }
    }
}

TEST_CASE("learning rate steps down at the milestones") {
    auto cfg = tiny_run(true);
    cfg.steps = 10;
    cfg.batch_size = 1;
    Trainer t(model::Model(model_config_for(cfg)), cfg);
    std::mt19937_64 rng(3);
    std::vector<data::RgbdPair> pool{data::synth_rgbd(4, 64, 0.9)};
    std::vector<double> lrs;
    for (int i = 0; i < 10; ++i) lrs.push_back(t.step(sample_batch(pool, 1, 64, rng)).learning_rate);
    // Milestones at steps 7.5 and 9 of 10.
    for (int i = 0; i < 8; ++i) CHECK(lrs[i] == doctest::Approx(1e-3));
    CHECK(lrs[8] == doctest::Approx(3e-4));
    CHECK(lrs[9] == doctest::Approx(9e-5));
}

TEST_CASE("training runs are reproducible and checkpoint on the same cadence") {
    TempDir dir("ldic_train_test");
    auto g = tiny_run(true);
    auto b = tiny_run(false);
    std::vector<int64_t> seen;
    auto a1 = ldic::train::train(g, model_config_for(g), dir.path / "a", "guided",
                                 [&](const StepResult& r) { seen.push_back(r.step); });
    auto a2 = ldic::train::train(g, model_config_for(g), dir.path / "b", "guided");
    auto base = ldic::train::train(b, model_config_for(b), dir.path / "a", "baseline");
    CHECK(seen == std::vector<int64_t>{1, 2, 3, 4});
    CHECK(same_weights(a1, a2));

    for (const std::string tag : {"guided", "baseline"}) {
        CHECK(fs::exists(dir.path / "a" / (tag + "_step2.ckpt")));
        CHECK(fs::exists(dir.path / "a" / (tag + "_step4.ckpt")));
        CHECK(fs::exists(dir.path / "a" / (tag + ".ckpt")));
        std::ifstream log(dir.path / "a" / (tag + ".log.jsonl"));
        int lines = 0;
        for (std::string line; std::getline(log, line); ++lines) {
            auto j = nlohmann::json::parse(line);
            CHECK(j.contains("loss"));
            CHECK(j.contains("mse"));
            CHECK(j.contains("bpp"));
            CHECK(j.contains("m_lambda"));
        }
        CHECK(lines == 4);
    }
    auto back = load_checkpoint(dir.path / "a" / "guided.ckpt");
    CHECK(same_weights(back, a1));
    CHECK(base->config().depth_guided == false);
    // The two runs differ only in the depth flag.
    auto cg = model_config_for(g);
    auto cb = model_config_for(b);
    cb.depth_guided = true;
    CHECK(cg == cb);
}

TEST_CASE("config files") {
    TempDir dir("ldic_cfg_test");
    TrainConfig c;
    c.steps = 77;
    c.preset = "tiny";
    c.informativeness = 0.4;
    nlohmann::json j = c;
    std::ofstream(dir.path / "ok.json") << j.dump();
    CHECK(load_train_config(dir.path / "ok.json") == c);

    std::ofstream(dir.path / "partial.json") << R"({"steps": 5})";
    auto p = load_train_config(dir.path / "partial.json");
    CHECK(p.steps == 5);
    CHECK(p.batch_size == TrainConfig{}.batch_size);

    std::ofstream(dir.path / "unknown.json") << R"({"stepz": 5})";
    CHECK_THROWS_AS(load_train_config(dir.path / "unknown.json"), ConfigError);
    std::ofstream(dir.path / "bad.json") << R"({"crop_size": 50})";
    CHECK_THROWS_AS(load_train_config(dir.path / "bad.json"), ConfigError);
    std::ofstream(dir.path / "syntax.json") << "{";
    CHECK_THROWS_AS(load_train_config(dir.path / "syntax.json"), ConfigError);

    auto mismatch = tiny_run(true);
    auto mc = model_config_for(mismatch);
    mc.lambda_max = 0.5;
    CHECK_THROWS_AS(Trainer(model::Model(mc), mismatch), ConfigError);
}

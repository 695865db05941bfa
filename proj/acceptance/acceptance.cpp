// Acceptance run: one PASS/FAIL line per criterion.
#include "ldic/bitstream.hpp"
#include "ldic/checkpoint.hpp"
#include "ldic/codec.hpp"
#include "ldic/entropy.hpp"
#include "ldic/errors.hpp"
#include "ldic/evaluation.hpp"
#include "ldic/range_coder.hpp"
#include "ldic/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

using namespace ldic;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
    int id;
    bool pass;
    std::string detail;
};

std::vector<Verdict> verdicts;
nlohmann::json report;

void record(int id, bool pass, const std::string& detail) {
    verdicts.push_back({id, pass, detail});
    std::printf("criterion %d: %s (%s)\n", id, pass ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    report["criteria"][std::to_string(id)] = {{"pass", pass}, {"detail", detail}};
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), f, args...);
    return buf;
}

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ---- 1 ----

void entropy_round_trip() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(1001);
    int failures = 0;
    size_t symbols = 0;
    for (int c = 0; c < 1000; ++c) {
        const int ntables = std::uniform_int_distribution<int>(1, 8)(rng);
        std::vector<entropy::CdfTable> tables;
        for (int t = 0; t < ntables; ++t) {
            std::vector<double> pmf(std::uniform_int_distribution<size_t>(1, 200)(rng));
            const double sharp = std::uniform_real_distribution<double>(0.0, 12.0)(rng);
            for (auto& p : pmf) p = std::pow(std::uniform_real_distribution<double>(0, 1)(rng), sharp);
            tables.push_back(entropy::quantize_pmf(pmf, std::uniform_int_distribution<int>(-300, 100)(rng)));
        }
        const size_t n = std::uniform_int_distribution<size_t>(0, 2000)(rng);
        std::vector<int32_t> sym(n);
        std::vector<uint32_t> idx(n);
        for (size_t i = 0; i < n; ++i) {
            idx[i] = std::uniform_int_distribution<uint32_t>(0, ntables - 1)(rng);
            const auto& t = tables[idx[i]];
            sym[i] = std::uniform_int_distribution<int32_t>(t.min_symbol(), t.max_symbol())(rng);
        }
        symbols += n;
        if (entropy::range_decode(entropy::range_encode(sym, idx, tables), idx, tables) != sym) ++failures;
    }
    const double secs = seconds_since(t0);
    record(1, failures == 0 && secs < 60.0,
           fmt("1000 cases, %zu symbols, %d failures, %.1f s", symbols, failures, secs));
}

// ---- 3 ----

bitstream::CompressedImage random_stream(std::mt19937_64& rng, bool allow_depth) {
    auto bytes = [&](size_t max) {
        std::vector<uint8_t> v(std::uniform_int_distribution<size_t>(0, max)(rng));
        for (auto& b : v) b = static_cast<uint8_t>(rng());
        return v;
    };
    bitstream::CompressedImage c;
    c.width = static_cast<uint16_t>(std::uniform_int_distribution<int>(1, 65535)(rng));
    c.height = static_cast<uint16_t>(std::uniform_int_distribution<int>(1, 65535)(rng));
    c.m_lambda_fixed = static_cast<uint16_t>(rng());
    c.depth_guided = rng() & 1;
    c.payload_z = bytes(64);
    c.payload_y = bytes(512);
    if (allow_depth && (rng() & 1)) c.depth = std::make_shared<const bitstream::CompressedImage>(random_stream(rng, false));
    return c;
}

std::optional<ParseError::Kind> parse_kind(std::span<const uint8_t> b) {
    try {
        bitstream::parse(b);
    } catch (const ParseError& e) {
        return e.kind;
    }
    return std::nullopt;
}

void bitstream_fuzz() {
    std::mt19937_64 rng(3003);
    int round_trip_fail = 0, wrong_class = 0, checks = 0;
    using K = ParseError::Kind;
    for (int i = 0; i < 10000; ++i) {
        const auto c = random_stream(rng, true);
        const auto bytes = bitstream::serialize(c);
        if (!(bitstream::parse(bytes) == c) || bitstream::serialize(bitstream::parse(bytes)) != bytes) ++round_trip_fail;

        auto expect = [&](std::vector<uint8_t> b, K k) {
            ++checks;
            if (parse_kind(b) != k) ++wrong_class;
        };
        // Truncation at a random point and right inside the header.
        const auto cut = std::uniform_int_distribution<size_t>(0, bytes.size() - 1)(rng);
        expect({bytes.begin(), bytes.begin() + static_cast<long>(cut)}, K::Truncated);
        auto b = bytes;
        b[std::uniform_int_distribution<size_t>(0, 3)(rng)] ^= static_cast<uint8_t>(1 + rng() % 255);
        expect(b, K::BadMagic);
        b = bytes;
        b[4] = static_cast<uint8_t>(2 + rng() % 254);
        expect(b, K::UnsupportedVersion);
        b = bytes;
        b[5] |= static_cast<uint8_t>(4u << (rng() % 6));
        expect(b, K::Malformed);
        b = bytes;
        b.push_back(static_cast<uint8_t>(rng()));
        expect(b, K::Malformed);
        // A length field pointing past the end.
        b = bytes;
        b[16] = static_cast<uint8_t>(b[16] + 1 + rng() % 200);
        expect(b, K::Truncated);
    }
    record(3, round_trip_fail == 0 && wrong_class == 0,
           fmt("10000 round trips, %d mismatches; %d damaged streams, %d with the wrong error class",
               round_trip_fail, checks, wrong_class));
}

// ---- 4 ----

double phi(double t) {
    return 0.5 * std::erfc(-t / std::sqrt(2.0));
}

void gradient_checks() {
    std::mt19937_64 rng(4004);
    double worst_gauss = 0.0;
    for (int i = 0; i < 100; ++i) {
        const double m = std::uniform_real_distribution<double>(-3, 3)(rng);
        const double s = std::uniform_real_distribution<double>(0.3, 6)(rng);
        const double v = std::round(m + s * std::uniform_real_distribution<double>(-3, 3)(rng));
        auto tm = torch::tensor({m}, torch::kFloat64).requires_grad_(true);
        auto ts = torch::tensor({s}, torch::kFloat64).requires_grad_(true);
        (-torch::log(entropy::gaussian_likelihood(torch::tensor({v}, torch::kFloat64), tm, ts))).sum().backward();
        auto f = [&](double mm, double ss) { return -std::log(phi((v + 0.5 - mm) / ss) - phi((v - 0.5 - mm) / ss)); };
        const double h = 1e-6;
        const double fm = (f(m + h, s) - f(m - h, s)) / (2 * h);
        const double fs = (f(m, s + h) - f(m, s - h)) / (2 * h);
        auto rel = [](double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12}); };
        worst_gauss = std::max({worst_gauss, rel(tm.grad().item<double>(), fm), rel(ts.grad().item<double>(), fs)});
    }

    torch::manual_seed(4005);
    auto mc = ModelConfig::tiny();
    model::Model m(mc);
    m->to(torch::kFloat64);
    auto x = torch::rand({1, 3, 64, 64}, torch::kFloat64);
    auto d = torch::rand({1, 1, 64, 64}, torch::kFloat64);
    auto ml = torch::tensor({0.4}, torch::kFloat64);
    model::NoiseSource noise;
    noise.fixed_y = torch::rand({1, mc.latent_channels, 4, 4}, torch::kFloat64) - 0.5;
    noise.fixed_z = torch::rand({1, mc.hyper_channels, 1, 1}, torch::kFloat64) - 0.5;
    auto lam = torch::tensor({train::lambda_from_control(0.4, mc.lambda_min, mc.lambda_max) * 1000.0}, torch::kFloat64);
    auto loss = [&] {
        auto out = m->forward_train(x, ml, d, noise);
        return train::rd_loss(x, out.x_hat,
                              train::bits_per_element(out.y_likelihoods) + train::bits_per_element(out.z_likelihoods), lam);
    };
    m->zero_grad();
    loss().backward();
    torch::NoGradGuard g;
    double worst_model = 0.0;
    int checked = 0;
    for (const auto& kv : m->named_parameters()) {
        auto p = kv.value().view(-1);
        auto gr = kv.value().grad().view(-1);
        for (int64_t i : {gr.abs().argmax().item<int64_t>(), p.numel() / 2, p.numel() - 1}) {
            const double a = gr[i].item<double>();
            if (std::abs(a) < 1e-6) continue;
            const double o = p[i].item<double>();
            const double h = 1e-5 * std::max(1.0, std::abs(o));
            p[i] = o + h;
            const double up = loss().item<double>();
            p[i] = o - h;
            const double dn = loss().item<double>();
            p[i] = o;
            const double num = (up - dn) / (2 * h);
            worst_model = std::max(worst_model, std::abs(num - a) / std::max(std::abs(num), std::abs(a)));
            ++checked;
        }
    }
    record(4, worst_gauss < 1e-3 && worst_model < 1e-2 && checked > 0,
           fmt("Gaussian worst rel. error %.2e over 100 points; tiny model worst %.2e over %d weights", worst_gauss,
               worst_model, checked));
}

// ---- 5 ----

void shape_suite() {
    torch::manual_seed(5005);
    auto cfg = ModelConfig::toy();
    model::Model m(cfg);
    m->eval();
    torch::NoGradGuard g;
    const std::vector<std::pair<int64_t, int64_t>> sizes{{64, 64}, {128, 64}, {64, 192}, {128, 128}, {192, 128}};
    int bad = 0;
    std::string seen;
    for (auto [H, W] : sizes) {
        RgbImage x{torch::rand({3, H, W})};
        auto ctl = ControlInput::make(0.5, H, W);
        AlignedDepth dep{torch::rand({1, H, W}), H / 4, W / 4};
        auto y = model::analysis_transform(m, x, model::build_encoder_prompts(m, x, ctl, dep));
        auto z = m->hyper_analysis(y.unsqueeze(0));
        auto params = m->hyper_synthesis(torch::round(z));
        auto yh = torch::round(y);
        auto xh = model::synthesis_transform(m, yh, model::build_decoder_prompts(m, yh, ctl, dep));
        const bool ok = y.sizes() == torch::IntArrayRef({cfg.latent_channels, H / 16, W / 16}) &&
                        z.sizes() == torch::IntArrayRef({1, cfg.hyper_channels, H / 64, W / 64}) &&
                        params.scale.sizes() == torch::IntArrayRef({1, cfg.latent_channels, H / 16, W / 16}) &&
                        xh.values.sizes() == torch::IntArrayRef({3, H, W});
        bad += !ok;
        seen += fmt("%s%lldx%lld", seen.empty() ? "" : " ", static_cast<long long>(W), static_cast<long long>(H));
    }
    record(5, bad == 0, fmt("sizes %s; %d violations", seen.c_str(), bad));
}

// ---- 10 ----

void bd_exactness() {
    eval::RdCurve base{"base", {}};
    const double r[] = {0.08, 0.15, 0.27, 0.45, 0.71};
    const double q[] = {24.1, 26.3, 28.2, 30.4, 31.9};
    for (int i = 0; i < 5; ++i) base.points.push_back({0.25 * i, r[i], q[i], 0.9, 0.0});
    auto shifted = base;
    for (auto& p : shifted.points) p.bpp *= 1.10;
    const double self_rate = eval::bd_rate(base, base), self_psnr = eval::bd_psnr(base, base);
    const double up = eval::bd_rate(base, shifted);
    record(10, self_rate == 0.0 && self_psnr == 0.0 && std::abs(up - 10.0) <= 0.01,
           fmt("identical: %.4f %% / %.4f dB; rates x1.10: %+.4f %%", self_rate, self_psnr, up));
}

// ---- trained models ----

struct Trained {
    model::Model guided{nullptr};
    model::Model baseline{nullptr};
    double guided_seconds = 0.0;
    double baseline_seconds = 0.0;
    bool cached = false;
};

Trained train_or_load(const train::TrainConfig& base_cfg, const fs::path& cache, bool retrain) {
    Trained t;
    fs::create_directories(cache);
    nlohmann::json key = base_cfg;
    const auto stamp = cache / "train_config.json";
    const auto timing = cache / "train_time.json";
    if (!retrain && fs::exists(stamp) && fs::exists(cache / "guided.ckpt") && fs::exists(cache / "baseline.ckpt") &&
        fs::exists(timing)) {
        std::ifstream in(stamp);
        if (nlohmann::json::parse(in) == key) {
            t.guided = load_checkpoint(cache / "guided.ckpt");
            t.baseline = load_checkpoint(cache / "baseline.ckpt");
            std::ifstream tin(timing);
            auto tj = nlohmann::json::parse(tin);
            t.guided_seconds = tj.at("guided");
            t.baseline_seconds = tj.at("baseline");
            t.cached = true;
            return t;
        }
    }
    auto progress = [](const char* tag) {
        return [tag](const train::StepResult& r) {
            if (r.step % 250 == 0) {
                std::printf("  [%s] step %lld loss %.4f mse %.5f bpp %.4f\n", tag, static_cast<long long>(r.step), r.loss,
                            r.mse, r.bpp);
                std::fflush(stdout);
            }
        };
    };
    for (bool guided : {true, false}) {
        auto cfg = base_cfg;
        cfg.depth_guided = guided;
        const char* tag = guided ? "guided" : "baseline";
        const auto t0 = Clock::now();
        auto m = train::train(cfg, train::model_config_for(cfg), cache, tag, progress(tag));
        (guided ? t.guided_seconds : t.baseline_seconds) = seconds_since(t0);
        (guided ? t.guided : t.baseline) = m;
    }
    std::ofstream(timing) << nlohmann::json{{"guided", t.guided_seconds}, {"baseline", t.baseline_seconds}}.dump();
    std::ofstream(stamp) << key.dump(2);
    return t;
}

bool strictly_increasing(const eval::RdCurve& c, double eval::RdPoint::*field) {
    for (size_t i = 1; i < c.points.size(); ++i) {
        if (!(c.points[i].*field > c.points[i - 1].*field)) return false;
    }
    return true;
}

std::string curve_text(const eval::RdCurve& c) {
    std::string s;
    for (const auto& p : c.points) s += fmt("%s%.4f/%.2f", s.empty() ? "" : " ", p.bpp, p.psnr_db);
    return s;
}

void rate_fidelity(model::Model& m, const std::vector<data::RgbdPair>& set) {
    // 100 encodes: every test image at alternating control values.
    const double grid[] = {0.0, 0.25, 0.5, 0.75, 1.0};
    int within = 0, total = 0;
    double worst_excess = -1e9, sum_actual = 0.0, sum_est = 0.0;
    for (int i = 0; i < 100; ++i) {
        const auto& p = set[static_cast<size_t>(i) % set.size()];
        codec::EncodeTrace tr;
        auto c = codec::encode_image(m, p.image, p.depth_aligned, grid[i % 5], &tr);
        const double actual = 8.0 * static_cast<double>(c.payload_y.size() + c.payload_z.size());
        const double est = tr.estimate.total_bits();
        const double tol = 0.01 * est + 256.0;
        within += std::abs(actual - est) <= tol;
        worst_excess = std::max(worst_excess, std::abs(actual - est) - tol);
        sum_actual += actual;
        sum_est += est;
        ++total;
    }
    record(2, within == total,
           fmt("%d/%d streams within 1%% + 256 bits of the estimate; mean coded %.1f bits vs estimated %.1f; "
               "worst margin %.1f bits",
               within, total, sum_actual / total, sum_est / total, -worst_excess));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance checks"};
    std::string cache = "acceptance_cache";
    bool retrain = false;
    int test_pairs = 64;
    int64_t test_size = 0;
    int jobs = 1;
    train::TrainConfig tc;
    tc.steps = 1500;
    tc.synth_count = 1024;
    tc.synth_size = 64;
    tc.crop_size = 64;
    tc.informativeness = 0.6;
    tc.checkpoint_every = 0;
    tc.log_every = 10;
    tc.seed = 1;
    app.add_option("--cache", cache, "directory for trained models and reports");
    app.add_flag("--retrain", retrain, "ignore cached models");
    app.add_option("--steps", tc.steps, "training steps per model");
    app.add_option("--train-pairs", tc.synth_count, "synthetic training pairs");
    app.add_option("--test-pairs", test_pairs, "held-out synthetic pairs");
    app.add_option("--test-size", test_size, "side of the held-out images (default: training size)")->check(CLI::NonNegativeNumber);
    app.add_option("--jobs", jobs, "evaluation threads");
    app.add_option("--distortion-scale", tc.distortion_scale, "weight on MSE in the training loss");
    app.add_option("--informativeness", tc.informativeness, "share of the synthetic image driven by depth");
    CLI11_PARSE(app, argc, argv);
    torch::set_num_threads(1);
    const fs::path cache_dir(cache);
    fs::create_directories(cache_dir);

    entropy_round_trip();
    bitstream_fuzz();
    gradient_checks();
    shape_suite();
    bd_exactness();

    std::printf("training guided and baseline toy models (%lld steps each, %d pairs of %lldx%lld, informativeness %.2f)\n",
                static_cast<long long>(tc.steps), tc.synth_count, static_cast<long long>(tc.synth_size),
                static_cast<long long>(tc.synth_size), tc.informativeness);
    std::fflush(stdout);
    auto trained = train_or_load(tc, cache_dir, retrain);
    const double train_minutes = (trained.guided_seconds + trained.baseline_seconds) / 60.0;
    std::printf("training time %.1f min (guided %.1f, baseline %.1f)%s\n", train_minutes, trained.guided_seconds / 60.0,
                trained.baseline_seconds / 60.0, trained.cached ? ", loaded from cache" : "");
    report["training"] = {{"guided_seconds", trained.guided_seconds},
                          {"baseline_seconds", trained.baseline_seconds},
                          {"config", nlohmann::json(tc)}};
    if (test_size == 0) test_size = tc.synth_size;
    report["test"] = {{"pairs", test_pairs}, {"size", test_size}};

    // Held-out pairs come from a seed range the training pool never touches.
    std::vector<data::RgbdPair> test;
    for (int i = 0; i < test_pairs; ++i) test.push_back(data::synth_rgbd(900000 + i, test_size, tc.informativeness));

    rate_fidelity(trained.guided, test);

    eval::ScenarioOptions opt;
    opt.jobs = jobs;
    std::vector<eval::ImageReport> comp_reports;
    auto none = eval::run_scenario(eval::Scenario::NoLidar, nullptr, &trained.baseline, test, opt);
    auto unc = eval::run_scenario(eval::Scenario::UncompressedLidar, &trained.guided, nullptr, test, opt);
    auto comp = eval::run_scenario(eval::Scenario::CompressedLidar, &trained.guided, nullptr, test, opt, &comp_reports);
    auto rnd = eval::run_scenario(eval::Scenario::RandomMap, &trained.guided, nullptr, test, opt);
    std::vector<eval::RdCurve> curves{none, unc, comp, rnd};
    eval::write_curves(curves, cache_dir / "curves.jsonl");
    eval::emit_rd_plot({none, unc, comp}, cache_dir / "rd");
    eval::emit_rd_plot({unc, rnd}, cache_dir / "random_map");
    for (const auto& c : curves) {
        std::printf("  %-20s %s\n", c.label.c_str(), curve_text(c).c_str());
        report["curves"][c.label] = c;
    }

    {
        const bool g_ok = strictly_increasing(unc, &eval::RdPoint::bpp) && strictly_increasing(unc, &eval::RdPoint::psnr_db);
        const bool b_ok =
            strictly_increasing(none, &eval::RdPoint::bpp) && strictly_increasing(none, &eval::RdPoint::psnr_db);
        record(6, g_ok && b_ok,
               fmt("guided bpp/PSNR %s; baseline %s", g_ok ? "strictly increasing" : "NOT monotone",
                   b_ok ? "strictly increasing" : "NOT monotone"));
    }

    auto bd = [](const eval::RdCurve& a, const eval::RdCurve& b) -> std::optional<eval::BdMetrics> {
        try {
            return eval::bd_metrics(a, b);
        } catch (const Error& e) {
            std::printf("  BD %s vs %s unavailable: %s\n", b.label.c_str(), a.label.c_str(), e.what());
            return std::nullopt;
        }
    };
    const auto bd_unc = bd(none, unc);
    {
        const bool time_ok = train_minutes <= 30.0;
        const bool gain_ok = bd_unc && bd_unc->bd_rate_percent <= -3.0;
        record(7, gain_ok && time_ok,
               bd_unc ? fmt("BD-rate %+.2f %%, BD-PSNR %+.3f dB vs baseline on %d pairs of %lldx%lld; training %.1f min",
                            bd_unc->bd_rate_percent, bd_unc->bd_psnr_db, test_pairs, static_cast<long long>(test_size),
                            static_cast<long long>(test_size), train_minutes)
                      : fmt("BD metrics undefined; training %.1f min", train_minutes));
        if (bd_unc) report["bd"]["uncompressed_lidar"] = {{"rate", bd_unc->bd_rate_percent}, {"psnr", bd_unc->bd_psnr_db}};
    }
    {
        bool lower = true;
        std::string diffs;
        for (size_t i = 0; i < unc.points.size(); ++i) {
            const double d = rnd.points[i].psnr_db - unc.points[i].psnr_db;
            lower = lower && d < 0.0;
            diffs += fmt("%s%+.2f", diffs.empty() ? "" : " ", d);
        }
        record(8, lower, fmt("random map minus true depth PSNR per m_lambda: %s dB", diffs.c_str()));
    }
    {
        const auto bd_comp = bd(none, comp);
        double share = 0.0;
        for (const auto& p : comp.points) share += p.depth_bpp / p.bpp / static_cast<double>(comp.points.size());
        std::printf("  depth-rate share of compressed_lidar bpp: %.1f %%\n", 100.0 * share);
        bool ok = bd_comp && bd_unc && bd_comp->bd_rate_percent >= bd_unc->bd_rate_percent && bd_comp->bd_rate_percent <= 0.0;
        record(9, ok,
               bd_comp ? fmt("BD-rate %+.2f %% (uncompressed %+.2f %%), BD-PSNR %+.3f dB; depth share %.1f %% of bpp",
                             bd_comp->bd_rate_percent, bd_unc ? bd_unc->bd_rate_percent : NAN, bd_comp->bd_psnr_db,
                             100.0 * share)
                       : fmt("BD metrics undefined; depth share %.1f %% of bpp", 100.0 * share));
        if (bd_comp) report["bd"]["compressed_lidar"] = {{"rate", bd_comp->bd_rate_percent}, {"psnr", bd_comp->bd_psnr_db}};
        report["depth_share"] = share;
    }

    std::ofstream(cache_dir / "acceptance_report.json") << report.dump(2);
    std::sort(verdicts.begin(), verdicts.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    int failed = 0;
    std::printf("\nsummary\n");
    for (const auto& v : verdicts) {
        std::printf("criterion %d: %s\n", v.id, v.pass ? "PASS" : "FAIL");
        failed += !v.pass;
    }
    return failed == 0 ? 0 : 1;
}

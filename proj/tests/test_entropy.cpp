#include "ldic/entropy.hpp"
#include "ldic/errors.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace ldic;
using namespace ldic::entropy;

namespace {

double phi(double t) {
    return 0.5 * std::erfc(-t / std::sqrt(2.0));
}

// Bin probability computed from scratch in double.
double gauss_bin(double v, double mu, double sigma) {
    return phi((v + 0.5 - mu) / sigma) - phi((v - 0.5 - mu) / sigma);
}

torch::Tensor d(std::vector<double> v) {
    return torch::tensor(v, torch::kFloat64);
}

}  // namespace

TEST_CASE("inference quantization rounds half away from zero") {
    auto q = quantize(d({0.4, -1.5, 1.5, 2.5, -0.4, -0.5, 0.5}), QuantMode::Inference);
    CHECK(q[0].item<double>() == 0.0);
    CHECK(q[1].item<double>() == -2.0);
    CHECK(q[2].item<double>() == 2.0);
    CHECK(q[3].item<double>() == 3.0);
    CHECK(q[4].item<double>() == 0.0);
    CHECK(q[5].item<double>() == -1.0);
    CHECK(q[6].item<double>() == 1.0);
}

TEST_CASE("inference quantization leaves integers alone") {
    auto ints = torch::arange(-50, 51, torch::kFloat32);
    CHECK(torch::equal(quantize(ints, QuantMode::Inference), ints));
}

TEST_CASE("training noise stays in [-0.5, 0.5)") {
    auto gen = at::detail::createCPUGenerator(123);
    auto v = torch::randn({1000000}, torch::kFloat64) * 10.0;
    auto noisy = quantize(v, QuantMode::Training, gen);
    auto delta = noisy - v;
    CHECK(delta.min().item<double>() >= -0.5 - 1e-12);
    CHECK(delta.max().item<double>() < 0.5);
    CHECK(std::abs(delta.mean().item<double>()) < 2e-3);
}

TEST_CASE("training noise is reproducible from the generator seed") {
    auto v = torch::zeros({100});
    auto a = quantize(v, QuantMode::Training, at::detail::createCPUGenerator(5));
    auto b = quantize(v, QuantMode::Training, at::detail::createCPUGenerator(5));
    CHECK(torch::equal(a, b));
}

TEST_CASE("standard Gaussian bin at zero") {
    auto p = gaussian_likelihood(d({0.0}), d({0.0}), d({1.0}));
    CHECK(p.item<double>() == doctest::Approx(0.38292492254802624).epsilon(1e-12));
}

TEST_CASE("Gaussian likelihood against the erfc oracle and symmetry") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> mu(-5, 5), sg(0.11, 20), vv(-20, 20);
    for (int i = 0; i < 500; ++i) {
        const double v = std::round(vv(rng)), m = mu(rng), s = sg(rng);
        const double p = gaussian_likelihood(d({v}), d({m}), d({s})).item<double>();
        const double mirrored = gaussian_likelihood(d({-v}), d({-m}), d({s})).item<double>();
        const double ref = std::max(gauss_bin(v, m, s), kLikelihoodBound);
        REQUIRE(p == doctest::Approx(ref).epsilon(1e-9));
        REQUIRE(mirrored == doctest::Approx(p).epsilon(1e-9));
    }
}

TEST_CASE("Gaussian -log p gradients match central differences") {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> mu(-3, 3), sg(0.3, 6), off(-3, 3);
    int checked = 0;
    for (int i = 0; i < 100; ++i) {
        const double m = mu(rng), s = sg(rng);
        // Within a few sigma, where the likelihood floor is inactive.
        const double v = std::round(m + s * off(rng));
        auto tm = d({m}).requires_grad_(true);
        auto ts = d({s}).requires_grad_(true);
        auto nll = -torch::log(gaussian_likelihood(d({v}), tm, ts)).sum();
        nll.backward();
        const double gm = tm.grad().item<double>();
        const double gs = ts.grad().item<double>();

        auto f = [&](double mm, double ss) { return -std::log(gauss_bin(v, mm, ss)); };
        const double h = 1e-6;
        const double fm = (f(m + h, s) - f(m - h, s)) / (2 * h);
        const double fs = (f(m, s + h) - f(m, s - h)) / (2 * h);
        auto rel = [](double a, double b) { return std::abs(a - b) / std::max(1e-8, std::max(std::abs(a), std::abs(b))); };
        REQUIRE(rel(gm, fm) < 1e-3);
        REQUIRE(rel(gs, fs) < 1e-3);
        ++checked;
    }
    CHECK(checked == 100);
}

TEST_CASE("folded Gaussian pmf keeps the tails in the edge bins") {
    auto pmf = folded_gaussian_pmf(0.3, 2.0, 5);
    REQUIRE(pmf.size() == 11);
    double sum = 0.0;
    for (double p : pmf) sum += p;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(pmf.front() == doctest::Approx(phi((-4.5 - 0.3) / 2.0)).epsilon(1e-9));
    CHECK(pmf[5] == doctest::Approx(gauss_bin(0.0, 0.3, 2.0)).epsilon(1e-9));
}

TEST_CASE("Gaussian conditional slots and tables") {
    GaussianConditional gc{GaussianTableSpec{}};
    const auto& spec = gc.spec();
    CHECK(gc.tables().size() == static_cast<size_t>(spec.scale_levels * (spec.offset_levels + 1)));
    for (const auto& t : gc.tables()) t.validate();
    CHECK(gc.scale_level(1e-6) == 0);
    CHECK(gc.scale_level(1e6) == spec.scale_levels - 1);
    for (int l = 1; l < spec.scale_levels; ++l) {
        CHECK(gc.level_scale(l) > gc.level_scale(l - 1));
    }
    auto s = gc.slot(2.4, 1.0);
    CHECK(s.center == 2);
    auto t = gc.slot(-2.6, 1.0);
    CHECK(t.center == -3);
    // Wider scales need wider support.
    CHECK(gc.max_residual(gc.slot(0.0, 50.0).table) > gc.max_residual(gc.slot(0.0, 0.2).table));
}

TEST_CASE("factorized prior: monotone CDF, normalized tables") {
    torch::manual_seed(3);
    FactorizedPrior prior(4);
    auto pts = torch::linspace(-1000, 1000, 2001, torch::kFloat64);
    for (int64_t c = 0; c < 4; ++c) {
        auto cdf = prior->cdf(c, pts);
        CHECK((cdf.slice(0, 1) - cdf.slice(0, 0, -1)).min().item<double>() >= 0.0);
        CHECK(cdf[0].item<double>() < 1e-3);
        CHECK(cdf[-1].item<double>() > 1.0 - 1e-3);
    }
    auto tables = prior->make_tables();
    REQUIRE(tables.size() == 4);
    for (const auto& t : tables) {
        t.validate();
        CHECK(t.cdf.front() == 0u);
        CHECK(t.cdf.back() == kCdfTotal);
        for (int32_t v = t.min_symbol(); v <= t.max_symbol(); ++v) CHECK(t.frequency(v) >= 1);
    }
    auto z = torch::zeros({1, 4, 2, 2});
    auto p = prior->likelihood(z);
    CHECK(p.min().item<double>() > 0.0);
    CHECK(p.max().item<double>() <= 1.0);
}

TEST_CASE("factorized pmf sums to one over the coding range") {
    torch::manual_seed(8);
    FactorizedPrior prior(3);
    auto tables = prior->make_tables();
    for (int64_t c = 0; c < 3; ++c) {
        const auto& t = tables[static_cast<size_t>(c)];
        auto v = torch::arange(t.min_symbol(), t.max_symbol() + 1, torch::kFloat32);
        auto x = torch::zeros({1, 3, 1, v.size(0)});
        x.select(1, c).copy_(v.view({1, -1}));
        auto p = prior->likelihood(x).select(1, c).sum().item<double>();
        CHECK(p == doctest::Approx(1.0).epsilon(1e-4));
    }
}

TEST_CASE("estimate_rate") {
    auto half = torch::full({100}, 0.5);
    auto r = estimate_rate(half, torch::ones({10}));
    CHECK(r.y_bits == doctest::Approx(100.0));
    CHECK(r.z_bits == 0.0);
    CHECK(r.total_bits() == doctest::Approx(100.0));
    CHECK(estimate_rate(torch::ones({5}), torch::ones({5})).total_bits() == 0.0);

    torch::manual_seed(1);
    auto py = torch::rand({2, 8, 4, 4}, torch::kFloat64) * 0.999 + 1e-3;
    auto pz = torch::rand({2, 4, 1, 1}, torch::kFloat64) * 0.999 + 1e-3;
    double brute = 0.0;
    auto ay = py.flatten();
    for (int64_t i = 0; i < ay.numel(); ++i) brute -= std::log2(ay[i].item<double>());
    auto az = pz.flatten();
    for (int64_t i = 0; i < az.numel(); ++i) brute -= std::log2(az[i].item<double>());
    CHECK(estimate_rate(py, pz).total_bits() == doctest::Approx(brute).epsilon(1e-6));
}

TEST_CASE("probabilities outside (0, 1] are internal errors") {
    CHECK_THROWS_AS(information_bits(d({0.5, 1.5})), InternalError);
    CHECK_THROWS_AS(information_bits(d({0.0})), InternalError);
    CHECK_THROWS_AS(information_bits(d({-0.1})), InternalError);
}

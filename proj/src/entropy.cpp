#include "ldic/entropy.hpp"

#include "ldic/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace ldic::entropy {

namespace {

double phi(double t) {
    return 0.5 * std::erfc(-t / std::sqrt(2.0));
}

}  // namespace

torch::Tensor round_half_away(const torch::Tensor& v) {
    return torch::sign(v) * torch::floor(torch::abs(v) + 0.5);
}

torch::Tensor quantize(const torch::Tensor& v, QuantMode mode, std::optional<at::Generator> gen) {
    if (mode == QuantMode::Inference) {
        return round_half_away(v);
    }
    auto noise = gen ? torch::rand(v.sizes(), *gen, v.options()) : torch::rand(v.sizes(), v.options());
    return v + (noise - 0.5);
}

torch::Tensor standard_normal_cdf(const torch::Tensor& t) {
    return 0.5 * torch::erfc(t * (-1.0 / std::sqrt(2.0)));
}

torch::Tensor gaussian_likelihood(const torch::Tensor& values, const torch::Tensor& mean,
                                  const torch::Tensor& scale) {
    // Evaluate on the left tail (|v - mean|) where erfc keeps precision.
    auto dist = torch::abs(values - mean);
    auto upper = standard_normal_cdf((0.5 - dist) / scale);
    auto lower = standard_normal_cdf((-0.5 - dist) / scale);
    return torch::clamp_min(upper - lower, kLikelihoodBound);
}

FactorizedPriorImpl::FactorizedPriorImpl(int64_t channels, std::vector<int64_t> filters, double init_scale)
    : channels_(channels) {
    std::vector<int64_t> dims{1};
    dims.insert(dims.end(), filters.begin(), filters.end());
    dims.push_back(1);
    const auto layers = dims.size() - 1;
    const double scale = std::pow(init_scale, 1.0 / static_cast<double>(layers));
    for (size_t i = 0; i < layers; ++i) {
        const double init = std::log(std::expm1(1.0 / scale / static_cast<double>(dims[i + 1])));
        matrices_.push_back(register_parameter("matrix" + std::to_string(i),
                                               torch::full({channels, dims[i + 1], dims[i]}, init)));
        biases_.push_back(register_parameter("bias" + std::to_string(i),
                                             torch::rand({channels, dims[i + 1], 1}) - 0.5));
        if (i + 1 < layers) {
            factors_.push_back(
                register_parameter("factor" + std::to_string(i), torch::zeros({channels, dims[i + 1], 1})));
        }
    }
}

torch::Tensor FactorizedPriorImpl::logits_cumulative(const torch::Tensor& x) const {
    auto logits = x;
    for (size_t i = 0; i < matrices_.size(); ++i) {
        auto m = torch::nn::functional::softplus(matrices_[i]).to(x.dtype());
        logits = torch::matmul(m, logits) + biases_[i].to(x.dtype());
        if (i < factors_.size()) {
            logits = logits + torch::tanh(factors_[i].to(x.dtype())) * torch::tanh(logits);
        }
    }
    return logits;
}

torch::Tensor FactorizedPriorImpl::likelihood(const torch::Tensor& values) const {
    const auto B = values.size(0), C = values.size(1), H = values.size(2), W = values.size(3);
    auto v = values.permute({1, 0, 2, 3}).reshape({C, 1, -1});
    auto lower = logits_cumulative(v - 0.5);
    auto upper = logits_cumulative(v + 0.5);
    // Work on the side of the median where the sigmoid difference is well conditioned.
    auto sign = -torch::sign(lower + upper).detach();
    auto lik = torch::abs(torch::sigmoid(sign * upper) - torch::sigmoid(sign * lower));
    lik = lik.reshape({C, B, H, W}).permute({1, 0, 2, 3});
    return torch::clamp_min(lik, kLikelihoodBound);
}

torch::Tensor FactorizedPriorImpl::cdf(int64_t channel, const torch::Tensor& points) const {
    torch::NoGradGuard no_grad;
    auto x = points.to(torch::kFloat64).reshape({1, 1, -1}).expand({channels_, 1, points.numel()}).contiguous();
    return torch::sigmoid(logits_cumulative(x))[channel].reshape({-1});
}

std::vector<CdfTable> FactorizedPriorImpl::make_tables(double tail_mass, int32_t radius) const {
    torch::NoGradGuard no_grad;
    const auto n = 2 * radius + 2;
    // Bin edges at -radius-0.5 ... radius+0.5.
    auto edges = torch::arange(n, torch::kFloat64) - (radius + 0.5);
    auto x = edges.reshape({1, 1, -1}).expand({channels_, 1, n}).contiguous();
    auto logits = logits_cumulative(x).reshape({channels_, n});
    auto below = torch::sigmoid(logits).contiguous();   // mass left of edge
    auto above = torch::sigmoid(-logits).contiguous();  // mass right of edge
    std::vector<CdfTable> tables;
    tables.reserve(static_cast<size_t>(channels_));
    for (int64_t c = 0; c < channels_; ++c) {
        const auto* lo_mass = below[c].data_ptr<double>();
        const auto* hi_mass = above[c].data_ptr<double>();
        // Symbol v has edges lo_mass[v + radius] and lo_mass[v + radius + 1].
        int32_t lo = -radius;
        while (lo < radius && lo_mass[lo + radius + 1] <= tail_mass) ++lo;
        int32_t hi = radius;
        while (hi > lo && hi_mass[hi + radius] <= tail_mass) --hi;
        std::vector<double> pmf;
        pmf.reserve(static_cast<size_t>(hi - lo + 1));
        for (int32_t v = lo; v <= hi; ++v) {
            const auto e = static_cast<size_t>(v + radius);
            double p;
            if (lo == hi) {
                p = 1.0;
            } else if (v == lo) {
                p = lo_mass[e + 1];
            } else if (v == hi) {
                p = hi_mass[e];
            } else {
                p = lo_mass[e + 1] - lo_mass[e];
            }
            pmf.push_back(std::max(p, 0.0));
        }
        tables.push_back(quantize_pmf(pmf, lo));
    }
    return tables;
}

std::vector<double> folded_gaussian_pmf(double mean, double scale, int32_t radius) {
    std::vector<double> pmf(static_cast<size_t>(2 * radius + 1));
    for (int32_t r = -radius; r <= radius; ++r) {
        double p;
        if (radius == 0) {
            p = 1.0;
        } else if (r == -radius) {
            p = phi((r + 0.5 - mean) / scale);
        } else if (r == radius) {
            p = phi(-(r - 0.5 - mean) / scale);
        } else {
            // Same tail-side trick as gaussian_likelihood.
            const double d = std::abs(r - mean);
            p = phi((0.5 - d) / scale) - phi((-0.5 - d) / scale);
        }
        pmf[static_cast<size_t>(r + radius)] = p;
    }
    return pmf;
}

GaussianConditional::GaussianConditional(const GaussianTableSpec& spec) : spec_(spec) {
    if (spec.scale_levels < 2 || spec.offset_levels < 1 || !(spec.scale_min > 0.0) ||
        !(spec.scale_max > spec.scale_min)) {
        throw ConfigError("invalid gaussian table spec");
    }
    tables_.reserve(static_cast<size_t>(spec.scale_levels * (spec.offset_levels + 1)));
    for (int l = 0; l < spec.scale_levels; ++l) {
        const double s = level_scale(l);
        const auto radius = std::max<int32_t>(1, static_cast<int32_t>(std::ceil(spec.tail_sigmas * s)));
        for (int o = 0; o <= spec.offset_levels; ++o) {
            const double m = static_cast<double>(o) / spec.offset_levels - 0.5;
            tables_.push_back(quantize_pmf(folded_gaussian_pmf(m, s, radius), -radius));
        }
    }
}

GaussianConditional::GaussianConditional(const GaussianTableSpec& spec, std::vector<CdfTable> tables)
    : spec_(spec), tables_(std::move(tables)) {
    if (tables_.size() != static_cast<size_t>(spec.scale_levels * (spec.offset_levels + 1))) {
        throw CheckpointError("gaussian table count does not match its spec");
    }
    for (const auto& t : tables_) {
        t.validate();
    }
}

double GaussianConditional::level_scale(int level) const {
    const double step = (std::log(spec_.scale_max) - std::log(spec_.scale_min)) / (spec_.scale_levels - 1);
    return std::exp(std::log(spec_.scale_min) + step * level);
}

int GaussianConditional::scale_level(double scale) const {
    const double step = (std::log(spec_.scale_max) - std::log(spec_.scale_min)) / (spec_.scale_levels - 1);
    const double pos = (std::log(std::max(scale, spec_.scale_min)) - std::log(spec_.scale_min)) / step;
    return std::clamp(static_cast<int>(std::lround(pos)), 0, spec_.scale_levels - 1);
}

GaussianSlot GaussianConditional::slot(double mean, double scale) const {
    GaussianSlot s;
    s.center = static_cast<int32_t>(std::floor(mean + 0.5));
    const double frac = mean - s.center;  // [-0.5, 0.5)
    const int offset =
        std::clamp(static_cast<int>(std::lround((frac + 0.5) * spec_.offset_levels)), 0, spec_.offset_levels);
    s.table = static_cast<uint32_t>(scale_level(scale) * (spec_.offset_levels + 1) + offset);
    return s;
}

double information_bits(const torch::Tensor& likelihoods) {
    auto p = likelihoods.detach().to(torch::kFloat64);
    if (p.numel() == 0) {
        return 0.0;
    }
    if (!torch::isfinite(p).all().item<bool>() || (p <= 0.0).any().item<bool>() || (p > 1.0).any().item<bool>()) {
        throw InternalError("likelihoods outside (0, 1]");
    }
    return -torch::log2(p).sum().item<double>();
}

RateEstimate estimate_rate(const torch::Tensor& y_likelihoods, const torch::Tensor& z_likelihoods) {
    return {information_bits(y_likelihoods), information_bits(z_likelihoods)};
}

}  // namespace ldic::entropy

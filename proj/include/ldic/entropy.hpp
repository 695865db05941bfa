#pragma once

#include "ldic/range_coder.hpp"

#include <torch/torch.h>

#include <optional>
#include <vector>

namespace ldic::entropy {

inline constexpr double kLikelihoodBound = 1e-9;

enum class QuantMode { Training, Inference };

// Round half away from zero.
torch::Tensor round_half_away(const torch::Tensor& v);

// Inference: round_half_away. Training: v + U[-0.5, 0.5) noise drawn from `gen`.
torch::Tensor quantize(const torch::Tensor& v, QuantMode mode, std::optional<at::Generator> gen = std::nullopt);

torch::Tensor standard_normal_cdf(const torch::Tensor& t);

// P(v) = Phi((v + 0.5 - mean) / scale) - Phi((v - 0.5 - mean) / scale),
// floored at kLikelihoodBound. Differentiable in all three arguments.
torch::Tensor gaussian_likelihood(const torch::Tensor& values, const torch::Tensor& mean,
                                  const torch::Tensor& scale);

// Per-channel learned univariate density (cumulative logits built from a
// small monotone network per channel). Used for the hyper latent.
class FactorizedPriorImpl : public torch::nn::Module {
public:
    explicit FactorizedPriorImpl(int64_t channels, std::vector<int64_t> filters = {3, 3, 3},
                                 double init_scale = 10.0);

    // x: (C, 1, N) -> cumulative logits (C, 1, N).
    torch::Tensor logits_cumulative(const torch::Tensor& x) const;
    // values: (B, C, H, W) -> per-element likelihoods.
    torch::Tensor likelihood(const torch::Tensor& values) const;
    // CDF of channel c at points (N,), as a (N,) double tensor.
    torch::Tensor cdf(int64_t channel, const torch::Tensor& points) const;

    // Integer tables, one per channel. The support of each table spans the
    // integers whose bins carry more than `tail_mass` of the learned density,
    // searched within [-radius, radius]; the outside mass is folded into the
    // two extreme bins.
    std::vector<CdfTable> make_tables(double tail_mass = 1e-6, int32_t radius = 256) const;

    int64_t channels() const { return channels_; }

private:
    int64_t channels_;
    std::vector<torch::Tensor> matrices_;
    std::vector<torch::Tensor> biases_;
    std::vector<torch::Tensor> factors_;
};
TORCH_MODULE(FactorizedPrior);

struct GaussianTableSpec {
    double scale_min = 0.11;
    double scale_max = 64.0;
    int scale_levels = 64;
    int offset_levels = 8;
    double tail_sigmas = 8.0;

    bool operator==(const GaussianTableSpec&) const = default;
};

// Where one y element is coded: table id and the integer center the residual
// is taken against.
struct GaussianSlot {
    uint32_t table = 0;
    int32_t center = 0;
};

// Discretized Gaussian conditional: tables indexed by (scale level, sub-integer
// mean offset). A symbol v is coded as the residual v - center with
// center = floor(mean + 0.5).
class GaussianConditional {
public:
    GaussianConditional() = default;
    explicit GaussianConditional(const GaussianTableSpec& spec);
    GaussianConditional(const GaussianTableSpec& spec, std::vector<CdfTable> tables);

    const GaussianTableSpec& spec() const { return spec_; }
    const std::vector<CdfTable>& tables() const { return tables_; }
    double level_scale(int level) const;
    int scale_level(double scale) const;
    GaussianSlot slot(double mean, double scale) const;
    // Largest representable |residual| for the table.
    int32_t max_residual(uint32_t table) const { return tables_[table].max_symbol(); }

private:
    GaussianTableSpec spec_;
    std::vector<CdfTable> tables_;
};

// pmf over [-radius, radius] for a Gaussian with the given mean and scale and
// tails folded into the edge bins.
std::vector<double> folded_gaussian_pmf(double mean, double scale, int32_t radius);

struct RateEstimate {
    double y_bits = 0.0;
    double z_bits = 0.0;

    double total_bits() const { return y_bits + z_bits; }
};

// -sum log2(p). Throws InternalError on probabilities outside (0, 1].
double information_bits(const torch::Tensor& likelihoods);
RateEstimate estimate_rate(const torch::Tensor& y_likelihoods, const torch::Tensor& z_likelihoods);

}  // namespace ldic::entropy

#pragma once

#include "ldic/config.hpp"
#include "ldic/entropy.hpp"
#include "ldic/image.hpp"
#include "ldic/swin.hpp"

#include <torch/torch.h>

#include <optional>
#include <vector>

namespace ldic::model {

// One channels-last token block (B, H_s, W_s, D_s) per prompted stage, in the
// order the stages run. An empty set means "no prompts".
struct PromptSet {
    std::vector<torch::Tensor> blocks;

    bool empty() const { return blocks.empty(); }
    size_t size() const { return blocks.size(); }
};

// Quantized latents as int32 tensors: y_hat (B, C_y, H/16, W/16) and
// z_hat (B, C_z, H/64, W/64).
struct LatentPack {
    torch::Tensor y_hat;
    torch::Tensor z_hat;
};

struct EntropyParams {
    torch::Tensor mean;   // zeros when the model is scale-only
    torch::Tensor scale;  // >= scale_floor
};

// Integer coding tables frozen from a trained model.
struct FrozenTables {
    std::vector<entropy::CdfTable> z_tables;  // one per hyper channel
    entropy::GaussianConditional y_model;
};

// g_a: four stride-2 convolutions, each followed by a stage of prompted Swin
// blocks, then a projection to C_y channels.
class AnalysisTransformImpl : public torch::nn::Module {
public:
    explicit AnalysisTransformImpl(const ModelConfig& cfg);
    torch::Tensor forward(const torch::Tensor& x, const PromptSet& prompts);

private:
    std::vector<torch::nn::Conv2d> down_;
    std::vector<SwinStage> stages_;
    torch::nn::Conv2d out_{nullptr};
};
TORCH_MODULE(AnalysisTransform);

// g_s: mirror of g_a with transposed convolutions. Returns the unclamped
// reconstruction; see ModelImpl::synthesis_transform for the clamped one.
class SynthesisTransformImpl : public torch::nn::Module {
public:
    explicit SynthesisTransformImpl(const ModelConfig& cfg);
    torch::Tensor forward(const torch::Tensor& y_hat, const PromptSet& prompts);

private:
    torch::nn::Conv2d in_{nullptr};
    std::vector<SwinStage> stages_;
    std::vector<torch::nn::ConvTranspose2d> up_;
};
TORCH_MODULE(SynthesisTransform);

class HyperAnalysisImpl : public torch::nn::Module {
public:
    explicit HyperAnalysisImpl(const ModelConfig& cfg);
    torch::Tensor forward(const torch::Tensor& y);

private:
    torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(HyperAnalysis);

class HyperSynthesisImpl : public torch::nn::Module {
public:
    explicit HyperSynthesisImpl(const ModelConfig& cfg);
    EntropyParams forward(const torch::Tensor& z_hat);

private:
    torch::nn::Sequential net_{nullptr};
    int64_t latent_channels_;
    bool mean_scale_;
    double scale_floor_;
};
TORCH_MODULE(HyperSynthesis);

// l_a: stride-2 convolutions over the depth map, one feature map per encoder stage.
class DepthEncoderPromptNetImpl : public torch::nn::Module {
public:
    explicit DepthEncoderPromptNetImpl(const ModelConfig& cfg);
    std::vector<torch::Tensor> forward(const torch::Tensor& depth);

private:
    std::vector<torch::nn::Conv2d> convs_;
};
TORCH_MODULE(DepthEncoderPromptNet);

// p_a: convolutions matching g_a's downsampling over [x, M_lambda]. Depth
// features, when given, are added to each stage's feature map; the sum is the
// stage's prompt block and the input of the next stage.
class EncoderPromptNetImpl : public torch::nn::Module {
public:
    explicit EncoderPromptNetImpl(const ModelConfig& cfg);
    std::vector<torch::Tensor> forward(const torch::Tensor& x, const torch::Tensor& lambda_map,
                                       const std::vector<torch::Tensor>& depth_features);

private:
    std::vector<torch::nn::Conv2d> convs_;
};
TORCH_MODULE(EncoderPromptNet);

// l_s: the full-resolution depth map is brought down to the latent grid with
// strided convolutions and brought back up with transposed convolutions that
// run alongside p_s. Same-resolution features of the way down are added on the
// way up.
class DepthDecoderPromptNetImpl : public torch::nn::Module {
public:
    explicit DepthDecoderPromptNetImpl(const ModelConfig& cfg);
    std::vector<torch::Tensor> forward(const torch::Tensor& depth);

private:
    std::vector<torch::nn::Conv2d> down_;
    torch::nn::Conv2d head_{nullptr};
    std::vector<torch::nn::ConvTranspose2d> up_;
};
TORCH_MODULE(DepthDecoderPromptNet);

// p_s: over [y_hat, downscaled M_lambda], a convolution at the latent grid
// followed by transposed convolutions matching g_s's upsampling.
class DecoderPromptNetImpl : public torch::nn::Module {
public:
    explicit DecoderPromptNetImpl(const ModelConfig& cfg);
    std::vector<torch::Tensor> forward(const torch::Tensor& y_hat, const torch::Tensor& lambda_map_down,
                                       const std::vector<torch::Tensor>& depth_features);

private:
    torch::nn::Conv2d head_{nullptr};
    std::vector<torch::nn::ConvTranspose2d> up_;
};
TORCH_MODULE(DecoderPromptNet);

// Replaces the quantizer during training. With fixed offsets set, they are
// added instead of random noise (used by gradient checks).
struct NoiseSource {
    std::optional<at::Generator> generator;
    torch::Tensor fixed_y;
    torch::Tensor fixed_z;
};

struct TrainOutput {
    torch::Tensor x_hat;  // unclamped
    torch::Tensor y_likelihoods;
    torch::Tensor z_likelihoods;
};

// The complete network. Batched tensors are channels-first:
// x (B, 3, H, W), lambda maps (B, 1, ., .), depth (B, 1, H, W).
class ModelImpl : public torch::nn::Module {
public:
    explicit ModelImpl(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }

    // Undefined `depth` on a depth-guided model is replaced by zeros; the
    // baseline model ignores depth.
    PromptSet encoder_prompts(const torch::Tensor& x, const torch::Tensor& lambda_map,
                              const torch::Tensor& depth);
    PromptSet decoder_prompts(const torch::Tensor& y_hat, const torch::Tensor& lambda_map_down,
                              const torch::Tensor& depth);

    torch::Tensor analysis_transform(const torch::Tensor& x, const PromptSet& prompts);
    torch::Tensor synthesis_raw(const torch::Tensor& y_hat, const PromptSet& prompts);
    // Clamped to [0, 1].
    torch::Tensor synthesis_transform(const torch::Tensor& y_hat, const PromptSet& prompts);
    torch::Tensor hyper_analysis(const torch::Tensor& y);
    EntropyParams hyper_synthesis(const torch::Tensor& z_hat);

    // Noise-proxy forward pass; m_lambda is (B,).
    TrainOutput forward_train(const torch::Tensor& x, const torch::Tensor& m_lambda, const torch::Tensor& depth,
                              const NoiseSource& noise);

    entropy::FactorizedPrior prior{nullptr};

    const std::optional<FrozenTables>& tables() const { return tables_; }
    // Recomputes the hyper-latent tables from the current prior weights.
    void freeze_entropy_tables();
    void set_tables(FrozenTables tables) { tables_ = std::move(tables); }

private:
    torch::Tensor depth_or_zeros(const torch::Tensor& depth, const torch::Tensor& like) const;

    ModelConfig cfg_;
    AnalysisTransform g_a_{nullptr};
    SynthesisTransform g_s_{nullptr};
    HyperAnalysis h_a_{nullptr};
    HyperSynthesis h_s_{nullptr};
    EncoderPromptNet p_a_{nullptr};
    DecoderPromptNet p_s_{nullptr};
    DepthEncoderPromptNet l_a_{nullptr};
    DepthDecoderPromptNet l_s_{nullptr};
    std::optional<FrozenTables> tables_;
};
TORCH_MODULE(Model);

entropy::GaussianTableSpec gaussian_spec_for(const ModelConfig& cfg);

inline constexpr int64_t kHyperStride = 4;

// Replicate-pads a (B, C, h, w) latent on the bottom and right up to the hyper
// stride. Entropy parameters come back on the padded grid; crop them to (h, w).
torch::Tensor pad_for_hyper(const torch::Tensor& y);

// Single-image entry points. Images must already be padded to the latent stride.
PromptSet build_encoder_prompts(Model& model, const RgbImage& x, const ControlInput& control,
                                const std::optional<AlignedDepth>& depth);
PromptSet build_decoder_prompts(Model& model, const torch::Tensor& y_hat, const ControlInput& control,
                                const std::optional<AlignedDepth>& depth);
torch::Tensor analysis_transform(Model& model, const RgbImage& x, const PromptSet& prompts);
RgbImage synthesis_transform(Model& model, const torch::Tensor& y_hat, const PromptSet& prompts);

}  // namespace ldic::model

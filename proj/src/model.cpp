#include "ldic/model.hpp"

#include "ldic/errors.hpp"

#include <string>

namespace ldic::model {

namespace F = torch::nn::functional;

namespace {

torch::nn::Conv2d conv(int64_t in, int64_t out, int64_t kernel, int64_t stride) {
    return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, kernel).stride(stride).padding(kernel / 2));
}

torch::nn::ConvTranspose2d deconv(int64_t in, int64_t out) {
    return torch::nn::ConvTranspose2d(
        torch::nn::ConvTranspose2dOptions(in, out, 3).stride(2).padding(1).output_padding(1));
}

torch::Tensor act(const torch::Tensor& t) {
    return F::gelu(t);
}

const torch::Tensor& block_or_empty(const PromptSet& prompts, size_t stage) {
    static const torch::Tensor empty;
    return prompts.empty() ? empty : prompts.blocks[stage];
}

void check_prompt_count(const PromptSet& prompts, int stages, const char* where) {
    if (!prompts.empty() && prompts.size() != static_cast<size_t>(stages)) {
        throw ConfigError(std::string(where) + ": expected " + std::to_string(stages) + " prompt blocks, got " +
                          std::to_string(prompts.size()));
    }
}

torch::Tensor channels_last(const torch::Tensor& t) {
    return t.permute({0, 2, 3, 1});
}

}  // namespace

AnalysisTransformImpl::AnalysisTransformImpl(const ModelConfig& cfg) {
    int64_t in = cfg.image_channels;
    for (int s = 0; s < cfg.stage_count; ++s) {
        const int64_t dim = cfg.stage_dims[s];
        down_.push_back(register_module("down" + std::to_string(s), conv(in, dim, 3, 2)));
        stages_.push_back(register_module(
            "stage" + std::to_string(s),
            SwinStage(dim, cfg.heads_per_stage[s], cfg.window_size, cfg.blocks_per_stage, cfg.mlp_ratio)));
        in = dim;
    }
    out_ = register_module("out", conv(in, cfg.latent_channels, 3, 1));
}

torch::Tensor AnalysisTransformImpl::forward(const torch::Tensor& x, const PromptSet& prompts) {
    check_prompt_count(prompts, static_cast<int>(stages_.size()), "analysis transform");
    if (x.dim() != 4 || x.size(2) % 16 != 0 || x.size(3) % 16 != 0) {
        throw ConfigError("analysis transform needs (B, 3, H, W) with H, W divisible by 16");
    }
    auto h = x;
    for (size_t s = 0; s < stages_.size(); ++s) {
        h = down_[s]->forward(h);
        h = stages_[s]->forward(h, block_or_empty(prompts, s));
    }
    return out_->forward(h);
}

SynthesisTransformImpl::SynthesisTransformImpl(const ModelConfig& cfg) {
    const auto dims = cfg.decoder_dims();
    const auto heads = cfg.decoder_heads();
    in_ = register_module("in", conv(cfg.latent_channels, dims[0], 3, 1));
    for (int s = 0; s < cfg.stage_count; ++s) {
        stages_.push_back(register_module(
            "stage" + std::to_string(s),
            SwinStage(dims[s], heads[s], cfg.window_size, cfg.blocks_per_stage, cfg.mlp_ratio)));
        const int64_t next = s + 1 < cfg.stage_count ? dims[s + 1] : cfg.image_channels;
        up_.push_back(register_module("up" + std::to_string(s), deconv(dims[s], next)));
    }
}

torch::Tensor SynthesisTransformImpl::forward(const torch::Tensor& y_hat, const PromptSet& prompts) {
    check_prompt_count(prompts, static_cast<int>(stages_.size()), "synthesis transform");
    if (y_hat.dim() != 4 || y_hat.size(1) != in_->options.in_channels()) {
        throw ConfigError("synthesis transform expects " + std::to_string(in_->options.in_channels()) +
                          " latent channels");
    }
    auto h = in_->forward(y_hat);
    for (size_t s = 0; s < stages_.size(); ++s) {
        h = stages_[s]->forward(h, block_or_empty(prompts, s));
        h = up_[s]->forward(h);
    }
    return h;
}

HyperAnalysisImpl::HyperAnalysisImpl(const ModelConfig& cfg) {
    const int64_t c = cfg.latent_channels;
    net_ = register_module("net", torch::nn::Sequential(conv(c, c, 3, 1), torch::nn::GELU(), conv(c, c, 3, 2),
                                                        torch::nn::GELU(), conv(c, cfg.hyper_channels, 3, 2)));
}

torch::Tensor HyperAnalysisImpl::forward(const torch::Tensor& y) {
    return net_->forward(y);
}

HyperSynthesisImpl::HyperSynthesisImpl(const ModelConfig& cfg)
    : latent_channels_(cfg.latent_channels), mean_scale_(cfg.mean_scale), scale_floor_(cfg.scale_floor) {
    const int64_t c = cfg.latent_channels;
    const int64_t mid = c * 3 / 2;
    const int64_t out = mean_scale_ ? 2 * c : c;
    net_ = register_module("net",
                           torch::nn::Sequential(deconv(cfg.hyper_channels, c), torch::nn::GELU(), deconv(c, mid),
                                                 torch::nn::GELU(), conv(mid, out, 3, 1)));
}

EntropyParams HyperSynthesisImpl::forward(const torch::Tensor& z_hat) {
    auto h = net_->forward(z_hat);
    EntropyParams p;
    torch::Tensor raw_scale;
    if (mean_scale_) {
        auto parts = h.chunk(2, 1);
        p.mean = parts[0];
        raw_scale = parts[1];
    } else {
        p.mean = torch::zeros_like(h);
        raw_scale = h;
    }
    p.scale = F::softplus(raw_scale) + scale_floor_;
    return p;
}

DepthEncoderPromptNetImpl::DepthEncoderPromptNetImpl(const ModelConfig& cfg) {
    int64_t in = 1;
    for (int s = 0; s < cfg.stage_count; ++s) {
        convs_.push_back(register_module("conv" + std::to_string(s), conv(in, cfg.prompt_dim_per_stage[s], 3, 2)));
        in = cfg.prompt_dim_per_stage[s];
    }
}

std::vector<torch::Tensor> DepthEncoderPromptNetImpl::forward(const torch::Tensor& depth) {
    std::vector<torch::Tensor> out;
    auto h = depth;
    for (size_t s = 0; s < convs_.size(); ++s) {
        h = convs_[s]->forward(s == 0 ? h : act(h));
        out.push_back(h);
    }
    return out;
}

EncoderPromptNetImpl::EncoderPromptNetImpl(const ModelConfig& cfg) {
    int64_t in = cfg.image_channels + 1;
    for (int s = 0; s < cfg.stage_count; ++s) {
        convs_.push_back(register_module("conv" + std::to_string(s), conv(in, cfg.prompt_dim_per_stage[s], 3, 2)));
        in = cfg.prompt_dim_per_stage[s];
    }
}

std::vector<torch::Tensor> EncoderPromptNetImpl::forward(const torch::Tensor& x, const torch::Tensor& lambda_map,
                                                         const std::vector<torch::Tensor>& depth_features) {
    std::vector<torch::Tensor> out;
    auto h = torch::cat({x, lambda_map}, 1);
    for (size_t s = 0; s < convs_.size(); ++s) {
        h = convs_[s]->forward(s == 0 ? h : act(h));
        if (!depth_features.empty()) {
            h = h + depth_features[s];
        }
        out.push_back(h);
    }
    return out;
}

DepthDecoderPromptNetImpl::DepthDecoderPromptNetImpl(const ModelConfig& cfg) {
    int64_t in = 1;
    for (int s = 0; s < cfg.stage_count; ++s) {
        down_.push_back(register_module("down" + std::to_string(s), conv(in, cfg.stage_dims[s], 3, 2)));
        in = cfg.stage_dims[s];
    }
    const auto dims = cfg.decoder_dims();
    head_ = register_module("head", conv(in, dims[0], 3, 1));
    for (int s = 1; s < cfg.stage_count; ++s) {
        up_.push_back(register_module("up" + std::to_string(s), deconv(dims[s - 1], dims[s])));
    }
}

std::vector<torch::Tensor> DepthDecoderPromptNetImpl::forward(const torch::Tensor& depth) {
    std::vector<torch::Tensor> skips;
    auto h = depth;
    for (size_t s = 0; s < down_.size(); ++s) {
        h = down_[s]->forward(s == 0 ? h : act(h));
        skips.push_back(h);
    }
    std::vector<torch::Tensor> out;
    h = head_->forward(act(h));
    out.push_back(h);
    for (size_t s = 0; s < up_.size(); ++s) {
        // up_[s] lands on the resolution of down stage (count - 2 - s).
        h = up_[s]->forward(act(h)) + skips[skips.size() - 2 - s];
        out.push_back(h);
    }
    return out;
}

DecoderPromptNetImpl::DecoderPromptNetImpl(const ModelConfig& cfg) {
    const auto dims = cfg.decoder_dims();
    head_ = register_module("head", conv(cfg.latent_channels + 1, dims[0], 3, 1));
    for (int s = 1; s < cfg.stage_count; ++s) {
        up_.push_back(register_module("up" + std::to_string(s), deconv(dims[s - 1], dims[s])));
    }
}

std::vector<torch::Tensor> DecoderPromptNetImpl::forward(const torch::Tensor& y_hat,
                                                         const torch::Tensor& lambda_map_down,
                                                         const std::vector<torch::Tensor>& depth_features) {
    std::vector<torch::Tensor> out;
    auto h = head_->forward(torch::cat({y_hat, lambda_map_down}, 1));
    if (!depth_features.empty()) {
        h = h + depth_features[0];
    }
    out.push_back(h);
    for (size_t s = 0; s < up_.size(); ++s) {
        h = up_[s]->forward(act(h));
        if (!depth_features.empty()) {
            h = h + depth_features[s + 1];
        }
        out.push_back(h);
    }
    return out;
}

ModelImpl::ModelImpl(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    g_a_ = register_module("g_a", AnalysisTransform(cfg_));
    g_s_ = register_module("g_s", SynthesisTransform(cfg_));
    h_a_ = register_module("h_a", HyperAnalysis(cfg_));
    h_s_ = register_module("h_s", HyperSynthesis(cfg_));
    p_a_ = register_module("p_a", EncoderPromptNet(cfg_));
    p_s_ = register_module("p_s", DecoderPromptNet(cfg_));
    if (cfg_.depth_guided) {
        l_a_ = register_module("l_a", DepthEncoderPromptNet(cfg_));
        l_s_ = register_module("l_s", DepthDecoderPromptNet(cfg_));
    }
    prior = register_module("prior", entropy::FactorizedPrior(cfg_.hyper_channels));
}

torch::Tensor ModelImpl::depth_or_zeros(const torch::Tensor& depth, const torch::Tensor& like) const {
    const auto B = like.size(0), H = like.size(2), W = like.size(3);
    if (!depth.defined()) {
        return torch::zeros({B, 1, H, W}, like.options());
    }
    if (depth.dim() != 4 || depth.size(0) != B || depth.size(1) != 1 || depth.size(2) != H || depth.size(3) != W) {
        throw AlignmentError("depth map does not match the image grid");
    }
    return depth;
}

PromptSet ModelImpl::encoder_prompts(const torch::Tensor& x, const torch::Tensor& lambda_map,
                                     const torch::Tensor& depth) {
    std::vector<torch::Tensor> depth_features;
    if (cfg_.depth_guided) {
        depth_features = l_a_->forward(depth_or_zeros(depth, x));
    } else if (depth.defined() && (depth.size(2) != x.size(2) || depth.size(3) != x.size(3))) {
        throw AlignmentError("depth map does not match the image grid");
    }
    PromptSet set;
    for (auto& f : p_a_->forward(x, lambda_map, depth_features)) {
        set.blocks.push_back(channels_last(f));
    }
    return set;
}

PromptSet ModelImpl::decoder_prompts(const torch::Tensor& y_hat, const torch::Tensor& lambda_map_down,
                                     const torch::Tensor& depth) {
    std::vector<torch::Tensor> depth_features;
    if (cfg_.depth_guided) {
        const auto B = y_hat.size(0), H = y_hat.size(2) * 16, W = y_hat.size(3) * 16;
        auto d = depth.defined() ? depth : torch::zeros({B, 1, H, W}, y_hat.options());
        if (d.dim() != 4 || d.size(0) != B || d.size(2) != H || d.size(3) != W) {
            throw AlignmentError("depth map does not match the decoded image grid");
        }
        depth_features = l_s_->forward(d);
    }
    PromptSet set;
    for (auto& f : p_s_->forward(y_hat, lambda_map_down, depth_features)) {
        set.blocks.push_back(channels_last(f));
    }
    return set;
}

torch::Tensor ModelImpl::analysis_transform(const torch::Tensor& x, const PromptSet& prompts) {
    return g_a_->forward(x, prompts);
}

torch::Tensor ModelImpl::synthesis_raw(const torch::Tensor& y_hat, const PromptSet& prompts) {
    return g_s_->forward(y_hat, prompts);
}

torch::Tensor ModelImpl::synthesis_transform(const torch::Tensor& y_hat, const PromptSet& prompts) {
    return synthesis_raw(y_hat, prompts).clamp(0.0, 1.0);
}

torch::Tensor ModelImpl::hyper_analysis(const torch::Tensor& y) {
    if (y.size(2) % 4 != 0 || y.size(3) % 4 != 0) {
        throw ConfigError("hyper analysis needs a latent grid divisible by 4");
    }
    return h_a_->forward(y);
}

EntropyParams ModelImpl::hyper_synthesis(const torch::Tensor& z_hat) {
    if (z_hat.size(1) != cfg_.hyper_channels) {
        throw ConfigError("hyper synthesis expects " + std::to_string(cfg_.hyper_channels) + " channels");
    }
    return h_s_->forward(z_hat);
}

TrainOutput ModelImpl::forward_train(const torch::Tensor& x, const torch::Tensor& m_lambda,
                                     const torch::Tensor& depth, const NoiseSource& noise) {
    const auto B = x.size(0), H = x.size(2), W = x.size(3);
    auto m = m_lambda.to(x.dtype()).view({B, 1, 1, 1});
    auto lambda_map = m.expand({B, 1, H, W});
    auto lambda_map_down = m.expand({B, 1, H / 16, W / 16});
    auto perturb = [&](const torch::Tensor& v, const torch::Tensor& fixed) {
        if (fixed.defined()) {
            return v + fixed;
        }
        return entropy::quantize(v, entropy::QuantMode::Training, noise.generator);
    };

    auto y = analysis_transform(x, encoder_prompts(x, lambda_map, depth));
    auto z = hyper_analysis(pad_for_hyper(y));
    auto z_tilde = perturb(z, noise.fixed_z);
    auto params = hyper_synthesis(z_tilde);
    params.mean = params.mean.narrow(2, 0, y.size(2)).narrow(3, 0, y.size(3));
    params.scale = params.scale.narrow(2, 0, y.size(2)).narrow(3, 0, y.size(3));
    auto y_tilde = perturb(y, noise.fixed_y);

    TrainOutput out;
    out.z_likelihoods = prior->likelihood(z_tilde);
    out.y_likelihoods = entropy::gaussian_likelihood(y_tilde, params.mean, params.scale);
    out.x_hat = synthesis_raw(y_tilde, decoder_prompts(y_tilde, lambda_map_down, depth));
    return out;
}

torch::Tensor pad_for_hyper(const torch::Tensor& y) {
    const int64_t ph = (kHyperStride - y.size(2) % kHyperStride) % kHyperStride;
    const int64_t pw = (kHyperStride - y.size(3) % kHyperStride) % kHyperStride;
    if (ph == 0 && pw == 0) {
        return y;
    }
    return F::pad(y, F::PadFuncOptions({0, pw, 0, ph}).mode(torch::kReplicate));
}

entropy::GaussianTableSpec gaussian_spec_for(const ModelConfig& cfg) {
    entropy::GaussianTableSpec spec;
    spec.scale_min = cfg.scale_floor;
    return spec;
}

void ModelImpl::freeze_entropy_tables() {
    FrozenTables t;
    t.z_tables = prior->make_tables();
    const auto spec = gaussian_spec_for(cfg_);
    if (tables_ && tables_->y_model.spec() == spec) {
        t.y_model = tables_->y_model;
    } else {
        t.y_model = entropy::GaussianConditional(spec);
    }
    tables_ = std::move(t);
}

PromptSet build_encoder_prompts(Model& model, const RgbImage& x, const ControlInput& control,
                                const std::optional<AlignedDepth>& depth) {
    if (depth && (depth->height() != x.height() || depth->width() != x.width())) {
        throw AlignmentError("depth " + std::to_string(depth->width()) + "x" + std::to_string(depth->height()) +
                             " does not match image " + std::to_string(x.width()) + "x" +
                             std::to_string(x.height()));
    }
    return model->encoder_prompts(x.values.unsqueeze(0), control.lambda_map.unsqueeze(0),
                                  depth ? depth->values.unsqueeze(0) : torch::Tensor());
}

PromptSet build_decoder_prompts(Model& model, const torch::Tensor& y_hat, const ControlInput& control,
                                const std::optional<AlignedDepth>& depth) {
    auto y = y_hat.dim() == 3 ? y_hat.unsqueeze(0) : y_hat;
    if (depth && (depth->height() != y.size(2) * 16 || depth->width() != y.size(3) * 16)) {
        throw AlignmentError("depth map does not match the decoded image grid");
    }
    return model->decoder_prompts(y.to(torch::kFloat32), control.lambda_map_down.unsqueeze(0),
                                  depth ? depth->values.unsqueeze(0) : torch::Tensor());
}

torch::Tensor analysis_transform(Model& model, const RgbImage& x, const PromptSet& prompts) {
    return model->analysis_transform(x.values.unsqueeze(0), prompts).squeeze(0);
}

RgbImage synthesis_transform(Model& model, const torch::Tensor& y_hat, const PromptSet& prompts) {
    auto y = y_hat.dim() == 3 ? y_hat.unsqueeze(0) : y_hat;
    return {model->synthesis_transform(y.to(torch::kFloat32), prompts).squeeze(0)};
}

}  // namespace ldic::model

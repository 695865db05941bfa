#include "ldic/config.hpp"

#include "ldic/errors.hpp"

#include <string>

namespace ldic {

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
    if (image_channels != 3) fail("image_channels must be 3");
    if (latent_channels <= 0 || hyper_channels <= 0) fail("channel counts must be positive");
    if (stage_count != 4) fail("stage_count must be 4 (stride-2 stages multiplying to 16)");
    if (window_size <= 0 || blocks_per_stage <= 0) fail("window_size and blocks_per_stage must be positive");
    const auto n = static_cast<size_t>(stage_count);
    if (heads_per_stage.size() != n || stage_dims.size() != n || prompt_dim_per_stage.size() != n) {
        fail("per-stage lists must have stage_count entries");
    }
    for (size_t s = 0; s < n; ++s) {
        if (stage_dims[s] <= 0 || heads_per_stage[s] <= 0) fail("stage dims and heads must be positive");
        if (stage_dims[s] % heads_per_stage[s] != 0) {
            fail("stage " + std::to_string(s) + " width not divisible by its head count");
        }
        if (prompt_dim_per_stage[s] != stage_dims[s]) {
            fail("prompt_dim of stage " + std::to_string(s) + " does not match its token width");
        }
    }
    if (!(lambda_min > 0.0) || !(lambda_max > lambda_min)) fail("need 0 < lambda_min < lambda_max");
    if (!(scale_floor > 0.0)) fail("scale_floor must be positive");
    if (!(mlp_ratio > 0.0)) fail("mlp_ratio must be positive");
}

ModelConfig ModelConfig::toy() {
    return ModelConfig{};
}

ModelConfig ModelConfig::full() {
    ModelConfig c;
    c.latent_channels = 192;
    c.hyper_channels = 192;
    c.window_size = 8;
    c.blocks_per_stage = 2;
    c.heads_per_stage = {4, 4, 8, 8};
    c.stage_dims = {128, 128, 192, 192};
    c.prompt_dim_per_stage = c.stage_dims;
    c.mlp_ratio = 2.0;
    return c;
}

ModelConfig ModelConfig::tiny() {
    ModelConfig c;
    c.latent_channels = 4;
    c.hyper_channels = 2;
    c.window_size = 2;
    c.blocks_per_stage = 2;
    c.heads_per_stage = {1, 1, 1, 1};
    c.stage_dims = {4, 4, 4, 4};
    c.prompt_dim_per_stage = c.stage_dims;
    c.mlp_ratio = 1.0;
    return c;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{
        {"image_channels", c.image_channels},
        {"latent_channels", c.latent_channels},
        {"hyper_channels", c.hyper_channels},
        {"stage_count", c.stage_count},
        {"window_size", c.window_size},
        {"blocks_per_stage", c.blocks_per_stage},
        {"heads_per_stage", c.heads_per_stage},
        {"stage_dims", c.stage_dims},
        {"prompt_dim_per_stage", c.prompt_dim_per_stage},
        {"mlp_ratio", c.mlp_ratio},
        {"lambda_min", c.lambda_min},
        {"lambda_max", c.lambda_max},
        {"depth_guided", c.depth_guided},
        {"mean_scale", c.mean_scale},
        {"scale_floor", c.scale_floor},
    };
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.image_channels = j.value("image_channels", d.image_channels);
    c.latent_channels = j.value("latent_channels", d.latent_channels);
    c.hyper_channels = j.value("hyper_channels", d.hyper_channels);
    c.stage_count = j.value("stage_count", d.stage_count);
    c.window_size = j.value("window_size", d.window_size);
    c.blocks_per_stage = j.value("blocks_per_stage", d.blocks_per_stage);
    c.heads_per_stage = j.value("heads_per_stage", d.heads_per_stage);
    c.stage_dims = j.value("stage_dims", d.stage_dims);
    c.prompt_dim_per_stage = j.value("prompt_dim_per_stage", c.stage_dims);
    c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
    c.lambda_min = j.value("lambda_min", d.lambda_min);
    c.lambda_max = j.value("lambda_max", d.lambda_max);
    c.depth_guided = j.value("depth_guided", d.depth_guided);
    c.mean_scale = j.value("mean_scale", d.mean_scale);
    c.scale_floor = j.value("scale_floor", d.scale_floor);
}

}  // namespace ldic

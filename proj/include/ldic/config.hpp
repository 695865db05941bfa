#pragma once

#include <json.hpp>

#include <string>
#include <vector>

namespace ldic {

struct ModelConfig {
    int image_channels = 3;
    int latent_channels = 32;  // C_y
    int hyper_channels = 16;   // C_z
    int stage_count = 4;       // stride-2 stages in the analysis transform
    int window_size = 4;
    int blocks_per_stage = 2;  // alternating regular / shifted windows
    std::vector<int> heads_per_stage{2, 2, 4, 4};
    // Encoder token width per stage; the decoder mirrors it in reverse.
    std::vector<int> stage_dims{32, 48, 64, 64};
    std::vector<int> prompt_dim_per_stage{32, 48, 64, 64};
    double mlp_ratio = 2.0;
    double lambda_min = 0.003;
    double lambda_max = 0.2;
    bool depth_guided = true;
    bool mean_scale = true;  // false: zero-mean Gaussian, scale only
    double scale_floor = 0.11;

    // Throws ConfigError.
    void validate() const;

    std::vector<int> decoder_dims() const { return {stage_dims.rbegin(), stage_dims.rend()}; }
    std::vector<int> decoder_heads() const { return {heads_per_stage.rbegin(), heads_per_stage.rend()}; }

    // C_y=32, C_z=16, 2 blocks per stage, window 4.
    static ModelConfig toy();
    // C_y=C_z=192, window 8.
    static ModelConfig full();
    // C_y=4; small enough for finite-difference checks.
    static ModelConfig tiny();

    bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace ldic

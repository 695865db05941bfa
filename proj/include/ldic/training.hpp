#pragma once

#include "ldic/config.hpp"
#include "ldic/data.hpp"
#include "ldic/entropy.hpp"
#include "ldic/model.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace ldic::train {

struct TrainConfig {
    int64_t steps = 1500;
    int64_t batch_size = 8;
    int64_t crop_size = 64;
    // Must agree with the model config.
    double lambda_min = 0.003;
    double lambda_max = 0.2;
    std::string preset = "toy";  // toy, full or tiny
    double learning_rate = 1e-3;
    // Learning rate is multiplied by lr_decay at each listed fraction of `steps`.
    std::vector<double> lr_milestones{0.75, 0.9};
    double lr_decay = 0.3;
    double grad_clip = 1.0;
    // Multiplies lambda * MSE, MSE measured on [0, 1] pixels. Chosen so the
    // lambda range spans the rates a toy model can actually reach.
    double distortion_scale = 8000.0;
    // Fraction of batch elements whose depth is replaced by zeros, so a guided
    // model also learns to code without depth (the depth map itself is coded
    // that way).
    double depth_dropout = 0.25;
    // Divide each element's RD cost by its own detached value, so elements
    // drawn at large lambda do not swamp the gradient of small-lambda ones.
    // Each element's stationary point is unchanged.
    bool balance_lambdas = true;
    // Extra loss term on native depth maps coded the way compress_depth_map
    // codes them (grey, m_lambda = 1, zero depth), so the same weights can
    // carry the depth side channel.
    double self_compression_weight = 0.25;
    int64_t self_compression_batch = 4;
    uint64_t seed = 1;
    int64_t checkpoint_every = 500;
    int64_t log_every = 10;
    bool depth_guided = true;
    // Training pairs come from data_root/<split> when set, otherwise from
    // synth_count synthetic pairs.
    std::string data_root;
    std::string split = "train";
    int synth_count = 256;
    int64_t synth_size = 128;
    double informativeness = 0.6;
    uint64_t synth_seed = 1000;

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
TrainConfig load_train_config(const std::filesystem::path& path);

// ModelConfig for cfg.preset with cfg's lambda bounds and depth flag.
ModelConfig model_config_for(const TrainConfig& cfg);

// lambda = lambda_max^m * lambda_min^(1 - m). Throws UsageError for m outside [0, 1].
double lambda_from_control(double m_lambda, double lambda_min, double lambda_max);

// lambda * MSE + bits / pixels, with MSE averaged over every sample of x and
// pixels = H * W.
double rd_loss(const RgbImage& x, const RgbImage& x_hat, const entropy::RateEstimate& rate, double lambda);

// Batched, differentiable form: mean over the batch of
// lambda_i * MSE_i + bits_i / (H * W). bits and lambda are (B,).
torch::Tensor rd_loss(const torch::Tensor& x, const torch::Tensor& x_hat, const torch::Tensor& bits,
                      const torch::Tensor& lambda);

// -sum log2 p per batch element.
torch::Tensor bits_per_element(const torch::Tensor& likelihoods);

struct Batch {
    torch::Tensor images;        // (B, 3, S, S)
    torch::Tensor depth;         // (B, 1, S, S)
    torch::Tensor depth_images;  // (Bd, 3, s, s) grey native depth crops; may be undefined
};

Batch sample_batch(const std::vector<data::RgbdPair>& pool, int64_t batch_size, int64_t crop_size,
                   std::mt19937_64& rng);

// Side of the native depth crops used for the self-compression term: a quarter
// of the image crop, rounded down to the latent stride, at least one stride.
int64_t depth_crop_size(int64_t crop_size);

// Random native-resolution depth crops, normalized and replicated to 3
// channels. Pairs whose native map is smaller than `size` are skipped; returns
// an undefined tensor when none qualifies.
torch::Tensor sample_depth_images(const std::vector<data::RgbdPair>& pool, int64_t count, int64_t size,
                                  std::mt19937_64& rng);

struct StepResult {
    int64_t step = 0;
    double loss = 0.0;
    double mse = 0.0;
    double bpp = 0.0;
    double m_lambda_mean = 0.0;
    double learning_rate = 0.0;
    bool skipped = false;  // non-finite loss or gradient; weights untouched
};

class Trainer {
public:
    Trainer(model::Model model, TrainConfig config);

    // One optimization step on `batch` with m_lambda ~ U[0, 1] per element.
    StepResult step(const Batch& batch);

    // m_lambda ~ U[0, 1), one per batch element, from the trainer's generator.
    torch::Tensor draw_m_lambda(int64_t batch);

    model::Model& model() { return model_; }
    int64_t steps_done() const { return step_; }
    double current_learning_rate() const;

private:
    model::Model model_;
    TrainConfig cfg_;
    torch::optim::Adam optimizer_;
    at::Generator gen_;
    int64_t step_ = 0;
};

std::vector<data::RgbdPair> training_pool(const TrainConfig& cfg);

using StepCallback = std::function<void(const StepResult&)>;

// Full run. Writes <out_dir>/<tag>_step<N>.ckpt every checkpoint_every steps,
// <out_dir>/<tag>.ckpt at the end and a JSON-lines log <out_dir>/<tag>.log.jsonl.
// The baseline run is the same with depth_guided = false.
model::Model train(const TrainConfig& cfg, const ModelConfig& model_cfg, const std::filesystem::path& out_dir,
                   const std::string& tag, const StepCallback& on_step = {});

}  // namespace ldic::train

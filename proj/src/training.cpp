#include "ldic/training.hpp"

#include "ldic/checkpoint.hpp"
#include "ldic/errors.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace ldic::train {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("train config: " + msg); };
    if (steps < 0) fail("steps must be >= 0");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (crop_size < 64 || crop_size % 64 != 0) fail("crop_size must be a positive multiple of 64");
    if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
    if (!(lambda_min > 0.0) || !(lambda_max > lambda_min)) fail("need 0 < lambda_min < lambda_max");
    if (preset != "toy" && preset != "full" && preset != "tiny") fail("preset must be toy, full or tiny");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) fail("lr_decay must lie in (0, 1]");
    if (!(grad_clip > 0.0)) fail("grad_clip must be positive");
    if (!(distortion_scale > 0.0)) fail("distortion_scale must be positive");
    if (!(depth_dropout >= 0.0 && depth_dropout < 1.0)) fail("depth_dropout must lie in [0, 1)");
    if (!(self_compression_weight >= 0.0)) fail("self_compression_weight must be >= 0");
    if (self_compression_batch < 1) fail("self_compression_batch must be >= 1");
    if (checkpoint_every < 0 || log_every < 1) fail("checkpoint_every >= 0 and log_every >= 1 required");
    if (data_root.empty()) {
        if (synth_count < 1) fail("synth_count must be >= 1");
        if (synth_size < crop_size) fail("synth_size must be >= crop_size");
        if (!(informativeness >= 0.0 && informativeness <= 1.0)) fail("informativeness must lie in [0, 1]");
    }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{
        {"steps", c.steps},
        {"batch_size", c.batch_size},
        {"crop_size", c.crop_size},
        {"lambda_min", c.lambda_min},
        {"lambda_max", c.lambda_max},
        {"preset", c.preset},
        {"learning_rate", c.learning_rate},
        {"lr_milestones", c.lr_milestones},
        {"lr_decay", c.lr_decay},
        {"grad_clip", c.grad_clip},
        {"distortion_scale", c.distortion_scale},
        {"depth_dropout", c.depth_dropout},
        {"balance_lambdas", c.balance_lambdas},
        {"self_compression_weight", c.self_compression_weight},
        {"self_compression_batch", c.self_compression_batch},
        {"seed", c.seed},
        {"checkpoint_every", c.checkpoint_every},
        {"log_every", c.log_every},
        {"depth_guided", c.depth_guided},
        {"data_root", c.data_root},
        {"split", c.split},
        {"synth_count", c.synth_count},
        {"synth_size", c.synth_size},
        {"informativeness", c.informativeness},
        {"synth_seed", c.synth_seed},
    };
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    nlohmann::json known;
    to_json(known, TrainConfig{});
    for (const auto& [key, _] : j.items()) {
        if (!known.contains(key)) {
            throw ConfigError("train config: unknown key '" + key + "'");
        }
    }
    TrainConfig d;
    c.steps = j.value("steps", d.steps);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.crop_size = j.value("crop_size", d.crop_size);
    c.lambda_min = j.value("lambda_min", d.lambda_min);
    c.lambda_max = j.value("lambda_max", d.lambda_max);
    c.preset = j.value("preset", d.preset);
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.lr_milestones = j.value("lr_milestones", d.lr_milestones);
    c.lr_decay = j.value("lr_decay", d.lr_decay);
    c.grad_clip = j.value("grad_clip", d.grad_clip);
    c.distortion_scale = j.value("distortion_scale", d.distortion_scale);
    c.depth_dropout = j.value("depth_dropout", d.depth_dropout);
    c.balance_lambdas = j.value("balance_lambdas", d.balance_lambdas);
    c.self_compression_weight = j.value("self_compression_weight", d.self_compression_weight);
    c.self_compression_batch = j.value("self_compression_batch", d.self_compression_batch);
    c.seed = j.value("seed", d.seed);
    c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
    c.log_every = j.value("log_every", d.log_every);
    c.depth_guided = j.value("depth_guided", d.depth_guided);
    c.data_root = j.value("data_root", d.data_root);
    c.split = j.value("split", d.split);
    c.synth_count = j.value("synth_count", d.synth_count);
    c.synth_size = j.value("synth_size", d.synth_size);
    c.informativeness = j.value("informativeness", d.informativeness);
    c.synth_seed = j.value("synth_seed", d.synth_seed);
}

TrainConfig load_train_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot read train config " + path.string());
    }
    try {
        auto cfg = nlohmann::json::parse(in).get<TrainConfig>();
        cfg.validate();
        return cfg;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("train config " + path.string() + ": " + e.what());
    }
}

ModelConfig model_config_for(const TrainConfig& cfg) {
    cfg.validate();
    ModelConfig mc = cfg.preset == "full" ? ModelConfig::full()
                     : cfg.preset == "tiny"  ? ModelConfig::tiny()
                                             : ModelConfig::toy();
    mc.lambda_min = cfg.lambda_min;
    mc.lambda_max = cfg.lambda_max;
    mc.depth_guided = cfg.depth_guided;
    return mc;
}

double lambda_from_control(double m_lambda, double lambda_min, double lambda_max) {
    if (!(m_lambda >= 0.0 && m_lambda <= 1.0)) {
        throw UsageError("m_lambda must lie in [0, 1], got " + std::to_string(m_lambda));
    }
    return std::exp(m_lambda * std::log(lambda_max) + (1.0 - m_lambda) * std::log(lambda_min));
}

double rd_loss(const RgbImage& x, const RgbImage& x_hat, const entropy::RateEstimate& rate, double lambda) {
    if (x.values.sizes() != x_hat.values.sizes()) {
        throw ConfigError("rd_loss: image shapes differ");
    }
    const double mse = (x.values.to(torch::kFloat64) - x_hat.values.to(torch::kFloat64)).pow(2).mean().item<double>();
    const double pixels = static_cast<double>(x.height() * x.width());
    return lambda * mse + rate.total_bits() / pixels;
}

torch::Tensor bits_per_element(const torch::Tensor& likelihoods) {
    return -torch::log2(likelihoods).flatten(1).sum(1);
}

torch::Tensor rd_loss(const torch::Tensor& x, const torch::Tensor& x_hat, const torch::Tensor& bits,
                      const torch::Tensor& lambda) {
    const double pixels = static_cast<double>(x.size(2) * x.size(3));
    auto mse = (x - x_hat).pow(2).flatten(1).mean(1);
    return (lambda * mse + bits / pixels).mean();
}

Batch sample_batch(const std::vector<data::RgbdPair>& pool, int64_t batch_size, int64_t crop_size,
                   std::mt19937_64& rng) {
    if (pool.empty()) {
        throw DataError("empty training pool");
    }
    std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);
    std::vector<torch::Tensor> images, depth;
    for (int64_t i = 0; i < batch_size; ++i) {
        auto crop = data::random_aligned_crop(pool[pick(rng)], crop_size, rng);
        images.push_back(crop.image.values);
        depth.push_back(crop.depth.values);
    }
    return {torch::stack(images), torch::stack(depth), {}};
}

int64_t depth_crop_size(int64_t crop_size) {
    return std::max<int64_t>(kPadMultiple, crop_size / 4 / kPadMultiple * kPadMultiple);
}

torch::Tensor sample_depth_images(const std::vector<data::RgbdPair>& pool, int64_t count, int64_t size,
                                  std::mt19937_64& rng) {
    std::vector<const data::RgbdPair*> usable;
    for (const auto& p : pool) {
        if (p.depth_raw.height() >= size && p.depth_raw.width() >= size) usable.push_back(&p);
    }
    if (usable.empty()) {
        return {};
    }
    std::uniform_int_distribution<size_t> pick(0, usable.size() - 1);
    std::vector<torch::Tensor> out;
    for (int64_t i = 0; i < count; ++i) {
        const auto& m = usable[pick(rng)]->depth_raw.meters;
        const auto top = std::uniform_int_distribution<int64_t>(0, m.size(0) - size)(rng);
        const auto left = std::uniform_int_distribution<int64_t>(0, m.size(1) - size)(rng);
        auto plane = data::normalize_depth(m.narrow(0, top, size).narrow(1, left, size));
        out.push_back(plane.unsqueeze(0).expand({3, size, size}));
    }
    return torch::stack(out).contiguous();
}

Trainer::Trainer(model::Model model, TrainConfig config)
    : model_(std::move(model)),
      cfg_(std::move(config)),
      optimizer_(model_->parameters(), torch::optim::AdamOptions(cfg_.learning_rate)),
      gen_(at::make_generator<at::CPUGeneratorImpl>(cfg_.seed)) {
    cfg_.validate();
    const auto& mc = model_->config();
    if (mc.lambda_min != cfg_.lambda_min || mc.lambda_max != cfg_.lambda_max) {
        throw ConfigError("train config lambda bounds differ from the model config");
    }
}

double Trainer::current_learning_rate() const {
    double lr = cfg_.learning_rate;
    for (double f : cfg_.lr_milestones) {
        if (static_cast<double>(step_) >= f * static_cast<double>(cfg_.steps)) {
            lr *= cfg_.lr_decay;
        }
    }
    return lr;
}

torch::Tensor Trainer::draw_m_lambda(int64_t batch) {
    return torch::rand({batch}, gen_);
}

StepResult Trainer::step(const Batch& batch) {
    model_->train();
    const auto& mc = model_->config();
    const auto B = batch.images.size(0);
    StepResult r;
    r.learning_rate = current_learning_rate();
    for (auto& group : optimizer_.param_groups()) {
        static_cast<torch::optim::AdamOptions&>(group.options()).lr(r.learning_rate);
    }
    ++step_;
    r.step = step_;

    auto m = draw_m_lambda(B);
    auto lambda = torch::exp(m * std::log(mc.lambda_max) + (1.0 - m) * std::log(mc.lambda_min)) * cfg_.distortion_scale;
    // Drawn for the baseline too so both runs see the same noise sequence.
    auto keep = (torch::rand({B}, gen_) >= cfg_.depth_dropout).to(batch.depth.dtype()).view({B, 1, 1, 1});
    model::NoiseSource noise;
    noise.generator = gen_;
    auto out = model_->forward_train(batch.images, m, mc.depth_guided ? batch.depth * keep : torch::Tensor(), noise);
    auto bits = bits_per_element(out.y_likelihoods) + bits_per_element(out.z_likelihoods);
    const double pixels = static_cast<double>(batch.images.size(2) * batch.images.size(3));
    auto cost = lambda * (batch.images - out.x_hat).pow(2).flatten(1).mean(1) + bits / pixels;
    auto loss = cfg_.balance_lambdas ? (cost / cost.detach().clamp_min(1e-6)).mean() * cost.detach().mean() : cost.mean();
    if (cfg_.self_compression_weight > 0.0 && batch.depth_images.defined()) {
        const auto Bd = batch.depth_images.size(0);
        auto d_out = model_->forward_train(batch.depth_images, torch::ones({Bd}), torch::Tensor(), noise);
        auto d_bits = bits_per_element(d_out.y_likelihoods) + bits_per_element(d_out.z_likelihoods);
        auto d_lambda = torch::full({Bd}, mc.lambda_max * cfg_.distortion_scale);
        loss = loss + cfg_.self_compression_weight * rd_loss(batch.depth_images, d_out.x_hat, d_bits, d_lambda);
    }

    r.loss = loss.item<double>();
    r.mse = (batch.images - out.x_hat.detach()).pow(2).mean().item<double>();
    r.bpp = bits.detach().mean().item<double>() / pixels;
    r.m_lambda_mean = m.mean().item<double>();

    optimizer_.zero_grad();
    if (!std::isfinite(r.loss)) {
        r.skipped = true;
        return r;
    }
    loss.backward();
    const double norm = torch::nn::utils::clip_grad_norm_(model_->parameters(), cfg_.grad_clip);
    if (!std::isfinite(norm)) {
        optimizer_.zero_grad();
        r.skipped = true;
        return r;
    }
    optimizer_.step();
    return r;
}

std::vector<data::RgbdPair> training_pool(const TrainConfig& cfg) {
    if (!cfg.data_root.empty()) {
        auto pool = data::load_split(cfg.data_root, cfg.split);
        if (pool.empty()) {
            throw DataError("no training pairs under " + cfg.data_root + "/" + cfg.split);
        }
        return pool;
    }
    std::vector<data::RgbdPair> pool;
    pool.reserve(static_cast<size_t>(cfg.synth_count));
    for (int i = 0; i < cfg.synth_count; ++i) {
        pool.push_back(data::synth_rgbd(cfg.synth_seed + static_cast<uint64_t>(i), cfg.synth_size, cfg.informativeness));
    }
    return pool;
}

model::Model train(const TrainConfig& cfg, const ModelConfig& model_cfg, const fs::path& out_dir,
                   const std::string& tag, const StepCallback& on_step) {
    cfg.validate();
    ModelConfig mc = model_cfg;
    if (mc.lambda_min != cfg.lambda_min || mc.lambda_max != cfg.lambda_max) {
        throw ConfigError("train config lambda bounds differ from the model config");
    }
    mc.depth_guided = cfg.depth_guided;
    mc.validate();
    fs::create_directories(out_dir);

    torch::manual_seed(cfg.seed);
    model::Model model(mc);
    const auto pool = training_pool(cfg);
    std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ull + 1);
    Trainer trainer(model, cfg);

    std::ofstream log(out_dir / (tag + ".log.jsonl"));
    if (!log) {
        throw DataError("cannot write training log in " + out_dir.string());
    }
    for (int64_t s = 1; s <= cfg.steps; ++s) {
        auto batch = sample_batch(pool, cfg.batch_size, cfg.crop_size, rng);
        if (cfg.self_compression_weight > 0.0) {
            batch.depth_images =
                sample_depth_images(pool, cfg.self_compression_batch, depth_crop_size(cfg.crop_size), rng);
        }
        const auto r = trainer.step(batch);
        if (r.skipped || s % cfg.log_every == 0 || s == cfg.steps) {
            log << nlohmann::json{{"step", r.step},       {"loss", r.loss}, {"mse", r.mse},
                                  {"bpp", r.bpp},         {"m_lambda", r.m_lambda_mean}, {"lr", r.learning_rate},
                                  {"skipped", r.skipped}}
                       .dump()
                << "\n"
                << std::flush;
        }
        if (on_step) {
            on_step(r);
        }
        if (cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0) {
            save_checkpoint(model, out_dir / (tag + "_step" + std::to_string(s) + ".ckpt"));
        }
    }
    model->eval();
    save_checkpoint(model, out_dir / (tag + ".ckpt"));
    return model;
}

}  // namespace ldic::train

// ldic: train, compress, decompress, eval, plot, synth.
//
// Exit codes: 0 success, 1 usage, 2 data, 3 internal.

#include "ldic/bitstream.hpp"
#include "ldic/checkpoint.hpp"
#include "ldic/codec.hpp"
#include "ldic/data.hpp"
#include "ldic/errors.hpp"
#include "ldic/evaluation.hpp"
#include "ldic/training.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <iterator>

namespace fs = std::filesystem;
using namespace ldic;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitInternal = 3;

fs::path default_checkpoint(const std::string& name) {
    const char* dir = std::getenv("LDIC_CHECKPOINT_DIR");
    return fs::path(dir ? dir : "checkpoints") / name;
}

std::vector<uint8_t> read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot read " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, const std::vector<uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out || !out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
        throw DataError("cannot write " + path.string());
    }
}

struct Common {
    uint64_t seed = 1;
};

struct TrainArgs {
    std::string config;
    bool no_depth = false;
    std::string out = "checkpoints";
    std::string tag;
    std::string preset;
    int64_t steps = -1;
};

int run_train(const TrainArgs& a, const Common& c) {
    auto cfg = a.config.empty() ? train::TrainConfig{} : train::load_train_config(a.config);
    cfg.seed = c.seed;
    if (a.no_depth) cfg.depth_guided = false;
    if (a.steps >= 0) cfg.steps = a.steps;
    if (!a.preset.empty()) cfg.preset = a.preset;
    const auto tag = a.tag.empty() ? std::string(cfg.depth_guided ? "guided" : "baseline") : a.tag;
    train::train(cfg, train::model_config_for(cfg), a.out, tag, [&](const train::StepResult& r) {
        if (r.skipped) {
            std::cerr << "step " << r.step << ": non-finite loss or gradient, skipped\n";
        } else if (r.step % cfg.log_every == 0) {
            std::cerr << "step " << r.step << " loss " << r.loss << " bpp " << r.bpp << " mse " << r.mse << "\n";
        }
    });
    std::cerr << "wrote " << (fs::path(a.out) / (tag + ".ckpt")).string() << "\n";
    return 0;
}

struct CompressArgs {
    std::string input, depth, output, checkpoint;
    double m_lambda = 1.0;
    bool embed_depth = false;
};

int run_compress(const CompressArgs& a, const Common&) {
    if (!(a.m_lambda >= 0.0 && a.m_lambda <= 1.0)) {
        throw UsageError("--mlambda must lie in [0, 1]");
    }
    if (a.embed_depth && a.depth.empty()) {
        throw UsageError("--embed-depth needs --depth");
    }
    auto model = load_checkpoint(a.checkpoint.empty() ? default_checkpoint("guided.ckpt") : fs::path(a.checkpoint));
    const auto image = data::read_rgb_png(a.input);
    bitstream::CompressedImage stream;
    if (a.depth.empty()) {
        stream = codec::encode_image(model, image, std::nullopt, a.m_lambda);
    } else {
        const auto raw = data::read_depth_png(a.depth);
        if (a.embed_depth) {
            stream = codec::encode_with_embedded_depth(model, image, raw, a.m_lambda);
        } else {
            stream = codec::encode_image(model, image, data::upsample_depth(raw, image.height(), image.width()),
                                         a.m_lambda);
        }
    }
    write_bytes(a.output, bitstream::serialize(stream));
    std::cerr << "bpp " << bitstream::bpp(stream) << "\n";
    return 0;
}

struct DecompressArgs {
    std::string input, depth, output, checkpoint, reference;
};

int run_decompress(const DecompressArgs& a, const Common&) {
    auto model = load_checkpoint(a.checkpoint.empty() ? default_checkpoint("guided.ckpt") : fs::path(a.checkpoint));
    const auto stream = bitstream::parse(read_bytes(a.input));
    std::optional<AlignedDepth> depth;
    if (!a.depth.empty()) {
        depth = data::upsample_depth(data::read_depth_png(a.depth), stream.height, stream.width);
    }
    const auto image = codec::decode_image(model, stream, depth);
    data::write_rgb_png(image, a.output);
    if (!a.reference.empty()) {
        std::cerr << "psnr " << eval::psnr(data::read_rgb_png(a.reference), image) << " dB, bpp "
                  << bitstream::bpp(stream) << "\n";
    }
    return 0;
}

struct EvalArgs {
    std::string checkpoint, baseline, data, split = "test", scenario = "all", out;
    int jobs = 1;
    std::vector<double> grid{0.0, 0.25, 0.5, 0.75, 1.0};
};

int run_eval(const EvalArgs& a, const Common& c) {
    std::vector<eval::Scenario> scenarios;
    if (a.scenario == "all") {
        scenarios = {eval::Scenario::NoLidar, eval::Scenario::UncompressedLidar, eval::Scenario::CompressedLidar,
                     eval::Scenario::RandomMap};
        if (a.baseline.empty()) scenarios.erase(scenarios.begin());
    } else {
        scenarios = {eval::scenario_from_string(a.scenario)};
    }
    const auto set = data::load_split(a.data, a.split);
    if (set.empty()) {
        throw DataError("no pairs under " + (fs::path(a.data) / a.split).string());
    }
    model::Model guided{nullptr}, baseline{nullptr};
    const bool need_guided = std::any_of(scenarios.begin(), scenarios.end(),
                                         [](auto s) { return s != eval::Scenario::NoLidar; });
    const bool need_baseline = !a.baseline.empty() || (scenarios.size() == 1 && scenarios[0] == eval::Scenario::NoLidar);
    if (need_guided) {
        guided = load_checkpoint(a.checkpoint.empty() ? default_checkpoint("guided.ckpt") : fs::path(a.checkpoint));
    }
    if (need_baseline) {
        const fs::path p = !a.baseline.empty() ? fs::path(a.baseline)
                           : !a.checkpoint.empty() ? fs::path(a.checkpoint)
                                                   : default_checkpoint("baseline.ckpt");
        baseline = load_checkpoint(p);
    }

    fs::create_directories(a.out);
    eval::ScenarioOptions opts;
    opts.m_grid = a.grid;
    opts.jobs = a.jobs;
    opts.random_seed = c.seed;
    std::vector<eval::RdCurve> curves;
    std::ofstream per_image(fs::path(a.out) / "per_image.jsonl");
    for (auto s : scenarios) {
        std::vector<eval::ImageReport> reports;
        curves.push_back(eval::run_scenario(s, &guided, &baseline, set, opts, &reports));
        for (const auto& r : reports) {
            per_image << nlohmann::json{{"scenario", eval::to_string(s)}, {"id", r.id},   {"m_lambda", r.m_lambda},
                                        {"bpp", r.bpp},   {"depth_bpp", r.depth_bpp}, {"psnr_db", r.psnr_db},
                                        {"ssim", r.ssim}}
                             .dump()
                      << "\n";
        }
        for (const auto& p : curves.back().points) {
            std::cerr << curves.back().label << " m=" << p.m_lambda << " bpp " << p.bpp << " psnr " << p.psnr_db
                      << " ssim " << p.ssim;
            if (p.depth_bpp > 0.0) std::cerr << " depth share " << 100.0 * p.depth_bpp / p.bpp << "%";
            std::cerr << "\n";
        }
    }
    eval::write_curves(curves, fs::path(a.out) / "curves.jsonl");
    eval::emit_rd_plot(curves, fs::path(a.out) / "rd");

    const auto base = std::find_if(curves.begin(), curves.end(), [](const auto& cv) { return cv.label == "no_lidar"; });
    if (base != curves.end()) {
        std::ofstream bd(fs::path(a.out) / "bd.jsonl");
        for (const auto& cv : curves) {
            if (&cv == &*base) continue;
            try {
                const auto m = eval::bd_metrics(*base, cv);
                bd << nlohmann::json{{"baseline", m.baseline},
                                     {"test", m.test},
                                     {"bd_rate_percent", m.bd_rate_percent},
                                     {"bd_psnr_db", m.bd_psnr_db}}
                          .dump()
                   << "\n";
                std::cerr << "BD " << m.test << " vs " << m.baseline << ": " << m.bd_rate_percent << "% / "
                          << m.bd_psnr_db << " dB\n";
            } catch (const UsageError& e) {
                std::cerr << "BD " << cv.label << ": " << e.what() << "\n";
            }
        }
    }
    return 0;
}

struct PlotArgs {
    std::string curves, out;
};

int run_plot(const PlotArgs& a, const Common&) {
    for (const auto& p : eval::emit_rd_plot(eval::read_curves(a.curves), a.out)) {
        std::cerr << "wrote " << p.string() << "\n";
    }
    return 0;
}

struct SynthArgs {
    int count = 64;
    int64_t size = 64;
    double informativeness = 0.9;
    std::string out, split = "test";
};

int run_synth(const SynthArgs& a, const Common& c) {
    if (a.count < 1) throw UsageError("--count must be >= 1");
    if (a.size < 64 || a.size % 64 != 0) throw UsageError("--size must be a positive multiple of 64");
    data::write_synthetic_split(a.out, a.split, a.count, a.size, a.informativeness, c.seed);
    std::cerr << "wrote " << a.count << " pairs to " << (fs::path(a.out) / a.split).string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"LiDAR-guided variable-rate image codec"};
    app.require_subcommand(1);
    Common common;
    auto add_seed = [&](CLI::App* sub) { sub->add_option("--seed", common.seed, "random seed"); };

    TrainArgs ta;
    auto* train_cmd = app.add_subcommand("train", "train a model");
    train_cmd->add_option("--config", ta.config, "training config (JSON)")->check(CLI::ExistingFile);
    train_cmd->add_flag("--no-depth", ta.no_depth, "train the baseline without depth");
    train_cmd->add_option("--out", ta.out, "checkpoint directory");
    train_cmd->add_option("--tag", ta.tag, "file name stem (default guided / baseline)");
    train_cmd->add_option("--preset", ta.preset, "model size: toy, full, tiny (overrides the config)");
    train_cmd->add_option("--steps", ta.steps, "override the step count");
    add_seed(train_cmd);

    CompressArgs ca;
    auto* compress_cmd = app.add_subcommand("compress", "encode an image");
    compress_cmd->add_option("--input", ca.input, "RGB PNG")->required();
    compress_cmd->add_option("--depth", ca.depth, "16-bit depth PNG (mm)");
    compress_cmd->add_option("--mlambda", ca.m_lambda, "rate control in [0, 1]");
    compress_cmd->add_flag("--embed-depth", ca.embed_depth, "compress the depth map into the stream");
    compress_cmd->add_option("--output", ca.output, ".ldic file")->required();
    compress_cmd->add_option("--checkpoint", ca.checkpoint, "model checkpoint");
    add_seed(compress_cmd);

    DecompressArgs da;
    auto* decompress_cmd = app.add_subcommand("decompress", "decode a stream");
    decompress_cmd->add_option("--input", da.input, ".ldic file")->required();
    decompress_cmd->add_option("--depth", da.depth, "16-bit depth PNG (mm)");
    decompress_cmd->add_option("--output", da.output, "RGB PNG")->required();
    decompress_cmd->add_option("--checkpoint", da.checkpoint, "model checkpoint");
    decompress_cmd->add_option("--reference", da.reference, "original image; PSNR goes to stderr");
    add_seed(decompress_cmd);

    EvalArgs ea;
    auto* eval_cmd = app.add_subcommand("eval", "rate-distortion evaluation");
    eval_cmd->add_option("--checkpoint", ea.checkpoint, "depth-guided checkpoint");
    eval_cmd->add_option("--baseline", ea.baseline, "baseline checkpoint");
    eval_cmd->add_option("--data", ea.data, "dataset root")->required();
    eval_cmd->add_option("--split", ea.split, "split directory");
    eval_cmd->add_option("--scenario", ea.scenario,
                         "no_lidar, uncompressed_lidar, compressed_lidar, random_map or all");
    eval_cmd->add_option("--out", ea.out, "output directory")->required();
    eval_cmd->add_option("--jobs", ea.jobs, "parallel images")->check(CLI::PositiveNumber);
    eval_cmd->add_option("--grid", ea.grid, "m_lambda values");
    add_seed(eval_cmd);

    PlotArgs pa;
    auto* plot_cmd = app.add_subcommand("plot", "draw RD charts from curves.jsonl");
    plot_cmd->add_option("--curves", pa.curves, "curves file")->required();
    plot_cmd->add_option("--out", pa.out, "output prefix")->required();
    add_seed(plot_cmd);

    SynthArgs sa;
    auto* synth_cmd = app.add_subcommand("synth", "write a synthetic RGB-D dataset");
    synth_cmd->add_option("--count", sa.count, "pairs");
    synth_cmd->add_option("--size", sa.size, "image side");
    synth_cmd->add_option("--informativeness", sa.informativeness, "share of the image driven by depth");
    synth_cmd->add_option("--out", sa.out, "dataset root")->required();
    synth_cmd->add_option("--split", sa.split, "split directory");
    add_seed(synth_cmd);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitUsage;
    }

    torch::set_num_threads(1);
    try {
        torch::manual_seed(common.seed);
        if (*train_cmd) return run_train(ta, common);
        if (*compress_cmd) return run_compress(ca, common);
        if (*decompress_cmd) return run_decompress(da, common);
        if (*eval_cmd) return run_eval(ea, common);
        if (*plot_cmd) return run_plot(pa, common);
        if (*synth_cmd) return run_synth(sa, common);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ConfigError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const AlignmentError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const ParseError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const CheckpointError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kExitInternal;
    }
    return kExitInternal;
}

#include "ldic/codec.hpp"

#include "ldic/data.hpp"
#include "ldic/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace ldic::codec {

namespace {

const model::FrozenTables& frozen(model::Model& m) {
    if (!m->tables()) {
        m->freeze_entropy_tables();
    }
    return *m->tables();
}

int64_t latent_stride(const ModelConfig& cfg) {
    return int64_t{1} << cfg.stage_count;
}

struct Slots {
    std::vector<uint32_t> table;
    std::vector<int32_t> center;
};

Slots gaussian_slots(const model::EntropyParams& p, const entropy::GaussianConditional& g) {
    auto mean = p.mean.to(torch::kFloat32).contiguous();
    auto scale = p.scale.to(torch::kFloat32).contiguous();
    const auto n = static_cast<size_t>(scale.numel());
    const float* mp = mean.data_ptr<float>();
    const float* sp = scale.data_ptr<float>();
    Slots s;
    s.table.resize(n);
    s.center.resize(n);
    for (size_t i = 0; i < n; ++i) {
        if (!std::isfinite(mp[i]) || !std::isfinite(sp[i])) {
            throw InternalError("non-finite entropy parameters");
        }
        const auto slot = g.slot(mp[i], sp[i]);
        s.table[i] = slot.table;
        s.center[i] = slot.center;
    }
    return s;
}

std::vector<int32_t> decode_exact(std::span<const uint8_t> bytes, std::span<const uint32_t> index,
                                  std::span<const entropy::CdfTable> tables, const char* what) {
    entropy::RangeDecoder dec(bytes);
    std::vector<int32_t> out;
    out.reserve(index.size());
    for (uint32_t i : index) {
        out.push_back(dec.decode(tables[i]));
    }
    if (dec.overrun() != 0 || dec.consumed() != bytes.size()) {
        throw ParseError(ParseError::Kind::Malformed,
                         std::string(what) + " payload does not match its declared length");
    }
    return out;
}

int64_t ceil_div(int64_t a, int64_t b) {
    return (a + b - 1) / b;
}

// Replicate-pads y to whole hyper cells.
model::EntropyParams hyper_params(model::Model& m, const torch::Tensor& z_hat, int64_t h, int64_t w) {
    auto p = m->hyper_synthesis(z_hat.to(torch::kFloat32));
    p.mean = p.mean.narrow(2, 0, h).narrow(3, 0, w);
    p.scale = p.scale.narrow(2, 0, h).narrow(3, 0, w);
    return p;
}

torch::Tensor to_tensor(const std::vector<int32_t>& v, at::IntArrayRef shape) {
    return torch::tensor(std::vector<int32_t>(v), torch::kInt32).reshape(shape);
}

}  // namespace

bitstream::CompressedImage encode_image(model::Model& model, const RgbImage& image,
                                        const std::optional<AlignedDepth>& depth, double m_lambda,
                                        EncodeTrace* trace) {
    if (!image.values.defined() || image.values.dim() != 3 || image.values.size(0) != 3) {
        throw UsageError("encode_image expects a (3, H, W) image");
    }
    const int64_t H = image.height(), W = image.width();
    if (H < 1 || W < 1 || H > 65535 || W > 65535) {
        throw UsageError("image size " + std::to_string(W) + "x" + std::to_string(H) + " is not codable");
    }
    if (!(m_lambda >= 0.0 && m_lambda <= 1.0)) {
        throw UsageError("m_lambda must lie in [0, 1], got " + std::to_string(m_lambda));
    }
    if (depth && (depth->height() != H || depth->width() != W)) {
        throw AlignmentError("depth " + std::to_string(depth->width()) + "x" + std::to_string(depth->height()) +
                             " does not match image " + std::to_string(W) + "x" + std::to_string(H));
    }
    const auto& cfg = model->config();
    const bool guided = cfg.depth_guided && depth.has_value();

    bitstream::CompressedImage out;
    out.width = static_cast<uint16_t>(W);
    out.height = static_cast<uint16_t>(H);
    out.m_lambda_fixed = bitstream::encode_m_lambda(m_lambda);
    out.depth_guided = guided;
    // Both sides see the value as stored in the header.
    const double m = out.m_lambda();

    torch::NoGradGuard no_grad;
    const auto& tables = frozen(model);
    const int64_t Hp = padded_extent(H, latent_stride(cfg)), Wp = padded_extent(W, latent_stride(cfg));
    RgbImage x{reflect_pad_to(image.values, Hp, Wp)};
    std::optional<AlignedDepth> d;
    if (guided) {
        d = AlignedDepth{reflect_pad_to(depth->values, Hp, Wp), depth->source_height, depth->source_width};
    }
    const auto control = ControlInput::make(m, Hp, Wp);

    auto y = model::analysis_transform(model, x, model::build_encoder_prompts(model, x, control, d)).unsqueeze(0);
    auto z = model->hyper_analysis(model::pad_for_hyper(y));

    // Hyper latent: clamp into each channel's table support.
    auto z_round = entropy::round_half_away(z).to(torch::kInt32).contiguous();
    std::vector<int32_t> z_sym(z_round.data_ptr<int32_t>(), z_round.data_ptr<int32_t>() + z_round.numel());
    std::vector<uint32_t> z_idx(z_sym.size());
    const auto per_channel = static_cast<size_t>(z.size(2) * z.size(3));
    for (size_t i = 0; i < z_sym.size(); ++i) {
        const auto c = static_cast<uint32_t>(i / per_channel);
        const auto& t = tables.z_tables[c];
        z_sym[i] = std::clamp(z_sym[i], t.min_symbol(), t.max_symbol());
        z_idx[i] = c;
    }
    auto z_hat = to_tensor(z_sym, z.sizes());

    const auto params = hyper_params(model, z_hat, y.size(2), y.size(3));
    const auto slots = gaussian_slots(params, tables.y_model);
    auto y_round = entropy::round_half_away(y).to(torch::kInt32).contiguous();
    const int32_t* yp = y_round.data_ptr<int32_t>();
    std::vector<int32_t> residual(slots.table.size());
    std::vector<int32_t> y_sym(slots.table.size());
    for (size_t i = 0; i < residual.size(); ++i) {
        const int32_t lim = tables.y_model.max_residual(slots.table[i]);
        residual[i] = std::clamp(yp[i] - slots.center[i], -lim, lim);
        y_sym[i] = slots.center[i] + residual[i];
    }
    auto y_hat = to_tensor(y_sym, y.sizes());

    out.payload_z = entropy::range_encode(z_sym, z_idx, tables.z_tables);
    out.payload_y = entropy::range_encode(residual, slots.table, tables.y_model.tables());

    if (trace) {
        trace->latents = {y_hat, z_hat};
        auto y_lik = entropy::gaussian_likelihood(y_hat.to(torch::kFloat32), params.mean, params.scale);
        auto z_lik = model->prior->likelihood(z_hat.to(torch::kFloat32));
        trace->estimate = entropy::estimate_rate(y_lik, z_lik);
    }
    return out;
}

RgbImage decode_image(model::Model& model, const bitstream::CompressedImage& stream,
                      const std::optional<AlignedDepth>& depth, model::LatentPack* latents) {
    const auto& cfg = model->config();
    const int64_t H = stream.height, W = stream.width;
    if (H < 1 || W < 1) {
        throw ParseError(ParseError::Kind::Malformed, "stream has zero dimensions");
    }
    if (stream.depth_guided && !cfg.depth_guided) {
        throw UsageError("stream was coded with depth guidance; this model has none");
    }

    std::optional<AlignedDepth> d;
    if (stream.depth_guided) {
        if (stream.depth) {
            d = decode_depth_map(model, *stream.depth, H, W);
        } else if (depth) {
            if (depth->height() != H || depth->width() != W) {
                throw AlignmentError("depth " + std::to_string(depth->width()) + "x" +
                                     std::to_string(depth->height()) + " does not match stream " +
                                     std::to_string(W) + "x" + std::to_string(H));
            }
            d = depth;
        } else {
            throw UsageError("stream was coded with depth; supply the depth map");
        }
    }

    torch::NoGradGuard no_grad;
    const auto& tables = frozen(model);
    const int64_t Hp = padded_extent(H, latent_stride(cfg)), Wp = padded_extent(W, latent_stride(cfg));
    const int64_t ys = latent_stride(cfg);
    const int64_t Cz = cfg.hyper_channels;
    const int64_t zh = ceil_div(Hp / ys, model::kHyperStride), zw = ceil_div(Wp / ys, model::kHyperStride);

    const auto per_channel = static_cast<size_t>(zh * zw);
    std::vector<uint32_t> z_idx(static_cast<size_t>(Cz) * per_channel);
    for (size_t i = 0; i < z_idx.size(); ++i) {
        z_idx[i] = static_cast<uint32_t>(i / per_channel);
    }
    auto z_sym = decode_exact(stream.payload_z, z_idx, tables.z_tables, "hyper latent");
    auto z_hat = to_tensor(z_sym, {1, Cz, zh, zw});

    const auto params = hyper_params(model, z_hat, Hp / ys, Wp / ys);
    const auto slots = gaussian_slots(params, tables.y_model);
    auto residual = decode_exact(stream.payload_y, slots.table, tables.y_model.tables(), "latent");
    for (size_t i = 0; i < residual.size(); ++i) {
        residual[i] += slots.center[i];
    }
    auto y_hat = to_tensor(residual, {1, cfg.latent_channels, Hp / ys, Wp / ys});

    if (d) {
        d = AlignedDepth{reflect_pad_to(d->values, Hp, Wp), d->source_height, d->source_width};
    }
    const auto control = ControlInput::make(stream.m_lambda(), Hp, Wp);
    auto yf = y_hat.to(torch::kFloat32);
    auto x = model::synthesis_transform(model, yf, model::build_decoder_prompts(model, yf, control, d));
    if (latents) {
        *latents = {y_hat, z_hat};
    }
    return {crop_to(x.values, H, W).contiguous()};
}

AlignedDepth decode_depth_map(model::Model& model, const bitstream::CompressedImage& stream, int64_t height,
                              int64_t width) {
    if (stream.depth_guided || stream.depth) {
        throw ParseError(ParseError::Kind::Malformed, "depth payload must be a plain stream");
    }
    auto rgb = decode_image(model, stream);
    auto plane = rgb.values.mean(0);
    AlignedDepth out;
    out.values = data::resize_plane(plane, height, width).clamp(0.0, 1.0).unsqueeze(0).contiguous();
    out.source_height = stream.height;
    out.source_width = stream.width;
    return out;
}

DepthCompression compress_depth_map(model::Model& model, const DepthMap& depth, int64_t height, int64_t width) {
    if (!depth.meters.defined() || depth.meters.dim() != 2) {
        throw DataError("depth map must be a (h, w) tensor");
    }
    if (depth.height() > height || depth.width() > width) {
        throw AlignmentError("depth map is larger than the image");
    }
    auto plane = data::normalize_depth(depth.meters);
    RgbImage as_rgb{plane.unsqueeze(0).expand({3, depth.height(), depth.width()}).contiguous()};
    DepthCompression out;
    out.stream = encode_image(model, as_rgb, std::nullopt, 1.0);
    out.reconstruction = decode_depth_map(model, out.stream, height, width);
    return out;
}

bitstream::CompressedImage encode_with_embedded_depth(model::Model& model, const RgbImage& image,
                                                      const DepthMap& depth, double m_lambda,
                                                      EncodeTrace* trace) {
    if (!model->config().depth_guided) {
        throw UsageError("embedding depth needs a depth-guided model");
    }
    auto dc = compress_depth_map(model, depth, image.height(), image.width());
    auto out = encode_image(model, image, dc.reconstruction, m_lambda, trace);
    out.depth = std::make_shared<const bitstream::CompressedImage>(std::move(dc.stream));
    return out;
}

}  // namespace ldic::codec

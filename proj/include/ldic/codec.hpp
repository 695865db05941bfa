#pragma once

#include "ldic/bitstream.hpp"
#include "ldic/entropy.hpp"
#include "ldic/image.hpp"
#include "ldic/model.hpp"

#include <optional>

namespace ldic::codec {

// What the encoder saw besides the stream: the coded integer latents and the
// rate the model's own likelihoods predict for them.
struct EncodeTrace {
    model::LatentPack latents;
    entropy::RateEstimate estimate;
};

// Encodes an image of any size up to 65535 x 65535. The image is reflect-padded
// to multiples of the latent stride. `depth`, when given, must be aligned to the unpadded
// image. A depth-guided model without depth codes with zero depth and records
// that in the header.
bitstream::CompressedImage encode_image(model::Model& model, const RgbImage& image,
                                        const std::optional<AlignedDepth>& depth, double m_lambda,
                                        EncodeTrace* trace = nullptr);

// `depth` is required when the stream was coded with depth and carries no depth
// payload; an embedded depth payload takes precedence. Throws UsageError when
// depth is needed but unavailable and ParseError when a payload is corrupt.
RgbImage decode_image(model::Model& model, const bitstream::CompressedImage& stream,
                      const std::optional<AlignedDepth>& depth = std::nullopt, model::LatentPack* latents = nullptr);

// Codes a native-resolution depth map as a 3-channel image at full quality
// (m_lambda = 1, no depth prompts). `reconstruction` is what any decoder of
// `stream` recovers, upsampled to height x width.
struct DepthCompression {
    bitstream::CompressedImage stream;
    AlignedDepth reconstruction;
};
DepthCompression compress_depth_map(model::Model& model, const DepthMap& depth, int64_t height, int64_t width);

// Decoder side of compress_depth_map.
AlignedDepth decode_depth_map(model::Model& model, const bitstream::CompressedImage& stream, int64_t height,
                              int64_t width);

// RGB coded against the decoder-side reconstruction of `depth`; the depth
// stream is embedded so the result decodes without side information.
bitstream::CompressedImage encode_with_embedded_depth(model::Model& model, const RgbImage& image,
                                                      const DepthMap& depth, double m_lambda,
                                                      EncodeTrace* trace = nullptr);

}  // namespace ldic::codec

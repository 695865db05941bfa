#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <span>
#include <vector>

namespace ldic {

// Images are padded to the latent stride; the hyper path pads its own grid.
inline constexpr int64_t kPadMultiple = 16;

// (3, H, W) float32 in [0, 1].
struct RgbImage {
    torch::Tensor values;

    int64_t height() const { return values.size(1); }
    int64_t width() const { return values.size(2); }

    // Interleaved 8-bit RGB, row-major.
    static RgbImage from_u8(std::span<const uint8_t> hwc, int64_t height, int64_t width);
    std::vector<uint8_t> to_u8() const;
};

// Native-resolution LiDAR depth in meters, (h, w) float32, >= 0. Zero marks
// an invalid return.
struct DepthMap {
    torch::Tensor meters;

    int64_t height() const { return meters.size(0); }
    int64_t width() const { return meters.size(1); }
};

// Depth resampled to the image grid and normalized to [0, 1]: (1, H, W).
struct AlignedDepth {
    torch::Tensor values;
    int64_t source_height = 0;
    int64_t source_width = 0;

    int64_t height() const { return values.size(1); }
    int64_t width() const { return values.size(2); }
};

// Rate control: m_lambda broadcast over the image grid and over the stride-16
// latent grid.
struct ControlInput {
    double m_lambda = 1.0;
    torch::Tensor lambda_map;       // (1, H, W)
    torch::Tensor lambda_map_down;  // (1, H/16, W/16)

    static ControlInput make(double m_lambda, int64_t height, int64_t width);
};

// Smallest multiple of `multiple` that is >= n.
int64_t padded_extent(int64_t n, int64_t multiple = kPadMultiple);

// Extends a (..., h, w) tensor to (..., height, width) by mirroring about the
// last row/column (edge pixel not repeated). Works for pads larger than the
// source by reflecting periodically.
torch::Tensor reflect_pad_to(const torch::Tensor& t, int64_t height, int64_t width);

// Top-left (..., height, width) window.
torch::Tensor crop_to(const torch::Tensor& t, int64_t height, int64_t width);

}  // namespace ldic

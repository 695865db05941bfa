#include "ldic/image.hpp"

#include "ldic/errors.hpp"

#include <string>

namespace ldic {

namespace {

torch::Tensor mirror_index(int64_t source, int64_t target) {
    std::vector<int64_t> idx(static_cast<size_t>(target));
    const int64_t period = 2 * (source - 1);
    for (int64_t i = 0; i < target; ++i) {
        if (source == 1) {
            idx[i] = 0;
            continue;
        }
        int64_t j = i % period;
        idx[i] = j < source ? j : period - j;
    }
    return torch::tensor(idx, torch::kLong);
}

}  // namespace

RgbImage RgbImage::from_u8(std::span<const uint8_t> hwc, int64_t height, int64_t width) {
    if (height <= 0 || width <= 0 || static_cast<int64_t>(hwc.size()) != height * width * 3) {
        throw DataError("rgb buffer size does not match " + std::to_string(width) + "x" +
                        std::to_string(height) + "x3");
    }
    auto t = torch::from_blob(const_cast<uint8_t*>(hwc.data()), {height, width, 3}, torch::kUInt8);
    return {t.permute({2, 0, 1}).to(torch::kFloat32).div(255.0).contiguous()};
}

std::vector<uint8_t> RgbImage::to_u8() const {
    auto t = values.clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8).permute({1, 2, 0}).contiguous();
    const auto* p = t.data_ptr<uint8_t>();
    return {p, p + t.numel()};
}

ControlInput ControlInput::make(double m_lambda, int64_t height, int64_t width) {
    if (!(m_lambda >= 0.0 && m_lambda <= 1.0)) {
        throw UsageError("m_lambda must lie in [0, 1], got " + std::to_string(m_lambda));
    }
    if (height % 16 != 0 || width % 16 != 0) {
        throw ConfigError("control maps need dimensions divisible by 16");
    }
    ControlInput c;
    c.m_lambda = m_lambda;
    c.lambda_map = torch::full({1, height, width}, m_lambda, torch::kFloat32);
    c.lambda_map_down = torch::full({1, height / 16, width / 16}, m_lambda, torch::kFloat32);
    return c;
}

int64_t padded_extent(int64_t n, int64_t multiple) {
    return (n + multiple - 1) / multiple * multiple;
}

torch::Tensor reflect_pad_to(const torch::Tensor& t, int64_t height, int64_t width) {
    const int64_t h = t.size(-2);
    const int64_t w = t.size(-1);
    if (height < h || width < w) {
        throw ConfigError("reflect_pad_to cannot shrink a tensor");
    }
    if (height == h && width == w) {
        return t;
    }
    return t.index_select(-2, mirror_index(h, height)).index_select(-1, mirror_index(w, width));
}

torch::Tensor crop_to(const torch::Tensor& t, int64_t height, int64_t width) {
    return t.narrow(-2, 0, height).narrow(-1, 0, width);
}

}  // namespace ldic

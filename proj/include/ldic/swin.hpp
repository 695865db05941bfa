#pragma once

#include <torch/torch.h>

namespace ldic::model {

// Window geometry actually used for a (height, width) token grid. The window
// shrinks to the grid when the grid is smaller, and shifting is disabled when
// a single window covers the grid.
struct WindowGeometry {
    int64_t window = 0;
    int64_t shift = 0;
    int64_t padded_height = 0;
    int64_t padded_width = 0;

    int64_t windows() const { return (padded_height / window) * (padded_width / window); }
    static WindowGeometry resolve(int64_t height, int64_t width, int64_t window_size, bool shifted);
};

// (B, H, W, C) -> (B * nW, window * window, C)
torch::Tensor window_partition(const torch::Tensor& x, int64_t window);
// Inverse of window_partition.
torch::Tensor window_reverse(const torch::Tensor& windows, int64_t window, int64_t height, int64_t width);

// Additive mask (nW, N, N) that blocks attention across the seams introduced by
// the cyclic shift: 0 where allowed, -100 where blocked.
torch::Tensor shifted_window_mask(const WindowGeometry& g);

// Index into the relative position bias table, (N, N) for a window of side
// `window` inside a table sized for `table_window`.
torch::Tensor relative_position_index(int64_t window, int64_t table_window);

// Multi-head self attention inside windows. Prompt tokens of the same window,
// when given, are projected with the same key/value weights and appended to
// the key/value set; the queries are the image tokens only.
class WindowAttentionImpl : public torch::nn::Module {
public:
    WindowAttentionImpl(int64_t dim, int64_t heads, int64_t window_size);

    // x, prompts: (Bw, N, C). mask: (nW, N, N) or undefined.
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& prompts, const torch::Tensor& mask,
                          int64_t window);

    int64_t dim() const { return dim_; }
    int64_t heads() const { return heads_; }
    torch::nn::Linear qkv{nullptr};
    torch::nn::Linear proj{nullptr};
    torch::Tensor bias_table;  // ((2w-1)^2, heads)

private:
    int64_t dim_;
    int64_t heads_;
    int64_t window_size_;
};
TORCH_MODULE(WindowAttention);

// Prompted Swin-Transformer block. With an undefined or empty prompt tensor it
// is a plain Swin block.
class SwinBlockImpl : public torch::nn::Module {
public:
    SwinBlockImpl(int64_t dim, int64_t heads, int64_t window_size, bool shifted, double mlp_ratio);

    // x: (B, H, W, C); prompts: (B, H, W, C) or undefined/empty.
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& prompts = {});

    bool shifted() const { return shifted_; }
    int64_t window_size() const { return window_size_; }

    torch::nn::LayerNorm norm1{nullptr};
    torch::nn::LayerNorm norm2{nullptr};
    WindowAttention attn{nullptr};
    torch::nn::Sequential mlp{nullptr};

private:
    int64_t dim_;
    int64_t window_size_;
    bool shifted_;
};
TORCH_MODULE(SwinBlock);

// A stack of blocks alternating regular and shifted windows, all receiving the
// same stage prompt block. Operates on channels-first feature maps.
class SwinStageImpl : public torch::nn::Module {
public:
    SwinStageImpl(int64_t dim, int64_t heads, int64_t window_size, int64_t depth, double mlp_ratio);

    // x: (B, C, H, W); prompts: (B, H, W, C) or undefined/empty.
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& prompts = {});

    torch::nn::ModuleList blocks{nullptr};
};
TORCH_MODULE(SwinStage);

bool has_prompts(const torch::Tensor& prompts);

}  // namespace ldic::model

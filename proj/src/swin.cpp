#include "ldic/swin.hpp"

#include "ldic/errors.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ldic::model {

namespace F = torch::nn::functional;

namespace {

std::string shape_str(const torch::Tensor& t) {
    std::ostringstream os;
    os << t.sizes();
    return os.str();
}

}  // namespace

bool has_prompts(const torch::Tensor& prompts) {
    return prompts.defined() && prompts.numel() > 0;
}

WindowGeometry WindowGeometry::resolve(int64_t height, int64_t width, int64_t window_size, bool shifted) {
    WindowGeometry g;
    const int64_t extent = std::min(height, width);
    g.window = std::min(window_size, extent);
    g.shift = (shifted && extent > g.window) ? g.window / 2 : 0;
    g.padded_height = (height + g.window - 1) / g.window * g.window;
    g.padded_width = (width + g.window - 1) / g.window * g.window;
    return g;
}

torch::Tensor window_partition(const torch::Tensor& x, int64_t window) {
    const auto B = x.size(0), H = x.size(1), W = x.size(2), C = x.size(3);
    return x.view({B, H / window, window, W / window, window, C})
        .permute({0, 1, 3, 2, 4, 5})
        .reshape({-1, window * window, C});
}

torch::Tensor window_reverse(const torch::Tensor& windows, int64_t window, int64_t height, int64_t width) {
    const auto C = windows.size(2);
    const auto B = windows.size(0) / ((height / window) * (width / window));
    return windows.view({B, height / window, width / window, window, window, C})
        .permute({0, 1, 3, 2, 4, 5})
        .reshape({B, height, width, C});
}

torch::Tensor shifted_window_mask(const WindowGeometry& g) {
    const int64_t Hp = g.padded_height, Wp = g.padded_width, w = g.window, s = g.shift;
    auto regions = torch::zeros({1, Hp, Wp, 1}, torch::kFloat32);
    auto acc = regions.accessor<float, 4>();
    auto band = [w, s](int64_t i, int64_t n) { return i < n - w ? 0 : (i < n - s ? 1 : 2); };
    for (int64_t i = 0; i < Hp; ++i) {
        for (int64_t j = 0; j < Wp; ++j) {
            acc[0][i][j][0] = static_cast<float>(band(i, Hp) * 3 + band(j, Wp));
        }
    }
    auto ids = window_partition(regions, w).squeeze(-1);  // (nW, N)
    auto diff = ids.unsqueeze(1) - ids.unsqueeze(2);
    return torch::zeros_like(diff).masked_fill(diff != 0, -100.0f);
}

torch::Tensor relative_position_index(int64_t window, int64_t table_window) {
    const int64_t N = window * window;
    const int64_t side = 2 * table_window - 1;
    auto idx = torch::empty({N, N}, torch::kLong);
    auto a = idx.accessor<int64_t, 2>();
    for (int64_t p = 0; p < N; ++p) {
        for (int64_t q = 0; q < N; ++q) {
            const int64_t dy = p / window - q / window + table_window - 1;
            const int64_t dx = p % window - q % window + table_window - 1;
            a[p][q] = dy * side + dx;
        }
    }
    return idx;
}

WindowAttentionImpl::WindowAttentionImpl(int64_t dim, int64_t heads, int64_t window_size)
    : dim_(dim), heads_(heads), window_size_(window_size) {
    qkv = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
    proj = register_module("proj", torch::nn::Linear(dim, dim));
    const auto side = 2 * window_size - 1;
    bias_table = register_parameter("bias_table", torch::zeros({side * side, heads}));
    {
        torch::NoGradGuard no_grad;
        bias_table.normal_(0.0, 0.02).clamp_(-0.04, 0.04);
    }
}

torch::Tensor WindowAttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& prompts,
                                           const torch::Tensor& mask, int64_t window) {
    const auto Bw = x.size(0), N = x.size(1), C = x.size(2);
    const auto head_dim = C / heads_;
    auto split = [&](const torch::Tensor& t) {
        return qkv->forward(t).reshape({Bw, N, 3, heads_, head_dim}).permute({2, 0, 3, 1, 4});
    };
    auto parts = split(x);
    auto q = parts[0] * (1.0 / std::sqrt(static_cast<double>(head_dim)));
    auto k = parts[1];
    auto v = parts[2];

    auto bias = bias_table.index_select(0, relative_position_index(window, window_size_).flatten())
                    .view({N, N, heads_})
                    .permute({2, 0, 1});
    auto attn_mask = mask;
    if (has_prompts(prompts)) {
        auto prompt_parts = split(prompts);
        k = torch::cat({k, prompt_parts[1]}, 2);
        v = torch::cat({v, prompt_parts[2]}, 2);
        // A prompt token sits at the same window position as its image token,
        // so it inherits that token's relative bias and shift-mask entry.
        bias = torch::cat({bias, bias}, -1);
        if (attn_mask.defined()) {
            attn_mask = torch::cat({attn_mask, attn_mask}, -1);
        }
    }

    auto attn = torch::matmul(q, k.transpose(-2, -1)) + bias.unsqueeze(0);
    if (attn_mask.defined()) {
        const auto nW = attn_mask.size(0);
        const auto M = attn.size(-1);
        attn = (attn.view({Bw / nW, nW, heads_, N, M}) + attn_mask.unsqueeze(1).unsqueeze(0))
                   .view({Bw, heads_, N, M});
    }
    attn = torch::softmax(attn, -1);
    auto out = torch::matmul(attn, v).transpose(1, 2).reshape({Bw, N, C});
    return proj->forward(out);
}

SwinBlockImpl::SwinBlockImpl(int64_t dim, int64_t heads, int64_t window_size, bool shifted, double mlp_ratio)
    : dim_(dim), window_size_(window_size), shifted_(shifted) {
    norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    attn = register_module("attn", WindowAttention(dim, heads, window_size));
    norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    const auto hidden = std::max<int64_t>(1, static_cast<int64_t>(std::lround(dim * mlp_ratio)));
    mlp = register_module("mlp", torch::nn::Sequential(torch::nn::Linear(dim, hidden), torch::nn::GELU(),
                                                        torch::nn::Linear(hidden, dim)));
}

torch::Tensor SwinBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& prompts) {
    if (x.dim() != 4 || x.size(3) != dim_) {
        throw ConfigError("swin block of width " + std::to_string(dim_) + " got tokens " + shape_str(x));
    }
    const bool prompted = has_prompts(prompts);
    if (prompted && prompts.sizes() != x.sizes()) {
        throw ConfigError("prompt block " + shape_str(prompts) + " does not match token grid " + shape_str(x));
    }
    const auto H = x.size(1), W = x.size(2);
    const auto g = WindowGeometry::resolve(H, W, window_size_, shifted_);

    auto prepare = [&](const torch::Tensor& t) {
        auto h = norm1->forward(t);
        if (g.padded_height != H || g.padded_width != W) {
            h = F::pad(h, F::PadFuncOptions({0, 0, 0, g.padded_width - W, 0, g.padded_height - H}));
        }
        if (g.shift > 0) {
            h = torch::roll(h, {-g.shift, -g.shift}, {1, 2});
        }
        return window_partition(h, g.window);
    };

    auto windows = prepare(x);
    auto prompt_windows = prompted ? prepare(prompts) : torch::Tensor();
    auto mask = g.shift > 0 ? shifted_window_mask(g) : torch::Tensor();
    auto out = attn->forward(windows, prompt_windows, mask, g.window);
    out = window_reverse(out, g.window, g.padded_height, g.padded_width);
    if (g.shift > 0) {
        out = torch::roll(out, {g.shift, g.shift}, {1, 2});
    }
    if (g.padded_height != H || g.padded_width != W) {
        out = out.narrow(1, 0, H).narrow(2, 0, W);
    }
    auto h = x + out;
    return h + mlp->forward(norm2->forward(h));
}

SwinStageImpl::SwinStageImpl(int64_t dim, int64_t heads, int64_t window_size, int64_t depth, double mlp_ratio) {
    blocks = register_module("blocks", torch::nn::ModuleList());
    for (int64_t i = 0; i < depth; ++i) {
        blocks->push_back(SwinBlock(dim, heads, window_size, i % 2 == 1, mlp_ratio));
    }
}

torch::Tensor SwinStageImpl::forward(const torch::Tensor& x, const torch::Tensor& prompts) {
    auto h = x.permute({0, 2, 3, 1});
    for (const auto& block : *blocks) {
        h = block->as<SwinBlock>()->forward(h, prompts);
    }
    return h.permute({0, 3, 1, 2}).contiguous();
}

}  // namespace ldic::model

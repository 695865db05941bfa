#include "ldic/errors.hpp"
#include "ldic/swin.hpp"

#include <doctest.h>

#include <cmath>

using namespace ldic;
using namespace ldic::model;

namespace {

int64_t band(int64_t i, int64_t n, int64_t w, int64_t s) {
    return i < n - w ? 0 : (i < n - s ? 1 : 2);
}

// Token-by-token reference for one block, (1, H, W, C) double, H and W
// multiples of the window.
torch::Tensor naive_block(SwinBlock& blk, const torch::Tensor& x, const torch::Tensor& prompts) {
    const int64_t H = x.size(1), W = x.size(2), C = x.size(3);
    const auto& at = blk->attn;
    const int64_t heads = at->heads(), hd = C / heads;
    const int64_t ws = blk->window_size();
    const int64_t w = std::min({ws, H, W});
    const int64_t s = (blk->shifted() && std::min(H, W) > w) ? w / 2 : 0;

    auto ln = [&](const torch::Tensor& t) {
        return torch::layer_norm(t, {C}, blk->norm1->weight, blk->norm1->bias, 1e-5);
    };
    // Rolled grid: position (i, j) holds original token ((i + s) % H, (j + s) % W).
    auto src = torch::roll(ln(x), {-s, -s}, {1, 2})[0];
    const bool prompted = prompts.defined() && prompts.numel() > 0;
    torch::Tensor psrc = prompted ? torch::roll(ln(prompts), {-s, -s}, {1, 2})[0] : torch::Tensor();

    auto Wqkv = at->qkv->weight, bqkv = at->qkv->bias;
    auto proj = [&](const torch::Tensor& t, int part) {
        return torch::matmul(Wqkv.slice(0, part * C, (part + 1) * C), t) + bqkv.slice(0, part * C, (part + 1) * C);
    };
    auto out = torch::zeros({H, W, C}, torch::kFloat64);
    for (int64_t i = 0; i < H; ++i) {
        for (int64_t j = 0; j < W; ++j) {
            const int64_t wi = i / w * w, wj = j / w * w;
            auto q = proj(src[i][j], 0) / std::sqrt(static_cast<double>(hd));
            std::vector<torch::Tensor> keys, vals;
            std::vector<double> extra;
            std::vector<std::pair<int64_t, int64_t>> pos;
            for (int copy = 0; copy < (prompted ? 2 : 1); ++copy) {
                const auto& tok = copy == 0 ? src : psrc;
                for (int64_t a = wi; a < wi + w; ++a) {
                    for (int64_t b = wj; b < wj + w; ++b) {
                        keys.push_back(proj(tok[a][b], 1));
                        vals.push_back(proj(tok[a][b], 2));
                        const bool same = s == 0 || (band(i, H, w, s) == band(a, H, w, s) &&
                                                     band(j, W, w, s) == band(b, W, w, s));
                        extra.push_back(same ? 0.0 : -100.0);
                        pos.emplace_back(a, b);
                    }
                }
            }
            auto token = torch::zeros({C}, torch::kFloat64);
            for (int64_t h = 0; h < heads; ++h) {
                const auto qh = q.slice(0, h * hd, (h + 1) * hd);
                std::vector<double> logits;
                for (size_t k = 0; k < keys.size(); ++k) {
                    const int64_t dy = (i - wi) - (pos[k].first - wi) + ws - 1;
                    const int64_t dx = (j - wj) - (pos[k].second - wj) + ws - 1;
                    const double bias = at->bias_table[dy * (2 * ws - 1) + dx][h].item<double>();
                    logits.push_back(torch::dot(qh, keys[k].slice(0, h * hd, (h + 1) * hd)).item<double>() + bias +
                                     extra[k]);
                }
                const double mx = *std::max_element(logits.begin(), logits.end());
                double z = 0.0;
                for (double& l : logits) z += (l = std::exp(l - mx));
                for (size_t k = 0; k < keys.size(); ++k) {
                    token.slice(0, h * hd, (h + 1) * hd) += logits[k] / z * vals[k].slice(0, h * hd, (h + 1) * hd);
                }
            }
            out[i][j] = torch::matmul(at->proj->weight, token) + at->proj->bias;
        }
    }
    out = torch::roll(out, {s, s}, {0, 1}).unsqueeze(0);
    auto h = x + out;
    return h + blk->mlp->forward(torch::layer_norm(h, {C}, blk->norm2->weight, blk->norm2->bias, 1e-5));
}

SwinBlock make_block(int64_t dim, int64_t heads, int64_t window, bool shifted) {
    SwinBlock b(dim, heads, window, shifted, 2.0);
    b->to(torch::kFloat64);
    torch::NoGradGuard g;
    b->attn->bias_table.normal_(0.0, 0.5);
    return b;
}

}  // namespace

TEST_CASE("window geometry") {
    auto g = WindowGeometry::resolve(16, 16, 4, false);
    CHECK(g.window == 4);
    CHECK(g.windows() == 16);
    CHECK(g.shift == 0);
    auto s = WindowGeometry::resolve(16, 16, 4, true);
    CHECK(s.shift == 2);
    auto small = WindowGeometry::resolve(2, 3, 4, true);
    CHECK(small.window == 2);
    CHECK(small.shift == 0);
    CHECK(small.padded_width == 4);
}

TEST_CASE("window partition and reverse are inverses") {
    auto x = torch::randn({2, 8, 12, 5});
    auto w = window_partition(x, 4);
    CHECK(w.sizes() == torch::IntArrayRef({2 * 6, 16, 5}));
    CHECK(torch::equal(window_reverse(w, 4, 8, 12), x));
    // First window holds the top-left 4x4 patch in row-major order.
    CHECK(torch::equal(w[0][5], x[0][1][1]));
}

TEST_CASE("relative position index spans the table") {
    auto idx = relative_position_index(4, 4);
    CHECK(idx.min().item<int64_t>() == 0);
    CHECK(idx.max().item<int64_t>() == 48);
    CHECK(idx[0][0].item<int64_t>() == 24);
}

TEST_CASE("plain block matches the per-token reference") {
    torch::manual_seed(21);
    for (bool shifted : {false, true}) {
        auto blk = make_block(8, 2, 4, shifted);
        auto x = torch::randn({1, 8, 8, 8}, torch::kFloat64);
        torch::NoGradGuard g;
        auto fast = blk->forward(x);
        auto ref = naive_block(blk, x, {});
        CHECK(torch::allclose(fast, ref, 1e-9, 1e-9));
    }
}

TEST_CASE("prompted block matches the per-token reference") {
    torch::manual_seed(22);
    for (bool shifted : {false, true}) {
        auto blk = make_block(6, 3, 4, shifted);
        auto x = torch::randn({1, 8, 12, 6}, torch::kFloat64);
        auto p = torch::randn({1, 8, 12, 6}, torch::kFloat64);
        torch::NoGradGuard g;
        auto fast = blk->forward(x, p);
        auto ref = naive_block(blk, x, p);
        CHECK(torch::allclose(fast, ref, 1e-9, 1e-9));
        CHECK(!torch::allclose(fast, blk->forward(x), 1e-6, 1e-6));
    }
}

TEST_CASE("batched windows agree with one image at a time") {
    torch::manual_seed(23);
    auto blk = make_block(8, 2, 4, true);
    auto x = torch::randn({3, 8, 8, 8}, torch::kFloat64);
    auto p = torch::randn({3, 8, 8, 8}, torch::kFloat64);
    torch::NoGradGuard g;
    auto all = blk->forward(x, p);
    for (int64_t b = 0; b < 3; ++b) {
        CHECK(torch::allclose(all[b], blk->forward(x.slice(0, b, b + 1), p.slice(0, b, b + 1))[0], 1e-12, 1e-12));
    }
}

TEST_CASE("empty prompts reduce to a plain block") {
    torch::manual_seed(24);
    auto blk = make_block(8, 2, 4, true);
    auto x = torch::randn({1, 8, 8, 8}, torch::kFloat64);
    torch::NoGradGuard g;
    auto plain = blk->forward(x);
    CHECK(torch::equal(blk->forward(x, torch::Tensor()), plain));
    CHECK(torch::equal(blk->forward(x, torch::empty({0}, torch::kFloat64)), plain));
}

TEST_CASE("grids smaller than the window and non-multiples") {
    torch::manual_seed(25);
    auto blk = make_block(4, 1, 4, true);
    torch::NoGradGuard g;
    auto tiny = torch::randn({1, 2, 2, 4}, torch::kFloat64);
    CHECK(torch::allclose(blk->forward(tiny), naive_block(blk, tiny, {}), 1e-9, 1e-9));
    auto odd = blk->forward(torch::randn({1, 6, 10, 4}, torch::kFloat64));
    CHECK(odd.sizes() == torch::IntArrayRef({1, 6, 10, 4}));
    CHECK(torch::isfinite(odd).all().item<bool>());
}

TEST_CASE("width mismatches are configuration errors") {
    auto blk = make_block(8, 2, 4, false);
    CHECK_THROWS_AS(blk->forward(torch::randn({1, 8, 8, 6}, torch::kFloat64)), ConfigError);
    CHECK_THROWS_AS(blk->forward(torch::randn({1, 8, 8, 8}, torch::kFloat64), torch::randn({1, 8, 8, 6}, torch::kFloat64)),
                    ConfigError);
}

TEST_CASE("stage alternates regular and shifted blocks") {
    SwinStage st(8, 2, 4, 4, 2.0);
    REQUIRE(st->blocks->size() == 4);
    for (size_t i = 0; i < 4; ++i) {
        CHECK(st->blocks->at<SwinBlockImpl>(i).shifted() == (i % 2 == 1));
    }
    auto y = st->forward(torch::randn({2, 8, 16, 16}));
    CHECK(y.sizes() == torch::IntArrayRef({2, 8, 16, 16}));
}

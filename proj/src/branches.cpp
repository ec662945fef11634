#include "mmcp/branches.hpp"

#include <cmath>

#include "mmcp/common.hpp"

namespace mmcp::branches {

std::vector<std::pair<std::string, TensorPtr>> GeometryEncoderParams::named() const {
    return {{"conv1_w", conv1_w}, {"conv1_b", conv1_b}, {"conv2_w", conv2_w}, {"conv2_b", conv2_b}};
}

std::vector<std::pair<std::string, TensorPtr>> AppearanceEncoderParams::named() const {
    return {{"conv1_w", conv1_w}, {"conv1_b", conv1_b}, {"conv2_w", conv2_w},
            {"conv2_b", conv2_b}, {"conv3_w", conv3_w}, {"conv3_b", conv3_b},
            {"up_w", up_w},       {"up_b", up_b}};
}

std::vector<std::pair<std::string, TensorPtr>> AlignerParams::named() const {
    std::vector<std::pair<std::string, TensorPtr>> out;
    for (int b = 0; b < 3; ++b) {
        const auto& blk = blocks[b];
        const std::string prefix = "block" + std::to_string(b) + ".";
        out.emplace_back(prefix + "dw_w", blk.dw_w);
        out.emplace_back(prefix + "dw_b", blk.dw_b);
        out.emplace_back(prefix + "ln_gamma", blk.ln_gamma);
        out.emplace_back(prefix + "ln_beta", blk.ln_beta);
        out.emplace_back(prefix + "pw1_w", blk.pw1_w);
        out.emplace_back(prefix + "pw1_b", blk.pw1_b);
        out.emplace_back(prefix + "pw2_w", blk.pw2_w);
        out.emplace_back(prefix + "pw2_b", blk.pw2_b);
    }
    return out;
}

namespace {

TensorPtr conv_init(std::vector<int> shape, Rng& rng, double gain = 1.0) {
    double fan_in = 1.0;
    for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
    return randn(std::move(shape), rng, gain * std::sqrt(2.0 / fan_in), true);
}

}  // namespace

GeometryEncoderParams make_geometry_encoder(int c, Rng& rng) {
    GeometryEncoderParams p;
    p.c = c;
    // Raw raster counts run large; damp the first layer.
    p.conv1_w = conv_init({c, 5, 3, 3}, rng, 0.25);
    p.conv1_b = zeros({c}, true);
    p.conv2_w = conv_init({c, c, 3, 3}, rng);
    p.conv2_b = zeros({c}, true);
    return p;
}

AppearanceEncoderParams make_appearance_encoder(int c, Rng& rng) {
    if (c % 2 != 0) throw ContractError("appearance encoder: c must be even");
    AppearanceEncoderParams p;
    p.c = c;
    p.conv1_w = conv_init({c / 2, 3, 3, 3}, rng);
    p.conv1_b = zeros({c / 2}, true);
    p.conv2_w = conv_init({c, c / 2, 3, 3}, rng);
    p.conv2_b = zeros({c}, true);
    p.conv3_w = conv_init({c, c, 3, 3}, rng);
    p.conv3_b = zeros({c}, true);
    // Replication-style upsample init: all four taps of each (in, out) pair
    // start equal, so the fresh encoder is shift-equivariant at cell
    // granularity. Training unties the taps.
    p.up_w = zeros({c, c, 2, 2}, true);
    const double up_scale = std::sqrt(2.0 / c);
    for (int ci = 0; ci < c; ++ci)
        for (int k = 0; k < c; ++k) {
            const double v = rng.normal() * up_scale;
            for (int t = 0; t < 4; ++t)
                p.up_w->data[(static_cast<std::size_t>(ci) * c + k) * 4 + static_cast<std::size_t>(t)] = v;
        }
    p.up_b = zeros({c}, true);
    return p;
}

AlignerParams make_aligner(int c, Rng& rng) {
    AlignerParams p;
    p.c = c;
    for (int b = 0; b < 3; ++b) {
        auto& blk = p.blocks[b];
        blk.dw_w = randn({c, 7, 7}, rng, std::sqrt(2.0 / 49.0), true);
        blk.dw_b = zeros({c}, true);
        blk.ln_gamma = full({c}, 1.0, true);
        blk.ln_beta = zeros({c}, true);
        blk.pw1_w = conv_init({4 * c, c, 1, 1}, rng);
        blk.pw1_b = zeros({4 * c}, true);
        // Near-identity start: the residual path dominates at init.
        blk.pw2_w = conv_init({c, 4 * c, 1, 1}, rng, 0.1);
        blk.pw2_b = zeros({c}, true);
    }
    return p;
}

TensorPtr rasterize_geometry(const sim::GeometryObservation& obs, const BevGrid& grid) {
    const std::int64_t hw = static_cast<std::int64_t>(grid.h) * grid.w;
    auto raster = make_tensor({5, grid.h, grid.w});
    std::vector<int> counts(static_cast<std::size_t>(hw), 0);
    for (const auto& p : obs.points) {
        int i, j;
        if (!grid.locate(p[0], p[1], i, j)) continue;
        const std::int64_t cell = static_cast<std::int64_t>(i) * grid.w + j;
        counts[static_cast<std::size_t>(cell)] += 1;
        raster->data[hw + cell] += p[2];  // sums first, divided below
        raster->data[2 * hw + cell] = std::max(raster->data[2 * hw + cell], p[2]);
        raster->data[3 * hw + cell] += (p[0] - grid.cell_cx(j)) / grid.cell;
        raster->data[4 * hw + cell] += (p[1] - grid.cell_cy(i)) / grid.cell;
    }
    for (std::int64_t cell = 0; cell < hw; ++cell) {
        const int n = counts[static_cast<std::size_t>(cell)];
        raster->data[cell] = static_cast<double>(n);
        if (n > 0) {
            raster->data[hw + cell] /= n;
            raster->data[3 * hw + cell] /= n;
            raster->data[4 * hw + cell] /= n;
        }
    }
    return raster;
}

TensorPtr encode_geometry(const sim::GeometryObservation& obs,
                          const GeometryEncoderParams& enc, const BevGrid& grid) {
    auto raster = rasterize_geometry(obs, grid);
    auto h1 = gelu(conv2d(raster, enc.conv1_w, enc.conv1_b, 1, 1));
    return gelu(conv2d(h1, enc.conv2_w, enc.conv2_b, 1, 1));
}

TensorPtr encode_appearance(const sim::AppearanceObservation& obs,
                            const AppearanceEncoderParams& enc) {
    if (!obs.grid || obs.grid->rank() != 3 || obs.grid->dim(0) != 3)
        throw DimError("encode_appearance: observation grid must be [3,H,W]");
    auto h1 = gelu(conv2d(obs.grid, enc.conv1_w, enc.conv1_b, 2, 1));
    auto h2 = gelu(conv2d(h1, enc.conv2_w, enc.conv2_b, 1, 1));
    auto h3 = gelu(conv2d(h2, enc.conv3_w, enc.conv3_b, 1, 1));
    return conv_transpose2d(h3, enc.up_w, enc.up_b, 2);
}

namespace {

// LayerNorm over channels per spatial location.
TensorPtr channel_layer_norm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta) {
    const int c = x->dim(0), h = x->dim(1), w = x->dim(2);
    auto rows = transpose(reshape(x, {c, h * w}));     // [h*w, c]
    auto normed = layer_norm(rows, gamma, beta);
    return reshape(transpose(normed), {c, h, w});
}

}  // namespace

TensorPtr align(const TensorPtr& feature, const AlignerParams& aligner) {
    if (feature->rank() != 3 || feature->dim(0) != aligner.c)
        throw DimError("align: feature must be [c,H,W] with matching c");
    auto x = feature;
    for (int b = 0; b < 3; ++b) {
        const auto& blk = aligner.blocks[b];
        auto y = depthwise_conv2d(x, blk.dw_w, blk.dw_b);
        y = channel_layer_norm(y, blk.ln_gamma, blk.ln_beta);
        y = gelu(conv2d(y, blk.pw1_w, blk.pw1_b, 1, 0));
        y = conv2d(y, blk.pw2_w, blk.pw2_b, 1, 0);
        x = add(x, y);
    }
    return x;
}

}  // namespace mmcp::branches

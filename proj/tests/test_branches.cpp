#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mmcp/branches.hpp"
#include "oracles.hpp"

using namespace mmcp;
using namespace mmcp::branches;

namespace {

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    REQUIRE(a.size() == b.size());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("rasterize_geometry statistics") {
    BevGrid grid{8, 8, 1.0};

    SUBCASE("empty point set gives all-zero raster") {
        sim::GeometryObservation obs;
        auto r = rasterize_geometry(obs, grid);
        for (double v : r->data) CHECK(v == 0.0);
    }
    SUBCASE("single point sets count 1 in its cell only") {
        sim::GeometryObservation obs;
        obs.points.push_back({1.3, -2.2, 0.7});
        auto r = rasterize_geometry(obs, grid);
        int i, j;
        REQUIRE(grid.locate(1.3, -2.2, i, j));
        const int cell = i * 8 + j;
        for (int k = 0; k < 64; ++k)
            CHECK(r->data[static_cast<std::size_t>(k)] == (k == cell ? 1.0 : 0.0));
        CHECK(r->data[static_cast<std::size_t>(64 + cell)] == 0.7);   // mean z
        CHECK(r->data[static_cast<std::size_t>(128 + cell)] == 0.7);  // max z
        CHECK(r->data[static_cast<std::size_t>(192 + cell)] ==
              doctest::Approx((1.3 - grid.cell_cx(j)) / grid.cell));
        CHECK(r->data[static_cast<std::size_t>(256 + cell)] ==
              doctest::Approx((-2.2 - grid.cell_cy(i)) / grid.cell));
    }
    SUBCASE("random cloud matches a per-cell accumulation oracle exactly") {
        Rng rng(5);
        sim::GeometryObservation obs;
        for (int k = 0; k < 500; ++k)
            obs.points.push_back({rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(0, 2)});
        auto r = rasterize_geometry(obs, grid);
        std::vector<int> count(64, 0);
        std::vector<double> zsum(64, 0.0), zmax(64, 0.0), dxsum(64, 0.0), dysum(64, 0.0);
        for (const auto& p : obs.points) {
            int i, j;
            if (!grid.locate(p[0], p[1], i, j)) continue;
            const int cell = i * 8 + j;
            count[static_cast<std::size_t>(cell)]++;
            zsum[static_cast<std::size_t>(cell)] += p[2];
            zmax[static_cast<std::size_t>(cell)] = std::max(zmax[static_cast<std::size_t>(cell)], p[2]);
            dxsum[static_cast<std::size_t>(cell)] += (p[0] - grid.cell_cx(j)) / grid.cell;
            dysum[static_cast<std::size_t>(cell)] += (p[1] - grid.cell_cy(i)) / grid.cell;
        }
        for (int cell = 0; cell < 64; ++cell) {
            const int n = count[static_cast<std::size_t>(cell)];
            CHECK(r->data[static_cast<std::size_t>(cell)] == n);
            CHECK(r->data[static_cast<std::size_t>(64 + cell)] == (n ? zsum[static_cast<std::size_t>(cell)] / n : 0.0));
            CHECK(r->data[static_cast<std::size_t>(128 + cell)] == zmax[static_cast<std::size_t>(cell)]);
            CHECK(r->data[static_cast<std::size_t>(192 + cell)] == (n ? dxsum[static_cast<std::size_t>(cell)] / n : 0.0));
            CHECK(r->data[static_cast<std::size_t>(256 + cell)] == (n ? dysum[static_cast<std::size_t>(cell)] / n : 0.0));
        }
    }
}

TEST_CASE("encode_geometry: empty observation flows the zero raster through convs") {
    Rng rng(7);
    auto enc = make_geometry_encoder(8, rng);
    sim::GeometryObservation obs;
    BevGrid grid{8, 8, 1.0};
    auto f = encode_geometry(obs, enc, grid);
    CHECK(f->shape == std::vector<int>{8, 8, 8});
    // Zero raster, zero biases: everything stays zero.
    for (double v : f->data) CHECK(v == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("encode_appearance shapes and equivariance") {
    Rng rng(9);
    const int c = 8;
    auto enc = make_appearance_encoder(c, rng);

    SUBCASE("output shape matches the BEV grid") {
        sim::AppearanceObservation obs;
        obs.grid = randn({3, 32, 32}, rng);
        auto f = encode_appearance(obs, enc);
        CHECK(f->shape == std::vector<int>{c, 32, 32});
    }
    SUBCASE("constant input gives spatially constant interior output") {
        sim::AppearanceObservation obs;
        obs.grid = full({3, 32, 32}, 0.4);
        auto f = encode_appearance(obs, enc);
        // Interior = cells the padded borders cannot reach through the
        // stride-2 conv stack (3 contaminated cells per side at half res).
        const int H = 32, W = 32;
        const double ref = f->data[static_cast<std::size_t>(0 * H * W + 15 * W + 15)];
        for (int i = 8; i < 24; ++i)
            for (int j = 8; j < 24; ++j)
                CHECK(f->data[static_cast<std::size_t>(0 * H * W + i * W + j)] ==
                      doctest::Approx(ref).epsilon(1e-12));
    }
    SUBCASE("translating the input by 2 cells translates interior features by 2 cells") {
        sim::AppearanceObservation obs;
        obs.grid = randn({3, 16, 16}, rng);
        sim::AppearanceObservation shifted;
        shifted.grid = zeros({3, 16, 16});
        for (int ch = 0; ch < 3; ++ch)
            for (int i = 0; i < 14; ++i)
                for (int j = 0; j < 14; ++j)
                    shifted.grid->data[static_cast<std::size_t>(ch * 256 + (i + 2) * 16 + j + 2)] =
                        obs.grid->data[static_cast<std::size_t>(ch * 256 + i * 16 + j)];
        auto fa = encode_appearance(obs, enc);
        auto fb = encode_appearance(shifted, enc);
        double worst = 0.0;
        for (int ch = 0; ch < 8; ++ch)
            for (int i = 4; i < 10; ++i)
                for (int j = 4; j < 10; ++j)
                    worst = std::max(worst,
                                     std::abs(fb->data[static_cast<std::size_t>(ch * 256 + (i + 2) * 16 + j + 2)] -
                                              fa->data[static_cast<std::size_t>(ch * 256 + i * 16 + j)]));
        CHECK(worst < 1e-9);
    }
}

TEST_CASE("aligner") {
    Rng rng(11);
    const int c = 6;

    SUBCASE("zero-initialized pointwise-reduce weights make it the exact identity") {
        auto al = make_aligner(c, rng);
        for (auto& blk : al.blocks) {
            std::fill(blk.pw2_w->data.begin(), blk.pw2_w->data.end(), 0.0);
            std::fill(blk.pw2_b->data.begin(), blk.pw2_b->data.end(), 0.0);
        }
        auto x = randn({c, 5, 5}, rng);
        auto y = align(x, al);
        CHECK(max_abs_diff(y->data, x->data) == 0.0);
    }
    SUBCASE("shape in equals shape out, and calls are pure") {
        auto al = make_aligner(c, rng);
        auto x = randn({c, 7, 9}, rng);
        auto y1 = align(x, al);
        auto y2 = align(x, al);
        CHECK(y1->shape == x->shape);
        CHECK(max_abs_diff(y1->data, y2->data) == 0.0);
    }
    SUBCASE("matches a block-by-block oracle") {
        auto al = make_aligner(c, rng);
        const int H = 5, W = 4, hw = H * W;
        auto x = randn({c, H, W}, rng);
        // Oracle: plain loops per block.
        std::vector<double> cur = x->data;
        for (int b = 0; b < 3; ++b) {
            const auto& blk = al.blocks[b];
            auto dw = oracle::depthwise_conv2d(cur, blk.dw_w->data, blk.dw_b->data, c, H, W, 7, 7);
            // LayerNorm over channels per location.
            std::vector<double> ln(dw.size());
            for (int cell = 0; cell < hw; ++cell) {
                std::vector<double> token(static_cast<std::size_t>(c));
                for (int ch = 0; ch < c; ++ch) token[static_cast<std::size_t>(ch)] = dw[static_cast<std::size_t>(ch * hw + cell)];
                auto out = oracle::layer_norm(token, blk.ln_gamma->data, blk.ln_beta->data, 1, c, 1e-5);
                for (int ch = 0; ch < c; ++ch) ln[static_cast<std::size_t>(ch * hw + cell)] = out[static_cast<std::size_t>(ch)];
            }
            // pw1 + gelu + pw2 + residual.
            std::vector<double> hidden(static_cast<std::size_t>(4 * c) * hw);
            for (int k = 0; k < 4 * c; ++k)
                for (int cell = 0; cell < hw; ++cell) {
                    double s = blk.pw1_b->data[static_cast<std::size_t>(k)];
                    for (int ch = 0; ch < c; ++ch)
                        s += blk.pw1_w->data[static_cast<std::size_t>(k * c + ch)] * ln[static_cast<std::size_t>(ch * hw + cell)];
                    const double u = 0.7978845608028653559 * (s + 0.044715 * s * s * s);
                    hidden[static_cast<std::size_t>(k * hw + cell)] = 0.5 * s * (1.0 + std::tanh(u));
                }
            std::vector<double> next(cur.size());
            for (int ch = 0; ch < c; ++ch)
                for (int cell = 0; cell < hw; ++cell) {
                    double s = blk.pw2_b->data[static_cast<std::size_t>(ch)];
                    for (int k = 0; k < 4 * c; ++k)
                        s += blk.pw2_w->data[static_cast<std::size_t>(ch * 4 * c + k)] * hidden[static_cast<std::size_t>(k * hw + cell)];
                    next[static_cast<std::size_t>(ch * hw + cell)] = cur[static_cast<std::size_t>(ch * hw + cell)] + s;
                }
            cur = std::move(next);
        }
        auto y = align(x, al);
        CHECK(max_abs_diff(y->data, cur) < 1e-10);
    }
}

TEST_CASE("both branches emit the same feature shape") {
    Rng rng(13);
    const int c = 8;
    auto genc = make_geometry_encoder(c, rng);
    auto aenc = make_appearance_encoder(c, rng);
    BevGrid grid{16, 16, 1.6};

    sim::SceneSpec spec;
    spec.extent = 12.8;
    auto scene = sim::generate_scene(3, spec);
    Rng render_rng(1);
    auto gobs = sim::render_geometry(scene, 0, 256, 0.0, sim::GeometrySensor{}, render_rng);
    sim::AppearanceSensor asensor;
    asensor.h = 16;
    asensor.w = 16;
    auto aobs = sim::render_appearance(scene, 0, 1, 0.05, asensor, render_rng);

    auto zg = encode_geometry(gobs, genc, grid);
    auto za = encode_appearance(aobs, aenc);
    CHECK(zg->shape == za->shape);
    CHECK(zg->shape == std::vector<int>{c, 16, 16});
}

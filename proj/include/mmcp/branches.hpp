#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mmcp/box.hpp"
#include "mmcp/rng.hpp"
#include "mmcp/scene.hpp"
#include "mmcp/tensor.hpp"

namespace mmcp::branches {

// Geometry branch: pillar-style raster statistics followed by two 3x3
// conv+GELU layers to c channels. The raster stage has no learned
// parameters. Channels: count, mean z, max z, mean in-cell x offset, mean
// in-cell y offset (offsets in cell units; sub-cell position is what lets
// the regression head localize below grid resolution).
struct GeometryEncoderParams {
    int c = 0;
    TensorPtr conv1_w, conv1_b;  // [c,5,3,3]
    TensorPtr conv2_w, conv2_b;  // [c,c,3,3]
    std::vector<std::pair<std::string, TensorPtr>> named() const;
};

// Appearance branch: three conv+GELU layers (3 -> c/2 -> c -> c) with one
// stride-2 stage, then a stride-2 transposed conv back to H x W.
struct AppearanceEncoderParams {
    int c = 0;
    TensorPtr conv1_w, conv1_b;  // [c/2,3,3,3], stride 2
    TensorPtr conv2_w, conv2_b;  // [c,c/2,3,3]
    TensorPtr conv3_w, conv3_b;  // [c,c,3,3]
    TensorPtr up_w, up_b;        // [c,c,2,2], transposed, stride 2
    std::vector<std::pair<std::string, TensorPtr>> named() const;
};

// Per-modality aligner: 3 residual blocks of
// depthwise 7x7 -> LayerNorm over channels -> 1x1 c->4c -> GELU -> 1x1 4c->c.
struct AlignerParams {
    int c = 0;
    struct Block {
        TensorPtr dw_w, dw_b;      // [c,7,7]
        TensorPtr ln_gamma, ln_beta;
        TensorPtr pw1_w, pw1_b;    // [4c,c,1,1]
        TensorPtr pw2_w, pw2_b;    // [c,4c,1,1]
    };
    Block blocks[3];
    std::vector<std::pair<std::string, TensorPtr>> named() const;
};

GeometryEncoderParams make_geometry_encoder(int c, Rng& rng);
AppearanceEncoderParams make_appearance_encoder(int c, Rng& rng);
AlignerParams make_aligner(int c, Rng& rng);

// Per-cell point statistics: channel 0 = count, 1 = mean z, 2 = max z,
// 3 = mean x offset from the cell center, 4 = mean y offset (cell units).
TensorPtr rasterize_geometry(const sim::GeometryObservation& obs, const BevGrid& grid);

TensorPtr encode_geometry(const sim::GeometryObservation& obs,
                          const GeometryEncoderParams& enc, const BevGrid& grid);
TensorPtr encode_appearance(const sim::AppearanceObservation& obs,
                            const AppearanceEncoderParams& enc);
TensorPtr align(const TensorPtr& feature, const AlignerParams& aligner);

}  // namespace mmcp::branches

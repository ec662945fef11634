#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mmcp/rng.hpp"
#include "mmcp/tensor.hpp"

namespace mmcp::lamma {

// Length-adaptive multimodal fusion. One parameter copy serves any number of
// modalities; the query/key/value projections are shared, so the operator
// degrades to plain self-attention when a single modality is present.
struct Params {
    int c = 0, d = 0, heads = 0, stride = 1;

    TensorPtr pos;                     // [c], added to every token of every modality
    TensorPtr w_p;                     // [d, c]
    TensorPtr w_q, w_k, w_v;           // [d, d], shared by all modalities
    TensorPtr w_out;                   // [c, d]
    TensorPtr ln1_gamma, ln1_beta;     // [d]
    TensorPtr ln2_gamma, ln2_beta;     // [d]
    TensorPtr mlp_w1, mlp_b1;          // [2d, d], [2d]
    TensorPtr mlp_w2, mlp_b2;          // [d, 2d], [d]
    TensorPtr proj_w, proj_b;          // [c, c, 3, 3], [c]; stride `stride`, pad 1
    TensorPtr proj_inv_w, proj_inv_b;  // [c, c, stride, stride], [c]; exact s-times upsample

    std::vector<std::pair<std::string, TensorPtr>> named() const;
};

Params make_params(int c, int d, int heads, int stride, Rng& rng);

struct ModalityFeature {
    std::string tag;
    TensorPtr feature;  // [c, n]
};

// Ordered, non-empty collection of aligned per-modality token features.
struct ModalitySet {
    std::vector<ModalityFeature> entries;
};

struct ForwardResult {
    TensorPtr output;                 // [c, n]
    std::vector<TensorPtr> z_att;     // per modality, [M*n, d], post residual+LayerNorm
    std::vector<TensorPtr> z_fused;   // per modality, [n, d], post split-sum
};

// Algorithm: add the positional encoding to every token, project c->d,
// concatenate all modalities along tokens, build one shared query over the
// concatenation, then per modality attend (self- plus cross-attention in one
// pass), residual+LayerNorm, MLP+residual+LayerNorm, split the token axis back
// into M chunks and sum, finally sum over modalities and project d->c.
ForwardResult lamma_forward(const ModalitySet& set, const Params& p);

// BEV <-> token conversion around the fusion core. project_tokens compresses
// [c,H,W] by `stride` and flattens to [c, n]; restore_tokens is its exact
// spatial inverse.
TensorPtr project_tokens(const TensorPtr& bev, const Params& p);
TensorPtr restore_tokens(const TensorPtr& tokens, const Params& p, int H, int W);

// With probability p_drop removes one uniformly chosen entry. Never returns
// an empty set: single-entry inputs pass through unchanged.
ModalitySet drop_modality(const ModalitySet& set, Rng& rng, double p_drop);

}  // namespace mmcp::lamma

#include "mmcp/lamma.hpp"

#include <cmath>
#include <set>

#include "mmcp/common.hpp"

namespace mmcp::lamma {

std::vector<std::pair<std::string, TensorPtr>> Params::named() const {
    return {
        {"pos", pos},           {"w_p", w_p},
        {"w_q", w_q},           {"w_k", w_k},
        {"w_v", w_v},           {"w_out", w_out},
        {"ln1_gamma", ln1_gamma}, {"ln1_beta", ln1_beta},
        {"ln2_gamma", ln2_gamma}, {"ln2_beta", ln2_beta},
        {"mlp_w1", mlp_w1},     {"mlp_b1", mlp_b1},
        {"mlp_w2", mlp_w2},     {"mlp_b2", mlp_b2},
        {"proj_w", proj_w},     {"proj_b", proj_b},
        {"proj_inv_w", proj_inv_w}, {"proj_inv_b", proj_inv_b},
    };
}

Params make_params(int c, int d, int heads, int stride, Rng& rng) {
    if (d % heads != 0) throw ContractError("lamma: d must be divisible by heads");
    if (stride < 1) throw ContractError("lamma: stride must be >= 1");
    Params p;
    p.c = c;
    p.d = d;
    p.heads = heads;
    p.stride = stride;
    const double sc = 1.0 / std::sqrt(static_cast<double>(c));
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    p.pos = randn({c}, rng, 0.02, true);
    p.w_p = randn({d, c}, rng, sc, true);
    p.w_q = randn({d, d}, rng, sd, true);
    p.w_k = randn({d, d}, rng, sd, true);
    p.w_v = randn({d, d}, rng, sd, true);
    p.w_out = randn({c, d}, rng, sd, true);
    p.ln1_gamma = full({d}, 1.0, true);
    p.ln1_beta = zeros({d}, true);
    p.ln2_gamma = full({d}, 1.0, true);
    p.ln2_beta = zeros({d}, true);
    p.mlp_w1 = randn({2 * d, d}, rng, sd, true);
    p.mlp_b1 = zeros({2 * d}, true);
    p.mlp_w2 = randn({d, 2 * d}, rng, 1.0 / std::sqrt(2.0 * d), true);
    p.mlp_b2 = zeros({d}, true);
    p.proj_w = randn({c, c, 3, 3}, rng, std::sqrt(2.0 / (9.0 * c)), true);
    p.proj_b = zeros({c}, true);
    p.proj_inv_w = randn({c, c, stride, stride}, rng, sc, true);
    p.proj_inv_b = zeros({c}, true);
    return p;
}

namespace {

void validate_set(const ModalitySet& set) {
    if (set.entries.empty()) throw ContractError("lamma: empty modality set");
    std::set<std::string> tags;
    const auto& shape0 = set.entries.front().feature->shape;
    for (const auto& e : set.entries) {
        if (e.feature->rank() != 2)
            throw DimError("lamma: modality feature must be [c, n]");
        if (e.feature->shape != shape0)
            throw DimError("lamma: modality features must share shape, got " +
                           shape_str(e.feature->shape) + " vs " + shape_str(shape0));
        if (!tags.insert(e.tag).second)
            throw ContractError("lamma: duplicate modality tag '" + e.tag + "'");
    }
}

}  // namespace

ForwardResult lamma_forward(const ModalitySet& set, const Params& p) {
    validate_set(set);
    const int M = static_cast<int>(set.entries.size());
    const int c = set.entries.front().feature->dim(0);
    if (c != p.c) throw DimError("lamma: feature channels do not match params");

    // Positional encoding and c->d projection, token-major.
    std::vector<TensorPtr> projected;
    projected.reserve(static_cast<std::size_t>(M));
    for (const auto& e : set.entries) {
        auto tokens = add_vec(transpose(e.feature), p.pos);      // [n, c]
        projected.push_back(matmul(tokens, p.w_p, false, true));  // [n, d]
    }
    auto z_concat = M == 1 ? projected[0] : concat(projected, 0);  // [M*n, d]
    auto q = matmul(z_concat, p.w_q, false, true);                 // [M*n, d]

    ForwardResult r;
    TensorPtr acc;
    for (int m = 0; m < M; ++m) {
        auto k = matmul(projected[static_cast<std::size_t>(m)], p.w_k, false, true);
        auto v = matmul(projected[static_cast<std::size_t>(m)], p.w_v, false, true);
        auto att = multihead_attention(q, k, v, p.heads);
        att = layer_norm(add(att, z_concat), p.ln1_gamma, p.ln1_beta);
        auto hidden = gelu(add_vec(matmul(att, p.mlp_w1, false, true), p.mlp_b1));
        auto mlp_out = add_vec(matmul(hidden, p.mlp_w2, false, true), p.mlp_b2);
        auto fused = layer_norm(add(mlp_out, att), p.ln2_gamma, p.ln2_beta);
        auto zf = split_sum(fused, M);  // [n, d]
        r.z_att.push_back(att);
        r.z_fused.push_back(zf);
        acc = acc ? add(acc, zf) : zf;
    }
    r.output = transpose(matmul(acc, p.w_out, false, true));  // [c, n]
    return r;
}

TensorPtr project_tokens(const TensorPtr& bev, const Params& p) {
    if (bev->rank() != 3 || bev->dim(0) != p.c)
        throw DimError("project_tokens: input must be [c,H,W] with matching c");
    const int H = bev->dim(1), W = bev->dim(2);
    if (H % p.stride != 0 || W % p.stride != 0)
        throw DimError("project_tokens: spatial dims must be divisible by stride");
    auto y = conv2d(bev, p.proj_w, p.proj_b, p.stride, 1);
    return reshape(y, {p.c, y->dim(1) * y->dim(2)});
}

TensorPtr restore_tokens(const TensorPtr& tokens, const Params& p, int H, int W) {
    if (tokens->rank() != 2 || tokens->dim(0) != p.c)
        throw DimError("restore_tokens: input must be [c, n] with matching c");
    const int h = H / p.stride, w = W / p.stride;
    if (h * w != tokens->dim(1))
        throw DimError("restore_tokens: token count does not match target size");
    auto grid = reshape(tokens, {p.c, h, w});
    return conv_transpose2d(grid, p.proj_inv_w, p.proj_inv_b, p.stride);
}

ModalitySet drop_modality(const ModalitySet& set, Rng& rng, double p_drop) {
    if (set.entries.empty()) throw ContractError("drop_modality: empty set");
    ModalitySet out = set;
    if (set.entries.size() < 2) return out;
    if (rng.uniform() < p_drop) {
        const auto victim = rng.uniform_index(set.entries.size());
        out.entries.erase(out.entries.begin() + static_cast<std::ptrdiff_t>(victim));
    }
    return out;
}

}  // namespace mmcp::lamma

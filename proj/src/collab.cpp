#include "mmcp/collab.hpp"

#include <cmath>

#include "mmcp/common.hpp"

namespace mmcp::collab {

TensorPtr att_fuse(const std::vector<TensorPtr>& stack) {
    if (stack.empty()) throw ContractError("att_fuse: empty agent stack");
    const auto& shape = stack.front()->shape;
    if (shape.size() != 3) throw DimError("att_fuse: features must be [c,H,W]");
    for (const auto& f : stack)
        if (f->shape != shape)
            throw DimError("att_fuse: all agent features must share shape, got " +
                           shape_str(f->shape) + " vs " + shape_str(shape));

    const int n = static_cast<int>(stack.size());
    const int c = shape[0];
    const std::int64_t hw = static_cast<std::int64_t>(shape[1]) * shape[2];
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(c));

    auto out = std::make_shared<Tensor>();
    out->shape = shape;
    out->data.assign(stack.front()->data.size(), 0.0);
    for (const auto& f : stack)
        if (f->requires_grad) out->requires_grad = true;

    // Attention probabilities per cell are kept for the backward pass.
    auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * hw);
    std::vector<double> scores(static_cast<std::size_t>(n));
    for (std::int64_t cell = 0; cell < hw; ++cell) {
        double mx = -1e300;
        for (int a = 0; a < n; ++a) {
            double dot = 0.0;
            for (int ch = 0; ch < c; ++ch)
                dot += stack[0]->data[ch * hw + cell] *
                       stack[static_cast<std::size_t>(a)]->data[ch * hw + cell];
            scores[static_cast<std::size_t>(a)] = dot * inv_scale;
            mx = std::max(mx, scores[static_cast<std::size_t>(a)]);
        }
        double denom = 0.0;
        for (int a = 0; a < n; ++a) {
            const double e = std::exp(scores[static_cast<std::size_t>(a)] - mx);
            (*probs)[static_cast<std::size_t>(a) * hw + cell] = e;
            denom += e;
        }
        for (int a = 0; a < n; ++a) {
            const double p = (*probs)[static_cast<std::size_t>(a) * hw + cell] / denom;
            (*probs)[static_cast<std::size_t>(a) * hw + cell] = p;
            for (int ch = 0; ch < c; ++ch)
                out->data[ch * hw + cell] += p * stack[static_cast<std::size_t>(a)]->data[ch * hw + cell];
        }
    }
    check_finite(*out, "att_fuse");

    if (out->requires_grad) {
        out->parents = stack;
        auto agents = stack;
        out->backward_fn = [agents, probs, n, c, hw, inv_scale](Tensor& o) {
            for (auto& a : agents)
                if (a->requires_grad) a->ensure_grad();
            std::vector<double> dp(static_cast<std::size_t>(n)), ds(static_cast<std::size_t>(n));
            for (std::int64_t cell = 0; cell < hw; ++cell) {
                double dot_pd = 0.0;
                for (int a = 0; a < n; ++a) {
                    double d = 0.0;
                    for (int ch = 0; ch < c; ++ch)
                        d += o.grad[ch * hw + cell] * agents[static_cast<std::size_t>(a)]->data[ch * hw + cell];
                    dp[static_cast<std::size_t>(a)] = d;
                    dot_pd += (*probs)[static_cast<std::size_t>(a) * hw + cell] * d;
                }
                for (int a = 0; a < n; ++a)
                    ds[static_cast<std::size_t>(a)] = (*probs)[static_cast<std::size_t>(a) * hw + cell] *
                                                      (dp[static_cast<std::size_t>(a)] - dot_pd);
                for (int ch = 0; ch < c; ++ch) {
                    const double go = o.grad[ch * hw + cell];
                    const double z0 = agents[0]->data[ch * hw + cell];
                    double dz0_query = 0.0;
                    for (int a = 0; a < n; ++a) {
                        auto& za = agents[static_cast<std::size_t>(a)];
                        const double pa = (*probs)[static_cast<std::size_t>(a) * hw + cell];
                        if (za->requires_grad)
                            za->grad[ch * hw + cell] +=
                                pa * go + ds[static_cast<std::size_t>(a)] * z0 * inv_scale;
                        dz0_query += ds[static_cast<std::size_t>(a)] * za->data[ch * hw + cell];
                    }
                    if (agents[0]->requires_grad)
                        agents[0]->grad[ch * hw + cell] += dz0_query * inv_scale;
                }
            }
        };
    }
    return out;
}

BevFeature att_fuse(const std::vector<BevFeature>& stack) {
    std::vector<TensorPtr> tensors;
    tensors.reserve(stack.size());
    for (const auto& f : stack) tensors.push_back(f.t);
    BevFeature out = stack.front();
    out.t = att_fuse(tensors);
    out.modality = "fused";
    return out;
}

double comm_cost(int h, int w, int channels, int bits_per_value) {
    if (h <= 0 || w <= 0 || channels <= 0 || bits_per_value <= 0)
        throw ContractError("comm_cost: all arguments must be positive");
    return std::log2(static_cast<double>(h) * w * channels * bits_per_value / 8.0);
}

}  // namespace mmcp::collab

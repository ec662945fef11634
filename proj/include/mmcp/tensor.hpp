#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mmcp/common.hpp"
#include "mmcp/rng.hpp"

namespace mmcp {

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense row-major tensor of 64-bit floats with a reverse-mode gradient
// record. Nodes hold strong references to their parents, so a forward graph
// stays alive exactly as long as its outputs do. Tensors are immutable after
// construction except for gradient accumulation; a training step is
// single-threaded, read-only inference over frozen tensors may run
// concurrently.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // sized lazily, same length as data

    std::vector<TensorPtr> parents;
    std::function<void(Tensor&)> backward_fn;  // pulls grad of this node into parents

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
    }
};

std::int64_t numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

TensorPtr make_tensor(std::vector<int> shape, bool requires_grad = false);
TensorPtr make_tensor(std::vector<int> shape, std::vector<double> data,
                      bool requires_grad = false);
TensorPtr full(std::vector<int> shape, double value, bool requires_grad = false);
TensorPtr zeros(std::vector<int> shape, bool requires_grad = false);
TensorPtr randn(std::vector<int> shape, Rng& rng, double sigma = 1.0,
                bool requires_grad = false);

// Throws NonFiniteError if any element of t.data is NaN/Inf. Every op below
// runs this on its output; `where` names the offending op in the message.
void check_finite(const Tensor& t, const char* where);

// ---- elementwise ----
TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(const TensorPtr& a, double s);
TensorPtr gelu(const TensorPtr& x);
// x[..., D] + v[D], v broadcast over leading dims.
TensorPtr add_vec(const TensorPtr& x, const TensorPtr& v);

// ---- linear algebra ----
// op_a(a) x op_b(b) where op is optional transpose; a, b are rank-2.
TensorPtr matmul(const TensorPtr& a, const TensorPtr& b, bool trans_a = false,
                 bool trans_b = false);
TensorPtr transpose(const TensorPtr& x);  // rank-2

// ---- shape ----
TensorPtr reshape(const TensorPtr& x, std::vector<int> shape);
TensorPtr concat(const std::vector<TensorPtr>& xs, int axis);
TensorPtr slice(const TensorPtr& x, int axis, int start, int len);
std::vector<TensorPtr> split(const TensorPtr& x, int axis, int parts);

// ---- normalization / activations over an axis ----
TensorPtr softmax(const TensorPtr& x, int axis);
// Normalizes over the last dimension per "token", then applies gamma/beta.
TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                     double eps = 1e-5);

// ---- reductions ----
TensorPtr sum(const TensorPtr& x);
TensorPtr mean(const TensorPtr& x);

// ---- convolution (x: [C,H,W]) ----
// w: [K,C,kh,kw], b: [K]; standard cross-correlation, floor output size.
TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b, int stride,
                 int pad);
// w: [C,K,kh,kw], b: [K]; transpose of conv2d with padding 0,
// out = (in-1)*stride + k.
TensorPtr conv_transpose2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b,
                           int stride);
// w: [C,kh,kw], b: [C]; stride 1, same padding (odd kernel).
TensorPtr depthwise_conv2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b);

// ---- attention ----
// Tokens are rows: q [Tq,d], k/v [Tk,d]. Per-head scaled dot-product
// softmax(q_h k_h^T / sqrt(d/heads)) v_h, heads concatenated. No output
// projection here.
TensorPtr multihead_attention(const TensorPtr& q, const TensorPtr& k, const TensorPtr& v,
                              int heads);

// ---- structured ----
// x [T,d], T divisible by parts: split rows into `parts` contiguous chunks
// and sum them elementwise -> [T/parts, d].
TensorPtr split_sum(const TensorPtr& x, int parts);

// x [C,H,W] gathered through a per-cell source map (src cell index or -1 for
// zero fill), shared across channels. Used for rigid BEV warps.
TensorPtr gather_cells(const TensorPtr& x, const std::vector<int>& src_of_dst, int out_h,
                       int out_w);

// Reverse-mode sweep from a scalar loss. Populates .grad of every
// requires_grad tensor reachable from `loss`.
void backward(const TensorPtr& loss);

}  // namespace mmcp

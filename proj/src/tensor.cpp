#include "mmcp/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace mmcp {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

ECMap as_mat(const Tensor& t, int rows, int cols) {
    return ECMap(t.data.data(), rows, cols);
}

EMap as_mat_mut(std::vector<double>& v, int rows, int cols) {
    return EMap(v.data(), rows, cols);
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw DimError(msg);
}

bool any_grad(const std::vector<TensorPtr>& parents) {
    for (const auto& p : parents)
        if (p->requires_grad) return true;
    return false;
}

// Builds the output node: shape/data set by caller afterwards or passed here.
TensorPtr make_node(std::vector<int> shape, std::vector<TensorPtr> parents) {
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->data.assign(static_cast<std::size_t>(numel(t->shape)), 0.0);
    t->requires_grad = any_grad(parents);
    if (t->requires_grad) t->parents = std::move(parents);
    return t;
}

}  // namespace

std::int64_t numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw DimError("non-positive dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

TensorPtr make_tensor(std::vector<int> shape, bool requires_grad) {
    auto t = std::make_shared<Tensor>();
    t->data.assign(static_cast<std::size_t>(numel(shape)), 0.0);
    t->shape = std::move(shape);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr make_tensor(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    if (numel(shape) != static_cast<std::int64_t>(data.size()))
        throw DimError("data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->data = std::move(data);
    t->requires_grad = requires_grad;
    check_finite(*t, "make_tensor");
    return t;
}

TensorPtr full(std::vector<int> shape, double value, bool requires_grad) {
    auto t = make_tensor(std::move(shape), requires_grad);
    std::fill(t->data.begin(), t->data.end(), value);
    return t;
}

TensorPtr zeros(std::vector<int> shape, bool requires_grad) {
    return make_tensor(std::move(shape), requires_grad);
}

TensorPtr randn(std::vector<int> shape, Rng& rng, double sigma, bool requires_grad) {
    auto t = make_tensor(std::move(shape), requires_grad);
    for (auto& v : t->data) v = rng.normal() * sigma;
    return t;
}

void check_finite(const Tensor& t, const char* where) {
    // x * 0 is exactly zero for finite x and NaN otherwise; the summed probe
    // vectorizes where a per-element isfinite branch would not.
    double probe = 0.0;
    for (double v : t.data) probe += v * 0.0;
    if (probe != 0.0)
        throw NonFiniteError(std::string(where) + " produced a non-finite value");
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace {

TensorPtr binary_same_shape(const TensorPtr& a, const TensorPtr& b, const char* name) {
    require(a->shape == b->shape, std::string(name) + ": shape mismatch " +
                                      shape_str(a->shape) + " vs " + shape_str(b->shape));
    return make_node(a->shape, {a, b});
}

}  // namespace

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    auto out = binary_same_shape(a, b, "add");
    for (std::int64_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] + b->data[i];
    check_finite(*out, "add");
    if (out->requires_grad) {
        auto pa = a, pb = b;
        out->backward_fn = [pa, pb](Tensor& o) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::int64_t i = 0; i < o.size(); ++i) pa->grad[i] += o.grad[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::int64_t i = 0; i < o.size(); ++i) pb->grad[i] += o.grad[i];
            }
        };
    }
    return out;
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    auto out = binary_same_shape(a, b, "sub");
    for (std::int64_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] - b->data[i];
    check_finite(*out, "sub");
    if (out->requires_grad) {
        auto pa = a, pb = b;
        out->backward_fn = [pa, pb](Tensor& o) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::int64_t i = 0; i < o.size(); ++i) pa->grad[i] += o.grad[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::int64_t i = 0; i < o.size(); ++i) pb->grad[i] -= o.grad[i];
            }
        };
    }
    return out;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    auto out = binary_same_shape(a, b, "mul");
    for (std::int64_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] * b->data[i];
    check_finite(*out, "mul");
    if (out->requires_grad) {
        auto pa = a, pb = b;
        out->backward_fn = [pa, pb](Tensor& o) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::int64_t i = 0; i < o.size(); ++i) pa->grad[i] += o.grad[i] * pb->data[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::int64_t i = 0; i < o.size(); ++i) pb->grad[i] += o.grad[i] * pa->data[i];
            }
        };
    }
    return out;
}

TensorPtr scale(const TensorPtr& a, double s) {
    auto out = make_node(a->shape, {a});
    for (std::int64_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] * s;
    check_finite(*out, "scale");
    if (out->requires_grad) {
        auto pa = a;
        out->backward_fn = [pa, s](Tensor& o) {
            pa->ensure_grad();
            for (std::int64_t i = 0; i < o.size(); ++i) pa->grad[i] += o.grad[i] * s;
        };
    }
    return out;
}

namespace {

// Tanh-form GELU, evaluated with Eigen's vectorized exp. The backward pass
// uses the exact derivative of this same expression, so finite-difference
// checks line up to machine precision.
constexpr double kGeluScale = 0.7978845608028653559;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;

using EArr = Eigen::Array<double, Eigen::Dynamic, 1>;
using EArrMap = Eigen::Map<EArr>;
using EArrCMap = Eigen::Map<const EArr>;

}  // namespace

TensorPtr gelu(const TensorPtr& x) {
    auto out = make_node(x->shape, {x});
    auto tanh_u = std::make_shared<std::vector<double>>(x->data.size());
    {
        // Work in an Eigen-aligned scratch buffer: packet exp and scalar exp
        // differ by an ulp, and which elements take which path depends on the
        // buffer address. A fixed-alignment staging area keeps results
        // independent of where the tensor happens to live.
        const auto n = static_cast<Eigen::Index>(x->data.size());
        thread_local Eigen::ArrayXd scratch;
        scratch.resize(n);
        std::memcpy(scratch.data(), x->data.data(), sizeof(double) * x->data.size());
        // tanh(u) = 1 - 2 / (exp(2u) + 1), with u clamped where tanh saturates.
        scratch = (kGeluScale * (scratch + kGeluCubic * scratch.cube())).min(20.0).max(-20.0);
        scratch = 1.0 - 2.0 / ((2.0 * scratch).exp() + 1.0);
        std::memcpy(tanh_u->data(), scratch.data(), sizeof(double) * tanh_u->size());
        for (std::size_t i = 0; i < x->data.size(); ++i)
            out->data[i] = 0.5 * x->data[i] * (1.0 + (*tanh_u)[i]);
    }
    check_finite(*out, "gelu");
    if (out->requires_grad) {
        auto px = x;
        out->backward_fn = [px, tanh_u](Tensor& o) {
            px->ensure_grad();
            for (std::int64_t i = 0; i < o.size(); ++i) {
                const double v = px->data[i];
                const double t = (*tanh_u)[static_cast<std::size_t>(i)];
                const double du = kGeluScale * (1.0 + 3.0 * kGeluCubic * v * v);
                px->grad[i] += o.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
            }
        };
    }
    return out;
}

TensorPtr add_vec(const TensorPtr& x, const TensorPtr& v) {
    require(v->rank() == 1, "add_vec: v must be rank 1");
    require(x->rank() >= 1 && x->shape.back() == v->dim(0),
            "add_vec: last dim of x " + shape_str(x->shape) + " must match v " +
                shape_str(v->shape));
    auto out = make_node(x->shape, {x, v});
    const std::int64_t d = v->size();
    const std::int64_t rows = out->size() / d;
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < d; ++j)
            out->data[r * d + j] = x->data[r * d + j] + v->data[j];
    check_finite(*out, "add_vec");
    if (out->requires_grad) {
        auto px = x, pv = v;
        out->backward_fn = [px, pv, rows, d](Tensor& o) {
            if (px->requires_grad) {
                px->ensure_grad();
                for (std::int64_t i = 0; i < o.size(); ++i) px->grad[i] += o.grad[i];
            }
            if (pv->requires_grad) {
                pv->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t j = 0; j < d; ++j) pv->grad[j] += o.grad[r * d + j];
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b, bool trans_a, bool trans_b) {
    require(a->rank() == 2 && b->rank() == 2, "matmul: rank-2 operands required");
    const int am = trans_a ? a->dim(1) : a->dim(0);
    const int ak = trans_a ? a->dim(0) : a->dim(1);
    const int bk = trans_b ? b->dim(1) : b->dim(0);
    const int bn = trans_b ? b->dim(0) : b->dim(1);
    require(ak == bk, "matmul: inner dimensions disagree, " + shape_str(a->shape) +
                          (trans_a ? "^T" : "") + " x " + shape_str(b->shape) +
                          (trans_b ? "^T" : ""));

    auto out = make_node({am, bn}, {a, b});
    {
        ECMap A = as_mat(*a, a->dim(0), a->dim(1));
        ECMap B = as_mat(*b, b->dim(0), b->dim(1));
        EMap C = as_mat_mut(out->data, am, bn);
        if (!trans_a && !trans_b)
            C.noalias() = A * B;
        else if (trans_a && !trans_b)
            C.noalias() = A.transpose() * B;
        else if (!trans_a && trans_b)
            C.noalias() = A * B.transpose();
        else
            C.noalias() = A.transpose() * B.transpose();
    }
    check_finite(*out, "matmul");
    if (out->requires_grad) {
        auto pa = a, pb = b;
        out->backward_fn = [pa, pb, trans_a, trans_b, am, bn](Tensor& o) {
            ECMap dY(o.grad.data(), am, bn);
            ECMap A = as_mat(*pa, pa->dim(0), pa->dim(1));
            ECMap B = as_mat(*pb, pb->dim(0), pb->dim(1));
            if (pa->requires_grad) {
                pa->ensure_grad();
                EMap dA(pa->grad.data(), pa->dim(0), pa->dim(1));
                // d(op_a(A)) = dY * op_b(B)^T, then undo the transpose.
                if (!trans_a) {
                    if (!trans_b)
                        dA.noalias() += dY * B.transpose();
                    else
                        dA.noalias() += dY * B;
                } else {
                    if (!trans_b)
                        dA.noalias() += B * dY.transpose();
                    else
                        dA.noalias() += B.transpose() * dY.transpose();
                }
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                EMap dB(pb->grad.data(), pb->dim(0), pb->dim(1));
                if (!trans_b) {
                    if (!trans_a)
                        dB.noalias() += A.transpose() * dY;
                    else
                        dB.noalias() += A * dY;
                } else {
                    if (!trans_a)
                        dB.noalias() += dY.transpose() * A;
                    else
                        dB.noalias() += dY.transpose() * A.transpose();
                }
            }
        };
    }
    return out;
}

TensorPtr transpose(const TensorPtr& x) {
    require(x->rank() == 2, "transpose: rank-2 required");
    const int r = x->dim(0), c = x->dim(1);
    auto out = make_node({c, r}, {x});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out->data[static_cast<std::size_t>(j) * r + i] = x->data[static_cast<std::size_t>(i) * c + j];
    if (out->requires_grad) {
        auto px = x;
        out->backward_fn = [px, r, c](Tensor& o) {
            px->ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j)
                    px->grad[static_cast<std::size_t>(i) * c + j] += o.grad[static_cast<std::size_t>(j) * r + i];
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// shape
// ---------------------------------------------------------------------------

TensorPtr reshape(const TensorPtr& x, std::vector<int> shape) {
    require(numel(shape) == x->size(), "reshape: element count mismatch " +
                                           shape_str(x->shape) + " -> " + shape_str(shape));
    auto out = make_node(std::move(shape), {x});
    out->data = x->data;
    if (out->requires_grad) {
        auto px = x;
        out->backward_fn = [px](Tensor& o) {
            px->ensure_grad();
            for (std::int64_t i = 0; i < o.size(); ++i) px->grad[i] += o.grad[i];
        };
    }
    return out;
}

namespace {

// Collapses a shape around `axis` into (outer, axis, inner).
struct AxisView {
    std::int64_t outer = 1, n = 1, inner = 1;
};

AxisView axis_view(const std::vector<int>& shape, int axis) {
    AxisView v;
    for (int i = 0; i < static_cast<int>(shape.size()); ++i) {
        if (i < axis)
            v.outer *= shape[static_cast<std::size_t>(i)];
        else if (i == axis)
            v.n = shape[static_cast<std::size_t>(i)];
        else
            v.inner *= shape[static_cast<std::size_t>(i)];
    }
    return v;
}

}  // namespace

TensorPtr concat(const std::vector<TensorPtr>& xs, int axis) {
    require(!xs.empty(), "concat: empty input list");
    require(axis >= 0 && axis < xs[0]->rank(), "concat: axis out of range");
    std::vector<int> shape = xs[0]->shape;
    int total = 0;
    for (const auto& x : xs) {
        require(x->rank() == xs[0]->rank(), "concat: rank mismatch");
        for (int i = 0; i < x->rank(); ++i)
            require(i == axis || x->dim(i) == xs[0]->dim(i),
                    "concat: non-axis dimension mismatch");
        total += x->dim(axis);
    }
    shape[static_cast<std::size_t>(axis)] = total;

    auto out = make_node(shape, xs);
    const AxisView ov = axis_view(shape, axis);
    std::int64_t offset = 0;
    for (const auto& x : xs) {
        const AxisView xv = axis_view(x->shape, axis);
        for (std::int64_t o = 0; o < xv.outer; ++o) {
            const double* src = x->data.data() + o * xv.n * xv.inner;
            double* dst = out->data.data() + o * ov.n * ov.inner + offset * ov.inner;
            std::memcpy(dst, src, sizeof(double) * static_cast<std::size_t>(xv.n * xv.inner));
        }
        offset += xv.n;
    }
    if (out->requires_grad) {
        auto parts = xs;
        out->backward_fn = [parts, axis, ov](Tensor& o) {
            std::int64_t off = 0;
            for (const auto& x : parts) {
                const AxisView xv = axis_view(x->shape, axis);
                if (x->requires_grad) {
                    x->ensure_grad();
                    for (std::int64_t ou = 0; ou < xv.outer; ++ou) {
                        const double* src = o.grad.data() + ou * ov.n * ov.inner + off * ov.inner;
                        double* dst = x->grad.data() + ou * xv.n * xv.inner;
                        for (std::int64_t i = 0; i < xv.n * xv.inner; ++i) dst[i] += src[i];
                    }
                }
                off += xv.n;
            }
        };
    }
    return out;
}

TensorPtr slice(const TensorPtr& x, int axis, int start, int len) {
    require(axis >= 0 && axis < x->rank(), "slice: axis out of range");
    require(start >= 0 && len > 0 && start + len <= x->dim(axis), "slice: range out of bounds");
    std::vector<int> shape = x->shape;
    shape[static_cast<std::size_t>(axis)] = len;
    auto out = make_node(shape, {x});
    const AxisView xv = axis_view(x->shape, axis);
    for (std::int64_t o = 0; o < xv.outer; ++o) {
        const double* src = x->data.data() + (o * xv.n + start) * xv.inner;
        double* dst = out->data.data() + o * len * xv.inner;
        std::memcpy(dst, src, sizeof(double) * static_cast<std::size_t>(len) * static_cast<std::size_t>(xv.inner));
    }
    if (out->requires_grad) {
        auto px = x;
        out->backward_fn = [px, xv, start, len](Tensor& o) {
            px->ensure_grad();
            for (std::int64_t ou = 0; ou < xv.outer; ++ou) {
                const double* src = o.grad.data() + ou * len * xv.inner;
                double* dst = px->grad.data() + (ou * xv.n + start) * xv.inner;
                for (std::int64_t i = 0; i < len * xv.inner; ++i) dst[i] += src[i];
            }
        };
    }
    return out;
}

std::vector<TensorPtr> split(const TensorPtr& x, int axis, int parts) {
    require(parts > 0 && x->dim(axis) % parts == 0,
            "split: axis length not divisible by parts");
    const int len = x->dim(axis) / parts;
    std::vector<TensorPtr> out;
    out.reserve(static_cast<std::size_t>(parts));
    for (int p = 0; p < parts; ++p) out.push_back(slice(x, axis, p * len, len));
    return out;
}

// ---------------------------------------------------------------------------
// softmax / layer norm
// ---------------------------------------------------------------------------

TensorPtr softmax(const TensorPtr& x, int axis) {
    require(axis >= 0 && axis < x->rank(), "softmax: axis out of range");
    auto out = make_node(x->shape, {x});
    const AxisView v = axis_view(x->shape, axis);
    for (std::int64_t o = 0; o < v.outer; ++o) {
        for (std::int64_t in = 0; in < v.inner; ++in) {
            const std::int64_t base = o * v.n * v.inner + in;
            double mx = -1e300;
            for (std::int64_t i = 0; i < v.n; ++i) mx = std::max(mx, x->data[base + i * v.inner]);
            double denom = 0.0;
            for (std::int64_t i = 0; i < v.n; ++i) {
                const double e = std::exp(x->data[base + i * v.inner] - mx);
                out->data[base + i * v.inner] = e;
                denom += e;
            }
            for (std::int64_t i = 0; i < v.n; ++i) out->data[base + i * v.inner] /= denom;
        }
    }
    check_finite(*out, "softmax");
    if (out->requires_grad) {
        auto px = x;
        out->backward_fn = [px, v](Tensor& o) {
            px->ensure_grad();
            for (std::int64_t ou = 0; ou < v.outer; ++ou) {
                for (std::int64_t in = 0; in < v.inner; ++in) {
                    const std::int64_t base = ou * v.n * v.inner + in;
                    double dot = 0.0;
                    for (std::int64_t i = 0; i < v.n; ++i)
                        dot += o.grad[base + i * v.inner] * o.data[base + i * v.inner];
                    for (std::int64_t i = 0; i < v.n; ++i)
                        px->grad[base + i * v.inner] +=
                            o.data[base + i * v.inner] * (o.grad[base + i * v.inner] - dot);
                }
            }
        };
    }
    return out;
}

TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                     double eps) {
    require(gamma->rank() == 1 && beta->rank() == 1, "layer_norm: gamma/beta must be rank 1");
    require(x->shape.back() == gamma->dim(0) && x->shape.back() == beta->dim(0),
            "layer_norm: last dim " + shape_str(x->shape) + " must match gamma/beta");
    const std::int64_t d = gamma->size();
    const std::int64_t rows = x->size() / d;
    auto out = make_node(x->shape, {x, gamma, beta});
    // Cache per-token inverse std and normalized values for the backward pass.
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
    auto xhat = std::make_shared<std::vector<double>>(x->data.size());
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = x->data.data() + r * d;
        double m = 0.0;
        for (std::int64_t j = 0; j < d; ++j) m += xr[j];
        m /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t j = 0; j < d; ++j) var += (xr[j] - m) * (xr[j] - m);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<std::size_t>(r)] = is;
        for (std::int64_t j = 0; j < d; ++j) {
            const double xh = (xr[j] - m) * is;
            (*xhat)[static_cast<std::size_t>(r * d + j)] = xh;
            out->data[r * d + j] = gamma->data[j] * xh + beta->data[j];
        }
    }
    check_finite(*out, "layer_norm");
    if (out->requires_grad) {
        auto px = x, pg = gamma, pb = beta;
        out->backward_fn = [px, pg, pb, inv_std, xhat, rows, d](Tensor& o) {
            if (pg->requires_grad) pg->ensure_grad();
            if (pb->requires_grad) pb->ensure_grad();
            if (px->requires_grad) px->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* go = o.grad.data() + r * d;
                const double* xh = xhat->data() + r * d;
                if (pg->requires_grad)
                    for (std::int64_t j = 0; j < d; ++j) pg->grad[j] += go[j] * xh[j];
                if (pb->requires_grad)
                    for (std::int64_t j = 0; j < d; ++j) pb->grad[j] += go[j];
                if (px->requires_grad) {
                    double mean_g = 0.0, mean_gx = 0.0;
                    for (std::int64_t j = 0; j < d; ++j) {
                        const double g = go[j] * pg->data[j];
                        mean_g += g;
                        mean_gx += g * xh[j];
                    }
                    mean_g /= static_cast<double>(d);
                    mean_gx /= static_cast<double>(d);
                    const double is = (*inv_std)[static_cast<std::size_t>(r)];
                    for (std::int64_t j = 0; j < d; ++j) {
                        const double g = go[j] * pg->data[j];
                        px->grad[r * d + j] += is * (g - mean_g - xh[j] * mean_gx);
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

TensorPtr sum(const TensorPtr& x) {
    auto out = make_node({1}, {x});
    double s = 0.0;
    for (double v : x->data) s += v;
    out->data[0] = s;
    check_finite(*out, "sum");
    if (out->requires_grad) {
        auto px = x;
        out->backward_fn = [px](Tensor& o) {
            px->ensure_grad();
            for (auto& g : px->grad) g += o.grad[0];
        };
    }
    return out;
}

TensorPtr mean(const TensorPtr& x) {
    auto out = make_node({1}, {x});
    double s = 0.0;
    for (double v : x->data) s += v;
    const double inv_n = 1.0 / static_cast<double>(x->size());
    out->data[0] = s * inv_n;
    check_finite(*out, "mean");
    if (out->requires_grad) {
        auto px = x;
        out->backward_fn = [px, inv_n](Tensor& o) {
            px->ensure_grad();
            for (auto& g : px->grad) g += o.grad[0] * inv_n;
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

namespace {

// im2col: x [C,H,W] -> cols [(C*kh*kw) x (Ho*Wo)], zero padding.
void im2col(const double* x, int C, int H, int W, int kh, int kw, int stride, int pad,
            int Ho, int Wo, double* cols) {
    const std::int64_t col_w = static_cast<std::int64_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c) {
        for (int dy = 0; dy < kh; ++dy) {
            for (int dx = 0; dx < kw; ++dx) {
                double* row = cols + (static_cast<std::int64_t>(c) * kh * kw + dy * kw + dx) * col_w;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride + dy - pad;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride + dx - pad;
                        row[static_cast<std::int64_t>(oy) * Wo + ox] =
                            (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                ? x[(static_cast<std::int64_t>(c) * H + iy) * W + ix]
                                : 0.0;
                    }
                }
            }
        }
    }
}

// Scatter-add of cols back into x-shaped gradient.
void col2im_add(const double* cols, int C, int H, int W, int kh, int kw, int stride, int pad,
                int Ho, int Wo, double* dx) {
    const std::int64_t col_w = static_cast<std::int64_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c) {
        for (int dy = 0; dy < kh; ++dy) {
            for (int dx_ = 0; dx_ < kw; ++dx_) {
                const double* row =
                    cols + (static_cast<std::int64_t>(c) * kh * kw + dy * kw + dx_) * col_w;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride + dy - pad;
                    if (iy < 0 || iy >= H) continue;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride + dx_ - pad;
                        if (ix < 0 || ix >= W) continue;
                        dx[(static_cast<std::int64_t>(c) * H + iy) * W + ix] +=
                            row[static_cast<std::int64_t>(oy) * Wo + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b, int stride,
                 int pad) {
    require(x->rank() == 3, "conv2d: input must be [C,H,W]");
    require(w->rank() == 4, "conv2d: weight must be [K,C,kh,kw]");
    require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
    const int C = x->dim(0), H = x->dim(1), W = x->dim(2);
    const int K = w->dim(0), kh = w->dim(2), kw = w->dim(3);
    require(w->dim(1) == C, "conv2d: channel mismatch, input " + shape_str(x->shape) +
                                " vs weight " + shape_str(w->shape));
    require(b->rank() == 1 && b->dim(0) == K, "conv2d: bias must be [K]");
    require(H + 2 * pad >= kh && W + 2 * pad >= kw, "conv2d: kernel larger than padded input");
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;

    auto out = make_node({K, Ho, Wo}, {x, w, b});
    const std::int64_t ck = static_cast<std::int64_t>(C) * kh * kw;
    const std::int64_t hw = static_cast<std::int64_t>(Ho) * Wo;
    thread_local std::vector<double> cols;
    cols.resize(static_cast<std::size_t>(ck * hw));
    im2col(x->data.data(), C, H, W, kh, kw, stride, pad, Ho, Wo, cols.data());
    {
        ECMap Wm(w->data.data(), K, ck);
        ECMap Cm(cols.data(), ck, hw);
        EMap Ym(out->data.data(), K, static_cast<int>(hw));
        Ym.noalias() = Wm * Cm;
        for (int k = 0; k < K; ++k) Ym.row(k).array() += b->data[static_cast<std::size_t>(k)];
    }
    check_finite(*out, "conv2d");
    if (out->requires_grad) {
        auto px = x, pw = w, pb = b;
        out->backward_fn = [px, pw, pb, stride, pad, C, H, W, K, kh, kw, Ho, Wo, ck,
                            hw](Tensor& o) {
            ECMap dY(o.grad.data(), K, static_cast<int>(hw));
            // Recompute cols; cheaper than holding them in every graph node.
            thread_local std::vector<double> cols2;
            cols2.resize(static_cast<std::size_t>(ck * hw));
            im2col(px->data.data(), C, H, W, kh, kw, stride, pad, Ho, Wo, cols2.data());
            if (pw->requires_grad) {
                pw->ensure_grad();
                EMap dW(pw->grad.data(), K, ck);
                ECMap Cm(cols2.data(), ck, hw);
                dW.noalias() += dY * Cm.transpose();
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                // Fixed-order accumulation: Eigen reductions vary their
                // summation order with buffer alignment.
                for (int k = 0; k < K; ++k) {
                    const double* row = o.grad.data() + static_cast<std::int64_t>(k) * hw;
                    double s2 = 0.0;
                    for (std::int64_t i = 0; i < hw; ++i) s2 += row[i];
                    pb->grad[static_cast<std::size_t>(k)] += s2;
                }
            }
            if (px->requires_grad) {
                px->ensure_grad();
                thread_local std::vector<double> dcols;
                dcols.resize(static_cast<std::size_t>(ck * hw));
                EMap dC(dcols.data(), ck, hw);
                ECMap Wm(pw->data.data(), K, ck);
                dC.noalias() = Wm.transpose() * dY;
                col2im_add(dcols.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                           px->grad.data());
            }
        };
    }
    return out;
}

TensorPtr conv_transpose2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b,
                           int stride) {
    require(x->rank() == 3, "conv_transpose2d: input must be [C,H,W]");
    require(w->rank() == 4, "conv_transpose2d: weight must be [C,K,kh,kw]");
    require(stride >= 1, "conv_transpose2d: bad stride");
    const int C = x->dim(0), H = x->dim(1), W = x->dim(2);
    const int K = w->dim(1), kh = w->dim(2), kw = w->dim(3);
    require(w->dim(0) == C, "conv_transpose2d: channel mismatch, input " + shape_str(x->shape) +
                                " vs weight " + shape_str(w->shape));
    require(b->rank() == 1 && b->dim(0) == K, "conv_transpose2d: bias must be [K]");
    const int Ho = (H - 1) * stride + kh;
    const int Wo = (W - 1) * stride + kw;

    auto out = make_node({K, Ho, Wo}, {x, w, b});
    for (int k = 0; k < K; ++k) {
        double* yk = out->data.data() + static_cast<std::int64_t>(k) * Ho * Wo;
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(Ho) * Wo; ++i)
            yk[i] = b->data[static_cast<std::size_t>(k)];
    }
    for (int c = 0; c < C; ++c) {
        const double* xc = x->data.data() + static_cast<std::int64_t>(c) * H * W;
        for (int k = 0; k < K; ++k) {
            const double* wck =
                w->data.data() + (static_cast<std::int64_t>(c) * K + k) * kh * kw;
            double* yk = out->data.data() + static_cast<std::int64_t>(k) * Ho * Wo;
            for (int iy = 0; iy < H; ++iy) {
                for (int ix = 0; ix < W; ++ix) {
                    const double v = xc[static_cast<std::int64_t>(iy) * W + ix];
                    if (v == 0.0) continue;
                    double* ybase = yk + static_cast<std::int64_t>(iy) * stride * Wo + ix * stride;
                    for (int dy = 0; dy < kh; ++dy)
                        for (int dx = 0; dx < kw; ++dx)
                            ybase[static_cast<std::int64_t>(dy) * Wo + dx] += v * wck[dy * kw + dx];
                }
            }
        }
    }
    check_finite(*out, "conv_transpose2d");
    if (out->requires_grad) {
        auto px = x, pw = w, pb = b;
        out->backward_fn = [px, pw, pb, stride, C, H, W, K, kh, kw, Ho, Wo](Tensor& o) {
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (int k = 0; k < K; ++k) {
                    const double* gk = o.grad.data() + static_cast<std::int64_t>(k) * Ho * Wo;
                    double s = 0.0;
                    for (std::int64_t i = 0; i < static_cast<std::int64_t>(Ho) * Wo; ++i) s += gk[i];
                    pb->grad[static_cast<std::size_t>(k)] += s;
                }
            }
            if (px->requires_grad) px->ensure_grad();
            if (pw->requires_grad) pw->ensure_grad();
            for (int c = 0; c < C; ++c) {
                const double* xc = px->data.data() + static_cast<std::int64_t>(c) * H * W;
                double* dxc = px->requires_grad
                                  ? px->grad.data() + static_cast<std::int64_t>(c) * H * W
                                  : nullptr;
                for (int k = 0; k < K; ++k) {
                    const double* wck =
                        pw->data.data() + (static_cast<std::int64_t>(c) * K + k) * kh * kw;
                    double* dwck = pw->requires_grad
                                       ? pw->grad.data() + (static_cast<std::int64_t>(c) * K + k) * kh * kw
                                       : nullptr;
                    const double* gk = o.grad.data() + static_cast<std::int64_t>(k) * Ho * Wo;
                    for (int iy = 0; iy < H; ++iy) {
                        for (int ix = 0; ix < W; ++ix) {
                            const double v = xc[static_cast<std::int64_t>(iy) * W + ix];
                            const double* gbase =
                                gk + static_cast<std::int64_t>(iy) * stride * Wo + ix * stride;
                            double acc = 0.0;
                            for (int dy = 0; dy < kh; ++dy) {
                                for (int dx = 0; dx < kw; ++dx) {
                                    const double g = gbase[static_cast<std::int64_t>(dy) * Wo + dx];
                                    acc += g * wck[dy * kw + dx];
                                    if (dwck) dwck[dy * kw + dx] += g * v;
                                }
                            }
                            if (dxc) dxc[static_cast<std::int64_t>(iy) * W + ix] += acc;
                        }
                    }
                }
            }
        };
    }
    return out;
}

TensorPtr depthwise_conv2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b) {
    require(x->rank() == 3, "depthwise_conv2d: input must be [C,H,W]");
    require(w->rank() == 3 && w->dim(0) == x->dim(0), "depthwise_conv2d: weight must be [C,kh,kw]");
    require(b->rank() == 1 && b->dim(0) == x->dim(0), "depthwise_conv2d: bias must be [C]");
    const int C = x->dim(0), H = x->dim(1), W = x->dim(2);
    const int kh = w->dim(1), kw = w->dim(2);
    require(kh % 2 == 1 && kw % 2 == 1, "depthwise_conv2d: odd kernel required for same padding");
    const int ph = kh / 2, pw_ = kw / 2;

    auto out = make_node({C, H, W}, {x, w, b});
    // Tap-sweep layout: one shifted row pass per kernel tap, branch-free
    // inner loops over contiguous rows.
    for (int c = 0; c < C; ++c) {
        const double* xc = x->data.data() + static_cast<std::int64_t>(c) * H * W;
        const double* wc = w->data.data() + static_cast<std::int64_t>(c) * kh * kw;
        double* yc = out->data.data() + static_cast<std::int64_t>(c) * H * W;
        const double bias = b->data[static_cast<std::size_t>(c)];
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i) yc[i] = bias;
        for (int dy = 0; dy < kh; ++dy) {
            for (int dx = 0; dx < kw; ++dx) {
                const double wv = wc[dy * kw + dx];
                const int y0 = std::max(0, ph - dy), y1 = std::min(H, H + ph - dy);
                const int x0 = std::max(0, pw_ - dx), x1 = std::min(W, W + pw_ - dx);
                for (int y = y0; y < y1; ++y) {
                    double* yrow = yc + static_cast<std::int64_t>(y) * W + x0;
                    const double* xrow =
                        xc + static_cast<std::int64_t>(y + dy - ph) * W + (x0 + dx - pw_);
                    const int len = x1 - x0;
                    for (int i = 0; i < len; ++i) yrow[i] += wv * xrow[i];
                }
            }
        }
    }
    check_finite(*out, "depthwise_conv2d");
    if (out->requires_grad) {
        auto px = x, pw2 = w, pb = b;
        out->backward_fn = [px, pw2, pb, C, H, W, kh, kw, ph, pw_](Tensor& o) {
            if (px->requires_grad) px->ensure_grad();
            if (pw2->requires_grad) pw2->ensure_grad();
            if (pb->requires_grad) pb->ensure_grad();
            for (int c = 0; c < C; ++c) {
                const double* xc = px->data.data() + static_cast<std::int64_t>(c) * H * W;
                const double* wc = pw2->data.data() + static_cast<std::int64_t>(c) * kh * kw;
                const double* gc = o.grad.data() + static_cast<std::int64_t>(c) * H * W;
                double* dxc = px->requires_grad
                                  ? px->grad.data() + static_cast<std::int64_t>(c) * H * W
                                  : nullptr;
                double* dwc = pw2->requires_grad
                                  ? pw2->grad.data() + static_cast<std::int64_t>(c) * kh * kw
                                  : nullptr;
                if (pb->requires_grad) {
                    double bsum = 0.0;
                    for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i) bsum += gc[i];
                    pb->grad[static_cast<std::size_t>(c)] += bsum;
                }
                // Per-tap shifted row sweeps keep the inner loops branch-free.
                for (int dy = 0; dy < kh; ++dy) {
                    for (int dx = 0; dx < kw; ++dx) {
                        const double wv = wc[dy * kw + dx];
                        const int y0 = std::max(0, ph - dy), y1 = std::min(H, H + ph - dy);
                        const int x0 = std::max(0, pw_ - dx), x1 = std::min(W, W + pw_ - dx);
                        double dwacc = 0.0;
                        for (int y = y0; y < y1; ++y) {
                            const double* grow = gc + static_cast<std::int64_t>(y) * W + x0;
                            const std::int64_t in_off =
                                static_cast<std::int64_t>(y + dy - ph) * W + (x0 + dx - pw_);
                            const double* xrow = xc + in_off;
                            double* dxrow = dxc ? dxc + in_off : nullptr;
                            const int len = x1 - x0;
                            if (dxrow)
                                for (int i = 0; i < len; ++i) dxrow[i] += grow[i] * wv;
                            if (dwc)
                                for (int i = 0; i < len; ++i) dwacc += grow[i] * xrow[i];
                        }
                        if (dwc) dwc[dy * kw + dx] += dwacc;
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

TensorPtr multihead_attention(const TensorPtr& q, const TensorPtr& k, const TensorPtr& v,
                              int heads) {
    require(q->rank() == 2 && k->rank() == 2 && v->rank() == 2, "mha: rank-2 inputs required");
    const int tq = q->dim(0), d = q->dim(1);
    const int tk = k->dim(0);
    require(k->dim(1) == d && v->dim(1) == d && v->dim(0) == tk,
            "mha: inconsistent shapes q" + shape_str(q->shape) + " k" + shape_str(k->shape) +
                " v" + shape_str(v->shape));
    require(heads >= 1 && d % heads == 0, "mha: d must be divisible by heads");
    const int hd = d / heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));

    auto out = make_node({tq, d}, {q, k, v});
    // Keep per-head attention probabilities for the backward pass. Per-head
    // slices are copied into contiguous buffers so the GEMMs run packed.
    const std::size_t probs_len = static_cast<std::size_t>(heads) * tq * tk;
    std::shared_ptr<double[]> probs(new double[probs_len]);
    {
        ECMap Q(q->data.data(), tq, d), K(k->data.data(), tk, d), V(v->data.data(), tk, d);
        EMap O(out->data.data(), tq, d);
        thread_local EMat Qh, Kh, Vh, S;
        Qh.resize(tq, hd); Kh.resize(tk, hd); Vh.resize(tk, hd); S.resize(tq, tk);
        for (int h = 0; h < heads; ++h) {
            Qh = Q.middleCols(h * hd, hd);
            Kh = K.middleCols(h * hd, hd);
            Vh = V.middleCols(h * hd, hd);
            S.noalias() = Qh * Kh.transpose();
            S *= inv_scale;
            const Eigen::VectorXd mx = S.rowwise().maxCoeff();
            S = (S.colwise() - mx).array().exp().matrix();
            for (int r = 0; r < tq; ++r) {
                const double* row = S.data() + static_cast<std::ptrdiff_t>(r) * tk;
                double denom = 0.0;
                for (int cidx = 0; cidx < tk; ++cidx) denom += row[cidx];
                S.row(r) /= denom;
            }
            std::memcpy(probs.get() + static_cast<std::size_t>(h) * tq * tk, S.data(),
                        sizeof(double) * static_cast<std::size_t>(tq) * tk);
            O.middleCols(h * hd, hd).noalias() = S * Vh;
        }
    }
    check_finite(*out, "multihead_attention");
    if (out->requires_grad) {
        auto pq = q, pk = k, pv = v;
        out->backward_fn = [pq, pk, pv, probs, heads, tq, tk, d, hd, inv_scale](Tensor& o) {
            pq->ensure_grad();
            pk->ensure_grad();
            pv->ensure_grad();
            ECMap Q(pq->data.data(), tq, d), K(pk->data.data(), tk, d), V(pv->data.data(), tk, d);
            EMap dQ(pq->grad.data(), tq, d), dK(pk->grad.data(), tk, d), dV(pv->grad.data(), tk, d);
            ECMap dO(o.grad.data(), tq, d);
            thread_local EMat Qh, Kh, Vh, dOh, dS, dP;
            Qh.resize(tq, hd); Kh.resize(tk, hd); Vh.resize(tk, hd);
            dOh.resize(tq, hd); dS.resize(tq, tk); dP.resize(tq, tk);
            for (int h = 0; h < heads; ++h) {
                ECMap P(probs.get() + static_cast<std::size_t>(h) * tq * tk, tq, tk);
                Qh = Q.middleCols(h * hd, hd);
                Kh = K.middleCols(h * hd, hd);
                Vh = V.middleCols(h * hd, hd);
                dOh = dO.middleCols(h * hd, hd);
                dV.middleCols(h * hd, hd).noalias() += P.transpose() * dOh;
                dP.noalias() = dOh * Vh.transpose();
                for (int r = 0; r < tq; ++r) {
                    const double* prow = P.data() + static_cast<std::ptrdiff_t>(r) * tk;
                    const double* dprow = dP.data() + static_cast<std::ptrdiff_t>(r) * tk;
                    double dot = 0.0;
                    for (int cidx = 0; cidx < tk; ++cidx) dot += prow[cidx] * dprow[cidx];
                    double* dsrow = dS.data() + static_cast<std::ptrdiff_t>(r) * tk;
                    for (int cidx = 0; cidx < tk; ++cidx)
                        dsrow[cidx] = prow[cidx] * (dprow[cidx] - dot);
                }
                dS *= inv_scale;
                dQ.middleCols(h * hd, hd).noalias() += dS * Kh;
                dK.middleCols(h * hd, hd).noalias() += dS.transpose() * Qh;
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// structured
// ---------------------------------------------------------------------------

TensorPtr split_sum(const TensorPtr& x, int parts) {
    require(x->rank() == 2, "split_sum: rank-2 [T,d] required");
    require(parts >= 1 && x->dim(0) % parts == 0,
            "split_sum: token count " + std::to_string(x->dim(0)) +
                " not divisible by " + std::to_string(parts));
    const int n = x->dim(0) / parts, d = x->dim(1);
    auto out = make_node({n, d}, {x});
    for (int p = 0; p < parts; ++p) {
        const double* src = x->data.data() + static_cast<std::int64_t>(p) * n * d;
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(n) * d; ++i) out->data[i] += src[i];
    }
    check_finite(*out, "split_sum");
    if (out->requires_grad) {
        auto px = x;
        out->backward_fn = [px, parts, n, d](Tensor& o) {
            px->ensure_grad();
            for (int p = 0; p < parts; ++p) {
                double* dst = px->grad.data() + static_cast<std::int64_t>(p) * n * d;
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(n) * d; ++i) dst[i] += o.grad[i];
            }
        };
    }
    return out;
}

TensorPtr gather_cells(const TensorPtr& x, const std::vector<int>& src_of_dst, int out_h,
                       int out_w) {
    require(x->rank() == 3, "gather_cells: input must be [C,H,W]");
    require(static_cast<std::int64_t>(src_of_dst.size()) ==
                static_cast<std::int64_t>(out_h) * out_w,
            "gather_cells: map size mismatch");
    const int C = x->dim(0);
    const std::int64_t in_hw = static_cast<std::int64_t>(x->dim(1)) * x->dim(2);
    const std::int64_t out_hw = static_cast<std::int64_t>(out_h) * out_w;
    for (int s : src_of_dst)
        require(s >= -1 && s < in_hw, "gather_cells: source index out of range");

    auto out = make_node({C, out_h, out_w}, {x});
    for (int c = 0; c < C; ++c) {
        const double* xc = x->data.data() + c * in_hw;
        double* yc = out->data.data() + c * out_hw;
        for (std::int64_t i = 0; i < out_hw; ++i) {
            const int s = src_of_dst[static_cast<std::size_t>(i)];
            yc[i] = s >= 0 ? xc[s] : 0.0;
        }
    }
    if (out->requires_grad) {
        auto px = x;
        auto map = std::make_shared<std::vector<int>>(src_of_dst);
        out->backward_fn = [px, map, C, in_hw, out_hw](Tensor& o) {
            px->ensure_grad();
            for (int c = 0; c < C; ++c) {
                double* dxc = px->grad.data() + c * in_hw;
                const double* gc = o.grad.data() + c * out_hw;
                for (std::int64_t i = 0; i < out_hw; ++i) {
                    const int s = (*map)[static_cast<std::size_t>(i)];
                    if (s >= 0) dxc[s] += gc[i];
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// reverse sweep
// ---------------------------------------------------------------------------

void backward(const TensorPtr& loss) {
    if (loss->size() != 1) throw ContractError("backward: loss must be scalar");
    if (!loss->requires_grad)
        throw ContractError("backward: loss does not depend on any requires_grad tensor");

    // Iterative post-order topological sort over parents.
    std::vector<Tensor*> order;
    std::unordered_set<Tensor*> visited;
    std::vector<std::pair<Tensor*, std::size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Tensor* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss->ensure_grad();
    loss->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor* t = *it;
        if (t->backward_fn && !t->grad.empty()) t->backward_fn(*t);
    }
}

}  // namespace mmcp

#include "mmcp/detect.hpp"

#include <algorithm>
#include <cmath>

#include "mmcp/common.hpp"

namespace mmcp {

double wrap_angle(double theta) {
    while (theta >= M_PI) theta -= 2.0 * M_PI;
    while (theta < -M_PI) theta += 2.0 * M_PI;
    return theta;
}

}  // namespace mmcp

namespace mmcp::detect {

std::vector<std::pair<std::string, TensorPtr>> HeadParams::named() const {
    return {{"trunk_w", trunk_w}, {"trunk_b", trunk_b}, {"cls_w", cls_w}, {"cls_b", cls_b},
            {"reg_w", reg_w},     {"reg_b", reg_b},     {"dir_w", dir_w}, {"dir_b", dir_b}};
}

HeadParams make_head_params(int c, Rng& rng) {
    HeadParams p;
    p.c = c;
    const double s = 1.0 / std::sqrt(static_cast<double>(c));
    p.trunk_w = randn({c, c, 1, 1}, rng, s, true);
    p.trunk_b = zeros({c}, true);
    p.cls_w = randn({1, c, 1, 1}, rng, s * 0.1, true);
    // Bias the objectness prior low; most cells are background.
    p.cls_b = full({1}, -2.0, true);
    p.reg_w = randn({kRegChannels, c, 1, 1}, rng, s * 0.1, true);
    p.reg_b = zeros({kRegChannels}, true);
    p.dir_w = randn({2, c, 1, 1}, rng, s * 0.1, true);
    p.dir_b = zeros({2}, true);
    return p;
}

HeadOutput head_forward(const TensorPtr& fused, const HeadParams& p) {
    if (fused->rank() != 3 || fused->dim(0) != p.c)
        throw DimError("head_forward: fused feature must be [c,H,W] with matching c");
    auto trunk = gelu(conv2d(fused, p.trunk_w, p.trunk_b, 1, 0));
    HeadOutput out;
    out.cls = conv2d(trunk, p.cls_w, p.cls_b, 1, 0);
    out.reg = conv2d(trunk, p.reg_w, p.reg_b, 1, 0);
    out.dir = conv2d(trunk, p.dir_w, p.dir_b, 1, 0);
    return out;
}

namespace {

// Heading folded into [-pi/2, pi/2) plus the bin that undoes the fold.
void fold_heading(double theta, double& folded, int& bin) {
    theta = wrap_angle(theta);
    if (theta >= -M_PI / 2 && theta < M_PI / 2) {
        folded = theta;
        bin = 0;
    } else {
        folded = wrap_angle(theta + M_PI);
        bin = 1;
    }
}

}  // namespace

Targets build_targets(const std::vector<ObjectBox>& objects, const BevGrid& grid) {
    Targets t;
    const int hw = grid.h * grid.w;
    t.cls.assign(static_cast<std::size_t>(hw), 0.0);
    t.reg.assign(static_cast<std::size_t>(kRegChannels) * hw, 0.0);
    t.dir_bin.assign(static_cast<std::size_t>(hw), 0);
    t.pos_mask.assign(static_cast<std::size_t>(hw), 0.0);
    for (const auto& o : objects) {
        int i, j;
        if (!grid.locate(o.x, o.y, i, j)) continue;
        const int cell = i * grid.w + j;
        if (t.pos_mask[static_cast<std::size_t>(cell)] > 0.0) continue;  // first object claims the cell
        t.pos_mask[static_cast<std::size_t>(cell)] = 1.0;
        t.cls[static_cast<std::size_t>(cell)] = 1.0;
        ++t.n_pos;
        double folded;
        int bin;
        fold_heading(o.theta, folded, bin);
        // The doubled angle is continuous across the pi-symmetry of the
        // footprint; the dir bin restores the heading sign.
        const double vals[kRegChannels] = {
            (o.x - grid.cell_cx(j)) / grid.cell, (o.y - grid.cell_cy(i)) / grid.cell,
            o.z,          std::log(o.h),
            std::log(o.w), std::log(o.l),
            std::sin(2.0 * folded), std::cos(2.0 * folded)};
        for (int ch = 0; ch < kRegChannels; ++ch)
            t.reg[static_cast<std::size_t>(ch) * hw + cell] = vals[ch];
        t.dir_bin[static_cast<std::size_t>(cell)] = bin;
    }
    return t;
}

// ---------------------------------------------------------------------------
// losses (single graph nodes with analytic backward)
// ---------------------------------------------------------------------------

namespace {

double softplus(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); }

TensorPtr make_scalar_node(double value, std::vector<TensorPtr> parents) {
    auto t = std::make_shared<Tensor>();
    t->shape = {1};
    t->data = {value};
    t->requires_grad = false;
    for (const auto& p : parents)
        if (p->requires_grad) t->requires_grad = true;
    if (t->requires_grad) t->parents = std::move(parents);
    check_finite(*t, "loss");
    return t;
}

}  // namespace

TensorPtr focal_loss(const TensorPtr& cls_logits, const std::vector<double>& targets,
                     double alpha, double gamma) {
    const std::int64_t n = cls_logits->size();
    if (static_cast<std::int64_t>(targets.size()) != n)
        throw DimError("focal_loss: target count does not match logits");
    for (double y : targets)
        if (y != 0.0 && y != 1.0) throw ContractError("focal_loss: targets must be 0 or 1");

    double total = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double x = cls_logits->data[i];
        const double y = targets[static_cast<std::size_t>(i)];
        // log p = -softplus(-x), log(1-p) = -softplus(x)
        const double p = 1.0 / (1.0 + std::exp(-x));
        if (y == 1.0)
            total += alpha * std::pow(1.0 - p, gamma) * softplus(-x);
        else
            total += (1.0 - alpha) * std::pow(p, gamma) * softplus(x);
    }
    auto out = make_scalar_node(total / static_cast<double>(n), {cls_logits});
    if (out->requires_grad) {
        auto px = cls_logits;
        auto tgt = std::make_shared<std::vector<double>>(targets);
        out->backward_fn = [px, tgt, alpha, gamma, n](Tensor& o) {
            px->ensure_grad();
            const double g0 = o.grad[0] / static_cast<double>(n);
            for (std::int64_t i = 0; i < n; ++i) {
                const double x = px->data[i];
                const double p = 1.0 / (1.0 + std::exp(-x));
                double d;
                if ((*tgt)[static_cast<std::size_t>(i)] == 1.0) {
                    const double logp = -softplus(-x);
                    d = alpha * std::pow(1.0 - p, gamma) * (gamma * p * logp - (1.0 - p));
                } else {
                    const double log1mp = -softplus(x);
                    d = (1.0 - alpha) * std::pow(p, gamma) * (p - gamma * (1.0 - p) * log1mp);
                }
                px->grad[i] += g0 * d;
            }
        };
    }
    return out;
}

TensorPtr smooth_l1(const TensorPtr& reg, const std::vector<double>& targets,
                    const std::vector<double>& pos_mask, double beta) {
    const std::int64_t n = reg->size();
    if (static_cast<std::int64_t>(targets.size()) != n)
        throw DimError("smooth_l1: target count does not match predictions");
    const std::int64_t hw = static_cast<std::int64_t>(pos_mask.size());
    if (hw == 0 || n % hw != 0) throw DimError("smooth_l1: mask size does not divide predictions");
    const std::int64_t channels = n / hw;

    double n_pos = 0.0;
    for (double m : pos_mask) n_pos += m;
    double total = 0.0;
    if (n_pos > 0.0) {
        for (std::int64_t ch = 0; ch < channels; ++ch) {
            for (std::int64_t i = 0; i < hw; ++i) {
                if (pos_mask[static_cast<std::size_t>(i)] == 0.0) continue;
                const double d = reg->data[ch * hw + i] - targets[static_cast<std::size_t>(ch * hw + i)];
                total += std::abs(d) < beta ? 0.5 * d * d / beta : std::abs(d) - 0.5 * beta;
            }
        }
        total /= n_pos * static_cast<double>(channels);
    }
    auto out = make_scalar_node(total, {reg});
    if (out->requires_grad && n_pos > 0.0) {
        auto px = reg;
        auto tgt = std::make_shared<std::vector<double>>(targets);
        auto mask = std::make_shared<std::vector<double>>(pos_mask);
        const double denom = n_pos * static_cast<double>(channels);
        out->backward_fn = [px, tgt, mask, beta, channels, hw, denom](Tensor& o) {
            px->ensure_grad();
            const double g0 = o.grad[0] / denom;
            for (std::int64_t ch = 0; ch < channels; ++ch)
                for (std::int64_t i = 0; i < hw; ++i) {
                    if ((*mask)[static_cast<std::size_t>(i)] == 0.0) continue;
                    const double d = px->data[ch * hw + i] - (*tgt)[static_cast<std::size_t>(ch * hw + i)];
                    px->grad[ch * hw + i] += g0 * (std::abs(d) < beta ? d / beta : (d > 0 ? 1.0 : -1.0));
                }
        };
    }
    return out;
}

TensorPtr dir_loss(const TensorPtr& dir_logits, const std::vector<int>& bins,
                   const std::vector<double>& pos_mask) {
    if (dir_logits->rank() != 3 || dir_logits->dim(0) != 2)
        throw DimError("dir_loss: logits must be [2,H,W]");
    const std::int64_t hw = static_cast<std::int64_t>(dir_logits->dim(1)) * dir_logits->dim(2);
    if (static_cast<std::int64_t>(bins.size()) != hw ||
        static_cast<std::int64_t>(pos_mask.size()) != hw)
        throw DimError("dir_loss: bin/mask size mismatch");

    double n_pos = 0.0;
    for (double m : pos_mask) n_pos += m;
    double total = 0.0;
    if (n_pos > 0.0) {
        for (std::int64_t i = 0; i < hw; ++i) {
            if (pos_mask[static_cast<std::size_t>(i)] == 0.0) continue;
            const double a = dir_logits->data[i], b = dir_logits->data[hw + i];
            const double mx = std::max(a, b);
            const double lse = mx + std::log(std::exp(a - mx) + std::exp(b - mx));
            total += lse - (bins[static_cast<std::size_t>(i)] == 0 ? a : b);
        }
        total /= n_pos;
    }
    auto out = make_scalar_node(total, {dir_logits});
    if (out->requires_grad && n_pos > 0.0) {
        auto px = dir_logits;
        auto bn = std::make_shared<std::vector<int>>(bins);
        auto mask = std::make_shared<std::vector<double>>(pos_mask);
        out->backward_fn = [px, bn, mask, hw, n_pos](Tensor& o) {
            px->ensure_grad();
            const double g0 = o.grad[0] / n_pos;
            for (std::int64_t i = 0; i < hw; ++i) {
                if ((*mask)[static_cast<std::size_t>(i)] == 0.0) continue;
                const double a = px->data[i], b = px->data[hw + i];
                const double mx = std::max(a, b);
                const double ea = std::exp(a - mx), eb = std::exp(b - mx);
                const double pa = ea / (ea + eb);
                const int bin = (*bn)[static_cast<std::size_t>(i)];
                px->grad[i] += g0 * (pa - (bin == 0 ? 1.0 : 0.0));
                px->grad[hw + i] += g0 * ((1.0 - pa) - (bin == 1 ? 1.0 : 0.0));
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// rotated IoU
// ---------------------------------------------------------------------------

namespace {

struct Pt {
    double x, y;
};

using Poly = std::vector<Pt>;

Poly box_corners(const ObjectBox& b) {
    const double c = std::cos(b.theta), s = std::sin(b.theta);
    const double hl = b.l / 2.0, hw = b.w / 2.0;
    // Counter-clockwise.
    const double ox[4] = {hl, -hl, -hl, hl};
    const double oy[4] = {hw, hw, -hw, -hw};
    Poly p(4);
    for (int i = 0; i < 4; ++i)
        p[static_cast<std::size_t>(i)] = {b.x + c * ox[i] - s * oy[i], b.y + s * ox[i] + c * oy[i]};
    return p;
}

double poly_area(const Poly& p) {
    double a = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const auto& u = p[i];
        const auto& v = p[(i + 1) % p.size()];
        a += u.x * v.y - v.x * u.y;
    }
    return std::abs(a) / 2.0;
}

// Sutherland-Hodgman clip of `subject` against the half-plane left of a->b.
Poly clip_edge(const Poly& subject, const Pt& a, const Pt& b) {
    auto side = [&](const Pt& p) { return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x); };
    Poly out;
    const std::size_t n = subject.size();
    for (std::size_t i = 0; i < n; ++i) {
        const Pt& cur = subject[i];
        const Pt& nxt = subject[(i + 1) % n];
        const double sc = side(cur), sn = side(nxt);
        if (sc >= 0) out.push_back(cur);
        if ((sc > 0 && sn < 0) || (sc < 0 && sn > 0)) {
            const double t = sc / (sc - sn);
            out.push_back({cur.x + t * (nxt.x - cur.x), cur.y + t * (nxt.y - cur.y)});
        }
    }
    return out;
}

double intersection_area(const ObjectBox& ba, const ObjectBox& bb) {
    Poly p = box_corners(ba);
    const Poly q = box_corners(bb);
    for (std::size_t i = 0; i < q.size() && !p.empty(); ++i)
        p = clip_edge(p, q[i], q[(i + 1) % q.size()]);
    return p.size() < 3 ? 0.0 : poly_area(p);
}

}  // namespace

double rotated_iou(const ObjectBox& a, const ObjectBox& b) {
    const double area_a = a.w * a.l, area_b = b.w * b.l;
    if (area_a <= 0.0 || area_b <= 0.0)
        throw ContractError("rotated_iou: degenerate zero-area box");
    const double inter = intersection_area(a, b);
    const double iou = inter / (area_a + area_b - inter);
    return std::clamp(iou, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// decode + AP
// ---------------------------------------------------------------------------

std::vector<Detection> decode_boxes(const HeadOutput& out, const BevGrid& grid,
                                    double score_thresh, double nms_iou) {
    if (score_thresh < 0.0 || score_thresh > 1.0 || nms_iou < 0.0 || nms_iou > 1.0)
        throw ContractError("decode_boxes: thresholds must lie in [0,1]");
    const int H = out.cls->dim(1), W = out.cls->dim(2);
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    std::vector<Detection> cands;
    for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
            const std::int64_t cell = static_cast<std::int64_t>(i) * W + j;
            const double score = 1.0 / (1.0 + std::exp(-out.cls->data[cell]));
            if (score < score_thresh) continue;
            const auto rg = [&](int ch) { return out.reg->data[ch * hw + cell]; };
            Detection dt;
            dt.score = score;
            dt.box.x = grid.cell_cx(j) + rg(0) * grid.cell;
            dt.box.y = grid.cell_cy(i) + rg(1) * grid.cell;
            dt.box.z = rg(2);
            dt.box.h = std::exp(std::clamp(rg(3), -6.0, 6.0));
            dt.box.w = std::exp(std::clamp(rg(4), -6.0, 6.0));
            dt.box.l = std::exp(std::clamp(rg(5), -6.0, 6.0));
            double theta = 0.5 * std::atan2(rg(6), rg(7));
            if (out.dir->data[hw + cell] > out.dir->data[cell]) theta = wrap_angle(theta + M_PI);
            dt.box.theta = wrap_angle(theta);
            cands.push_back(dt);
        }
    }
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<Detection> kept;
    for (const auto& c : cands) {
        bool suppressed = false;
        for (const auto& k : kept) {
            if (rotated_iou(c.box, k.box) > nms_iou) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(c);
    }
    return kept;
}

double average_precision(const std::vector<std::vector<Detection>>& dets_per_scene,
                         const std::vector<std::vector<ObjectBox>>& gts_per_scene,
                         double iou_thresh) {
    if (dets_per_scene.size() != gts_per_scene.size())
        throw DimError("average_precision: scene counts disagree");
    std::size_t total_gt = 0;
    for (const auto& g : gts_per_scene) total_gt += g.size();
    if (total_gt == 0)
        throw ContractError("average_precision: no ground truth, AP undefined");

    struct Flat {
        double score;
        std::size_t scene, idx;
    };
    std::vector<Flat> flat;
    for (std::size_t s = 0; s < dets_per_scene.size(); ++s)
        for (std::size_t i = 0; i < dets_per_scene[s].size(); ++i)
            flat.push_back({dets_per_scene[s][i].score, s, i});
    std::stable_sort(flat.begin(), flat.end(),
                     [](const Flat& a, const Flat& b) { return a.score > b.score; });

    std::vector<std::vector<bool>> matched(gts_per_scene.size());
    for (std::size_t s = 0; s < gts_per_scene.size(); ++s)
        matched[s].assign(gts_per_scene[s].size(), false);

    std::vector<double> precision, recall;
    std::size_t tp = 0, fp = 0;
    for (const auto& f : flat) {
        const auto& det = dets_per_scene[f.scene][f.idx];
        const auto& gts = gts_per_scene[f.scene];
        double best = 0.0;
        std::size_t best_i = gts.size();
        for (std::size_t i = 0; i < gts.size(); ++i) {
            if (matched[f.scene][i]) continue;
            const double iou = rotated_iou(det.box, gts[i]);
            if (iou > best) {
                best = iou;
                best_i = i;
            }
        }
        if (best_i < gts.size() && best >= iou_thresh) {
            matched[f.scene][best_i] = true;
            ++tp;
        } else {
            ++fp;
        }
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
    }
    if (precision.empty()) return 0.0;

    // All-point interpolation: running max of precision from the right.
    for (std::size_t i = precision.size() - 1; i-- > 0;)
        precision[i] = std::max(precision[i], precision[i + 1]);
    double ap = recall[0] * precision[0];
    for (std::size_t i = 1; i < precision.size(); ++i)
        ap += (recall[i] - recall[i - 1]) * precision[i];
    return ap;
}

}  // namespace mmcp::detect

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mmcp/box.hpp"
#include "mmcp/rng.hpp"
#include "mmcp/tensor.hpp"

namespace mmcp::detect {

// Regression channel layout (8 channels, one prediction per cell):
// dx, dy (cell-relative center offset in cells), dz (absolute), log h,
// log w, log l, sin/cos of the heading folded into [-pi/2, pi/2). The
// 2-bin dir head resolves the remaining pi ambiguity.
constexpr int kRegChannels = 8;

struct HeadParams {
    int c = 0;
    TensorPtr trunk_w, trunk_b;  // 1x1 conv c->c
    TensorPtr cls_w, cls_b;      // 1x1 conv c->1
    TensorPtr reg_w, reg_b;      // 1x1 conv c->8
    TensorPtr dir_w, dir_b;      // 1x1 conv c->2

    std::vector<std::pair<std::string, TensorPtr>> named() const;
};

HeadParams make_head_params(int c, Rng& rng);

struct HeadOutput {
    TensorPtr cls;  // [1,H,W] objectness logits
    TensorPtr reg;  // [8,H,W]
    TensorPtr dir;  // [2,H,W]
};

HeadOutput head_forward(const TensorPtr& fused, const HeadParams& p);

// Per-cell training targets in the ego frame. Objects whose center falls
// outside the grid are skipped.
struct Targets {
    std::vector<double> cls;      // H*W in {0,1}
    std::vector<double> reg;      // 8*H*W, meaningful at positive cells
    std::vector<int> dir_bin;     // H*W
    std::vector<double> pos_mask; // H*W in {0,1}
    int n_pos = 0;
};

Targets build_targets(const std::vector<ObjectBox>& objects, const BevGrid& grid);

// Mean over all cells of -alpha_t (1-p_t)^gamma log p_t with p from the
// sigmoid of the logits. `targets` has one {0,1} entry per cell.
TensorPtr focal_loss(const TensorPtr& cls_logits, const std::vector<double>& targets,
                     double alpha = 0.25, double gamma = 2.0);

// Smooth-L1 over the 8 regression channels at positive cells, averaged over
// (positives x channels); returns scalar zero when there are no positives.
TensorPtr smooth_l1(const TensorPtr& reg, const std::vector<double>& targets,
                    const std::vector<double>& pos_mask, double beta = 1.0);

// 2-bin cross entropy at positive cells, mean over positives.
TensorPtr dir_loss(const TensorPtr& dir_logits, const std::vector<int>& bins,
                   const std::vector<double>& pos_mask);

struct Detection {
    ObjectBox box;
    double score = 0.0;  // sigmoid of the cls logit
};

// Sigmoid-scores cells, decodes those above `score_thresh` and applies
// greedy rotated-IoU NMS (higher score wins).
std::vector<Detection> decode_boxes(const HeadOutput& out, const BevGrid& grid,
                                    double score_thresh, double nms_iou);

// BEV IoU of the rotated footprints via convex polygon clipping.
double rotated_iou(const ObjectBox& a, const ObjectBox& b);

// Score-sorted greedy one-to-one matching across all scenes, all-point
// interpolated PR area. Throws ContractError when the ground-truth set is
// empty (AP undefined).
double average_precision(const std::vector<std::vector<Detection>>& dets_per_scene,
                         const std::vector<std::vector<ObjectBox>>& gts_per_scene,
                         double iou_thresh);

}  // namespace mmcp::detect

#pragma once

#include <vector>

#include "mmcp/bev.hpp"
#include "mmcp/tensor.hpp"

namespace mmcp::collab {

// Parameter-free per-cell attention over agents. The stack holds features in
// the ego frame, ego first, identical shapes. At every cell the N agent
// vectors act as tokens: the ego vector queries, all vectors serve as keys
// and values with scale 1/sqrt(c), and the ego's attended vector is the
// output. No learned weights anywhere.
TensorPtr att_fuse(const std::vector<TensorPtr>& stack);

BevFeature att_fuse(const std::vector<BevFeature>& stack);

// log2 of the byte volume of one shared BEV feature map.
double comm_cost(int h, int w, int channels, int bits_per_value);

}  // namespace mmcp::collab

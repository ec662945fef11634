#pragma once

#include <string>

#include "mmcp/tensor.hpp"

namespace mmcp {

// Per-agent, per-modality BEV feature grid. `t` is [c, H, W]; the pose fields
// place the grid in the world frame (grid is centered on the owning agent).
struct BevFeature {
    TensorPtr t;
    int agent_id = 0;
    std::string modality;
    double origin_x = 0.0;
    double origin_y = 0.0;
    double yaw = 0.0;
};

}  // namespace mmcp

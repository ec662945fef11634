#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmcp/model.hpp"
#include "mmcp/pafr.hpp"

namespace mmcp {

// One structured file fully determines a run: identical config plus seed
// reproduce identical metrics byte for byte. Unknown keys are rejected.
struct RunConfig {
    std::uint64_t seed = 1;
    std::string out_dir = "runs/out";

    pafr::WorldConfig world;
    ModelConfig model;

    int train_scenes = 400;
    int test_scenes = 100;
    pafr::TrainConfig train;

    pafr::EvalOptions eval;

    std::vector<int> degradation_points = {2048, 1024, 512, 128, 0};
    std::vector<double> noise_sigmas = {0.0, 0.1, 0.5, 1.0, 2.0};
    int export_samples = 100;
    int comm_bits_per_value = 64;
};

RunConfig load_config(const std::string& path);
RunConfig config_from_json_text(const std::string& text);
std::string config_to_json_text(const RunConfig& cfg);

}  // namespace mmcp

#pragma once

#include <string>
#include <vector>

#include "mmcp/model.hpp"
#include "mmcp/pafr.hpp"

namespace mmcp::diag {

// Standard Procrustes disparity: both matrices (rows = samples) are centered
// and scaled to unit Frobenius norm, then the residual of the optimal
// orthogonal-plus-scale alignment of Y onto X is returned. Symmetric in its
// arguments. Throws ContractError on zero-variance input.
double procrustes_disparity(const std::vector<double>& x, const std::vector<double>& y,
                            int rows, int cols);

struct FeatureSample {
    std::string label;
    int rows = 0, cols = 0;
    std::vector<double> data;  // row-major rows x cols
};

// Ego-side features over the first n_samples eval scenes (both modalities
// active): encoder outputs before alignment, the per-modality fused token
// intermediates, and the fused output tokens.
std::vector<FeatureSample> collect_features(Model& m, const pafr::Dataset& eval_set,
                                            int n_samples);

// CSV per group plus a manifest.json; import reads them back bit-exactly.
void export_features(const std::vector<FeatureSample>& groups, const std::string& dir);
std::vector<FeatureSample> import_features(const std::string& dir);

struct SweepRow {
    double condition = 0.0;
    double ap30 = 0.0, ap50 = 0.0, ap70 = 0.0;
};

struct DegradationCurves {
    std::vector<SweepRow> fused;          // both modalities, degraded geometry
    std::vector<SweepRow> geometry_only;  // geometry-only path, degraded
    std::vector<SweepRow> concat;         // concat baseline, if a model was given
};

// Re-renders geometry at each point budget (same streams as the original
// dataset, so the full budget reproduces the standard evaluation) and
// evaluates the fused model, its geometry-only path, and optionally the
// concat baseline.
DegradationCurves degradation_sweep(Model& fused_model, Model* concat_model,
                                    const pafr::Dataset& test, const pafr::WorldConfig& world,
                                    std::uint64_t root_seed, const std::vector<int>& point_counts,
                                    const pafr::EvalOptions& eval_opts);

// Geometry noise sweep at the full point budget.
std::vector<SweepRow> noise_sweep(Model& m, const pafr::Dataset& test,
                                  const pafr::WorldConfig& world, std::uint64_t root_seed,
                                  const std::vector<double>& sigmas,
                                  const pafr::EvalOptions& eval_opts);

void write_sweep_csv(const std::string& path, const std::string& condition_name,
                     const std::vector<SweepRow>& rows);

}  // namespace mmcp::diag

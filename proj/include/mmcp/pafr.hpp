#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mmcp/model.hpp"

namespace mmcp::pafr {

// World + sensor parameters a dataset is rendered from.
struct WorldConfig {
    sim::SceneSpec scene;
    sim::GeometrySensor geo_sensor;
    int geo_points = 2048;
    double geo_sigma = 0.03;
    sim::AppearanceSensor app_sensor;
    int app_blur = 0;
    double app_noise = 0.04;
};

struct Dataset {
    std::vector<SceneSample> samples;
    std::string split;
};

// Deterministic in (root_seed, split): scenes and observations come from
// named streams, so a dataset can be rebuilt anywhere from the config alone.
Dataset build_dataset(std::uint64_t root_seed, const std::string& split, int count,
                      const WorldConfig& world, const BevGrid& grid);

// Re-renders the geometry observation of one sample at a different point
// budget / noise level (same streams as build_dataset).
TensorPtr rerender_geometry_raster(std::uint64_t root_seed, const std::string& split,
                                   std::size_t index, int agent, const SceneSample& sample,
                                   const WorldConfig& world, const BevGrid& grid,
                                   int n_points, double sigma);

// One stage of the training plan. Trainable and frozen must classify every
// parameter group of the model, exclusively.
struct StageSpec {
    std::string name;
    std::vector<std::string> trainable;
    std::vector<std::string> frozen;
    std::string modality_feed;  // "geometry" | "appearance" | "both"
    double p_drop = 0.0;
    int epochs = 1;
    double lr = 2e-4;
    int lr_drop_epoch = 0;  // 0 disables the schedule
    double lr_drop_factor = 0.1;
    // Cache levels usable during the stage, derived from what is frozen.
    bool cache_encoders = false;
    bool cache_aligned = false;
};

struct TrainConfig {
    int pretrain_epochs = 6;
    int align_epochs = 4;
    int fuse_epochs = 3;
    int rd_epochs = 3;
    double lr_branch = 5e-4;
    double lr_fusion = 5e-5;
    double weight_decay = 1e-4;
    // Per stage: lr drops by lr_drop_factor after this fraction of epochs.
    double lr_drop_fraction = 0.6;
    double lr_drop_factor = 0.1;
    double p_drop = 0.5;
    bool geometry_first = true;
    bool freeze_heads_in_fusion = false;
    int naive_epochs = -1;  // -1: same total budget as the staged plan
};

// The four-step staged plan: branch pretraining, per-modality aligner
// stages, multimodal fusion, random-drop fine-tuning.
std::vector<StageSpec> make_plan(const TrainConfig& cfg);
void validate_plan(const std::vector<StageSpec>& plan,
                   const std::vector<std::string>& group_names);
int plan_total_epochs(const std::vector<StageSpec>& plan);

// Adam with decoupled-from-nothing classic L2 weight decay folded into the
// gradient. Frozen groups are skipped entirely.
class Adam {
public:
    Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}
    void step(Model& m, double lr, double weight_decay);
    void reset() { state_.clear(); }

private:
    struct State {
        std::vector<double> m, v;
        std::int64_t t = 0;
    };
    std::map<Tensor*, State> state_;
    double beta1_, beta2_, eps_;
};

struct EvalOptions {
    double score_thresh = 0.1;
    double nms_iou = 0.35;
};

struct EvalResult {
    double ap30 = 0.0, ap50 = 0.0, ap70 = 0.0;
    int n_scenes = 0;
    int n_detections = 0;
    int n_ground_truth = 0;
};

EvalResult evaluate(Model& m, const Dataset& test, sim::FailureMode mode,
                    const EvalOptions& opts);

struct StageResult {
    std::string stage;
    int stage_index = 0;
    int steps = 0;
    int drop_events = 0;  // samples where the random drop removed a modality
    double final_epoch_loss = 0.0;
    std::vector<double> epoch_loss;
};

// Runs plan stages against a training set. All randomness (ordering, drops)
// derives from (root_seed, stage_index, epoch), so a stage re-run from a
// checkpoint reproduces the continuous trajectory bitwise.
class Trainer {
public:
    Trainer(Model& model, const Dataset& train, std::uint64_t root_seed,
            double weight_decay);

    StageResult run_stage(const StageSpec& spec, int stage_index);

    // Appends "stage,epoch,loss,lr" lines; empty path disables logging.
    void set_metrics_log(const std::string& path) { metrics_path_ = path; }
    const std::vector<StageResult>& history() const { return history_; }

private:
    Model& model_;
    const Dataset& train_;
    std::uint64_t seed_;
    double weight_decay_;
    std::string metrics_path_;
    std::vector<StageResult> history_;
};

struct PipelineResult {
    std::vector<StageResult> stages;
    int rd_drop_events = 0;
    int rd_steps = 0;
};

// Observation points around each stage (checkpointing, freeze auditing).
struct StageHooks {
    std::function<void(const StageSpec&, int)> before;
    std::function<void(const StageSpec&, int, const StageResult&)> after;
};

// Runs the staged plan with the step-2 boundary: after the two pretraining
// stages only the encoders are kept; aligners, fusion and heads restart from
// fresh named init streams before the aligner stages.
PipelineResult run_pafr(Model& m, Trainer& trainer, const std::vector<StageSpec>& plan,
                        std::uint64_t seed, const StageHooks* hooks = nullptr);

// Naive end-to-end joint training: every group trainable from its current
// state, both modalities fed, optional random drop.
StageResult naive_joint_train(Model& m, Trainer& trainer, int epochs, double lr,
                              double lr_drop_fraction, bool with_rd);

struct CheckpointMeta {
    std::string stage;
    int stage_index = 0;
    std::uint64_t root_seed = 0;
    std::string fusion_kind;  // "lamma" | "concat"
    std::string metrics_json;
};

// Self-describing binary container: per-group named tensors with shapes and
// row-major float64 payloads, then stage provenance and the rng root. Bit
// exact across save/load.
void save_checkpoint(const std::string& path, const Model& m, const CheckpointMeta& meta);
CheckpointMeta load_checkpoint(const std::string& path, Model& m);
// Reads only the provenance header.
CheckpointMeta peek_checkpoint_meta(const std::string& path);

}  // namespace mmcp::pafr

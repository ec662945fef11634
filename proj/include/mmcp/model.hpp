#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mmcp/branches.hpp"
#include "mmcp/collab.hpp"
#include "mmcp/detect.hpp"
#include "mmcp/lamma.hpp"
#include "mmcp/scene.hpp"

namespace mmcp {

enum class FusionKind { lamma, concat };

struct ModelConfig {
    int c = 32, d = 32, heads = 4, stride = 2;
    BevGrid grid{32, 32, 1.6};
    FusionKind fusion = FusionKind::lamma;
};

// Named collection of tensors with shared freezing semantics. Frozen groups
// receive zero gradient updates; freezing toggles requires_grad so frozen
// subgraphs also drop out of the autodiff tape.
struct ParamGroup {
    std::string name;
    std::vector<std::pair<std::string, TensorPtr>> tensors;
    bool frozen = false;

    void set_frozen(bool f) {
        frozen = f;
        for (auto& [n, t] : tensors) t->requires_grad = !f;
    }
    std::int64_t param_count() const {
        std::int64_t n = 0;
        for (const auto& [name_, t] : tensors) n += t->size();
        return n;
    }
};

// Concat+conv fusion baseline: channel concat of the two modality features
// (absent one zero-filled) followed by a 3x3 conv 2c -> c.
struct ConcatFusionParams {
    int c = 0;
    TensorPtr w, b;
    std::vector<std::pair<std::string, TensorPtr>> named() const;
};

// The full per-scene pipeline: modality encoders, per-modality aligners, one
// shared fusion operator, parameter-free multi-agent fusion and one shared
// set of task heads used by every modality subset.
struct Model {
    ModelConfig cfg;
    branches::GeometryEncoderParams geo_enc;
    branches::AppearanceEncoderParams app_enc;
    branches::AlignerParams geo_aligner;
    branches::AlignerParams app_aligner;
    lamma::Params fusion;
    ConcatFusionParams concat_fusion;
    detect::HeadParams heads;

    std::vector<ParamGroup> groups;

    ParamGroup& group(const std::string& name);
    const ParamGroup& group(const std::string& name) const;
    std::vector<std::string> group_names() const;
    void set_all_frozen(bool f);
};

// Group names: geometry_encoder, appearance_encoder, geometry_aligner,
// appearance_aligner, fusion, heads. Initialization draws from named streams
// of `seed`, so two models built from the same seed are bitwise identical.
Model make_model(const ModelConfig& cfg, std::uint64_t seed);

// Re-initializes the listed groups from fresh named streams (stage boundary
// semantics: encoders are kept, downstream modules restart).
void reinit_groups(Model& m, const std::vector<std::string>& names, std::uint64_t seed,
                   const std::string& stream_tag);

// Pre-rendered per-scene training/eval inputs. Observation tensors carry no
// gradient and are shared freely across steps.
struct SceneSample {
    sim::Scene scene;
    std::vector<TensorPtr> geo_raster;  // per agent, [3,H,W]
    std::vector<TensorPtr> app_image;   // per agent, [3,H,W]
    detect::Targets targets;            // ego frame
};

// Per-(sample, agent) cached intermediates, valid while their producing
// groups stay frozen.
struct FeatureCache {
    std::vector<std::vector<TensorPtr>> geo_feat, app_feat;        // post-encoder
    std::vector<std::vector<TensorPtr>> geo_aligned, app_aligned;  // post-aligner
    bool has_encoder = false, has_aligned = false;
};

// Ego-side intermediates captured for diagnostics and feature export.
struct CaptureSlots {
    TensorPtr geo_raw, app_raw;        // encoder outputs [c,H,W]
    TensorPtr geo_fused, app_fused;    // per-modality fused tokens [n,d]
    TensorPtr fused_tokens;            // fusion output tokens [c,n]
};

struct ForwardOptions {
    const std::vector<sim::ModalityMask>* masks = nullptr;  // default: all on
    // Modalities surviving the random drop, applied to every agent whose
    // mask leaves at least two. Null = keep everything.
    const std::vector<std::string>* kept_modalities = nullptr;
    const FeatureCache* cache = nullptr;
    std::size_t sample_index = 0;
    CaptureSlots* capture = nullptr;
};

// Concat+conv fusion of the two aligned modality features; a null tensor
// stands for a missing modality and is zero-filled.
TensorPtr baseline_concat_fuse(const TensorPtr& geometry, const TensorPtr& appearance,
                               const ConcatFusionParams& p, int h, int w);

// Full chain for one scene: encode -> align -> fuse per agent, warp into the
// ego frame, attention-fuse across agents, task heads.
detect::HeadOutput forward_scene(const Model& m, const SceneSample& s,
                                 const ForwardOptions& opts);

// Eq.-style total loss: focal(cls) + smooth_l1(reg) + 0.2 * dir.
TensorPtr detection_loss(const detect::HeadOutput& out, const detect::Targets& targets);

// RAII: temporarily freezes every group (inference mode), restores on exit.
class InferenceGuard {
public:
    explicit InferenceGuard(Model& m);
    ~InferenceGuard();
    InferenceGuard(const InferenceGuard&) = delete;
    InferenceGuard& operator=(const InferenceGuard&) = delete;

private:
    Model& model_;
    std::vector<bool> saved_;
};

}  // namespace mmcp

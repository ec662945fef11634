#include "mmcp/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "mmcp/common.hpp"

namespace mmcp {

std::vector<std::pair<std::string, TensorPtr>> ConcatFusionParams::named() const {
    return {{"w", w}, {"b", b}};
}

ParamGroup& Model::group(const std::string& name) {
    for (auto& g : groups)
        if (g.name == name) return g;
    throw ContractError("unknown parameter group '" + name + "'");
}

const ParamGroup& Model::group(const std::string& name) const {
    for (const auto& g : groups)
        if (g.name == name) return g;
    throw ContractError("unknown parameter group '" + name + "'");
}

std::vector<std::string> Model::group_names() const {
    std::vector<std::string> names;
    for (const auto& g : groups) names.push_back(g.name);
    return names;
}

void Model::set_all_frozen(bool f) {
    for (auto& g : groups) g.set_frozen(f);
}

namespace {

void rebuild_groups(Model& m) {
    m.groups.clear();
    m.groups.push_back({"geometry_encoder", m.geo_enc.named(), false});
    m.groups.push_back({"appearance_encoder", m.app_enc.named(), false});
    m.groups.push_back({"geometry_aligner", m.geo_aligner.named(), false});
    m.groups.push_back({"appearance_aligner", m.app_aligner.named(), false});
    m.groups.push_back({"fusion", m.cfg.fusion == FusionKind::lamma ? m.fusion.named()
                                                                    : m.concat_fusion.named(),
                        false});
    m.groups.push_back({"heads", m.heads.named(), false});
    std::set<std::string> seen;
    for (const auto& g : m.groups)
        if (!seen.insert(g.name).second)
            throw ContractError("duplicate parameter group name " + g.name);
}

ConcatFusionParams make_concat_fusion(int c, Rng& rng) {
    ConcatFusionParams p;
    p.c = c;
    p.w = randn({c, 2 * c, 3, 3}, rng, std::sqrt(2.0 / (18.0 * c)), true);
    p.b = zeros({c}, true);
    return p;
}

}  // namespace

Model make_model(const ModelConfig& cfg, std::uint64_t seed) {
    Model m;
    m.cfg = cfg;
    {
        Rng r = stream(seed, "init.geometry_encoder");
        m.geo_enc = branches::make_geometry_encoder(cfg.c, r);
    }
    {
        Rng r = stream(seed, "init.appearance_encoder");
        m.app_enc = branches::make_appearance_encoder(cfg.c, r);
    }
    {
        Rng r = stream(seed, "init.geometry_aligner");
        m.geo_aligner = branches::make_aligner(cfg.c, r);
    }
    {
        Rng r = stream(seed, "init.appearance_aligner");
        m.app_aligner = branches::make_aligner(cfg.c, r);
    }
    {
        Rng r = stream(seed, "init.fusion");
        m.fusion = lamma::make_params(cfg.c, cfg.d, cfg.heads, cfg.stride, r);
    }
    {
        Rng r = stream(seed, "init.concat_fusion");
        m.concat_fusion = make_concat_fusion(cfg.c, r);
    }
    {
        Rng r = stream(seed, "init.heads");
        m.heads = detect::make_head_params(cfg.c, r);
    }
    rebuild_groups(m);
    return m;
}

void reinit_groups(Model& m, const std::vector<std::string>& names, std::uint64_t seed,
                   const std::string& stream_tag) {
    for (const auto& name : names) {
        Rng r = stream(seed, stream_tag + "." + name);
        if (name == "geometry_encoder")
            m.geo_enc = branches::make_geometry_encoder(m.cfg.c, r);
        else if (name == "appearance_encoder")
            m.app_enc = branches::make_appearance_encoder(m.cfg.c, r);
        else if (name == "geometry_aligner")
            m.geo_aligner = branches::make_aligner(m.cfg.c, r);
        else if (name == "appearance_aligner")
            m.app_aligner = branches::make_aligner(m.cfg.c, r);
        else if (name == "fusion") {
            if (m.cfg.fusion == FusionKind::lamma)
                m.fusion = lamma::make_params(m.cfg.c, m.cfg.d, m.cfg.heads, m.cfg.stride, r);
            else
                m.concat_fusion = make_concat_fusion(m.cfg.c, r);
        } else if (name == "heads")
            m.heads = detect::make_head_params(m.cfg.c, r);
        else
            throw ContractError("reinit_groups: unknown group '" + name + "'");
    }
    rebuild_groups(m);
}

namespace {

struct AgentFeatures {
    std::vector<std::string> tags;
    std::vector<TensorPtr> feats;  // [c,H,W] each, agent frame
};

AgentFeatures agent_modality_features(const Model& m, const SceneSample& s, int agent,
                                      const ForwardOptions& opts) {
    const bool has_mask = opts.masks != nullptr;
    sim::ModalityMask mask = has_mask ? (*opts.masks)[static_cast<std::size_t>(agent)]
                                      : sim::ModalityMask{true, true};

    AgentFeatures af;
    auto want = [&](const char* tag) {
        if (!opts.kept_modalities) return true;
        for (const auto& k : *opts.kept_modalities)
            if (k == tag) return true;
        return false;
    };
    // The random drop never empties an agent's set: with a single available
    // modality the drop is a no-op for that agent.
    const int available = (mask.geometry ? 1 : 0) + (mask.appearance ? 1 : 0);

    if (mask.geometry && (available == 1 || want("geometry"))) {
        TensorPtr f;
        if (opts.cache && opts.cache->has_aligned)
            f = opts.cache->geo_aligned[opts.sample_index][static_cast<std::size_t>(agent)];
        else {
            TensorPtr enc;
            if (opts.cache && opts.cache->has_encoder)
                enc = opts.cache->geo_feat[opts.sample_index][static_cast<std::size_t>(agent)];
            else {
                auto raster = s.geo_raster[static_cast<std::size_t>(agent)];
                auto h1 = gelu(conv2d(raster, m.geo_enc.conv1_w, m.geo_enc.conv1_b, 1, 1));
                enc = gelu(conv2d(h1, m.geo_enc.conv2_w, m.geo_enc.conv2_b, 1, 1));
            }
            if (opts.capture && agent == 0) opts.capture->geo_raw = enc;
            f = branches::align(enc, m.geo_aligner);
        }
        af.tags.push_back("geometry");
        af.feats.push_back(f);
    }
    if (mask.appearance && (available == 1 || want("appearance"))) {
        TensorPtr f;
        if (opts.cache && opts.cache->has_aligned)
            f = opts.cache->app_aligned[opts.sample_index][static_cast<std::size_t>(agent)];
        else {
            TensorPtr enc;
            if (opts.cache && opts.cache->has_encoder)
                enc = opts.cache->app_feat[opts.sample_index][static_cast<std::size_t>(agent)];
            else {
                sim::AppearanceObservation obs;
                obs.grid = s.app_image[static_cast<std::size_t>(agent)];
                enc = branches::encode_appearance(obs, m.app_enc);
            }
            if (opts.capture && agent == 0) opts.capture->app_raw = enc;
            f = branches::align(enc, m.app_aligner);
        }
        af.tags.push_back("appearance");
        af.feats.push_back(f);
    }
    if (af.feats.empty())
        throw ContractError("forward_scene: agent " + std::to_string(agent) +
                            " has no active modality");
    return af;
}

TensorPtr fuse_agent(const Model& m, const AgentFeatures& af, int agent,
                     const ForwardOptions& opts) {
    const int H = m.cfg.grid.h, W = m.cfg.grid.w;
    if (m.cfg.fusion == FusionKind::lamma) {
        lamma::ModalitySet set;
        for (std::size_t i = 0; i < af.feats.size(); ++i)
            set.entries.push_back({af.tags[i], lamma::project_tokens(af.feats[i], m.fusion)});
        auto r = lamma::lamma_forward(set, m.fusion);
        if (opts.capture && agent == 0) {
            opts.capture->fused_tokens = r.output;
            for (std::size_t i = 0; i < set.entries.size(); ++i) {
                if (set.entries[i].tag == "geometry") opts.capture->geo_fused = r.z_fused[i];
                if (set.entries[i].tag == "appearance") opts.capture->app_fused = r.z_fused[i];
            }
        }
        return lamma::restore_tokens(r.output, m.fusion, H, W);
    }
    // Concat baseline: fixed two-slot layout, absent modality zero-filled.
    TensorPtr geo, app;
    for (std::size_t i = 0; i < af.tags.size(); ++i) {
        if (af.tags[i] == "geometry") geo = af.feats[i];
        if (af.tags[i] == "appearance") app = af.feats[i];
    }
    return baseline_concat_fuse(geo, app, m.concat_fusion, H, W);
}

}  // namespace

TensorPtr baseline_concat_fuse(const TensorPtr& geometry, const TensorPtr& appearance,
                               const ConcatFusionParams& p, int h, int w) {
    auto geo = geometry ? geometry : zeros({p.c, h, w});
    auto app = appearance ? appearance : zeros({p.c, h, w});
    if (geo->shape != std::vector<int>{p.c, h, w} || app->shape != geo->shape)
        throw DimError("baseline_concat_fuse: features must be [c,H,W]");
    auto cat = concat({geo, app}, 0);
    return conv2d(cat, p.w, p.b, 1, 1);
}

detect::HeadOutput forward_scene(const Model& m, const SceneSample& s,
                                 const ForwardOptions& opts) {
    const int n_agents = static_cast<int>(s.scene.agents.size());
    if (opts.masks && static_cast<int>(opts.masks->size()) != n_agents)
        throw DimError("forward_scene: mask count does not match agents");

    std::vector<TensorPtr> ego_frame;
    const auto& ego_pose = s.scene.agents[0];
    for (int a = 0; a < n_agents; ++a) {
        auto af = agent_modality_features(m, s, a, opts);
        auto fused = fuse_agent(m, af, a, opts);
        if (a == 0) {
            ego_frame.push_back(fused);
        } else {
            BevFeature bf;
            bf.t = fused;
            bf.agent_id = a;
            const auto& pose = s.scene.agents[static_cast<std::size_t>(a)];
            bf.origin_x = pose.x;
            bf.origin_y = pose.y;
            bf.yaw = pose.yaw;
            auto warped = sim::warp_to_ego(bf, pose, ego_pose, m.cfg.grid);
            ego_frame.push_back(warped.t);
        }
    }
    auto collaborative = collab::att_fuse(ego_frame);
    return detect::head_forward(collaborative, m.heads);
}

// Localization converges much slower than objectness at this grid size;
// the regression term carries extra weight.
constexpr double kRegLossWeight = 10.0;

TensorPtr detection_loss(const detect::HeadOutput& out, const detect::Targets& targets) {
    auto cls = detect::focal_loss(out.cls, targets.cls);
    // Rescale the per-cell mean to the usual per-positive normalization so
    // the handful of object cells is not drowned by the background.
    const double cells = static_cast<double>(targets.cls.size());
    auto cls_scaled = scale(cls, cells / std::max(1, targets.n_pos));
    auto reg = detect::smooth_l1(out.reg, targets.reg, targets.pos_mask);
    auto dir = detect::dir_loss(out.dir, targets.dir_bin, targets.pos_mask);
    return add(add(cls_scaled, scale(reg, kRegLossWeight)), scale(dir, 0.2));
}

InferenceGuard::InferenceGuard(Model& m) : model_(m) {
    for (auto& g : model_.groups)
        for (auto& [n, t] : g.tensors) {
            saved_.push_back(t->requires_grad);
            t->requires_grad = false;
        }
}

InferenceGuard::~InferenceGuard() {
    std::size_t i = 0;
    for (auto& g : model_.groups)
        for (auto& [n, t] : g.tensors) t->requires_grad = saved_[i++];
}

}  // namespace mmcp

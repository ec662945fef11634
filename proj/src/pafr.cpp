#include "mmcp/pafr.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>

#include "mmcp/common.hpp"

namespace mmcp::pafr {

// ---------------------------------------------------------------------------
// data
// ---------------------------------------------------------------------------

namespace {

TensorPtr render_geo_raster(const sim::Scene& scene, int agent, const WorldConfig& world,
                            const BevGrid& grid, int n_points, double sigma, Rng rng) {
    auto obs = sim::render_geometry(scene, agent, n_points, sigma, world.geo_sensor, rng);
    return branches::rasterize_geometry(obs, grid);
}

}  // namespace

Dataset build_dataset(std::uint64_t root_seed, const std::string& split, int count,
                      const WorldConfig& world, const BevGrid& grid) {
    Dataset ds;
    ds.split = split;
    ds.samples.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        SceneSample s;
        s.scene = sim::generate_scene(derive_seed(root_seed, "scene." + split, static_cast<std::uint64_t>(i)),
                                      world.scene);
        const int n_agents = static_cast<int>(s.scene.agents.size());
        for (int a = 0; a < n_agents; ++a) {
            Rng geo_rng = stream(root_seed, "render.geo." + split, static_cast<std::uint64_t>(i),
                                 static_cast<std::uint64_t>(a));
            s.geo_raster.push_back(render_geo_raster(s.scene, a, world, grid, world.geo_points,
                                                     world.geo_sigma, geo_rng));
            Rng app_rng = stream(root_seed, "render.app." + split, static_cast<std::uint64_t>(i),
                                 static_cast<std::uint64_t>(a));
            auto aobs = sim::render_appearance(s.scene, a, world.app_blur, world.app_noise,
                                               world.app_sensor, app_rng);
            s.app_image.push_back(aobs.grid);
        }
        s.targets = detect::build_targets(s.scene.objects, grid);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

TensorPtr rerender_geometry_raster(std::uint64_t root_seed, const std::string& split,
                                   std::size_t index, int agent, const SceneSample& sample,
                                   const WorldConfig& world, const BevGrid& grid,
                                   int n_points, double sigma) {
    Rng rng = stream(root_seed, "render.geo." + split, static_cast<std::uint64_t>(index),
                     static_cast<std::uint64_t>(agent));
    return render_geo_raster(sample.scene, agent, world, grid, n_points, sigma, rng);
}

// ---------------------------------------------------------------------------
// plan
// ---------------------------------------------------------------------------

std::vector<StageSpec> make_plan(const TrainConfig& cfg) {
    const std::vector<std::string> all = {"geometry_encoder", "appearance_encoder",
                                          "geometry_aligner", "appearance_aligner",
                                          "fusion",           "heads"};
    auto complement = [&](const std::vector<std::string>& trainable) {
        std::vector<std::string> frozen;
        for (const auto& g : all)
            if (std::find(trainable.begin(), trainable.end(), g) == trainable.end())
                frozen.push_back(g);
        return frozen;
    };
    auto stage = [&](std::string name, std::vector<std::string> trainable, std::string feed,
                     double p_drop, int epochs, double lr) {
        StageSpec s;
        s.name = std::move(name);
        s.trainable = std::move(trainable);
        s.frozen = complement(s.trainable);
        s.modality_feed = std::move(feed);
        s.p_drop = p_drop;
        s.epochs = epochs;
        s.lr = lr;
        s.lr_drop_epoch = std::max(1, static_cast<int>(epochs * cfg.lr_drop_fraction));
        if (s.lr_drop_epoch >= epochs) s.lr_drop_epoch = 0;
        s.lr_drop_factor = cfg.lr_drop_factor;
        return s;
    };

    const std::string first = cfg.geometry_first ? "geometry" : "appearance";
    const std::string second = cfg.geometry_first ? "appearance" : "geometry";

    std::vector<StageSpec> plan;
    // Step 1: each branch pretrained independently with provisional common
    // modules; only the encoders survive into step 2.
    plan.push_back(stage("pretrain_" + first,
                         {first + "_encoder", first + "_aligner", "fusion", "heads"}, first,
                         0.0, cfg.pretrain_epochs, cfg.lr_branch));
    plan.push_back(stage("pretrain_" + second,
                         {second + "_encoder", second + "_aligner", "fusion", "heads"}, second,
                         0.0, cfg.pretrain_epochs, cfg.lr_branch));
    // Step 2: aligners, one modality at a time; extractors frozen. The first
    // pass also trains the common modules; the second trains only its
    // aligner, forcing the second modality into the already-established
    // fusion space.
    plan.push_back(stage("align_" + first, {first + "_aligner", "fusion", "heads"}, first, 0.0,
                         cfg.align_epochs, cfg.lr_branch));
    plan.push_back(stage("align_" + second, {second + "_aligner"}, second, 0.0,
                         cfg.align_epochs, cfg.lr_branch));
    // Step 3: multimodal fusion with branches frozen.
    std::vector<std::string> fuse_groups = {"fusion"};
    if (!cfg.freeze_heads_in_fusion) fuse_groups.push_back("heads");
    plan.push_back(stage("fuse", fuse_groups, "both", 0.0, cfg.fuse_epochs, cfg.lr_fusion));
    // Step 4: random-drop fine-tuning, same freezing as step 3.
    plan.push_back(stage("rd", fuse_groups, "both", cfg.p_drop, cfg.rd_epochs, cfg.lr_fusion));

    for (auto& s : plan) {
        const bool enc_frozen =
            std::find(s.trainable.begin(), s.trainable.end(), "geometry_encoder") == s.trainable.end() &&
            std::find(s.trainable.begin(), s.trainable.end(), "appearance_encoder") == s.trainable.end();
        const bool aligners_frozen =
            std::find(s.trainable.begin(), s.trainable.end(), "geometry_aligner") == s.trainable.end() &&
            std::find(s.trainable.begin(), s.trainable.end(), "appearance_aligner") == s.trainable.end();
        s.cache_encoders = enc_frozen;
        s.cache_aligned = enc_frozen && aligners_frozen;
    }
    return plan;
}

void validate_plan(const std::vector<StageSpec>& plan,
                   const std::vector<std::string>& group_names) {
    if (plan.empty()) throw ContractError("train plan has no stages");
    for (const auto& s : plan) {
        std::set<std::string> seen;
        for (const auto& g : s.trainable) seen.insert(g);
        for (const auto& g : s.frozen)
            if (!seen.insert(g).second)
                throw ContractError("stage " + s.name + ": group '" + g +
                                    "' is both trainable and frozen");
        for (const auto& g : group_names)
            if (!seen.count(g))
                throw ContractError("stage " + s.name + ": group '" + g + "' unclassified");
        const bool staged = s.name.rfind("pretrain_", 0) == 0 ||
                            s.name.rfind("align_", 0) == 0 || s.name == "fuse" ||
                            s.name == "rd";
        if (s.name == "rd" && s.p_drop != 0.5)
            throw ContractError("rd stage must use p_drop = 0.5");
        if (staged && s.name != "rd" && s.p_drop != 0.0)
            throw ContractError("stage " + s.name + " must use p_drop = 0");
    }
    // PAFR order: pretraining, then aligners, then fusion, then rd.
    auto rank = [](const std::string& name) {
        if (name.rfind("pretrain_", 0) == 0) return 0;
        if (name.rfind("align_", 0) == 0) return 1;
        if (name == "fuse") return 2;
        if (name == "rd") return 3;
        return 4;
    };
    for (std::size_t i = 1; i < plan.size(); ++i)
        if (rank(plan[i].name) < rank(plan[i - 1].name))
            throw ContractError("plan violates the pretrain -> align -> fuse -> rd order");
}

int plan_total_epochs(const std::vector<StageSpec>& plan) {
    int total = 0;
    for (const auto& s : plan) total += s.epochs;
    return total;
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

void Adam::step(Model& m, double lr, double weight_decay) {
    for (auto& g : m.groups) {
        if (g.frozen) continue;
        for (auto& [name, t] : g.tensors) {
            if (t->grad.size() != t->data.size()) continue;  // no gradient this step
            auto& st = state_[t.get()];
            if (st.m.size() != t->data.size()) {
                st.m.assign(t->data.size(), 0.0);
                st.v.assign(t->data.size(), 0.0);
                st.t = 0;
            }
            st.t += 1;
            const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(st.t));
            const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(st.t));
            for (std::size_t i = 0; i < t->data.size(); ++i) {
                const double grad = t->grad[i] + weight_decay * t->data[i];
                st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * grad;
                st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * grad * grad;
                const double mhat = st.m[i] / bc1;
                const double vhat = st.v[i] / bc2;
                t->data[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

EvalResult evaluate(Model& m, const Dataset& test, sim::FailureMode mode,
                    const EvalOptions& opts) {
    InferenceGuard guard(m);
    std::vector<std::vector<detect::Detection>> dets;
    std::vector<std::vector<ObjectBox>> gts;
    EvalResult r;
    for (std::size_t i = 0; i < test.samples.size(); ++i) {
        const auto& s = test.samples[i];
        auto masks = sim::apply_failure(mode, static_cast<int>(s.scene.agents.size()));
        ForwardOptions fwd;
        fwd.masks = &masks;
        fwd.sample_index = i;
        auto out = forward_scene(m, s, fwd);
        dets.push_back(detect::decode_boxes(out, m.cfg.grid, opts.score_thresh, opts.nms_iou));
        gts.push_back(s.scene.objects);
        r.n_detections += static_cast<int>(dets.back().size());
        r.n_ground_truth += static_cast<int>(gts.back().size());
    }
    r.n_scenes = static_cast<int>(test.samples.size());
    r.ap30 = detect::average_precision(dets, gts, 0.30);
    r.ap50 = detect::average_precision(dets, gts, 0.50);
    r.ap70 = detect::average_precision(dets, gts, 0.70);
    return r;
}

// ---------------------------------------------------------------------------
// trainer
// ---------------------------------------------------------------------------

Trainer::Trainer(Model& model, const Dataset& train, std::uint64_t root_seed,
                 double weight_decay)
    : model_(model), train_(train), seed_(root_seed), weight_decay_(weight_decay) {}

StageResult Trainer::run_stage(const StageSpec& spec, int stage_index) {
    validate_plan({spec}, {});  // per-stage p_drop sanity only
    for (const auto& g : spec.trainable) model_.group(g).set_frozen(false);
    for (const auto& g : spec.frozen) model_.group(g).set_frozen(true);
    {
        std::set<std::string> classified(spec.trainable.begin(), spec.trainable.end());
        for (const auto& g : spec.frozen) classified.insert(g.c_str());
        for (const auto& name : model_.group_names())
            if (!classified.count(name))
                throw ContractError("stage " + spec.name + ": group '" + name +
                                    "' unclassified");
    }

    // Build caches for frozen prefixes of the pipeline.
    FeatureCache cache;
    if (spec.cache_encoders || spec.cache_aligned) {
        InferenceGuard guard(model_);
        const std::size_t n = train_.samples.size();
        cache.geo_feat.resize(n);
        cache.app_feat.resize(n);
        cache.geo_aligned.resize(n);
        cache.app_aligned.resize(n);
        const bool want_geo = spec.modality_feed != "appearance";
        const bool want_app = spec.modality_feed != "geometry";
        for (std::size_t i = 0; i < n; ++i) {
            const auto& s = train_.samples[i];
            const int n_agents = static_cast<int>(s.scene.agents.size());
            for (int a = 0; a < n_agents; ++a) {
                if (want_geo) {
                    auto h1 = gelu(conv2d(s.geo_raster[static_cast<std::size_t>(a)],
                                          model_.geo_enc.conv1_w, model_.geo_enc.conv1_b, 1, 1));
                    auto enc = gelu(conv2d(h1, model_.geo_enc.conv2_w, model_.geo_enc.conv2_b, 1, 1));
                    if (spec.cache_aligned)
                        cache.geo_aligned[i].push_back(branches::align(enc, model_.geo_aligner));
                    else
                        cache.geo_feat[i].push_back(enc);
                }
                if (want_app) {
                    sim::AppearanceObservation obs;
                    obs.grid = s.app_image[static_cast<std::size_t>(a)];
                    auto enc = branches::encode_appearance(obs, model_.app_enc);
                    if (spec.cache_aligned)
                        cache.app_aligned[i].push_back(branches::align(enc, model_.app_aligner));
                    else
                        cache.app_feat[i].push_back(enc);
                }
            }
        }
        cache.has_encoder = !spec.cache_aligned && spec.cache_encoders;
        cache.has_aligned = spec.cache_aligned;
    }

    std::vector<std::string> canonical;
    if (spec.modality_feed == "geometry")
        canonical = {"geometry"};
    else if (spec.modality_feed == "appearance")
        canonical = {"appearance"};
    else
        canonical = {"geometry", "appearance"};
    std::vector<sim::ModalityMask> mask_template;

    Adam adam;  // fresh optimizer state per stage
    StageResult result;
    result.stage = spec.name;
    result.stage_index = stage_index;

    std::ofstream log;
    if (!metrics_path_.empty()) log.open(metrics_path_, std::ios::app);

    for (int epoch = 0; epoch < spec.epochs; ++epoch) {
        const double lr = (spec.lr_drop_epoch > 0 && epoch >= spec.lr_drop_epoch)
                              ? spec.lr * spec.lr_drop_factor
                              : spec.lr;
        std::vector<std::size_t> order(train_.samples.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng order_rng = stream(seed_, "train.order", static_cast<std::uint64_t>(stage_index),
                               static_cast<std::uint64_t>(epoch));
        order_rng.shuffle(order);
        Rng drop_rng = stream(seed_, "train.drop", static_cast<std::uint64_t>(stage_index),
                              static_cast<std::uint64_t>(epoch));

        double epoch_loss = 0.0;
        for (std::size_t step = 0; step < order.size(); ++step) {
            const auto& s = train_.samples[order[step]];
            const int n_agents = static_cast<int>(s.scene.agents.size());
            mask_template.assign(static_cast<std::size_t>(n_agents),
                                 {spec.modality_feed != "appearance",
                                  spec.modality_feed != "geometry"});

            // One drop decision per training sample, shared by all agents.
            std::vector<std::string> kept = canonical;
            if (spec.p_drop > 0.0 && canonical.size() > 1) {
                lamma::ModalitySet tag_set;
                for (const auto& tag : canonical)
                    tag_set.entries.push_back({tag, nullptr});
                auto dropped = lamma::drop_modality(tag_set, drop_rng, spec.p_drop);
                kept.clear();
                for (const auto& e : dropped.entries) kept.push_back(e.tag);
                if (kept.size() < canonical.size()) ++result.drop_events;
            }

            ForwardOptions fwd;
            fwd.masks = &mask_template;
            fwd.kept_modalities = &kept;
            fwd.cache = (cache.has_encoder || cache.has_aligned) ? &cache : nullptr;
            fwd.sample_index = order[step];

            TensorPtr loss;
            try {
                auto out = forward_scene(model_, s, fwd);
                loss = detection_loss(out, s.targets);
                for (auto& g : model_.groups)
                    if (!g.frozen)
                        for (auto& [n2, t] : g.tensors) t->zero_grad();
                backward(loss);
            } catch (const NonFiniteError& e) {
                throw TrainingError("divergence in stage " + spec.name + ", epoch " +
                                    std::to_string(epoch) + ", step " + std::to_string(step) +
                                    ": " + e.what());
            }
            adam.step(model_, lr, weight_decay_);
            epoch_loss += loss->data[0];
            ++result.steps;
        }
        epoch_loss /= static_cast<double>(std::max<std::size_t>(1, order.size()));
        result.epoch_loss.push_back(epoch_loss);
        result.final_epoch_loss = epoch_loss;
        if (log.is_open())
            log << spec.name << "," << epoch << "," << epoch_loss << "," << lr << "\n";
    }
    history_.push_back(result);
    return result;
}

PipelineResult run_pafr(Model& m, Trainer& trainer, const std::vector<StageSpec>& plan,
                        std::uint64_t seed, const StageHooks* hooks) {
    validate_plan(plan, m.group_names());
    PipelineResult result;
    int index = 0;
    bool boundary_done = false;
    for (const auto& spec : plan) {
        const bool pretrain = spec.name.rfind("pretrain_", 0) == 0;
        if (!pretrain && !boundary_done) {
            // Keep only the pretrained encoders; downstream modules restart.
            reinit_groups(m, {"geometry_aligner", "appearance_aligner", "fusion", "heads"},
                          seed, "init.stage2");
            boundary_done = true;
        }
        if (hooks && hooks->before) hooks->before(spec, index);
        auto r = trainer.run_stage(spec, index);
        if (hooks && hooks->after) hooks->after(spec, index, r);
        ++index;
        if (spec.p_drop > 0.0) {
            result.rd_drop_events += r.drop_events;
            result.rd_steps += r.steps;
        }
        result.stages.push_back(std::move(r));
    }
    return result;
}

StageResult naive_joint_train(Model& m, Trainer& trainer, int epochs, double lr,
                              double lr_drop_fraction, bool with_rd) {
    StageSpec spec;
    spec.name = with_rd ? "naive_rd" : "naive";
    spec.trainable = m.group_names();
    spec.frozen = {};
    spec.modality_feed = "both";
    spec.p_drop = with_rd ? 0.5 : 0.0;
    spec.epochs = epochs;
    spec.lr = lr;
    spec.lr_drop_epoch = std::max(1, static_cast<int>(epochs * lr_drop_fraction));
    if (spec.lr_drop_epoch >= epochs) spec.lr_drop_epoch = 0;
    return trainer.run_stage(spec, 0);
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'M', 'M', 'C', 'P', 'C', 'K', 'P', '1'};

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void write_str(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
std::string read_str(std::istream& is) {
    const auto n = read_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& m, const CheckpointMeta& meta) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path);
    os.write(kMagic, 8);
    write_str(os, meta.stage);
    write_u32(os, static_cast<std::uint32_t>(meta.stage_index));
    write_u64(os, meta.root_seed);
    write_str(os, meta.fusion_kind);
    write_str(os, meta.metrics_json);
    write_u32(os, static_cast<std::uint32_t>(m.groups.size()));
    for (const auto& g : m.groups) {
        write_str(os, g.name);
        os.put(g.frozen ? 1 : 0);
        write_u32(os, static_cast<std::uint32_t>(g.tensors.size()));
        for (const auto& [name, t] : g.tensors) {
            write_str(os, name);
            write_u32(os, static_cast<std::uint32_t>(t->shape.size()));
            for (int d : t->shape) write_u32(os, static_cast<std::uint32_t>(d));
            os.write(reinterpret_cast<const char*>(t->data.data()),
                     static_cast<std::streamsize>(t->data.size() * sizeof(double)));
        }
    }
    if (!os) throw IoError("failed writing checkpoint: " + path);
}

CheckpointMeta peek_checkpoint_meta(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0) throw IoError("not a checkpoint file: " + path);
    CheckpointMeta meta;
    meta.stage = read_str(is);
    meta.stage_index = static_cast<int>(read_u32(is));
    meta.root_seed = read_u64(is);
    meta.fusion_kind = read_str(is);
    meta.metrics_json = read_str(is);
    if (!is) throw IoError("truncated checkpoint: " + path);
    return meta;
}

CheckpointMeta load_checkpoint(const std::string& path, Model& m) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0)
        throw IoError("not a checkpoint file: " + path);
    CheckpointMeta meta;
    meta.stage = read_str(is);
    meta.stage_index = static_cast<int>(read_u32(is));
    meta.root_seed = read_u64(is);
    meta.fusion_kind = read_str(is);
    meta.metrics_json = read_str(is);
    const auto n_groups = read_u32(is);
    if (n_groups != m.groups.size())
        throw ConfigError("checkpoint group count does not match the model");
    for (auto& g : m.groups) {
        const auto name = read_str(is);
        if (name != g.name)
            throw ConfigError("checkpoint group '" + name + "' does not match model group '" +
                              g.name + "'");
        g.frozen = is.get() != 0;
        const auto n_tensors = read_u32(is);
        if (n_tensors != g.tensors.size())
            throw ConfigError("checkpoint tensor count mismatch in group " + g.name);
        for (auto& [tname, t] : g.tensors) {
            const auto got = read_str(is);
            if (got != tname)
                throw ConfigError("checkpoint tensor '" + got + "' does not match '" + tname + "'");
            const auto rank = read_u32(is);
            std::vector<int> shape(rank);
            for (auto& d : shape) d = static_cast<int>(read_u32(is));
            if (shape != t->shape)
                throw ConfigError("checkpoint shape mismatch for " + g.name + "." + tname +
                                  ": file " + shape_str(shape) + " vs model " +
                                  shape_str(t->shape));
            is.read(reinterpret_cast<char*>(t->data.data()),
                    static_cast<std::streamsize>(t->data.size() * sizeof(double)));
        }
        g.set_frozen(g.frozen);
    }
    if (!is) throw IoError("truncated checkpoint: " + path);
    return meta;
}

}  // namespace mmcp::pafr

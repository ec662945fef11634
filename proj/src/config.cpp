#include "mmcp/config.hpp"

#include <json.hpp>

#include <fstream>
#include <set>

#include "mmcp/common.hpp"

namespace mmcp {

namespace {

using nlohmann::json;

void require_keys(const json& j, const std::string& where,
                  const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

RunConfig config_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    RunConfig cfg;
    require_keys(j, "config",
                 {"seed", "out_dir", "world", "model", "train", "eval", "diagnostics"});
    get_if(j, "seed", cfg.seed);
    get_if(j, "out_dir", cfg.out_dir);

    if (j.contains("world")) {
        const auto& w = j.at("world");
        require_keys(w, "world",
                     {"extent", "agents", "min_objects", "max_objects", "agent_clearance",
                      "max_pair_iou", "geometry", "appearance"});
        get_if(w, "extent", cfg.world.scene.extent);
        get_if(w, "agents", cfg.world.scene.n_agents);
        get_if(w, "min_objects", cfg.world.scene.min_objects);
        get_if(w, "max_objects", cfg.world.scene.max_objects);
        get_if(w, "agent_clearance", cfg.world.scene.agent_clearance);
        get_if(w, "max_pair_iou", cfg.world.scene.max_pair_iou);
        if (w.contains("geometry")) {
            const auto& g = w.at("geometry");
            require_keys(g, "world.geometry",
                         {"points", "sigma", "points_per_m2", "clutter_frac"});
            get_if(g, "points", cfg.world.geo_points);
            get_if(g, "sigma", cfg.world.geo_sigma);
            get_if(g, "points_per_m2", cfg.world.geo_sensor.points_per_m2);
            get_if(g, "clutter_frac", cfg.world.geo_sensor.clutter_frac);
        }
        if (w.contains("appearance")) {
            const auto& a = w.at("appearance");
            require_keys(a, "world.appearance",
                         {"blur_radius", "noise_sigma", "background", "falloff_scale"});
            get_if(a, "blur_radius", cfg.world.app_blur);
            get_if(a, "noise_sigma", cfg.world.app_noise);
            get_if(a, "background", cfg.world.app_sensor.background);
            get_if(a, "falloff_scale", cfg.world.app_sensor.falloff_scale);
        }
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        require_keys(m, "model", {"c", "d", "heads", "stride", "grid", "cell", "fusion"});
        get_if(m, "c", cfg.model.c);
        get_if(m, "d", cfg.model.d);
        get_if(m, "heads", cfg.model.heads);
        get_if(m, "stride", cfg.model.stride);
        int grid = cfg.model.grid.h;
        double cell = cfg.model.grid.cell;
        get_if(m, "grid", grid);
        get_if(m, "cell", cell);
        cfg.model.grid = BevGrid{grid, grid, cell};
        if (m.contains("fusion")) {
            const auto f = m.at("fusion").get<std::string>();
            if (f == "lamma")
                cfg.model.fusion = FusionKind::lamma;
            else if (f == "concat")
                cfg.model.fusion = FusionKind::concat;
            else
                throw ConfigError("model.fusion must be 'lamma' or 'concat'");
        }
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        require_keys(t, "train",
                     {"train_scenes", "test_scenes", "pretrain_epochs", "align_epochs",
                      "fuse_epochs", "rd_epochs", "lr_branch", "lr_fusion", "weight_decay",
                      "lr_drop_fraction", "lr_drop_factor", "p_drop", "geometry_first",
                      "freeze_heads_in_fusion", "naive_epochs"});
        get_if(t, "train_scenes", cfg.train_scenes);
        get_if(t, "test_scenes", cfg.test_scenes);
        get_if(t, "pretrain_epochs", cfg.train.pretrain_epochs);
        get_if(t, "align_epochs", cfg.train.align_epochs);
        get_if(t, "fuse_epochs", cfg.train.fuse_epochs);
        get_if(t, "rd_epochs", cfg.train.rd_epochs);
        get_if(t, "lr_branch", cfg.train.lr_branch);
        get_if(t, "lr_fusion", cfg.train.lr_fusion);
        get_if(t, "weight_decay", cfg.train.weight_decay);
        get_if(t, "lr_drop_fraction", cfg.train.lr_drop_fraction);
        get_if(t, "lr_drop_factor", cfg.train.lr_drop_factor);
        get_if(t, "p_drop", cfg.train.p_drop);
        get_if(t, "geometry_first", cfg.train.geometry_first);
        get_if(t, "freeze_heads_in_fusion", cfg.train.freeze_heads_in_fusion);
        get_if(t, "naive_epochs", cfg.train.naive_epochs);
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        require_keys(e, "eval", {"score_thresh", "nms_iou"});
        get_if(e, "score_thresh", cfg.eval.score_thresh);
        get_if(e, "nms_iou", cfg.eval.nms_iou);
    }
    if (j.contains("diagnostics")) {
        const auto& d = j.at("diagnostics");
        require_keys(d, "diagnostics",
                     {"degradation_points", "noise_sigmas", "export_samples",
                      "comm_bits_per_value"});
        get_if(d, "degradation_points", cfg.degradation_points);
        get_if(d, "noise_sigmas", cfg.noise_sigmas);
        get_if(d, "export_samples", cfg.export_samples);
        get_if(d, "comm_bits_per_value", cfg.comm_bits_per_value);
    }

    if (cfg.model.c % 2 != 0) throw ConfigError("model.c must be even");
    if (cfg.model.d % cfg.model.heads != 0)
        throw ConfigError("model.d must be divisible by model.heads");
    if (cfg.model.grid.h % cfg.model.stride != 0)
        throw ConfigError("model.grid must be divisible by model.stride");
    if (cfg.train_scenes < 1 || cfg.test_scenes < 1)
        throw ConfigError("train_scenes and test_scenes must be positive");
    // The appearance sensor grid mirrors the BEV grid.
    cfg.world.app_sensor.h = cfg.model.grid.h;
    cfg.world.app_sensor.w = cfg.model.grid.w;
    cfg.world.app_sensor.resolution = cfg.model.grid.cell;
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file: " + path);
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return config_from_json_text(text);
}

std::string config_to_json_text(const RunConfig& cfg) {
    json j;
    j["seed"] = cfg.seed;
    j["out_dir"] = cfg.out_dir;
    j["world"] = {
        {"extent", cfg.world.scene.extent},
        {"agents", cfg.world.scene.n_agents},
        {"min_objects", cfg.world.scene.min_objects},
        {"max_objects", cfg.world.scene.max_objects},
        {"agent_clearance", cfg.world.scene.agent_clearance},
        {"max_pair_iou", cfg.world.scene.max_pair_iou},
        {"geometry",
         {{"points", cfg.world.geo_points},
          {"sigma", cfg.world.geo_sigma},
          {"points_per_m2", cfg.world.geo_sensor.points_per_m2},
          {"clutter_frac", cfg.world.geo_sensor.clutter_frac}}},
        {"appearance",
         {{"blur_radius", cfg.world.app_blur},
          {"noise_sigma", cfg.world.app_noise},
          {"background", cfg.world.app_sensor.background},
          {"falloff_scale", cfg.world.app_sensor.falloff_scale}}}};
    j["model"] = {{"c", cfg.model.c},
                  {"d", cfg.model.d},
                  {"heads", cfg.model.heads},
                  {"stride", cfg.model.stride},
                  {"grid", cfg.model.grid.h},
                  {"cell", cfg.model.grid.cell},
                  {"fusion", cfg.model.fusion == FusionKind::lamma ? "lamma" : "concat"}};
    j["train"] = {{"train_scenes", cfg.train_scenes},
                  {"test_scenes", cfg.test_scenes},
                  {"pretrain_epochs", cfg.train.pretrain_epochs},
                  {"align_epochs", cfg.train.align_epochs},
                  {"fuse_epochs", cfg.train.fuse_epochs},
                  {"rd_epochs", cfg.train.rd_epochs},
                  {"lr_branch", cfg.train.lr_branch},
                  {"lr_fusion", cfg.train.lr_fusion},
                  {"weight_decay", cfg.train.weight_decay},
                  {"lr_drop_fraction", cfg.train.lr_drop_fraction},
                  {"lr_drop_factor", cfg.train.lr_drop_factor},
                  {"p_drop", cfg.train.p_drop},
                  {"geometry_first", cfg.train.geometry_first},
                  {"freeze_heads_in_fusion", cfg.train.freeze_heads_in_fusion},
                  {"naive_epochs", cfg.train.naive_epochs}};
    j["eval"] = {{"score_thresh", cfg.eval.score_thresh}, {"nms_iou", cfg.eval.nms_iou}};
    j["diagnostics"] = {{"degradation_points", cfg.degradation_points},
                        {"noise_sigmas", cfg.noise_sigmas},
                        {"export_samples", cfg.export_samples},
                        {"comm_bits_per_value", cfg.comm_bits_per_value}};
    return j.dump(2) + "\n";
}

}  // namespace mmcp

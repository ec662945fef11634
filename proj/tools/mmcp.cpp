#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "mmcp/collab.hpp"
#include "mmcp/config.hpp"
#include "mmcp/diagnostics.hpp"
#include "mmcp/pafr.hpp"

using namespace mmcp;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitTraining = 4;
constexpr int kExitIo = 5;

struct Cli {
    std::string config_path;
    std::uint64_t seed_override = 0;
    bool seed_set = false;
    std::string out_override;
};

RunConfig resolve_config(const Cli& cli) {
    RunConfig cfg = cli.config_path.empty() ? RunConfig{} : load_config(cli.config_path);
    if (cli.seed_set) cfg.seed = cli.seed_override;
    if (!cli.out_override.empty()) cfg.out_dir = cli.out_override;
    return cfg;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write " + path);
    os << text;
    if (!os) throw IoError("failed writing " + path);
}

// The run directory always carries the exact config it was produced with.
void stamp_config(const RunConfig& cfg) {
    fs::create_directories(cfg.out_dir);
    write_text(cfg.out_dir + "/config.json", config_to_json_text(cfg));
}

pafr::Dataset dataset_for(const RunConfig& cfg, const std::string& split, int count) {
    return pafr::build_dataset(cfg.seed, split, count, cfg.world, cfg.model.grid);
}

json eval_to_json(const pafr::EvalResult& ev, const std::string& mode, const RunConfig& cfg) {
    return json{{"mode", mode},
                {"ap30", ev.ap30},
                {"ap50", ev.ap50},
                {"ap70", ev.ap70},
                {"n_scenes", ev.n_scenes},
                {"n_detections", ev.n_detections},
                {"n_ground_truth", ev.n_ground_truth},
                {"comm_cost_log2_bytes",
                 collab::comm_cost(cfg.model.grid.h, cfg.model.grid.w, cfg.model.c,
                                   cfg.comm_bits_per_value)},
                {"seed", cfg.seed}};
}

int cmd_gen_data(const RunConfig& cfg) {
    stamp_config(cfg);
    const std::string dir = cfg.out_dir + "/dataset";
    fs::create_directories(dir);
    for (const auto& [split, count] :
         {std::pair<std::string, int>{"train", cfg.train_scenes}, {"test", cfg.test_scenes}}) {
        json manifest;
        manifest["split"] = split;
        manifest["root_seed"] = cfg.seed;
        manifest["scenes"] = json::array();
        for (int i = 0; i < count; ++i) {
            const auto scene_seed = derive_seed(cfg.seed, "scene." + split, static_cast<std::uint64_t>(i));
            auto scene = sim::generate_scene(scene_seed, cfg.world.scene);
            manifest["scenes"].push_back(
                {{"index", i}, {"seed", scene_seed}, {"scene", json::parse(sim::scene_to_json(scene))}});
        }
        write_text(dir + "/" + split + ".json", manifest.dump(2) + "\n");
    }
    std::printf("dataset manifests written to %s\n", dir.c_str());
    return kExitOk;
}

void log_eval(const RunConfig& cfg, Model& model, const pafr::Dataset& test,
              const std::string& tag, std::ofstream& metrics) {
    auto ev = pafr::evaluate(model, test, sim::FailureMode::both, cfg.eval);
    metrics << "eval," << tag << ",both," << ev.ap30 << "," << ev.ap50 << "," << ev.ap70
            << "\n";
    metrics.flush();
}

std::string ckpt_path(const RunConfig& cfg, int index, const std::string& stage) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ckpt_%02d_", index);
    return cfg.out_dir + "/checkpoints/" + buf + stage + ".ckpt";
}

int cmd_train(const RunConfig& cfg, const std::string& stage_arg) {
    stamp_config(cfg);
    fs::create_directories(cfg.out_dir + "/checkpoints");
    auto train = dataset_for(cfg, "train", cfg.train_scenes);
    auto test = dataset_for(cfg, "test", cfg.test_scenes);
    std::ofstream metrics(cfg.out_dir + "/metrics.csv", std::ios::app);

    auto plan = pafr::make_plan(cfg.train);
    const int total_epochs = cfg.train.naive_epochs > 0 ? cfg.train.naive_epochs
                                                        : pafr::plan_total_epochs(plan);

    auto save = [&](Model& m, int index, const std::string& stage) {
        pafr::CheckpointMeta meta;
        meta.stage = stage;
        meta.stage_index = index;
        meta.root_seed = cfg.seed;
        meta.fusion_kind = m.cfg.fusion == FusionKind::lamma ? "lamma" : "concat";
        pafr::save_checkpoint(ckpt_path(cfg, index, stage), m, meta);
    };

    if (stage_arg == "naive" || stage_arg == "naive-rd") {
        Model m = make_model(cfg.model, cfg.seed);
        pafr::Trainer trainer(m, train, cfg.seed, cfg.train.weight_decay);
        trainer.set_metrics_log(cfg.out_dir + "/metrics.csv");
        const bool rd = stage_arg == "naive-rd";
        pafr::naive_joint_train(m, trainer, total_epochs, cfg.train.lr_branch,
                                cfg.train.lr_drop_fraction, rd);
        const std::string name = rd ? "naive_rd" : "naive";
        save(m, 0, name);
        log_eval(cfg, m, test, name, metrics);
        return kExitOk;
    }
    if (stage_arg == "baseline") {
        ModelConfig mc = cfg.model;
        mc.fusion = FusionKind::concat;
        Model m = make_model(mc, cfg.seed);
        pafr::Trainer trainer(m, train, cfg.seed, cfg.train.weight_decay);
        trainer.set_metrics_log(cfg.out_dir + "/metrics.csv");
        pafr::naive_joint_train(m, trainer, total_epochs, cfg.train.lr_branch,
                                cfg.train.lr_drop_fraction, true);
        save(m, 0, "baseline_concat_rd");
        log_eval(cfg, m, test, "baseline_concat_rd", metrics);
        return kExitOk;
    }

    // Staged pipeline. Stage selection resumes from the predecessor checkpoint.
    Model m = make_model(cfg.model, cfg.seed);
    pafr::Trainer trainer(m, train, cfg.seed, cfg.train.weight_decay);
    trainer.set_metrics_log(cfg.out_dir + "/metrics.csv");

    int first = 0, last = static_cast<int>(plan.size()) - 1;
    if (stage_arg == "pretrain") {
        last = 1;
    } else if (stage_arg == "align") {
        first = 2;
        last = 3;
    } else if (stage_arg == "fuse") {
        first = 4;
        last = 4;
    } else if (stage_arg == "rd") {
        first = 5;
        last = 5;
    } else if (stage_arg != "all") {
        throw ConfigError("unknown training stage '" + stage_arg + "'");
    }
    if (first > 0) {
        const auto prev = ckpt_path(cfg, first - 1, plan[static_cast<std::size_t>(first - 1)].name);
        if (!fs::exists(prev))
            throw DataError("missing predecessor checkpoint " + prev + "; run earlier stages first");
        pafr::load_checkpoint(prev, m);
    }
    for (int i = first; i <= last; ++i) {
        const auto& spec = plan[static_cast<std::size_t>(i)];
        const bool pretrain = spec.name.rfind("pretrain_", 0) == 0;
        if (!pretrain && i == 2)
            reinit_groups(m, {"geometry_aligner", "appearance_aligner", "fusion", "heads"},
                          cfg.seed, "init.stage2");
        auto r = trainer.run_stage(spec, i);
        if (spec.p_drop > 0.0 && r.steps > 0)
            metrics << "rd_drop_rate," << spec.name << ","
                    << static_cast<double>(r.drop_events) / r.steps << "\n";
        save(m, i, spec.name);
        log_eval(cfg, m, test, spec.name, metrics);
    }
    return kExitOk;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& mode_arg) {
    stamp_config(cfg);
    const auto mode = sim::failure_mode_from_string(mode_arg);
    ModelConfig mc = cfg.model;
    mc.fusion = pafr::peek_checkpoint_meta(checkpoint).fusion_kind == "concat"
                    ? FusionKind::concat
                    : FusionKind::lamma;
    Model m = make_model(mc, cfg.seed);
    auto meta = pafr::load_checkpoint(checkpoint, m);
    auto test = dataset_for(cfg, "test", cfg.test_scenes);
    auto ev = pafr::evaluate(m, test, mode, cfg.eval);
    auto j = eval_to_json(ev, sim::to_string(mode), cfg);
    j["checkpoint"] = checkpoint;
    j["stage"] = meta.stage;
    const std::string base = cfg.out_dir + "/eval_" + meta.stage + "_" + sim::to_string(mode);
    write_text(base + ".json", j.dump(2) + "\n");
    std::ofstream csv(base + ".csv", std::ios::trunc);
    csv << "mode,ap30,ap50,ap70\n"
        << sim::to_string(mode) << "," << ev.ap30 << "," << ev.ap50 << "," << ev.ap70 << "\n";
    std::printf("%s AP30/50/70 = %.4f/%.4f/%.4f\n", sim::to_string(mode).c_str(), ev.ap30,
                ev.ap50, ev.ap70);
    return kExitOk;
}

int cmd_diagnose(const RunConfig& cfg, const std::string& checkpoint, const std::string& which,
                 const std::string& baseline_ckpt) {
    stamp_config(cfg);
    Model m = make_model(cfg.model, cfg.seed);
    pafr::load_checkpoint(checkpoint, m);
    auto test = dataset_for(cfg, "test", cfg.test_scenes);
    const std::string dir = cfg.out_dir + "/diagnostics";
    fs::create_directories(dir);

    if (which == "export" || which == "procrustes") {
        const int n = std::min(cfg.export_samples, cfg.test_scenes);
        auto groups = diag::collect_features(m, test, n);
        diag::export_features(groups, dir + "/features");
        if (which == "procrustes") {
            const double raw = diag::procrustes_disparity(groups[0].data, groups[1].data,
                                                          groups[0].rows, groups[0].cols);
            const double aligned = diag::procrustes_disparity(groups[2].data, groups[3].data,
                                                              groups[2].rows, groups[2].cols);
            json j{{"raw_disparity", raw},
                   {"post_fusion_disparity", aligned},
                   {"samples", n},
                   {"seed", cfg.seed}};
            write_text(dir + "/procrustes.json", j.dump(2) + "\n");
            std::printf("disparity raw %.6f -> post-fusion %.6f\n", raw, aligned);
        }
        return kExitOk;
    }
    if (which == "degradation") {
        Model* baseline = nullptr;
        Model bm;
        if (!baseline_ckpt.empty()) {
            ModelConfig mc = cfg.model;
            mc.fusion = FusionKind::concat;
            bm = make_model(mc, cfg.seed);
            pafr::load_checkpoint(baseline_ckpt, bm);
            baseline = &bm;
        }
        auto curves = diag::degradation_sweep(m, baseline, test, cfg.world, cfg.seed,
                                              cfg.degradation_points, cfg.eval);
        diag::write_sweep_csv(dir + "/degradation_fused.csv", "points", curves.fused);
        diag::write_sweep_csv(dir + "/degradation_geometry_only.csv", "points",
                              curves.geometry_only);
        if (baseline)
            diag::write_sweep_csv(dir + "/degradation_concat.csv", "points", curves.concat);
        std::printf("degradation curves written to %s\n", dir.c_str());
        return kExitOk;
    }
    if (which == "noise") {
        auto rows = diag::noise_sweep(m, test, cfg.world, cfg.seed, cfg.noise_sigmas, cfg.eval);
        diag::write_sweep_csv(dir + "/noise.csv", "sigma", rows);
        std::printf("noise sweep written to %s\n", dir.c_str());
        return kExitOk;
    }
    throw ConfigError("unknown diagnostic '" + which + "'");
}

int cmd_report(const std::string& run_dir) {
    json summary;
    summary["run_dir"] = run_dir;
    summary["evals"] = json::array();
    std::ofstream table(run_dir + "/table_modes.csv", std::ios::trunc);
    if (!table) throw IoError("cannot write report table in " + run_dir);
    table << "stage,mode,ap30,ap50,ap70\n";
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(run_dir))
        if (entry.path().extension() == ".json" &&
            entry.path().filename().string().rfind("eval_", 0) == 0)
            files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& path : files) {
        std::ifstream is(path);
        json j;
        is >> j;
        summary["evals"].push_back(j);
        table << j.value("stage", "?") << "," << j.at("mode").get<std::string>() << ","
              << j.at("ap30").get<double>() << "," << j.at("ap50").get<double>() << ","
              << j.at("ap70").get<double>() << "\n";
    }
    if (fs::exists(run_dir + "/diagnostics/procrustes.json")) {
        std::ifstream is(run_dir + "/diagnostics/procrustes.json");
        json j;
        is >> j;
        summary["procrustes"] = j;
    }
    write_text(run_dir + "/summary.json", summary.dump(2) + "\n");
    std::printf("summary written to %s/summary.json (%zu eval reports)\n", run_dir.c_str(),
                files.size());
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-agent multimodal BEV perception bench: length-adaptive fusion, "
                 "staged training, modal-failure evaluation"};
    app.require_subcommand(1);

    Cli cli;
    app.add_option("--config", cli.config_path, "Run configuration (JSON)");
    auto* seed_opt = app.add_option("--seed", cli.seed_override, "Override the config seed");
    app.add_option("--out", cli.out_override, "Override the output directory");

    auto* gen = app.add_subcommand("gen-data", "Generate replayable scene manifests");

    std::string stage = "all";
    auto* train = app.add_subcommand("train", "Run training stages");
    train->add_option("--stage", stage,
                      "all|pretrain|align|fuse|rd|naive|naive-rd|baseline");

    std::string checkpoint, mode = "both";
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint under a failure mode");
    eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    eval->add_option("--mode", mode, "both|geo|app|hetero_geo_ego|hetero_app_ego");

    std::string which = "procrustes", baseline_ckpt;
    auto* diag_cmd = app.add_subcommand("diagnose", "Alignment and robustness diagnostics");
    diag_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    diag_cmd->add_option("--which", which, "procrustes|degradation|noise|export");
    diag_cmd->add_option("--baseline-checkpoint", baseline_ckpt,
                         "Concat baseline checkpoint for the degradation sweep");

    std::string run_dir;
    auto* report = app.add_subcommand("report", "Consolidate a run directory");
    report->add_option("--run-dir", run_dir, "Run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);  // prints the message
        return e.get_exit_code() == 0 ? kExitOk : kExitConfig;
    }

    try {
        cli.seed_set = seed_opt->count() > 0;
        if (gen->parsed()) return cmd_gen_data(resolve_config(cli));
        if (train->parsed()) return cmd_train(resolve_config(cli), stage);
        if (eval->parsed()) return cmd_eval(resolve_config(cli), checkpoint, mode);
        if (diag_cmd->parsed()) return cmd_diagnose(resolve_config(cli), checkpoint, which, baseline_ckpt);
        if (report->parsed()) return cmd_report(run_dir);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const TrainingError& e) {
        std::cerr << "training error: " << e.what() << "\n";
        return kExitTraining;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitOk;
}

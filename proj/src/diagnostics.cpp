#include "mmcp/diagnostics.hpp"

#include <json.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mmcp/common.hpp"

namespace mmcp::diag {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Cyclic Jacobi eigensolver for symmetric matrices; eigenvalues only.
std::vector<double> sym_eigenvalues(EMat a) {
    const int n = static_cast<int>(a.rows());
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
        if (off < 1e-26 * std::max(1.0, a.squaredNorm())) break;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> ev(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) ev[static_cast<std::size_t>(i)] = a(i, i);
    return ev;
}

// Centers columns and scales to unit Frobenius norm.
EMat standardize(const std::vector<double>& x, int rows, int cols, const char* which) {
    EMat m = Eigen::Map<const EMat>(x.data(), rows, cols);
    m.rowwise() -= m.colwise().mean();
    const double norm = m.norm();
    if (!(norm > 1e-12))
        throw ContractError(std::string("procrustes_disparity: zero-variance input (") +
                            which + ")");
    m /= norm;
    return m;
}

}  // namespace

double procrustes_disparity(const std::vector<double>& x, const std::vector<double>& y,
                            int rows, int cols) {
    if (rows < 2) throw ContractError("procrustes_disparity: need at least 2 samples");
    if (static_cast<std::int64_t>(x.size()) != static_cast<std::int64_t>(rows) * cols ||
        x.size() != y.size())
        throw DimError("procrustes_disparity: shape mismatch");

    const EMat xs = standardize(x, rows, cols, "X");
    const EMat ys = standardize(y, rows, cols, "Y");

    // min over orthogonal R and scale s of |X - s Y R|^2 with both sides
    // standardized equals 1 - (nuclear norm of Y^T X)^2.
    double nuclear = 0.0;
    if (cols <= rows) {
        EMat a = ys.transpose() * xs;          // cols x cols
        EMat ata = a.transpose() * a;
        for (double ev : sym_eigenvalues(ata)) nuclear += std::sqrt(std::max(0.0, ev));
    } else {
        // Gram trick: the nonzero singular values of Y^T X are the square
        // roots of the nonzero eigenvalues of Gy^{1/2} Sx Gy^{1/2}.
        EMat sx = xs * xs.transpose();  // rows x rows
        EMat gy = ys * ys.transpose();
        // Symmetric square root of gy via its own eigen decomposition.
        EMat g = gy;
        const int n = rows;
        // Jacobi with eigenvector accumulation.
        EMat v = EMat::Identity(n, n);
        for (int sweep = 0; sweep < 100; ++sweep) {
            double off = 0.0;
            for (int i = 0; i < n; ++i)
                for (int j = i + 1; j < n; ++j) off += g(i, j) * g(i, j);
            if (off < 1e-26 * std::max(1.0, g.squaredNorm())) break;
            for (int p = 0; p < n - 1; ++p) {
                for (int q = p + 1; q < n; ++q) {
                    const double gpq = g(p, q);
                    if (std::abs(gpq) < 1e-300) continue;
                    const double theta = (g(q, q) - g(p, p)) / (2.0 * gpq);
                    const double t = (theta >= 0 ? 1.0 : -1.0) /
                                     (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                    const double c = 1.0 / std::sqrt(t * t + 1.0);
                    const double s = t * c;
                    for (int k = 0; k < n; ++k) {
                        const double gkp = g(k, p), gkq = g(k, q);
                        g(k, p) = c * gkp - s * gkq;
                        g(k, q) = s * gkp + c * gkq;
                        const double vkp = v(k, p), vkq = v(k, q);
                        v(k, p) = c * vkp - s * vkq;
                        v(k, q) = s * vkp + c * vkq;
                    }
                    for (int k = 0; k < n; ++k) {
                        const double gpk = g(p, k), gqk = g(q, k);
                        g(p, k) = c * gpk - s * gqk;
                        g(q, k) = s * gpk + c * gqk;
                    }
                }
            }
        }
        EMat sqrt_gy = EMat::Zero(n, n);
        for (int i = 0; i < n; ++i) {
            const double lam = std::max(0.0, g(i, i));
            sqrt_gy += std::sqrt(lam) * (v.col(i) * v.col(i).transpose());
        }
        EMat mform = sqrt_gy * sx * sqrt_gy;
        // Symmetrize against round-off before the eigen solve.
        mform = 0.5 * (mform + mform.transpose());
        for (double ev : sym_eigenvalues(mform)) nuclear += std::sqrt(std::max(0.0, ev));
    }
    return std::max(0.0, 1.0 - nuclear * nuclear);
}

std::vector<FeatureSample> collect_features(Model& m, const pafr::Dataset& eval_set,
                                            int n_samples) {
    if (n_samples < 2) throw ContractError("collect_features: need at least 2 samples");
    if (n_samples > static_cast<int>(eval_set.samples.size()))
        throw ContractError("collect_features: not enough evaluation scenes");
    if (m.cfg.fusion != FusionKind::lamma)
        throw ContractError("collect_features: fused intermediates need the token fusion model");

    InferenceGuard guard(m);
    FeatureSample geo_raw{"geometry_raw", 0, 0, {}}, app_raw{"appearance_raw", 0, 0, {}};
    FeatureSample geo_al{"geometry_aligned", 0, 0, {}}, app_al{"appearance_aligned", 0, 0, {}};
    FeatureSample fused{"fused", 0, 0, {}};

    auto push = [](FeatureSample& g, const TensorPtr& t) {
        g.cols = static_cast<int>(t->size());
        g.rows += 1;
        g.data.insert(g.data.end(), t->data.begin(), t->data.end());
    };
    for (int i = 0; i < n_samples; ++i) {
        const auto& s = eval_set.samples[static_cast<std::size_t>(i)];
        auto masks = sim::apply_failure(sim::FailureMode::both,
                                        static_cast<int>(s.scene.agents.size()));
        CaptureSlots cap;
        ForwardOptions fwd;
        fwd.masks = &masks;
        fwd.capture = &cap;
        fwd.sample_index = static_cast<std::size_t>(i);
        forward_scene(m, s, fwd);
        push(geo_raw, cap.geo_raw);
        push(app_raw, cap.app_raw);
        push(geo_al, cap.geo_fused);
        push(app_al, cap.app_fused);
        push(fused, cap.fused_tokens);
    }
    return {geo_raw, app_raw, geo_al, app_al, fused};
}

void export_features(const std::vector<FeatureSample>& groups, const std::string& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["groups"] = nlohmann::json::array();
    for (const auto& g : groups) {
        const std::string file = g.label + ".csv";
        std::ofstream os(dir + "/" + file, std::ios::trunc);
        if (!os) throw IoError("cannot write " + dir + "/" + file);
        for (int c = 0; c < g.cols; ++c) os << (c ? ",f" : "f") << c;
        os << "\n";
        char buf[32];
        for (int r = 0; r < g.rows; ++r) {
            for (int c = 0; c < g.cols; ++c) {
                std::snprintf(buf, sizeof buf, "%.17g", g.data[static_cast<std::size_t>(r) * g.cols + c]);
                os << (c ? "," : "") << buf;
            }
            os << "\n";
        }
        if (!os) throw IoError("failed writing " + dir + "/" + file);
        manifest["groups"].push_back({{"label", g.label}, {"rows", g.rows}, {"cols", g.cols},
                                      {"file", file}});
    }
    std::ofstream ms(dir + "/manifest.json", std::ios::trunc);
    if (!ms) throw IoError("cannot write manifest.json in " + dir);
    ms << manifest.dump(2) << "\n";
}

std::vector<FeatureSample> import_features(const std::string& dir) {
    std::ifstream ms(dir + "/manifest.json");
    if (!ms) throw IoError("cannot read manifest.json in " + dir);
    nlohmann::json manifest;
    ms >> manifest;
    std::vector<FeatureSample> out;
    for (const auto& g : manifest.at("groups")) {
        FeatureSample fs;
        fs.label = g.at("label").get<std::string>();
        fs.rows = g.at("rows").get<int>();
        fs.cols = g.at("cols").get<int>();
        std::ifstream is(dir + "/" + g.at("file").get<std::string>());
        if (!is) throw IoError("cannot read feature file for group " + fs.label);
        std::string line;
        std::getline(is, line);  // header
        fs.data.reserve(static_cast<std::size_t>(fs.rows) * fs.cols);
        while (std::getline(is, line)) {
            const char* p = line.c_str();
            char* end = nullptr;
            while (*p) {
                fs.data.push_back(std::strtod(p, &end));
                p = (*end == ',') ? end + 1 : end;
            }
        }
        if (static_cast<std::int64_t>(fs.data.size()) !=
            static_cast<std::int64_t>(fs.rows) * fs.cols)
            throw IoError("feature file for group " + fs.label + " is truncated");
        out.push_back(std::move(fs));
    }
    return out;
}

namespace {

pafr::Dataset with_geometry_rerendered(const pafr::Dataset& test,
                                       const pafr::WorldConfig& world, const BevGrid& grid,
                                       std::uint64_t root_seed, int n_points, double sigma) {
    pafr::Dataset out;
    out.split = test.split;
    out.samples.reserve(test.samples.size());
    for (std::size_t i = 0; i < test.samples.size(); ++i) {
        SceneSample s = test.samples[i];  // shares appearance tensors
        for (std::size_t a = 0; a < s.geo_raster.size(); ++a)
            s.geo_raster[a] = pafr::rerender_geometry_raster(
                root_seed, test.split, i, static_cast<int>(a), s, world, grid, n_points, sigma);
        out.samples.push_back(std::move(s));
    }
    return out;
}

}  // namespace

DegradationCurves degradation_sweep(Model& fused_model, Model* concat_model,
                                    const pafr::Dataset& test, const pafr::WorldConfig& world,
                                    std::uint64_t root_seed, const std::vector<int>& point_counts,
                                    const pafr::EvalOptions& eval_opts) {
    DegradationCurves curves;
    for (int count : point_counts) {
        auto degraded = with_geometry_rerendered(test, world, fused_model.cfg.grid, root_seed,
                                                 count, world.geo_sigma);
        auto ev = pafr::evaluate(fused_model, degraded, sim::FailureMode::both, eval_opts);
        curves.fused.push_back({static_cast<double>(count), ev.ap30, ev.ap50, ev.ap70});
        auto eg = pafr::evaluate(fused_model, degraded, sim::FailureMode::geometry_only, eval_opts);
        curves.geometry_only.push_back({static_cast<double>(count), eg.ap30, eg.ap50, eg.ap70});
        if (concat_model) {
            auto ec = pafr::evaluate(*concat_model, degraded, sim::FailureMode::both, eval_opts);
            curves.concat.push_back({static_cast<double>(count), ec.ap30, ec.ap50, ec.ap70});
        }
    }
    return curves;
}

std::vector<SweepRow> noise_sweep(Model& m, const pafr::Dataset& test,
                                  const pafr::WorldConfig& world, std::uint64_t root_seed,
                                  const std::vector<double>& sigmas,
                                  const pafr::EvalOptions& eval_opts) {
    std::vector<SweepRow> rows;
    for (double sigma : sigmas) {
        auto degraded = with_geometry_rerendered(test, world, m.cfg.grid, root_seed,
                                                 world.geo_points, sigma);
        auto ev = pafr::evaluate(m, degraded, sim::FailureMode::both, eval_opts);
        rows.push_back({sigma, ev.ap30, ev.ap50, ev.ap70});
    }
    return rows;
}

void write_sweep_csv(const std::string& path, const std::string& condition_name,
                     const std::vector<SweepRow>& rows) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write " + path);
    os << condition_name << ",ap30,ap50,ap70\n";
    char buf[128];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g\n", r.condition, r.ap30,
                      r.ap50, r.ap70);
        os << buf;
    }
}

}  // namespace mmcp::diag

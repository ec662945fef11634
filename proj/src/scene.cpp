#include "mmcp/scene.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>

#include "mmcp/common.hpp"
#include "mmcp/detect.hpp"

namespace mmcp::sim {

namespace {

constexpr double kGridAlignTol = 1e-9;

bool near_multiple(double value, double unit) {
    const double r = value / unit;
    return std::abs(r - std::round(r)) < kGridAlignTol;
}

}  // namespace

// ---------------------------------------------------------------------------
// generation
// ---------------------------------------------------------------------------

Scene generate_scene(std::uint64_t seed, const SceneSpec& spec) {
    if (spec.n_agents < 1) throw ContractError("generate_scene: need at least one agent");
    Scene scene;
    scene.extent = spec.extent;

    Rng agent_rng = stream(seed, "scene.agents");
    scene.agents.push_back({0.0, 0.0, 0.0});  // ego anchors the world frame
    const int half_cells = static_cast<int>(spec.extent / spec.cell / 2.0);
    const double yaws[4] = {0.0, M_PI / 2, -M_PI, -M_PI / 2};
    for (int a = 1; a < spec.n_agents; ++a) {
        const int cx = static_cast<int>(agent_rng.uniform_index(2 * half_cells + 1)) - half_cells;
        const int cy = static_cast<int>(agent_rng.uniform_index(2 * half_cells + 1)) - half_cells;
        scene.agents.push_back(
            {cx * spec.cell, cy * spec.cell, yaws[agent_rng.uniform_index(4)]});
    }

    Rng obj_rng = stream(seed, "scene.objects");
    const int target = spec.min_objects +
                       static_cast<int>(obj_rng.uniform_index(
                           static_cast<std::uint64_t>(spec.max_objects - spec.min_objects + 1)));
    const double margin = std::min(3.0, spec.extent * 0.25);
    for (int k = 0; k < target; ++k) {
        bool placed = false;
        for (int attempt = 0; attempt < spec.max_attempts; ++attempt) {
            ObjectBox o;
            o.x = obj_rng.uniform(-spec.extent + margin, spec.extent - margin);
            o.y = obj_rng.uniform(-spec.extent + margin, spec.extent - margin);
            o.l = obj_rng.uniform(3.6, 4.8);
            o.w = obj_rng.uniform(1.7, 2.1);
            o.h = obj_rng.uniform(1.4, 1.8);
            o.z = o.h / 2.0;
            o.theta = wrap_angle(obj_rng.uniform(-M_PI, M_PI));
            o.cls = static_cast<int>(obj_rng.uniform_index(2));

            const double reach = std::hypot(o.l, o.w) / 2.0;
            bool ok = true;
            for (const auto& a : scene.agents) {
                if (std::hypot(o.x - a.x, o.y - a.y) < spec.agent_clearance + reach) {
                    ok = false;
                    break;
                }
            }
            if (ok) {
                for (const auto& other : scene.objects) {
                    if (detect::rotated_iou(o, other) >= spec.max_pair_iou) {
                        ok = false;
                        break;
                    }
                }
            }
            if (ok) {
                scene.objects.push_back(o);
                placed = true;
                break;
            }
        }
        if (!placed)
            throw DataError("generate_scene: could not place object " + std::to_string(k) +
                            " after " + std::to_string(spec.max_attempts) + " attempts");
    }
    return scene;
}

// ---------------------------------------------------------------------------
// geometry sensor
// ---------------------------------------------------------------------------

namespace {

struct Interval {
    double lo, hi;  // subset of [-pi, pi), lo <= hi
};

// Angular footprint of a box seen from (ax, ay), split at the wrap point.
std::vector<Interval> angular_span(const ObjectBox& o, double ax, double ay) {
    const double cth = std::cos(o.theta), sth = std::sin(o.theta);
    const double center = std::atan2(o.y - ay, o.x - ax);
    double lo = 0.0, hi = 0.0;
    for (int i = 0; i < 4; ++i) {
        const double oxl = (i < 2 ? 1 : -1) * o.l / 2.0;
        const double oyl = (i % 2 ? 1 : -1) * o.w / 2.0;
        const double px = o.x + cth * oxl - sth * oyl;
        const double py = o.y + sth * oxl + cth * oyl;
        const double rel = wrap_angle(std::atan2(py - ay, px - ax) - center);
        lo = std::min(lo, rel);
        hi = std::max(hi, rel);
    }
    const double a = center + lo, b = center + hi;
    // Split at the [-pi, pi) boundary.
    const double wa = wrap_angle(a);
    if (wa + (b - a) < M_PI) return {{wa, wa + (b - a)}};
    return {{wa, M_PI}, {-M_PI, wrap_angle(b)}};
}

bool covered(const std::vector<Interval>& target, std::vector<Interval> shadow) {
    std::sort(shadow.begin(), shadow.end(),
              [](const Interval& a, const Interval& b) { return a.lo < b.lo; });
    std::vector<Interval> merged;
    for (const auto& s : shadow) {
        if (!merged.empty() && s.lo <= merged.back().hi + 1e-12)
            merged.back().hi = std::max(merged.back().hi, s.hi);
        else
            merged.push_back(s);
    }
    for (const auto& t : target) {
        bool ok = false;
        for (const auto& m : merged) {
            if (m.lo <= t.lo + 1e-12 && m.hi >= t.hi - 1e-12) {
                ok = true;
                break;
            }
        }
        if (!ok) return false;
    }
    return true;
}

std::vector<bool> visibility(const Scene& scene, double ax, double ay) {
    const std::size_t n = scene.objects.size();
    std::vector<double> dist(n);
    std::vector<std::vector<Interval>> spans(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& o = scene.objects[i];
        dist[i] = std::hypot(o.x - ax, o.y - ay);
        spans[i] = angular_span(o, ax, ay);
    }
    std::vector<bool> vis(n, true);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<Interval> shadow;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i || dist[j] >= dist[i]) continue;
            for (const auto& s : spans[j]) shadow.push_back(s);
        }
        if (!shadow.empty() && covered(spans[i], std::move(shadow))) vis[i] = false;
    }
    return vis;
}

}  // namespace

GeometryObservation render_geometry(const Scene& scene, int agent, int n_points,
                                    double sigma, const GeometrySensor& sensor, Rng& rng) {
    if (agent < 0 || agent >= static_cast<int>(scene.agents.size()))
        throw ContractError("render_geometry: agent index out of range");
    if (n_points < 0 || sigma < 0) throw ContractError("render_geometry: bad n_points/sigma");

    GeometryObservation obs;
    obs.max_points = n_points;
    if (n_points == 0) return obs;

    const auto& pose = scene.agents[static_cast<std::size_t>(agent)];
    const auto vis = visibility(scene, pose.x, pose.y);

    // Candidate pool in world frame.
    std::vector<std::array<double, 3>> candidates;
    for (std::size_t i = 0; i < scene.objects.size(); ++i) {
        if (!vis[i]) continue;
        const auto& o = scene.objects[i];
        const double cth = std::cos(o.theta), sth = std::sin(o.theta);
        // Faces: +x, -x walls (w*h), +y, -y walls (l*h), top (l*w).
        const double areas[5] = {o.w * o.h, o.w * o.h, o.l * o.h, o.l * o.h, o.l * o.w};
        double total = 0.0;
        for (double a : areas) total += a;
        const int count = std::max(1, static_cast<int>(total * sensor.points_per_m2));
        for (int kpt = 0; kpt < count; ++kpt) {
            double pick = rng.uniform() * total;
            int face = 0;
            while (face < 4 && pick > areas[face]) {
                pick -= areas[face];
                ++face;
            }
            double lx, ly, lz;
            switch (face) {
                case 0: lx = o.l / 2; ly = rng.uniform(-o.w / 2, o.w / 2); lz = rng.uniform(0.0, o.h); break;
                case 1: lx = -o.l / 2; ly = rng.uniform(-o.w / 2, o.w / 2); lz = rng.uniform(0.0, o.h); break;
                case 2: lx = rng.uniform(-o.l / 2, o.l / 2); ly = o.w / 2; lz = rng.uniform(0.0, o.h); break;
                case 3: lx = rng.uniform(-o.l / 2, o.l / 2); ly = -o.w / 2; lz = rng.uniform(0.0, o.h); break;
                default: lx = rng.uniform(-o.l / 2, o.l / 2); ly = rng.uniform(-o.w / 2, o.w / 2); lz = o.h; break;
            }
            candidates.push_back({o.x + cth * lx - sth * ly, o.y + sth * lx + cth * ly, lz});
        }
    }
    const int n_clutter = sensor.clutter_frac > 0.0
                              ? static_cast<int>(static_cast<double>(candidates.size()) *
                                                 sensor.clutter_frac /
                                                 (1.0 - sensor.clutter_frac))
                              : 0;
    for (int i = 0; i < n_clutter; ++i)
        candidates.push_back({rng.uniform(-scene.extent, scene.extent),
                              rng.uniform(-scene.extent, scene.extent), 0.0});

    // Uniform subsample without replacement.
    std::vector<std::size_t> order(candidates.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(n_points), order.size());

    const double cy = std::cos(pose.yaw), sy = std::sin(pose.yaw);
    obs.points.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) {
        const auto& p = candidates[order[i]];
        const double dx = p[0] - pose.x, dy = p[1] - pose.y;
        std::array<double, 3> q = {cy * dx + sy * dy, -sy * dx + cy * dy, p[2]};
        if (sigma > 0.0)
            for (auto& v : q) v += rng.normal() * sigma;
        obs.points.push_back(q);
    }
    return obs;
}

// ---------------------------------------------------------------------------
// appearance sensor
// ---------------------------------------------------------------------------

AppearanceObservation render_appearance(const Scene& scene, int agent, int blur_radius,
                                        double noise_sigma, const AppearanceSensor& sensor,
                                        Rng& rng) {
    if (agent < 0 || agent >= static_cast<int>(scene.agents.size()))
        throw ContractError("render_appearance: agent index out of range");
    if (blur_radius < 0) throw ContractError("render_appearance: blur_radius must be >= 0");

    const auto& pose = scene.agents[static_cast<std::size_t>(agent)];
    const BevGrid grid{sensor.h, sensor.w, sensor.resolution};
    const double cy = std::cos(pose.yaw), sy = std::sin(pose.yaw);

    AppearanceObservation obs;
    obs.resolution = sensor.resolution;
    auto img = make_tensor({3, sensor.h, sensor.w});
    std::fill(img->data.begin(), img->data.end(), sensor.background);

    // Footprints are rasterized with 4x4 coverage supersampling, so boundary
    // cells carry sub-cell edge positions. Fully covered cells hold the exact
    // class intensity (scaled by the contrast falloff).
    const std::int64_t hw = static_cast<std::int64_t>(sensor.h) * sensor.w;
    constexpr int kSub = 4;
    for (int i = 0; i < sensor.h; ++i) {
        for (int j = 0; j < sensor.w; ++j) {
            const double lx = grid.cell_cx(j), ly = grid.cell_cy(i);
            double cover[2] = {0.0, 0.0};
            for (int si = 0; si < kSub; ++si) {
                for (int sj = 0; sj < kSub; ++sj) {
                    const double sxl = lx + ((sj + 0.5) / kSub - 0.5) * grid.cell;
                    const double syl = ly + ((si + 0.5) / kSub - 0.5) * grid.cell;
                    const double wx = pose.x + cy * sxl - sy * syl;
                    const double wy = pose.y + sy * sxl + cy * syl;
                    for (const auto& o : scene.objects) {
                        const double dx = wx - o.x, dy = wy - o.y;
                        const double c = std::cos(o.theta), s = std::sin(o.theta);
                        const double bx = c * dx + s * dy, by = -s * dx + c * dy;
                        if (std::abs(bx) > o.l / 2 || std::abs(by) > o.w / 2) continue;
                        cover[static_cast<std::size_t>(o.cls % 2)] += 1.0;
                        break;
                    }
                }
            }
            const double dist = std::hypot(lx, ly);
            const double fall =
                sensor.falloff_scale > 0.0
                    ? 1.0 / (1.0 + (dist / sensor.falloff_scale) * (dist / sensor.falloff_scale))
                    : 1.0;
            for (int ch = 0; ch < 3; ++ch) {
                double v = sensor.background;
                for (int cls = 0; cls < 2; ++cls)
                    v += (sensor.class_intensity[static_cast<std::size_t>(cls)][static_cast<std::size_t>(ch)] -
                          sensor.background) *
                         fall * cover[static_cast<std::size_t>(cls)] / (kSub * kSub);
                img->data[ch * hw + static_cast<std::int64_t>(i) * sensor.w + j] = v;
            }
        }
    }

    if (blur_radius > 0) {
        auto blurred = img->data;
        for (int ch = 0; ch < 3; ++ch)
            for (int i = 0; i < sensor.h; ++i)
                for (int j = 0; j < sensor.w; ++j) {
                    double acc = 0.0;
                    int cnt = 0;
                    for (int di = -blur_radius; di <= blur_radius; ++di)
                        for (int dj = -blur_radius; dj <= blur_radius; ++dj) {
                            const int ii = i + di, jj = j + dj;
                            if (ii < 0 || ii >= sensor.h || jj < 0 || jj >= sensor.w) continue;
                            acc += img->data[ch * hw + static_cast<std::int64_t>(ii) * sensor.w + jj];
                            ++cnt;
                        }
                    blurred[static_cast<std::size_t>(ch * hw + static_cast<std::int64_t>(i) * sensor.w + j)] =
                        acc / cnt;
                }
        img->data = std::move(blurred);
    }

    if (noise_sigma > 0.0)
        for (auto& v : img->data) v += rng.normal() * noise_sigma;
    for (auto& v : img->data) v = std::clamp(v, 0.0, 1.0);

    obs.grid = img;
    return obs;
}

// ---------------------------------------------------------------------------
// failure schedules
// ---------------------------------------------------------------------------

FailureMode failure_mode_from_string(const std::string& s) {
    if (s == "both") return FailureMode::both;
    if (s == "geometry_only" || s == "geo") return FailureMode::geometry_only;
    if (s == "appearance_only" || s == "app") return FailureMode::appearance_only;
    if (s == "hetero_geo_ego" || s == "alternating_geo_ego") return FailureMode::alternating_geo_ego;
    if (s == "hetero_app_ego" || s == "alternating_app_ego") return FailureMode::alternating_app_ego;
    throw ConfigError("unknown failure mode '" + s + "'");
}

std::string to_string(FailureMode m) {
    switch (m) {
        case FailureMode::both: return "both";
        case FailureMode::geometry_only: return "geometry_only";
        case FailureMode::appearance_only: return "appearance_only";
        case FailureMode::alternating_geo_ego: return "alternating_geo_ego";
        case FailureMode::alternating_app_ego: return "alternating_app_ego";
    }
    return "?";
}

std::vector<ModalityMask> apply_failure(FailureMode mode, int n_agents) {
    if (n_agents < 1) throw ContractError("apply_failure: need at least one agent");
    std::vector<ModalityMask> masks(static_cast<std::size_t>(n_agents));
    for (int i = 0; i < n_agents; ++i) {
        auto& m = masks[static_cast<std::size_t>(i)];
        switch (mode) {
            case FailureMode::both: m = {true, true}; break;
            case FailureMode::geometry_only: m = {true, false}; break;
            case FailureMode::appearance_only: m = {false, true}; break;
            case FailureMode::alternating_geo_ego: m = (i % 2 == 0) ? ModalityMask{true, false}
                                                                     : ModalityMask{false, true}; break;
            case FailureMode::alternating_app_ego: m = (i % 2 == 0) ? ModalityMask{false, true}
                                                                     : ModalityMask{true, false}; break;
        }
    }
    return masks;
}

// ---------------------------------------------------------------------------
// warp
// ---------------------------------------------------------------------------

BevFeature warp_to_ego(const BevFeature& feature, const AgentPose& agent_pose,
                       const AgentPose& ego_pose, const BevGrid& grid) {
    if (!feature.t || feature.t->rank() != 3)
        throw ContractError("warp_to_ego: feature tensor must be [c,H,W]");
    const double rel_yaw = wrap_angle(agent_pose.yaw - ego_pose.yaw);
    if (!near_multiple(rel_yaw, M_PI / 2))
        throw ContractError("warp_to_ego: relative rotation must be a multiple of 90 degrees");
    // Relative translation expressed in the ego frame must land on whole cells.
    const double ce = std::cos(ego_pose.yaw), se = std::sin(ego_pose.yaw);
    const double dxw = agent_pose.x - ego_pose.x, dyw = agent_pose.y - ego_pose.y;
    const double tx = ce * dxw + se * dyw, ty = -se * dxw + ce * dyw;
    if (!near_multiple(tx, grid.cell) || !near_multiple(ty, grid.cell))
        throw ContractError("warp_to_ego: relative translation must be whole cells");

    const double ca = std::cos(agent_pose.yaw), sa = std::sin(agent_pose.yaw);
    std::vector<int> src(static_cast<std::size_t>(grid.h) * grid.w, -1);
    for (int i = 0; i < grid.h; ++i) {
        for (int j = 0; j < grid.w; ++j) {
            // Ego cell center -> world -> agent frame -> agent cell.
            const double exl = grid.cell_cx(j), eyl = grid.cell_cy(i);
            const double wx = ego_pose.x + ce * exl - se * eyl;
            const double wy = ego_pose.y + se * exl + ce * eyl;
            const double adx = wx - agent_pose.x, ady = wy - agent_pose.y;
            const double axl = ca * adx + sa * ady, ayl = -sa * adx + ca * ady;
            int si, sj;
            if (grid.locate(axl, ayl, si, sj))
                src[static_cast<std::size_t>(i) * grid.w + j] = si * grid.w + sj;
        }
    }
    BevFeature out = feature;
    out.t = gather_cells(feature.t, src, grid.h, grid.w);
    out.origin_x = ego_pose.x;
    out.origin_y = ego_pose.y;
    out.yaw = ego_pose.yaw;
    return out;
}

// ---------------------------------------------------------------------------
// manifests
// ---------------------------------------------------------------------------

std::string scene_to_json(const Scene& scene) {
    nlohmann::json j;
    j["extent"] = scene.extent;
    j["agents"] = nlohmann::json::array();
    for (const auto& a : scene.agents) j["agents"].push_back({{"x", a.x}, {"y", a.y}, {"yaw", a.yaw}});
    j["objects"] = nlohmann::json::array();
    for (const auto& o : scene.objects)
        j["objects"].push_back({{"x", o.x},
                                {"y", o.y},
                                {"z", o.z},
                                {"h", o.h},
                                {"w", o.w},
                                {"l", o.l},
                                {"theta", o.theta},
                                {"cls", o.cls}});
    return j.dump(2);
}

Scene scene_from_json(const std::string& text) {
    Scene scene;
    const auto j = nlohmann::json::parse(text);
    scene.extent = j.at("extent").get<double>();
    for (const auto& a : j.at("agents"))
        scene.agents.push_back({a.at("x").get<double>(), a.at("y").get<double>(),
                                a.at("yaw").get<double>()});
    for (const auto& o : j.at("objects")) {
        ObjectBox b;
        b.x = o.at("x").get<double>();
        b.y = o.at("y").get<double>();
        b.z = o.at("z").get<double>();
        b.h = o.at("h").get<double>();
        b.w = o.at("w").get<double>();
        b.l = o.at("l").get<double>();
        b.theta = o.at("theta").get<double>();
        b.cls = o.at("cls").get<int>();
        scene.objects.push_back(b);
    }
    return scene;
}

}  // namespace mmcp::sim

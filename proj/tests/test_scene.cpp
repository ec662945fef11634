#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mmcp/detect.hpp"
#include "mmcp/scene.hpp"

using namespace mmcp;
using namespace mmcp::sim;

namespace {

bool scenes_equal(const Scene& a, const Scene& b) {
    if (a.objects.size() != b.objects.size() || a.agents.size() != b.agents.size()) return false;
    for (std::size_t i = 0; i < a.objects.size(); ++i) {
        const auto &x = a.objects[i], &y = b.objects[i];
        if (x.x != y.x || x.y != y.y || x.z != y.z || x.h != y.h || x.w != y.w || x.l != y.l ||
            x.theta != y.theta || x.cls != y.cls)
            return false;
    }
    for (std::size_t i = 0; i < a.agents.size(); ++i) {
        const auto &x = a.agents[i], &y = b.agents[i];
        if (x.x != y.x || x.y != y.y || x.yaw != y.yaw) return false;
    }
    return true;
}

// Distance of a point to the box shell, in the box frame; ~0 means on-surface.
double shell_violation(const std::array<double, 3>& p, const ObjectBox& o) {
    const double c = std::cos(o.theta), s = std::sin(o.theta);
    const double dx = p[0] - o.x, dy = p[1] - o.y;
    const double lx = c * dx + s * dy, ly = -s * dx + c * dy, lz = p[2];
    const double inside = std::max({std::abs(lx) - o.l / 2, std::abs(ly) - o.w / 2,
                                    std::max(-lz, lz - o.h)});
    if (inside > 0) return inside;  // outside the box entirely
    // Inside: must be near one of the faces.
    const double to_face = std::min({o.l / 2 - std::abs(lx), o.w / 2 - std::abs(ly),
                                     std::min(lz, o.h - lz)});
    return to_face;
}

}  // namespace

TEST_CASE("generate_scene is deterministic and respects separation") {
    SceneSpec spec;
    auto a = generate_scene(42, spec);
    auto b = generate_scene(42, spec);
    CHECK(scenes_equal(a, b));
    CHECK(!scenes_equal(a, generate_scene(43, spec)));
    CHECK(a.agents.size() == 2);
    CHECK(a.agents[0].x == 0.0);

    SUBCASE("all objects inside the extent") {
        for (const auto& o : a.objects) {
            CHECK(std::abs(o.x) <= spec.extent);
            CHECK(std::abs(o.y) <= spec.extent);
        }
    }
}

TEST_CASE("zero-object spec yields an empty, valid scene") {
    SceneSpec spec;
    spec.min_objects = 0;
    spec.max_objects = 0;
    auto s = generate_scene(7, spec);
    CHECK(s.objects.empty());
    CHECK(s.agents.size() == 2);
}

TEST_CASE("500 seeded scenes have pairwise object IoU below 0.05") {
    SceneSpec spec;
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 500; ++seed) {
        auto s = generate_scene(seed, spec);
        for (std::size_t i = 0; i < s.objects.size(); ++i)
            for (std::size_t j = i + 1; j < s.objects.size(); ++j)
                worst = std::max(worst, detect::rotated_iou(s.objects[i], s.objects[j]));
    }
    CHECK(worst < 0.05);
}

TEST_CASE("infeasible density raises a generation error") {
    SceneSpec spec;
    spec.extent = 6.0;
    spec.min_objects = 60;
    spec.max_objects = 60;
    spec.max_attempts = 30;
    CHECK_THROWS_AS(generate_scene(1, spec), DataError);
}

TEST_CASE("render_geometry") {
    SceneSpec spec;
    auto scene = generate_scene(11, spec);
    GeometrySensor sensor;

    SUBCASE("zero budget gives an empty observation") {
        Rng rng(1);
        auto obs = render_geometry(scene, 0, 0, 0.0, sensor, rng);
        CHECK(obs.points.empty());
    }
    SUBCASE("same seed reproduces the identical point set") {
        Rng r1(5), r2(5);
        auto a = render_geometry(scene, 0, 512, 0.0, sensor, r1);
        auto b = render_geometry(scene, 0, 512, 0.0, sensor, r2);
        REQUIRE(a.points.size() == b.points.size());
        for (std::size_t i = 0; i < a.points.size(); ++i)
            for (int k = 0; k < 3; ++k) CHECK(a.points[i][k] == b.points[i][k]);
    }
    SUBCASE("single box, sigma 0: every point lies on the box shell") {
        Scene s;
        s.extent = 25.6;
        s.agents = {{0, 0, 0}, {-8.0, 4.8, M_PI / 2}};
        ObjectBox o;
        o.x = 6.0; o.y = -3.0; o.z = 0.8;
        o.h = 1.6; o.w = 2.0; o.l = 4.4;
        o.theta = 0.7;
        s.objects = {o};
        GeometrySensor clean;
        clean.clutter_frac = 0.0;
        for (int agent = 0; agent < 2; ++agent) {
            Rng rng(9);
            auto obs = render_geometry(s, agent, 2048, 0.0, clean, rng);
            REQUIRE(!obs.points.empty());
            const auto& pose = s.agents[static_cast<std::size_t>(agent)];
            const double cy = std::cos(pose.yaw), sy = std::sin(pose.yaw);
            for (const auto& p : obs.points) {
                // Back to world frame, then check shell membership.
                std::array<double, 3> w = {pose.x + cy * p[0] - sy * p[1],
                                           pose.y + sy * p[0] + cy * p[1], p[2]};
                CHECK(shell_violation(w, o) < 1e-9);
            }
        }
    }
    SUBCASE("scene edits: removing an object strictly reduces object-surface points") {
        Scene s = scene;
        REQUIRE(s.objects.size() >= 2);
        auto count_object_points = [](const std::vector<std::array<double, 3>>& pts) {
            int n = 0;
            for (const auto& p : pts)
                if (p[2] > 1e-9) ++n;  // clutter sits on the ground plane
            return n;
        };
        Rng r1(3);
        auto full_obs = render_geometry(s, 0, 1 << 20, 0.0, sensor, r1);
        Scene reduced = s;
        reduced.objects.pop_back();
        Rng r2(3);
        auto red_obs = render_geometry(reduced, 0, 1 << 20, 0.0, sensor, r2);
        CHECK(count_object_points(red_obs.points) < count_object_points(full_obs.points));
    }
    SUBCASE("occlusion: an object directly behind a nearer one yields no points") {
        Scene s;
        s.extent = 25.6;
        s.agents = {{0, 0, 0}};
        ObjectBox nearbox;
        nearbox.x = 6.0; nearbox.y = 0.0; nearbox.z = 0.8;
        nearbox.h = 1.6; nearbox.w = 4.0; nearbox.l = 4.0;
        nearbox.theta = 0.0;
        ObjectBox farbox = nearbox;
        farbox.x = 12.0;
        farbox.w = 1.0;
        farbox.l = 1.0;
        s.objects = {nearbox, farbox};
        GeometrySensor clean;
        clean.clutter_frac = 0.0;
        Rng rng(2);
        auto obs = render_geometry(s, 0, 1 << 18, 0.0, clean, rng);
        for (const auto& p : obs.points) CHECK(shell_violation(p, farbox) > 1e-6);
    }
}

TEST_CASE("render_appearance") {
    AppearanceSensor sensor;

    SUBCASE("empty scene with zero noise is background-constant") {
        Scene s;
        s.agents = {{0, 0, 0}};
        Rng rng(1);
        auto obs = render_appearance(s, 0, 0, 0.0, sensor, rng);
        for (double v : obs.grid->data) CHECK(v == sensor.background);
    }
    SUBCASE("no blur, no noise, no falloff: footprint cells carry exact class intensity") {
        Scene s;
        s.agents = {{0, 0, 0}};
        ObjectBox o;
        o.x = 4.0; o.y = 4.0; o.z = 0.8;
        o.h = 1.6; o.w = 3.2; o.l = 6.4;  // wide enough to own whole cells
        o.theta = 0.3;
        o.cls = 1;
        s.objects = {o};
        AppearanceSensor flat = sensor;
        flat.falloff_scale = 0.0;
        Rng rng(1);
        auto obs = render_appearance(s, 0, 0, 0.0, flat, rng);
        const std::int64_t hw = 32 * 32;
        int inside = 0;
        for (int i = 0; i < 32; ++i)
            for (int j = 0; j < 32; ++j) {
                const double cxl = (j - 16 + 0.5) * 1.6, cyl = (i - 16 + 0.5) * 1.6;
                const double dx = cxl - o.x, dy = cyl - o.y;
                const double c = std::cos(o.theta), sle = std::sin(o.theta);
                const double bx = c * dx + sle * dy, by = -sle * dx + c * dy;
                // Only cells whose whole area is inside the footprint carry
                // the exact intensity; boundary cells hold coverage mixes.
                const double margin = 1.6 * 0.7072;  // half cell diagonal
                const bool in = std::abs(bx) <= o.l / 2 - margin && std::abs(by) <= o.w / 2 - margin;
                if (!in) continue;
                ++inside;
                for (int ch = 0; ch < 3; ++ch)
                    CHECK(obs.grid->data[ch * hw + static_cast<std::int64_t>(i) * 32 + j] ==
                          flat.class_intensity[1][static_cast<std::size_t>(ch)]);
            }
        CHECK(inside > 0);
    }
    SUBCASE("values stay in [0,1] across 100 seeded renders") {
        SceneSpec spec;
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            auto s = generate_scene(seed, spec);
            Rng rng(seed);
            auto obs = render_appearance(s, 0, 1, 0.3, sensor, rng);
            for (double v : obs.grid->data) {
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
            }
        }
    }
}

TEST_CASE("apply_failure patterns") {
    auto m1 = apply_failure(FailureMode::alternating_geo_ego, 4);
    REQUIRE(m1.size() == 4);
    CHECK((m1[0].geometry && !m1[0].appearance));
    CHECK((!m1[1].geometry && m1[1].appearance));
    CHECK((m1[2].geometry && !m1[2].appearance));
    CHECK((!m1[3].geometry && m1[3].appearance));

    for (int n : {1, 3, 7}) {
        auto m = apply_failure(FailureMode::appearance_only, n);
        for (const auto& mask : m) CHECK((!mask.geometry && mask.appearance));
    }

    auto m2 = apply_failure(FailureMode::alternating_app_ego, 5);
    REQUIRE(m2.size() == 5);
    for (int i = 0; i < 5; ++i) {
        CHECK(m2[static_cast<std::size_t>(i)].appearance == (i % 2 == 0));
        CHECK(m2[static_cast<std::size_t>(i)].geometry == (i % 2 == 1));
    }

    // Masks are total: every agent keeps a modality in every mode.
    for (auto mode : {FailureMode::both, FailureMode::geometry_only, FailureMode::appearance_only,
                      FailureMode::alternating_geo_ego, FailureMode::alternating_app_ego})
        for (const auto& mask : apply_failure(mode, 6)) CHECK((mask.geometry || mask.appearance));
}

TEST_CASE("warp_to_ego") {
    BevGrid grid{8, 8, 1.6};
    Rng rng(3);
    BevFeature f;
    f.t = randn({2, 8, 8}, rng);
    f.modality = "fused";

    SUBCASE("identical poses act as the identity") {
        AgentPose p{3.2, -1.6, M_PI / 2};
        auto out = warp_to_ego(f, p, p, grid);
        for (std::size_t i = 0; i < f.t->data.size(); ++i) CHECK(out.t->data[i] == f.t->data[i]);
    }
    SUBCASE("translation there and back restores the overlap region") {
        AgentPose agent{3.2, 1.6, 0.0}, ego{0, 0, 0};
        auto once = warp_to_ego(f, agent, ego, grid);
        auto back = warp_to_ego(once, ego, agent, grid);
        // Interior cells that survived both crops must match; others are zero.
        int matched = 0;
        for (int ch = 0; ch < 2; ++ch)
            for (int i = 0; i < 8; ++i)
                for (int j = 0; j < 8; ++j) {
                    const auto idx = static_cast<std::size_t>(ch * 64 + i * 8 + j);
                    if (back.t->data[idx] != 0.0) {
                        CHECK(back.t->data[idx] == f.t->data[idx]);
                        ++matched;
                    }
                }
        CHECK(matched > 0);
    }
    SUBCASE("four 90-degree rotations compose to the identity") {
        AgentPose rotated{0, 0, M_PI / 2}, ego{0, 0, 0};
        auto cur = f;
        for (int k = 0; k < 4; ++k) {
            cur = warp_to_ego(cur, rotated, ego, grid);
            cur.yaw = M_PI / 2;  // reinterpret for the next quarter turn
        }
        for (std::size_t i = 0; i < f.t->data.size(); ++i)
            CHECK(cur.t->data[i] == doctest::Approx(f.t->data[i]).epsilon(1e-12));
    }
    SUBCASE("non-grid-aligned poses are rejected") {
        CHECK_THROWS_AS(warp_to_ego(f, AgentPose{0.7, 0, 0}, AgentPose{0, 0, 0}, grid),
                        ContractError);
        CHECK_THROWS_AS(warp_to_ego(f, AgentPose{0, 0, 0.4}, AgentPose{0, 0, 0}, grid),
                        ContractError);
    }
}

TEST_CASE("scene manifests round-trip through JSON") {
    SceneSpec spec;
    auto s = generate_scene(99, spec);
    auto text = scene_to_json(s);
    auto s2 = scene_from_json(text);
    CHECK(scenes_equal(s, s2));
    CHECK(scene_to_json(s2) == text);
}

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mmcp/bev.hpp"
#include "mmcp/box.hpp"
#include "mmcp/rng.hpp"
#include "mmcp/tensor.hpp"

namespace mmcp::sim {

struct AgentPose {
    double x = 0, y = 0, yaw = 0;
};

// Ground-truth world. Agent 0 is the ego.
struct Scene {
    std::vector<ObjectBox> objects;
    std::vector<AgentPose> agents;
    double extent = 25.6;  // world half-width in meters
};

struct SceneSpec {
    double extent = 25.6;
    int n_agents = 2;
    int min_objects = 6;
    int max_objects = 10;
    double cell = 1.6;             // agent poses snap to whole cells
    double agent_clearance = 2.0;  // meters from any object surface
    double max_pair_iou = 0.05;
    int max_attempts = 200;
};

// Deterministic in `seed`. Objects are mutually non-overlapping (pairwise
// rotated IoU below max_pair_iou) and keep clear of agent positions. Throws
// DataError when rejection sampling cannot place an object.
Scene generate_scene(std::uint64_t seed, const SceneSpec& spec);

struct GeometryObservation {
    std::vector<std::array<double, 3>> points;  // agent frame
    int max_points = 0;
};

struct GeometrySensor {
    double points_per_m2 = 40.0;  // candidate density on box surfaces
    double clutter_frac = 0.1;    // ground-return fraction of the candidate pool
};

// Samples surface points of visible boxes plus ground clutter, uniformly
// subsampled to n_points, each coordinate perturbed by N(0, sigma^2).
// Objects whose angular span is fully shadowed by strictly nearer objects
// yield no points.
GeometryObservation render_geometry(const Scene& scene, int agent, int n_points,
                                    double sigma, const GeometrySensor& sensor, Rng& rng);

struct AppearanceObservation {
    TensorPtr grid;           // [3, H, W], values in [0, 1]
    double resolution = 1.6;  // meters per cell
};

struct AppearanceSensor {
    int h = 32, w = 32;
    double resolution = 1.6;
    double background = 0.15;
    // Contrast falloff with distance from the agent; <= 0 disables it.
    double falloff_scale = 18.0;
    // Per-class channel intensities.
    std::array<std::array<double, 3>, 2> class_intensity = {
        {{0.90, 0.60, 0.35}, {0.40, 0.75, 0.65}}};
};

// Rasterizes object footprints at class-dependent intensity with
// distance-dependent contrast falloff, then box blur and clipped additive
// Gaussian noise.
AppearanceObservation render_appearance(const Scene& scene, int agent, int blur_radius,
                                        double noise_sigma, const AppearanceSensor& sensor,
                                        Rng& rng);

enum class FailureMode {
    both,
    geometry_only,
    appearance_only,
    alternating_geo_ego,
    alternating_app_ego,
};

FailureMode failure_mode_from_string(const std::string& s);
std::string to_string(FailureMode m);

struct ModalityMask {
    bool geometry = true;
    bool appearance = true;
};

// Per-agent modality masks for a failure mode; every agent keeps at least
// one modality.
std::vector<ModalityMask> apply_failure(FailureMode mode, int n_agents);

// Rigid grid transform of a BEV feature into the ego frame; out-of-range
// cells are zero-filled. Relative rotation must be a multiple of 90 degrees
// and the relative translation a whole number of cells.
BevFeature warp_to_ego(const BevFeature& feature, const AgentPose& agent_pose,
                       const AgentPose& ego_pose, const BevGrid& grid);

// Replayable scene manifest.
std::string scene_to_json(const Scene& scene);
Scene scene_from_json(const std::string& text);

}  // namespace mmcp::sim

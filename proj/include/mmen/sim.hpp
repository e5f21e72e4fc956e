#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mmen/dataset.hpp"
#include "mmen/netspec.hpp"

namespace mmen {

// Corridor piece: straight ('S', length in meters) or constant-radius arc
// ('L'/'R', sweep angle in degrees + centerline radius in meters).
struct SegmentDef {
    char kind = 'S';
    double length_m = 0.0;  // straights
    double angle_deg = 0.0;  // arcs
    double radius_m = 0.0;   // arcs
};

// Corridor description; parsed from a small key-value text file.
struct WorldSpec {
    double width_m = 3.0;
    std::string reflectivity_pattern = "stripes";  // or "flat"
    uint32_t seed = 0;
    std::vector<SegmentDef> segments;

    static WorldSpec parse(const std::string& text);
    static WorldSpec demo(uint32_t seed);  // mixed straights and both-way arcs
    std::string serialize() const;
    WorldSpec mirrored() const;  // left/right arcs swapped
};

struct Pose {
    double x = 0.0, y = 0.0;
    double heading = 0.0;  // radians, CCW positive, wrapped to (-pi, pi]
};

// Sensor geometry. Cameras: 60-degree horizontal FOV each, yaws +60/0/-60
// (left/center/right) tiling [-90, +90]. LiDAR: 180-degree front sweep,
// columns left to right; 16 elevation rows spanning +/-15 degrees.
struct SensorRig {
    int lidar_rows = 16, lidar_cols = 450;
    int img_h = 120, img_w = 192;
    double max_range_m = 10.0;
    double sensor_height_m = 1.0;
    double wall_height_m = 2.2;

    static SensorRig from_profile(const Profile& p) {
        SensorRig r;
        r.lidar_rows = p.lidar_h;
        r.lidar_cols = p.lidar_w;
        r.img_h = p.img_h;
        r.img_w = p.img_w;
        return r;
    }
};

// Built world: dense centerline samples plus wall polylines.
class World {
  public:
    explicit World(const WorldSpec& spec);

    const WorldSpec& spec() const { return spec_; }
    double total_length() const { return total_len_; }

    struct Located {
        double s = 0.0;        // arclength of the closest centerline point
        double lateral = 0.0;  // signed offset, positive = left of centerline
    };
    Located locate(const Pose& pose) const;
    bool inside(const Pose& pose) const;
    Pose centerline_pose(double s) const;

    // Fraction of centerline arclength inside left-turn arcs.
    double left_turn_fraction() const;

    struct Hit {
        bool hit = false;
        double dist = 0.0;    // euclidean distance along the ray
        double wall_s = 0.0;  // arclength along the hit wall (texture input)
    };
    // Nearest wall intersection of a horizontal ray; dist capped at max_range.
    Hit raycast(double ox, double oy, double angle, double max_range) const;

  private:
    WorldSpec spec_;
    double total_len_ = 0.0;
    std::vector<double> cl_s_, cl_x_, cl_y_, cl_h_;  // centerline samples
    std::vector<char> cl_kind_;                      // segment kind per sample
    struct WallSeg {
        double x1, y1, x2, y2;
        double s1, s2;  // arclength along the wall
    };
    std::vector<WallSeg> walls_;
};

// ---- sensors ----
// All renderers are pure functions of (world, pose, rig) and throw if the
// pose is outside the corridor.

Tensor raycast_lidar(const World& world, const Pose& pose, const SensorRig& rig);
Tensor render_camera(const World& world, const Pose& pose, const SensorRig& rig, int cam_index);
Frame capture_frame(const World& world, const Pose& pose, const SensorRig& rig);

// ---- expert driver ----

// Pure pursuit toward a centerline lookahead point; +1 = full right. The
// returned label is deadbanded (|y| < 0.03 -> 0) and quantized to 0.01.
double expert_steer(const World& world, const Pose& pose, double lookahead_m = 2.0);

// One control tick: steering in [-1,1] turns the heading by up to
// max_steer_rate radians, then the vehicle advances speed meters.
Pose step_vehicle(const Pose& pose, double steer, double speed_m = 0.5,
                  double max_steer_rate = 0.30);

// ---- dataset generation ----

struct GenStats {
    std::array<int64_t, 7> bin_counts{};
    double left_turn_fraction = 0.0;
    int episodes = 0;
};

// Drives the expert through the corridor (fresh noisy spawn per pass),
// recording one frame per tick. Deterministic given (world spec, seed).
std::vector<Frame> generate_frames(const World& world, const SensorRig& rig, int count,
                                   uint32_t seed, GenStats* stats = nullptr,
                                   double steer_noise = 0.10);

}  // namespace mmen

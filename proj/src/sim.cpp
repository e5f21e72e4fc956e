#include "mmen/sim.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace mmen {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kCenterlineStep = 0.1;  // meters between centerline samples
constexpr int kWallDecimate = 3;         // centerline samples per wall vertex
constexpr double kPursuitGain = 2.2;
constexpr double kDeadband = 0.03;
constexpr double kPitchMaxDeg = 15.0;

double wrap_angle(double a) {
    while (a <= -kPi) a += 2 * kPi;
    while (a > kPi) a -= 2 * kPi;
    return a;
}

double wall_texture(const std::string& pattern, double s, double period) {
    if (pattern == "flat") return 0.75;
    return 0.5 + 0.5 * std::sin(2 * kPi * s / period);
}

double segment_length(const SegmentDef& seg) {
    if (seg.kind == 'S') return seg.length_m;
    return seg.radius_m * seg.angle_deg * kPi / 180.0;
}

}  // namespace

// ---- WorldSpec ----

WorldSpec WorldSpec::parse(const std::string& text) {
    WorldSpec spec;
    spec.segments.clear();
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream ls(line);
        std::string key;
        if (!(ls >> key) || key[0] == '#') continue;
        if (key == "width_m") {
            ls >> spec.width_m;
        } else if (key == "reflectivity_pattern") {
            ls >> spec.reflectivity_pattern;
        } else if (key == "seed") {
            ls >> spec.seed;
        } else if (key == "segment") {
            SegmentDef seg;
            std::string kind;
            ls >> kind;
            if (kind == "S") {
                seg.kind = 'S';
                ls >> seg.length_m;
            } else if (kind == "L" || kind == "R") {
                seg.kind = kind[0];
                ls >> seg.angle_deg >> seg.radius_m;
            } else {
                throw FormatError("world spec line " + std::to_string(lineno) +
                                  ": unknown segment kind " + kind);
            }
            if (!ls || segment_length(seg) <= 0)
                throw FormatError("world spec line " + std::to_string(lineno) + ": bad segment");
            spec.segments.push_back(seg);
        } else {
            throw FormatError("world spec line " + std::to_string(lineno) + ": unknown key " + key);
        }
    }
    if (spec.segments.empty()) throw FormatError("world spec has no segments");
    if (spec.width_m <= 1.0) throw FormatError("corridor width too small");
    return spec;
}

std::string WorldSpec::serialize() const {
    std::ostringstream os;
    os << "width_m " << width_m << "\n";
    os << "reflectivity_pattern " << reflectivity_pattern << "\n";
    os << "seed " << seed << "\n";
    for (const auto& seg : segments) {
        if (seg.kind == 'S')
            os << "segment S " << seg.length_m << "\n";
        else
            os << "segment " << seg.kind << " " << seg.angle_deg << " " << seg.radius_m << "\n";
    }
    return os.str();
}

WorldSpec WorldSpec::mirrored() const {
    WorldSpec m = *this;
    for (auto& seg : m.segments) {
        if (seg.kind == 'L')
            seg.kind = 'R';
        else if (seg.kind == 'R')
            seg.kind = 'L';
    }
    return m;
}

WorldSpec WorldSpec::demo(uint32_t seed) {
    WorldSpec spec;
    spec.seed = seed;
    auto S = [](double len) { return SegmentDef{'S', len, 0, 0}; };
    auto arc = [](char k, double ang, double r) { return SegmentDef{k, 0, ang, r}; };
    spec.segments = {
        S(6),  arc('L', 90, 4.5),  S(4), arc('R', 90, 4.5),  S(5), arc('L', 110, 2.0),
        S(4),  arc('R', 110, 2.0), S(5), arc('L', 60, 8.0),  S(3), arc('R', 60, 8.0),
        S(4),  arc('L', 90, 2.8),  S(3), arc('R', 90, 2.8),  S(6),
    };
    return spec;
}

// ---- World ----

World::World(const WorldSpec& spec) : spec_(spec) {
    double x = 0, y = 0, h = 0, s = 0;
    auto sample_at = [&](double px, double py, double ph, double ps, char kind) {
        cl_x_.push_back(px);
        cl_y_.push_back(py);
        cl_h_.push_back(ph);
        cl_s_.push_back(ps);
        cl_kind_.push_back(kind);
    };
    for (const auto& seg : spec.segments) {
        const double len = segment_length(seg);
        const int n = std::max(1, static_cast<int>(std::ceil(len / kCenterlineStep)));
        if (seg.kind == 'S') {
            for (int i = 0; i < n; ++i) {
                const double t = len * i / n;
                sample_at(x + t * std::cos(h), y + t * std::sin(h), h, s + t, 'S');
            }
            x += len * std::cos(h);
            y += len * std::sin(h);
        } else {
            const double sign = seg.kind == 'L' ? 1.0 : -1.0;
            const double r = seg.radius_m;
            const double cx = x - sign * r * std::sin(h);
            const double cy = y + sign * r * std::cos(h);
            const double a0 = std::atan2(y - cy, x - cx);
            for (int i = 0; i < n; ++i) {
                const double t = len * i / n;
                const double a = a0 + sign * t / r;
                sample_at(cx + r * std::cos(a), cy + r * std::sin(a), wrap_angle(h + sign * t / r),
                          s + t, seg.kind);
            }
            const double a1 = a0 + sign * len / r;
            x = cx + r * std::cos(a1);
            y = cy + r * std::sin(a1);
            h = wrap_angle(h + sign * len / r);
        }
        s += len;
    }
    sample_at(x, y, h, s, 'S');
    total_len_ = s;

    // Wall polylines: centerline offset by +/- width/2, decimated.
    const double w2 = spec.width_m / 2.0;
    for (double side : {+1.0, -1.0}) {
        std::vector<double> wx, wy;
        for (size_t i = 0; i < cl_x_.size(); i += kWallDecimate) {
            wx.push_back(cl_x_[i] - side * w2 * std::sin(cl_h_[i]));
            wy.push_back(cl_y_[i] + side * w2 * std::cos(cl_h_[i]));
        }
        if ((cl_x_.size() - 1) % kWallDecimate != 0) {
            wx.push_back(cl_x_.back() - side * w2 * std::sin(cl_h_.back()));
            wy.push_back(cl_y_.back() + side * w2 * std::cos(cl_h_.back()));
        }
        double ws = 0;
        for (size_t i = 0; i + 1 < wx.size(); ++i) {
            WallSeg seg;
            seg.x1 = wx[i];
            seg.y1 = wy[i];
            seg.x2 = wx[i + 1];
            seg.y2 = wy[i + 1];
            seg.s1 = ws;
            ws += std::hypot(seg.x2 - seg.x1, seg.y2 - seg.y1);
            seg.s2 = ws;
            walls_.push_back(seg);
        }
    }
    // End caps close the corridor so no ray escapes through the ends.
    auto cap = [&](size_t i) {
        WallSeg seg;
        seg.x1 = cl_x_[i] - w2 * std::sin(cl_h_[i]);
        seg.y1 = cl_y_[i] + w2 * std::cos(cl_h_[i]);
        seg.x2 = cl_x_[i] + w2 * std::sin(cl_h_[i]);
        seg.y2 = cl_y_[i] - w2 * std::cos(cl_h_[i]);
        seg.s1 = 0;
        seg.s2 = spec.width_m;
        walls_.push_back(seg);
    };
    cap(0);
    cap(cl_x_.size() - 1);
}

World::Located World::locate(const Pose& pose) const {
    size_t best = 0;
    double best_d2 = 1e300;
    for (size_t i = 0; i < cl_x_.size(); ++i) {
        const double dx = pose.x - cl_x_[i], dy = pose.y - cl_y_[i];
        const double d2 = dx * dx + dy * dy;
        if (d2 < best_d2) {
            best_d2 = d2;
            best = i;
        }
    }
    Located loc;
    loc.s = cl_s_[best];
    const double dx = pose.x - cl_x_[best], dy = pose.y - cl_y_[best];
    loc.lateral = -std::sin(cl_h_[best]) * dx + std::cos(cl_h_[best]) * dy;
    return loc;
}

bool World::inside(const Pose& pose) const {
    return std::abs(locate(pose).lateral) < spec_.width_m / 2.0;
}

Pose World::centerline_pose(double s) const {
    if (s < 0 || s > total_len_) throw ConfigError("arclength outside corridor");
    const auto it = std::lower_bound(cl_s_.begin(), cl_s_.end(), s);
    size_t i = static_cast<size_t>(it - cl_s_.begin());
    if (i >= cl_x_.size()) i = cl_x_.size() - 1;
    Pose p;
    p.x = cl_x_[i];
    p.y = cl_y_[i];
    p.heading = cl_h_[i];
    return p;
}

double World::left_turn_fraction() const {
    size_t n = 0;
    for (char k : cl_kind_)
        if (k == 'L') ++n;
    return static_cast<double>(n) / static_cast<double>(cl_kind_.size());
}

World::Hit World::raycast(double ox, double oy, double angle, double max_range) const {
    const double dx = std::cos(angle), dy = std::sin(angle);
    Hit best;
    best.dist = max_range;
    for (const WallSeg& w : walls_) {
        const double ex = w.x2 - w.x1, ey = w.y2 - w.y1;
        const double denom = dx * ey - dy * ex;
        if (std::abs(denom) < 1e-12) continue;
        const double rx = w.x1 - ox, ry = w.y1 - oy;
        const double t = (rx * ey - ry * ex) / denom;   // along the ray
        const double u = (rx * dy - ry * dx) / -denom;  // along the segment
        if (t > 1e-9 && t < best.dist && u >= 0.0 && u <= 1.0) {
            best.hit = true;
            best.dist = t;
            best.wall_s = w.s1 + u * (w.s2 - w.s1);
        }
    }
    return best;
}

// ---- sensors ----

namespace {
void require_inside(const World& world, const Pose& pose) {
    if (!world.inside(pose)) throw ConfigError("pose outside corridor");
}
}  // namespace

Tensor raycast_lidar(const World& world, const Pose& pose, const SensorRig& rig) {
    require_inside(world, pose);
    const int rows = rig.lidar_rows, cols = rig.lidar_cols;
    Tensor x4({2, rows, cols});
    const std::string& pattern = world.spec().reflectivity_pattern;
    for (int c = 0; c < cols; ++c) {
        const double az_deg = 90.0 - (c + 0.5) * 180.0 / cols;  // left column looks left
        const auto hit = world.raycast(pose.x, pose.y, pose.heading + az_deg * kPi / 180.0,
                                       rig.max_range_m);
        const double tex = hit.hit ? wall_texture(pattern, hit.wall_s, 1.3) : 0.0;
        for (int r = 0; r < rows; ++r) {
            const double pitch =
                (kPitchMaxDeg - r * 2.0 * kPitchMaxDeg / (rows - 1)) * kPi / 180.0;
            double range = rig.max_range_m;
            double refl = 0.0;
            if (hit.hit) {
                const double z = rig.sensor_height_m + hit.dist * std::tan(pitch);
                if (z >= 0.0 && z <= rig.wall_height_m) {
                    range = hit.dist / std::cos(pitch);
                    refl = tex;
                } else if (z < 0.0) {
                    range = (rig.sensor_height_m / -std::tan(pitch)) / std::cos(pitch);
                    refl = 0.3;  // floor
                }
            } else if (pitch < 0.0) {
                range = (rig.sensor_height_m / -std::tan(pitch)) / std::cos(pitch);
                refl = 0.3;
            }
            range = std::min(range, rig.max_range_m);
            x4[(0LL * rows + r) * cols + c] = static_cast<float>(range / rig.max_range_m);
            x4[(1LL * rows + r) * cols + c] = static_cast<float>(refl);
        }
    }
    return x4;
}

Tensor render_camera(const World& world, const Pose& pose, const SensorRig& rig, int cam_index) {
    require_inside(world, pose);
    if (cam_index < 1 || cam_index > 3) throw ConfigError("camera index out of range");
    const double yaw = (2 - cam_index) * 60.0 * kPi / 180.0;  // +60 / 0 / -60
    const int H = rig.img_h, W = rig.img_w;
    const double f = (W / 2.0) / std::tan(30.0 * kPi / 180.0);
    Tensor img({3, H, W});
    const std::string& pattern = world.spec().reflectivity_pattern;
    auto put = [&](int ch, int v, int u, double val) {
        img[(static_cast<int64_t>(ch) * H + v) * W + u] =
            static_cast<float>(std::clamp(val, 0.0, 1.0));
    };
    for (int u = 0; u < W; ++u) {
        const double offset = std::atan2(W / 2.0 - (u + 0.5), f);
        const auto hit =
            world.raycast(pose.x, pose.y, pose.heading + yaw + offset, rig.max_range_m);
        double vtop = 0, vbot = H, att = 0, tex1 = 0, tex2 = 0;
        if (hit.hit) {
            const double dperp = std::max(hit.dist * std::cos(offset), 0.05);
            vtop = H / 2.0 - f * (rig.wall_height_m - rig.sensor_height_m) / dperp;
            vbot = H / 2.0 + f * rig.sensor_height_m / dperp;
            att = 1.0 / (1.0 + 0.22 * hit.dist);
            tex1 = wall_texture(pattern, hit.wall_s, 1.3);
            tex2 = wall_texture(pattern, hit.wall_s, 0.47);
        }
        for (int v = 0; v < H; ++v) {
            const double vc = v + 0.5;
            if (!hit.hit || vc < vtop) {
                put(0, v, u, 0.10);
                put(1, v, u, 0.12);
                put(2, v, u, 0.15);
            } else if (vc < vbot) {
                put(0, v, u, (0.35 + 0.55 * tex1) * att);
                put(1, v, u, (0.30 + 0.45 * tex2) * att);
                put(2, v, u, 0.65 * att);
            } else {
                const double df = f * rig.sensor_height_m / (vc - H / 2.0);
                const double fatt = 1.0 / (1.0 + 0.15 * df);
                put(0, v, u, 0.30 * fatt);
                put(1, v, u, 0.27 * fatt);
                put(2, v, u, 0.24 * fatt);
            }
        }
    }
    return img;
}

Frame capture_frame(const World& world, const Pose& pose, const SensorRig& rig) {
    Frame f;
    f.x1 = render_camera(world, pose, rig, 1);
    f.x2 = render_camera(world, pose, rig, 2);
    f.x3 = render_camera(world, pose, rig, 3);
    f.x4 = raycast_lidar(world, pose, rig);
    return f;
}

// ---- expert driver ----

double expert_steer(const World& world, const Pose& pose, double lookahead_m) {
    require_inside(world, pose);
    const auto loc = world.locate(pose);
    if (loc.s + lookahead_m > world.total_length())
        throw ConfigError("no centerline point within lookahead");
    const Pose target = world.centerline_pose(loc.s + lookahead_m);
    const double alpha = wrap_angle(std::atan2(target.y - pose.y, target.x - pose.x) - pose.heading);
    double y = std::clamp(-kPursuitGain * alpha, -1.0, 1.0);
    if (std::abs(y) < kDeadband) y = 0.0;
    return std::round(y * 100.0) / 100.0;
}

Pose step_vehicle(const Pose& pose, double steer, double speed_m, double max_steer_rate) {
    Pose p = pose;
    p.heading = wrap_angle(p.heading - std::clamp(steer, -1.0, 1.0) * max_steer_rate);
    p.x += speed_m * std::cos(p.heading);
    p.y += speed_m * std::sin(p.heading);
    return p;
}

// ---- generation ----

std::vector<Frame> generate_frames(const World& world, const SensorRig& rig, int count,
                                   uint32_t seed, GenStats* stats, double steer_noise) {
    std::mt19937 rng(seed);
    // Spawn perturbations scale with the steering jitter so a zero-noise
    // run is an exact centerline drive.
    std::uniform_real_distribution<double> lat_noise(-3.5 * steer_noise, 3.5 * steer_noise);
    std::uniform_real_distribution<double> head_noise(-1.5 * steer_noise, 1.5 * steer_noise);
    std::normal_distribution<double> steer_jitter(0.0, steer_noise);

    GenStats st;
    st.left_turn_fraction = world.left_turn_fraction();
    std::vector<Frame> frames;
    frames.reserve(static_cast<size_t>(count));
    const double lookahead = 2.0;
    std::vector<Pose> trail;

    while (static_cast<int>(frames.size()) < count) {
        Pose pose = world.centerline_pose(0.8);
        const double lat = lat_noise(rng);
        pose.x -= lat * std::sin(pose.heading);
        pose.y += lat * std::cos(pose.heading);
        pose.heading = wrap_angle(pose.heading + head_noise(rng));
        ++st.episodes;
        trail.clear();

        while (static_cast<int>(frames.size()) < count) {
            const auto loc = world.locate(pose);
            if (loc.s + lookahead + 0.3 > world.total_length()) break;  // episode done
            const double y = expert_steer(world, pose, lookahead);
            Frame f = capture_frame(world, pose, rig);
            f.y = static_cast<float>(y);
            ++st.bin_counts[static_cast<size_t>(bin_of(f.y))];
            frames.push_back(std::move(f));

            pose = step_vehicle(pose, std::clamp(y + steer_jitter(rng), -1.0, 1.0));
            trail.push_back(pose);
            if (!world.inside(pose)) {
                std::ostringstream os;
                os << "vehicle left corridor after frame " << frames.size() << "; trajectory tail:";
                const size_t from = trail.size() > 5 ? trail.size() - 5 : 0;
                for (size_t i = from; i < trail.size(); ++i)
                    os << " (" << trail[i].x << "," << trail[i].y << "," << trail[i].heading << ")";
                throw ConfigError(os.str());
            }
        }
    }
    if (stats) *stats = st;
    return frames;
}

}  // namespace mmen

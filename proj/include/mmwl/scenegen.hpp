#pragma once

// Analytic scene generation: scripted urban scenarios with a roadside unit,
// reflective building walls and box obstacles; image-method path tracing
// (LOS + first-order reflections), LiDAR ray casting and a geometric camera
// proxy. Everything is a pure function of (scenario, time index), so frames
// can be produced in any order by any number of workers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mmwl/common.hpp"
#include "mmwl/phy.hpp"
#include "mmwl/pointcloud.hpp"

namespace mmwl::scenegen {

inline constexpr double kPi = phy::kPi;

// axis-aligned box, used for parked vehicles and other occluders
struct Box {
    double cx = 0, cy = 0, cz = 0;  // center
    double sx = 0, sy = 0, sz = 0;  // full extents
    bool rf_blocking = true;
};

// vertical reflective rectangle along an axis-aligned segment, z in [0, height]
struct Wall {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    double height = 10.0;
    bool axis_x() const { return y0 == y1; }  // wall runs along x at fixed y
};

struct SpeedSegment {
    enum Kind { Stop, Cruise, Accel };
    Kind kind = Cruise;
    double duration_s = 1.0;
    double v0 = 0.0;
    double v1 = 0.0;
};

struct SensorSpec {
    int period_ticks = 10;  // j = T_pc / T_c
    int lidar_channels = 16;
    int lidar_azimuth_steps = 128;
    double lidar_az_span_deg = 200.0;  // centered on the RSU heading
    double lidar_range_m = 80.0;
    double lidar_vfov_lo_deg = -25.0;
    double lidar_vfov_hi_deg = 2.0;
    int lidar_points_cap = 4096;
    double lidar_intensity_ref_m = 20.0;
    bool record_camera = true;
    int cam_width = 64;
    int cam_height = 64;
    double cam_hfov_deg = 110.0;
    double cam_depth_ref_m = 10.0;
};

struct Pose {
    double x = 0, y = 0;
    double heading = 0;
};

struct Scenario {
    std::string template_name;
    std::uint64_t seed = 0;
    double duration_s = 8.0;
    double tick_s = 0.01;
    double rsu_x = 0, rsu_y = 0, rsu_z = 6.0;
    double rsu_heading = 0.0;
    double user_z = 1.5;
    double reflection_coeff = 0.5;
    double ego_sx = 4.2, ego_sy = 1.9, ego_sz = 1.6;

    std::vector<Wall> walls;
    std::vector<Box> blockers;

    // dense arc-length parameterized polyline
    std::vector<std::pair<double, double>> path_pts;
    std::vector<double> path_cum_s;
    std::vector<SpeedSegment> speed_profile;

    int frame_count() const { return static_cast<int>(std::llround(duration_s / tick_s)); }

    // distance travelled along the path at time t (piecewise-analytic)
    double arc_position(double t) const {
        double s = 0.0, elapsed = 0.0;
        for (const auto& seg : speed_profile) {
            const double dt = std::min(seg.duration_s, t - elapsed);
            if (dt <= 0.0) break;
            switch (seg.kind) {
                case SpeedSegment::Stop: break;
                case SpeedSegment::Cruise: s += seg.v0 * dt; break;
                case SpeedSegment::Accel: {
                    const double a = (seg.v1 - seg.v0) / seg.duration_s;
                    s += seg.v0 * dt + 0.5 * a * dt * dt;
                    break;
                }
            }
            elapsed += seg.duration_s;
            if (elapsed >= t) break;
        }
        return s;
    }

    Pose user_pose(int t_index) const {
        const double t = t_index * tick_s;
        double s = arc_position(t);
        const double total = path_cum_s.back();
        if (s >= total) s = total;  // vehicle halts at the path end
        auto it = std::upper_bound(path_cum_s.begin(), path_cum_s.end(), s);
        std::size_t hi = std::min<std::size_t>(path_cum_s.size() - 1,
                                               static_cast<std::size_t>(it - path_cum_s.begin()));
        if (hi == 0) hi = 1;
        const std::size_t lo = hi - 1;
        const double seg_len = path_cum_s[hi] - path_cum_s[lo];
        const double w = seg_len > 0.0 ? (s - path_cum_s[lo]) / seg_len : 0.0;
        Pose p;
        p.x = path_pts[lo].first + w * (path_pts[hi].first - path_pts[lo].first);
        p.y = path_pts[lo].second + w * (path_pts[hi].second - path_pts[lo].second);
        p.heading = std::atan2(path_pts[hi].second - path_pts[lo].second,
                               path_pts[hi].first - path_pts[lo].first);
        return p;
    }

    Box ego_box(int t_index) const {
        const Pose p = user_pose(t_index);
        Box b;
        b.cx = p.x;
        b.cy = p.y;
        b.cz = ego_sz / 2.0;
        b.sx = ego_sx;
        b.sy = ego_sy;
        b.sz = ego_sz;
        b.rf_blocking = false;  // the receiver rides on this vehicle
        return b;
    }

    double ego_heading(int t_index) const { return user_pose(t_index).heading; }
};

// ---------------------------------------------------------------------------
// scenario templates

struct SceneConfig {
    std::string template_name = "straight_road";
    double duration_s = 8.0;
    double tick_s = 0.01;
    int blocker_count = 6;
    double rsu_height_m = 6.0;
    double user_height_m = 1.5;
    double reflection_coeff = 0.5;
};

namespace detail {

inline void finalize_path(Scenario& sc) {
    sc.path_cum_s.resize(sc.path_pts.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < sc.path_pts.size(); ++i) {
        if (i > 0) {
            const double dx = sc.path_pts[i].first - sc.path_pts[i - 1].first;
            const double dy = sc.path_pts[i].second - sc.path_pts[i - 1].second;
            acc += std::hypot(dx, dy);
        }
        sc.path_cum_s[i] = acc;
    }
}

inline void make_speed_profile(Scenario& sc, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> cruise_v(10.0, 30.0);
    std::uniform_real_distribution<double> seg_t(2.5, 5.0);
    std::uniform_real_distribution<double> stop_t(0.8, 2.0);
    std::uniform_real_distribution<double> pick(0.0, 1.0);
    double covered = 0.0;
    double v = cruise_v(rng);
    while (covered < sc.duration_s) {
        const double roll = pick(rng);
        SpeedSegment seg;
        if (roll < 0.1) {
            seg.kind = SpeedSegment::Stop;
            seg.duration_s = stop_t(rng);
            seg.v0 = seg.v1 = 0.0;
            v = 0.0;
        } else if (roll < 0.5) {
            seg.kind = SpeedSegment::Accel;
            seg.duration_s = seg_t(rng);
            seg.v0 = v;
            seg.v1 = cruise_v(rng);
            v = seg.v1;
        } else {
            if (v == 0.0) v = cruise_v(rng);
            seg.kind = SpeedSegment::Cruise;
            seg.duration_s = seg_t(rng);
            seg.v0 = seg.v1 = v;
        }
        sc.speed_profile.push_back(seg);
        covered += seg.duration_s;
    }
}

inline void add_parked_boxes(Scenario& sc, std::mt19937_64& rng, int count, double road_x,
                             double y_lo, double y_hi) {
    std::uniform_real_distribution<double> yd(y_lo, y_hi);
    std::uniform_real_distribution<double> side(0.0, 1.0);
    std::uniform_real_distribution<double> hclass(0.0, 1.0);
    for (int i = 0; i < count; ++i) {
        Box b;
        b.cy = yd(rng);
        // parked on either verge of the road, clear of the driving line; the
        // RSU-side verge carries cars only, so the elevated RSU keeps line of
        // sight over them and labels stay clean, while the far verge mixes in
        // taller vehicles that intermittently shadow wall reflections
        const bool near_side = side(rng) < 0.5;
        b.cx = road_x + (near_side ? -3.5 : 3.5);
        const double hc = near_side ? 0.0 : hclass(rng);
        b.sz = hc < 0.6 ? 1.6 : (hc < 0.9 ? 3.2 : 4.0);  // car / truck / bus
        b.cz = b.sz / 2.0;
        b.sx = 2.0;
        b.sy = hc < 0.6 ? 4.5 : 8.0;
        sc.blockers.push_back(b);
    }
}

}  // namespace detail

// Deterministic scenario construction from (config, seed). All templates put
// the RSU at the origin facing +x; the road crosses its field of view.
inline Scenario build_scenario(const SceneConfig& cfg, std::uint64_t seed) {
    if (cfg.template_name != "straight_road" && cfg.template_name != "curvy_road" &&
        cfg.template_name != "intersection")
        throw std::invalid_argument("build_scenario: unknown template " + cfg.template_name);

    Scenario sc;
    sc.template_name = cfg.template_name;
    sc.seed = seed;
    sc.duration_s = cfg.duration_s;
    sc.tick_s = cfg.tick_s;
    sc.rsu_z = cfg.rsu_height_m;
    sc.user_z = cfg.user_height_m;
    sc.reflection_coeff = cfg.reflection_coeff;

    std::mt19937_64 rng(derive_seed(seed, fnv1a(cfg.template_name)));
    std::uniform_real_distribution<double> road_xd(6.0, 10.0);
    std::uniform_real_distribution<double> wall_gap(6.0, 10.0);
    std::uniform_real_distribution<double> wall_h(8.0, 12.0);
    std::uniform_int_distribution<int> dir(0, 1);

    const double road_x = road_xd(rng);
    const double y_span = 35.0;
    const bool southbound = dir(rng) == 1;

    // building facade on the far side of the road
    Wall far_wall;
    far_wall.x0 = far_wall.x1 = road_x + wall_gap(rng);
    far_wall.y0 = -y_span;
    far_wall.y1 = y_span;
    far_wall.height = wall_h(rng);
    sc.walls.push_back(far_wall);

    const double step = 0.25;
    if (cfg.template_name == "straight_road") {
        for (double y = -y_span; y <= y_span + 1e-9; y += step)
            sc.path_pts.emplace_back(road_x, southbound ? -y : y);
    } else if (cfg.template_name == "curvy_road") {
        std::uniform_real_distribution<double> amp_d(2.5, 5.0);
        std::uniform_real_distribution<double> wl_d(25.0, 45.0);
        const double amp = amp_d(rng), wl = wl_d(rng);
        for (double y = -y_span; y <= y_span + 1e-9; y += step) {
            const double yy = southbound ? -y : y;
            sc.path_pts.emplace_back(road_x + amp * std::sin(2.0 * kPi * yy / wl), yy);
        }
    } else {  // intersection: approach along the road, quarter turn, leave along +x
        std::uniform_real_distribution<double> rad_d(6.0, 10.0);
        const double r = rad_d(rng);
        for (double y = -y_span; y <= -r; y += step) sc.path_pts.emplace_back(road_x, y);
        for (double a = 0.0; a <= kPi / 2.0 + 1e-9; a += step / r)
            sc.path_pts.emplace_back(road_x + r - r * std::cos(a), -r + r * std::sin(a));
        for (double x = road_x + r; x <= road_x + r + y_span; x += step)
            sc.path_pts.emplace_back(x, 0.0);
        // cross-street facade north of the exit road
        Wall cross;
        cross.y0 = cross.y1 = 8.0;
        cross.x0 = road_x + r;
        cross.x1 = road_x + r + y_span;
        cross.height = wall_h(rng);
        sc.walls.push_back(cross);
    }
    detail::finalize_path(sc);
    detail::make_speed_profile(sc, rng);
    detail::add_parked_boxes(sc, rng, cfg.blocker_count, road_x, -y_span * 0.8, y_span * 0.8);
    return sc;
}

// ---------------------------------------------------------------------------
// intersection primitives

namespace detail {

// segment (p0 -> p1) against an axis-aligned box, 3-d slab test
inline bool segment_hits_box(double x0, double y0, double z0, double x1, double y1, double z1,
                             const Box& b) {
    double tmin = 0.0, tmax = 1.0;
    const double o[3] = {x0, y0, z0};
    const double d[3] = {x1 - x0, y1 - y0, z1 - z0};
    const double lo[3] = {b.cx - b.sx / 2, b.cy - b.sy / 2, b.cz - b.sz / 2};
    const double hi[3] = {b.cx + b.sx / 2, b.cy + b.sy / 2, b.cz + b.sz / 2};
    for (int i = 0; i < 3; ++i) {
        if (d[i] == 0.0) {
            if (o[i] < lo[i] || o[i] > hi[i]) return false;
        } else {
            double t1 = (lo[i] - o[i]) / d[i];
            double t2 = (hi[i] - o[i]) / d[i];
            if (t1 > t2) std::swap(t1, t2);
            tmin = std::max(tmin, t1);
            tmax = std::min(tmax, t2);
            if (tmin > tmax) return false;
        }
    }
    return true;
}

// segment against a vertical wall rectangle (excluding endpoints landing on it)
inline bool segment_hits_wall(double x0, double y0, double z0, double x1, double y1, double z1,
                              const Wall& w) {
    const double eps = 1e-9;
    if (w.axis_x()) {
        const double dy = y1 - y0;
        if (std::fabs(dy) < eps) return false;
        const double t = (w.y0 - y0) / dy;
        if (t <= eps || t >= 1.0 - eps) return false;
        const double xh = x0 + t * (x1 - x0);
        const double zh = z0 + t * (z1 - z0);
        const double xl = std::min(w.x0, w.x1), xr = std::max(w.x0, w.x1);
        return xh >= xl && xh <= xr && zh >= 0.0 && zh <= w.height;
    }
    const double dx = x1 - x0;
    if (std::fabs(dx) < eps) return false;
    const double t = (w.x0 - x0) / dx;
    if (t <= eps || t >= 1.0 - eps) return false;
    const double yh = y0 + t * (y1 - y0);
    const double zh = z0 + t * (z1 - z0);
    const double yl = std::min(w.y0, w.y1), yr = std::max(w.y0, w.y1);
    return yh >= yl && yh <= yr && zh >= 0.0 && zh <= w.height;
}

struct RayHit {
    double t = 1e300;   // distance along the (unit) ray
    int class_id = 0;   // 0 none, 1 ground, 2 wall, 3 vehicle
};

inline void ray_ground(double oz, double dz, RayHit& h) {
    if (dz >= 0.0) return;
    const double t = -oz / dz;
    if (t > 1e-6 && t < h.t) {
        h.t = t;
        h.class_id = 1;
    }
}

inline void ray_box(double ox, double oy, double oz, double dx, double dy, double dz, const Box& b,
                    RayHit& h) {
    double tmin = 1e-6, tmax = h.t;
    const double o[3] = {ox, oy, oz};
    const double d[3] = {dx, dy, dz};
    const double lo[3] = {b.cx - b.sx / 2, b.cy - b.sy / 2, b.cz - b.sz / 2};
    const double hi[3] = {b.cx + b.sx / 2, b.cy + b.sy / 2, b.cz + b.sz / 2};
    for (int i = 0; i < 3; ++i) {
        if (d[i] == 0.0) {
            if (o[i] < lo[i] || o[i] > hi[i]) return;
        } else {
            double t1 = (lo[i] - o[i]) / d[i];
            double t2 = (hi[i] - o[i]) / d[i];
            if (t1 > t2) std::swap(t1, t2);
            tmin = std::max(tmin, t1);
            tmax = std::min(tmax, t2);
            if (tmin > tmax) return;
        }
    }
    if (tmin < h.t) {
        h.t = tmin;
        h.class_id = 3;
    }
}

// oriented box: rotate the ray into the box frame and reuse the slab test
inline void ray_obb(double ox, double oy, double oz, double dx, double dy, double dz, const Box& b,
                    double heading, RayHit& h) {
    const double c = std::cos(-heading), s = std::sin(-heading);
    const double lx = ox - b.cx, ly = oy - b.cy;
    Box local = b;
    local.cx = 0.0;
    local.cy = 0.0;
    RayHit tmp;
    tmp.t = h.t;
    ray_box(lx * c - ly * s, lx * s + ly * c, oz, dx * c - dy * s, dx * s + dy * c, dz, local, tmp);
    if (tmp.class_id != 0 && tmp.t < h.t) h = tmp;
}

inline void ray_wall(double ox, double oy, double oz, double dx, double dy, double dz, const Wall& w,
                     RayHit& h) {
    if (w.axis_x()) {
        if (dy == 0.0) return;
        const double t = (w.y0 - oy) / dy;
        if (t <= 1e-6 || t >= h.t) return;
        const double xh = ox + t * dx, zh = oz + t * dz;
        const double xl = std::min(w.x0, w.x1), xr = std::max(w.x0, w.x1);
        if (xh >= xl && xh <= xr && zh >= 0.0 && zh <= w.height) {
            h.t = t;
            h.class_id = 2;
        }
        return;
    }
    if (dx == 0.0) return;
    const double t = (w.x0 - ox) / dx;
    if (t <= 1e-6 || t >= h.t) return;
    const double yh = oy + t * dy, zh = oz + t * dz;
    const double yl = std::min(w.y0, w.y1), yr = std::max(w.y0, w.y1);
    if (yh >= yl && yh <= yr && zh >= 0.0 && zh <= w.height) {
        h.t = t;
        h.class_id = 2;
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// path tracing: LOS plus one image-method reflection per wall

inline double wrap_angle(double a) {
    while (a > kPi) a -= 2.0 * kPi;
    while (a <= -kPi) a += 2.0 * kPi;
    return a;
}

// The user array boresight tracks the RSU direction (idealized mount), so
// arrivals stay in the front half-plane; paths outside either array's front
// half-plane are discarded.
inline phy::PathSet trace_paths(const Scenario& sc, int t_index, const phy::ArrayConfig& cfg) {
    phy::PathSet out;
    const Pose u = sc.user_pose(t_index);
    const double lambda = cfg.wavelength_m();
    const double user_boresight = std::atan2(sc.rsu_y - u.y, sc.rsu_x - u.x);

    auto leg_clear = [&](double x0, double y0, double z0, double x1, double y1, double z1,
                         const Wall* skip) {
        for (const auto& b : sc.blockers)
            if (b.rf_blocking && detail::segment_hits_box(x0, y0, z0, x1, y1, z1, b)) return false;
        for (const auto& w : sc.walls) {
            if (&w == skip) continue;
            if (detail::segment_hits_wall(x0, y0, z0, x1, y1, z1, w)) return false;
        }
        return true;
    };

    auto push_path = [&](double total_len, double gamma, double aod, double aoa) {
        if (std::fabs(aod) > kPi / 2.0 || std::fabs(aoa) > kPi / 2.0) return;
        phy::Path p;
        const double amp = gamma * lambda / (4.0 * kPi * total_len);
        p.gain = std::polar(amp, -2.0 * kPi * total_len / lambda);
        p.delay_s = total_len / phy::kSpeedOfLight;
        p.aod_rad = aod;
        p.aoa_rad = aoa;
        out.push_back(p);
    };

    // LOS
    const double dx = u.x - sc.rsu_x, dy = u.y - sc.rsu_y, dz = sc.user_z - sc.rsu_z;
    const double los_len = std::sqrt(dx * dx + dy * dy + dz * dz);
    if (los_len > 0.0 && leg_clear(sc.rsu_x, sc.rsu_y, sc.rsu_z, u.x, u.y, sc.user_z, nullptr)) {
        const double aod = wrap_angle(std::atan2(dy, dx) - sc.rsu_heading);
        const double aoa = wrap_angle(std::atan2(-dy, -dx) - user_boresight);
        push_path(los_len, 1.0, aod, aoa);
    }

    // one image-method reflection per wall
    for (const auto& w : sc.walls) {
        double mx = u.x, my = u.y;  // user mirrored across the wall line
        if (w.axis_x()) {
            if ((sc.rsu_y - w.y0) * (u.y - w.y0) <= 0.0) continue;  // opposite sides
            my = 2.0 * w.y0 - u.y;
        } else {
            if ((sc.rsu_x - w.x0) * (u.x - w.x0) <= 0.0) continue;
            mx = 2.0 * w.x0 - u.x;
        }
        const double ddx = mx - sc.rsu_x, ddy = my - sc.rsu_y, ddz = sc.user_z - sc.rsu_z;
        // reflection point: unfolded segment crossing the wall plane
        double t;
        if (w.axis_x()) {
            if (ddy == 0.0) continue;
            t = (w.y0 - sc.rsu_y) / ddy;
        } else {
            if (ddx == 0.0) continue;
            t = (w.x0 - sc.rsu_x) / ddx;
        }
        if (t <= 0.0 || t >= 1.0) continue;
        const double px = sc.rsu_x + t * ddx;
        const double py = sc.rsu_y + t * ddy;
        const double pz = sc.rsu_z + t * ddz;
        if (w.axis_x()) {
            const double xl = std::min(w.x0, w.x1), xr = std::max(w.x0, w.x1);
            if (px < xl || px > xr) continue;
        } else {
            const double yl = std::min(w.y0, w.y1), yr = std::max(w.y0, w.y1);
            if (py < yl || py > yr) continue;
        }
        if (pz < 0.0 || pz > w.height) continue;
        if (!leg_clear(sc.rsu_x, sc.rsu_y, sc.rsu_z, px, py, pz, &w)) continue;
        if (!leg_clear(px, py, pz, u.x, u.y, sc.user_z, &w)) continue;
        const double total = std::sqrt(ddx * ddx + ddy * ddy + ddz * ddz);
        const double aod = wrap_angle(std::atan2(py - sc.rsu_y, px - sc.rsu_x) - sc.rsu_heading);
        const double aoa = wrap_angle(std::atan2(py - u.y, px - u.x) - user_boresight);
        push_path(total, sc.reflection_coeff, aod, aoa);
    }
    return out;
}

// ---------------------------------------------------------------------------
// sensors

inline bool is_sensor_tick(int t_index, int period_ticks) {
    return (t_index + 1) % period_ticks == 0;
}

inline PointCloud render_lidar(const Scenario& sc, int t_index, const SensorSpec& spec) {
    PointCloud cloud;
    cloud.origin_x = sc.rsu_x;
    cloud.origin_y = sc.rsu_y;
    cloud.origin_z = sc.rsu_z;
    const Box ego = sc.ego_box(t_index);
    const double ego_hd = sc.ego_heading(t_index);
    const double v_lo = spec.lidar_vfov_lo_deg * kPi / 180.0;
    const double v_hi = spec.lidar_vfov_hi_deg * kPi / 180.0;
    const double az_span = spec.lidar_az_span_deg * kPi / 180.0;
    for (int ch = 0; ch < spec.lidar_channels; ++ch) {
        const double elev = spec.lidar_channels == 1
                                ? v_lo
                                : v_lo + (v_hi - v_lo) * ch / (spec.lidar_channels - 1.0);
        const double cz = std::cos(elev), sz = std::sin(elev);
        for (int a = 0; a < spec.lidar_azimuth_steps; ++a) {
            if (static_cast<int>(cloud.size()) >= spec.lidar_points_cap) return cloud;
            const double az = sc.rsu_heading - az_span / 2.0 +
                              az_span * (a + 0.5) / spec.lidar_azimuth_steps;
            const double dx = cz * std::cos(az), dy = cz * std::sin(az), dz = sz;
            detail::RayHit h;
            h.t = spec.lidar_range_m;
            detail::ray_ground(cloud.origin_z, dz, h);
            for (const auto& w : sc.walls)
                detail::ray_wall(cloud.origin_x, cloud.origin_y, cloud.origin_z, dx, dy, dz, w, h);
            for (const auto& b : sc.blockers)
                detail::ray_box(cloud.origin_x, cloud.origin_y, cloud.origin_z, dx, dy, dz, b, h);
            detail::ray_obb(cloud.origin_x, cloud.origin_y, cloud.origin_z, dx, dy, dz, ego, ego_hd, h);
            if (h.class_id == 0 || h.t >= spec.lidar_range_m) continue;
            const double ref = spec.lidar_intensity_ref_m;
            const double intensity = std::min(1.0, (ref * ref) / (h.t * h.t));
            cloud.push(cloud.origin_x + dx * h.t, cloud.origin_y + dy * h.t,
                       cloud.origin_z + dz * h.t, intensity);
        }
    }
    return cloud;
}

struct ImageRaster {
    int height = 0;
    int width = 0;
    std::vector<double> chw;  // 2 channels: normalized inverse depth, class id

    double inv_depth(int i, int j) const { return chw[static_cast<std::size_t>(i) * width + j]; }
    double class_id(int i, int j) const {
        return chw[static_cast<std::size_t>(height) * width + static_cast<std::size_t>(i) * width + j];
    }
};

inline ImageRaster render_camera(const Scenario& sc, int t_index, const SensorSpec& spec) {
    ImageRaster img;
    img.height = spec.cam_height;
    img.width = spec.cam_width;
    img.chw.assign(static_cast<std::size_t>(2) * spec.cam_height * spec.cam_width, 0.0);
    const Box ego = sc.ego_box(t_index);
    const double ego_hd = sc.ego_heading(t_index);
    const double half_w = std::tan(spec.cam_hfov_deg * kPi / 360.0);
    const double half_h = half_w * spec.cam_height / spec.cam_width;
    const double ch = std::cos(sc.rsu_heading), sh = std::sin(sc.rsu_heading);
    for (int i = 0; i < spec.cam_height; ++i) {
        for (int j = 0; j < spec.cam_width; ++j) {
            const double u = (2.0 * (j + 0.5) / spec.cam_width - 1.0) * half_w;
            const double v = (1.0 - 2.0 * (i + 0.5) / spec.cam_height) * half_h;
            // camera frame: forward along the heading, u to the right, v up
            double fx = 1.0, fy = -u, fz = v;
            const double inv_n = 1.0 / std::sqrt(fx * fx + fy * fy + fz * fz);
            fx *= inv_n;
            fy *= inv_n;
            fz *= inv_n;
            const double dx = ch * fx - sh * fy;
            const double dy = sh * fx + ch * fy;
            detail::RayHit h;
            h.t = 4.0 * spec.lidar_range_m;
            detail::ray_ground(sc.rsu_z, fz, h);
            for (const auto& w : sc.walls) detail::ray_wall(sc.rsu_x, sc.rsu_y, sc.rsu_z, dx, dy, fz, w, h);
            for (const auto& b : sc.blockers) detail::ray_box(sc.rsu_x, sc.rsu_y, sc.rsu_z, dx, dy, fz, b, h);
            detail::ray_obb(sc.rsu_x, sc.rsu_y, sc.rsu_z, dx, dy, fz, ego, ego_hd, h);
            if (h.class_id == 0) continue;
            img.chw[static_cast<std::size_t>(i) * spec.cam_width + j] =
                std::min(1.0, spec.cam_depth_ref_m / h.t);
            img.chw[static_cast<std::size_t>(spec.cam_height) * spec.cam_width +
                    static_cast<std::size_t>(i) * spec.cam_width + j] = h.class_id;
        }
    }
    return img;
}

}  // namespace mmwl::scenegen

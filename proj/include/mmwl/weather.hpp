#pragma once

// Physics-based fog and rain impairment of LiDAR point clouds.
//
// Fog: hard returns decay by Beer-Lambert round-trip attenuation
// I = I0 exp(-2 a R); where the table backscatter exceeds the attenuated
// return the point becomes a short-range fog echo. Rain: Gaussian range
// perturbation, empirical extinction a = beta * r^b, and sensitivity-
// threshold dropping. Per-point RNG streams are derived from (seed, point
// index) so results do not depend on iteration order.

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "mmwl/common.hpp"
#include "mmwl/pointcloud.hpp"

namespace mmwl::weather {

struct FogParams {
    double alpha_fog = 0.0;  // extinction coefficient, 1/m
    // (range_m, intensity) knots, piecewise linear, monotone non-increasing;
    // zero outside the covered range
    std::vector<std::pair<double, double>> backscatter_table;
    bool enabled = true;
    double i_threshold = 0.01;
    double fog_range_min_m = 1.0;
    double fog_range_max_m = 15.0;
    std::uint64_t seed = 0;
};

struct RainParams {
    double rate_mm_h = 0.0;
    double beta = 0.01;
    double b_exp = 0.6;
    double sigma0_m = 0.0;  // range-noise std
    double i_threshold = 0.01;
    std::uint64_t seed = 0;
    bool enabled = true;
};

inline double backscatter_at(const FogParams& p, double range_m) {
    const auto& t = p.backscatter_table;
    if (t.empty()) return 0.0;
    if (range_m <= t.front().first) return t.front().second;
    for (std::size_t i = 1; i < t.size(); ++i) {
        if (range_m <= t[i].first) {
            const double w = (range_m - t[i - 1].first) / (t[i].first - t[i - 1].first);
            return t[i - 1].second + w * (t[i].second - t[i - 1].second);
        }
    }
    return 0.0;
}

struct ImpairResult {
    PointCloud cloud;
    std::vector<unsigned char> soft_flags;  // 1 for fog echoes
};

inline ImpairResult apply_fog(const PointCloud& in, const FogParams& p) {
    ImpairResult out;
    out.cloud.origin_x = in.origin_x;
    out.cloud.origin_y = in.origin_y;
    out.cloud.origin_z = in.origin_z;
    if (!p.enabled) {
        out.cloud = in;
        out.soft_flags.assign(in.size(), 0);
        return out;
    }
    for (std::size_t i = 0; i < in.size(); ++i) {
        const double dx = in.x(i) - in.origin_x;
        const double dy = in.y(i) - in.origin_y;
        const double dz = in.z(i) - in.origin_z;
        const double r = std::sqrt(dx * dx + dy * dy + dz * dz);
        const double i0 = in.intensity(i);
        const double i_fog = i0 * std::exp(-2.0 * p.alpha_fog * r);
        const double i_bck = backscatter_at(p, r);
        if (i_bck > i_fog) {
            if (i_bck < p.i_threshold) continue;
            std::mt19937_64 rng(derive_seed(p.seed, i));
            std::uniform_real_distribution<double> u(0.0, 1.0);
            const double lo = std::min(p.fog_range_min_m, r);
            const double hi = std::max(lo, std::min(r, p.fog_range_max_m));
            const double rr = lo + u(rng) * (hi - lo);
            const double s = r > 0.0 ? rr / r : 0.0;
            out.cloud.push(in.origin_x + dx * s, in.origin_y + dy * s, in.origin_z + dz * s, i_bck);
            out.soft_flags.push_back(1);
        } else {
            if (i_fog < p.i_threshold) continue;
            out.cloud.push(in.x(i), in.y(i), in.z(i), i_fog);
            out.soft_flags.push_back(0);
        }
    }
    return out;
}

inline double rain_extinction(const RainParams& p) {
    return p.rate_mm_h > 0.0 ? p.beta * std::pow(p.rate_mm_h, p.b_exp) : 0.0;
}

inline ImpairResult apply_rain(const PointCloud& in, const RainParams& p) {
    ImpairResult out;
    out.cloud.origin_x = in.origin_x;
    out.cloud.origin_y = in.origin_y;
    out.cloud.origin_z = in.origin_z;
    if (!p.enabled || (p.rate_mm_h == 0.0 && p.sigma0_m == 0.0)) {
        out.cloud = in;
        out.soft_flags.assign(in.size(), 0);
        return out;
    }
    const double alpha = rain_extinction(p);
    for (std::size_t i = 0; i < in.size(); ++i) {
        const double dx = in.x(i) - in.origin_x;
        const double dy = in.y(i) - in.origin_y;
        const double dz = in.z(i) - in.origin_z;
        const double r = std::sqrt(dx * dx + dy * dy + dz * dz);
        const double i_rain = in.intensity(i) * std::exp(-2.0 * alpha * r);
        if (i_rain < p.i_threshold) continue;
        double s = 1.0;
        if (p.sigma0_m > 0.0 && r > 0.0) {
            std::mt19937_64 rng(derive_seed(p.seed, i));
            std::normal_distribution<double> noise(0.0, p.sigma0_m);
            const double rp = std::max(0.0, r + noise(rng));
            s = rp / r;
        }
        out.cloud.push(in.origin_x + dx * s, in.origin_y + dy * s, in.origin_z + dz * s, i_rain);
        out.soft_flags.push_back(0);
    }
    return out;
}

// ---------------------------------------------------------------------------
// presets, mirroring the three evaluation conditions

struct WeatherPreset {
    std::string name = "sunny";
    FogParams fog{};
    RainParams rain{};
    double camera_fog_visibility_m = 0.0;  // 0 disables the camera extension

    bool identity() const { return !fog.enabled && !rain.enabled; }
};

inline WeatherPreset builtin_preset(const std::string& name) {
    WeatherPreset p;
    p.name = name;
    p.fog.enabled = false;
    p.rain.enabled = false;
    if (name == "sunny") return p;
    if (name == "fog_heavy") {
        p.fog.enabled = true;
        p.fog.alpha_fog = 0.06;
        p.fog.backscatter_table = {{0.0, 0.05}, {10.0, 0.05}, {40.0, 0.0}};
        p.fog.seed = 1701;
        // camera proxy: class channel zeroed beyond the visibility range
        p.camera_fog_visibility_m = 35.0;
        return p;
    }
    if (name == "rain_heavy") {
        p.rain.enabled = true;
        p.rain.rate_mm_h = 50.0;
        p.rain.sigma0_m = 0.02 * (50.0 / 10.0);
        p.rain.seed = 1702;
        return p;
    }
    throw std::runtime_error("unknown weather preset: " + name);
}

inline json preset_to_json(const WeatherPreset& p) {
    json j;
    j["format"] = "mmw-weather/1";
    j["name"] = p.name;
    j["fog"] = {{"enabled", p.fog.enabled},
                {"alpha_fog", p.fog.alpha_fog},
                {"backscatter_table", p.fog.backscatter_table},
                {"i_threshold", p.fog.i_threshold},
                {"fog_range_min_m", p.fog.fog_range_min_m},
                {"fog_range_max_m", p.fog.fog_range_max_m},
                {"seed", p.fog.seed}};
    j["rain"] = {{"enabled", p.rain.enabled},  {"rate_mm_h", p.rain.rate_mm_h},
                 {"beta", p.rain.beta},        {"b_exp", p.rain.b_exp},
                 {"sigma0_m", p.rain.sigma0_m}, {"i_threshold", p.rain.i_threshold},
                 {"seed", p.rain.seed}};
    j["camera_fog_visibility_m"] = p.camera_fog_visibility_m;
    return j;
}

inline WeatherPreset preset_from_json(const json& j) {
    reject_unknown_keys(j, {"format", "name", "fog", "rain", "camera_fog_visibility_m"},
                        "weather preset");
    WeatherPreset p;
    p.name = j.at("name").get<std::string>();
    const json& f = j.at("fog");
    reject_unknown_keys(f, {"enabled", "alpha_fog", "backscatter_table", "i_threshold",
                            "fog_range_min_m", "fog_range_max_m", "seed"}, "weather preset fog");
    p.fog.enabled = f.at("enabled").get<bool>();
    p.fog.alpha_fog = f.at("alpha_fog").get<double>();
    p.fog.backscatter_table = f.at("backscatter_table").get<std::vector<std::pair<double, double>>>();
    p.fog.i_threshold = f.at("i_threshold").get<double>();
    p.fog.fog_range_min_m = f.at("fog_range_min_m").get<double>();
    p.fog.fog_range_max_m = f.at("fog_range_max_m").get<double>();
    p.fog.seed = f.at("seed").get<std::uint64_t>();
    const json& r = j.at("rain");
    reject_unknown_keys(r, {"enabled", "rate_mm_h", "beta", "b_exp", "sigma0_m", "i_threshold",
                            "seed"}, "weather preset rain");
    p.rain.enabled = r.at("enabled").get<bool>();
    p.rain.rate_mm_h = r.at("rate_mm_h").get<double>();
    p.rain.beta = r.at("beta").get<double>();
    p.rain.b_exp = r.at("b_exp").get<double>();
    p.rain.sigma0_m = r.at("sigma0_m").get<double>();
    p.rain.i_threshold = r.at("i_threshold").get<double>();
    p.rain.seed = r.at("seed").get<std::uint64_t>();
    p.camera_fog_visibility_m = get_or(j, "camera_fog_visibility_m", 0.0);
    return p;
}

// resolves a built-in name or a JSON preset file path
inline WeatherPreset resolve_preset(const std::string& name_or_path) {
    if (name_or_path == "sunny" || name_or_path == "fog_heavy" || name_or_path == "rain_heavy")
        return builtin_preset(name_or_path);
    return preset_from_json(load_config(name_or_path, "mmw-weather/1"));
}

}  // namespace mmwl::weather

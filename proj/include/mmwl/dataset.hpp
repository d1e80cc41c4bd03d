#pragma once

// Dataset generation and I/O. Layout under a dataset root:
//   <root>/<split>/<traj_id>/frames.jsonl   one frame record per line
//   <root>/manifest.json                    splits, configs, seeds, version
// Complex numbers are stored as [re, im] pairs, point clouds and rasters as
// flat arrays. Format version "mmw-lite/1". Generation is deterministic for
// a given (config, seed) and independent of the worker count: every
// trajectory is a pure function of its own derived seed.

#include <atomic>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mmwl/common.hpp"
#include "mmwl/phy.hpp"
#include "mmwl/scenegen.hpp"
#include "mmwl/weather.hpp"

namespace mmwl::dataset {

inline constexpr const char* kFormatVersion = "mmw-lite/1";

struct SplitSpec {
    int trajectories = 4;
    double duration_s = 8.0;
};

struct GenConfig {
    phy::ArrayConfig array;
    phy::SubcarrierGrid grid;
    int q_tx = 16;
    int q_rx = 4;
    scenegen::SensorSpec sensors;
    std::vector<std::string> templates{"straight_road", "curvy_road"};
    int blocker_count = 6;
    double tick_s = 0.01;
    double rsu_height_m = 6.0;
    double user_height_m = 1.5;
    double reflection_coeff = 0.5;
    std::map<std::string, SplitSpec> splits{{"train", {4, 8.0}}, {"val", {2, 8.0}}, {"test", {2, 8.0}}};
};

inline GenConfig gen_config_from_json(const json& j) {
    reject_unknown_keys(j, {"format", "array", "ofdm", "codebook", "sensors", "scene", "splits"},
                        "gen config");
    GenConfig c;
    if (j.contains("array")) {
        const json& a = j.at("array");
        reject_unknown_keys(a, {"n_tx", "n_rx", "spacing_ratio", "carrier_hz"}, "gen config array");
        c.array.n_tx = get_or(a, "n_tx", c.array.n_tx);
        c.array.n_rx = get_or(a, "n_rx", c.array.n_rx);
        c.array.spacing_ratio = get_or(a, "spacing_ratio", c.array.spacing_ratio);
        c.array.carrier_hz = get_or(a, "carrier_hz", c.array.carrier_hz);
    }
    if (j.contains("ofdm")) {
        const json& g = j.at("ofdm");
        reject_unknown_keys(g, {"k_count", "spacing_hz"}, "gen config ofdm");
        c.grid.k_count = get_or(g, "k_count", c.grid.k_count);
        c.grid.spacing_hz = get_or(g, "spacing_hz", c.grid.spacing_hz);
    }
    if (j.contains("codebook")) {
        const json& cb = j.at("codebook");
        reject_unknown_keys(cb, {"q_tx", "q_rx"}, "gen config codebook");
        c.q_tx = get_or(cb, "q_tx", c.q_tx);
        c.q_rx = get_or(cb, "q_rx", c.q_rx);
    }
    if (j.contains("sensors")) {
        const json& s = j.at("sensors");
        reject_unknown_keys(s,
                            {"period_ticks", "lidar_channels", "lidar_azimuth_steps",
                             "lidar_az_span_deg", "lidar_range_m", "lidar_vfov_deg", "points_cap",
                             "lidar_intensity_ref_m", "record_camera", "cam_width", "cam_height",
                             "cam_hfov_deg", "cam_depth_ref_m"},
                            "gen config sensors");
        auto& sp = c.sensors;
        sp.period_ticks = get_or(s, "period_ticks", sp.period_ticks);
        sp.lidar_channels = get_or(s, "lidar_channels", sp.lidar_channels);
        sp.lidar_azimuth_steps = get_or(s, "lidar_azimuth_steps", sp.lidar_azimuth_steps);
        sp.lidar_az_span_deg = get_or(s, "lidar_az_span_deg", sp.lidar_az_span_deg);
        sp.lidar_range_m = get_or(s, "lidar_range_m", sp.lidar_range_m);
        if (s.contains("lidar_vfov_deg")) {
            auto v = s.at("lidar_vfov_deg").get<std::vector<double>>();
            if (v.size() != 2) throw std::runtime_error("gen config: lidar_vfov_deg needs two entries");
            sp.lidar_vfov_lo_deg = v[0];
            sp.lidar_vfov_hi_deg = v[1];
        }
        sp.lidar_points_cap = get_or(s, "points_cap", sp.lidar_points_cap);
        sp.lidar_intensity_ref_m = get_or(s, "lidar_intensity_ref_m", sp.lidar_intensity_ref_m);
        sp.record_camera = get_or(s, "record_camera", sp.record_camera);
        sp.cam_width = get_or(s, "cam_width", sp.cam_width);
        sp.cam_height = get_or(s, "cam_height", sp.cam_height);
        sp.cam_hfov_deg = get_or(s, "cam_hfov_deg", sp.cam_hfov_deg);
        sp.cam_depth_ref_m = get_or(s, "cam_depth_ref_m", sp.cam_depth_ref_m);
    }
    if (j.contains("scene")) {
        const json& sc = j.at("scene");
        reject_unknown_keys(sc,
                            {"templates", "blocker_count", "tick_s", "rsu_height_m", "user_height_m",
                             "reflection_coeff"},
                            "gen config scene");
        if (sc.contains("templates")) c.templates = sc.at("templates").get<std::vector<std::string>>();
        c.blocker_count = get_or(sc, "blocker_count", c.blocker_count);
        c.tick_s = get_or(sc, "tick_s", c.tick_s);
        c.rsu_height_m = get_or(sc, "rsu_height_m", c.rsu_height_m);
        c.user_height_m = get_or(sc, "user_height_m", c.user_height_m);
        c.reflection_coeff = get_or(sc, "reflection_coeff", c.reflection_coeff);
    }
    if (j.contains("splits")) {
        c.splits.clear();
        for (const auto& [name, sj] : j.at("splits").items()) {
            reject_unknown_keys(sj, {"trajectories", "duration_s"}, "gen config split " + name);
            SplitSpec ss;
            ss.trajectories = get_or(sj, "trajectories", ss.trajectories);
            ss.duration_s = get_or(sj, "duration_s", ss.duration_s);
            c.splits[name] = ss;
        }
    }
    return c;
}

inline json gen_config_to_json(const GenConfig& c) {
    json j;
    j["format"] = "mmw-gen/1";
    j["array"] = {{"n_tx", c.array.n_tx},
                  {"n_rx", c.array.n_rx},
                  {"spacing_ratio", c.array.spacing_ratio},
                  {"carrier_hz", c.array.carrier_hz}};
    j["ofdm"] = {{"k_count", c.grid.k_count}, {"spacing_hz", c.grid.spacing_hz}};
    j["codebook"] = {{"q_tx", c.q_tx}, {"q_rx", c.q_rx}};
    j["sensors"] = {{"period_ticks", c.sensors.period_ticks},
                    {"lidar_channels", c.sensors.lidar_channels},
                    {"lidar_azimuth_steps", c.sensors.lidar_azimuth_steps},
                    {"lidar_az_span_deg", c.sensors.lidar_az_span_deg},
                    {"lidar_range_m", c.sensors.lidar_range_m},
                    {"lidar_vfov_deg", std::vector<double>{c.sensors.lidar_vfov_lo_deg,
                                                           c.sensors.lidar_vfov_hi_deg}},
                    {"points_cap", c.sensors.lidar_points_cap},
                    {"lidar_intensity_ref_m", c.sensors.lidar_intensity_ref_m},
                    {"record_camera", c.sensors.record_camera},
                    {"cam_width", c.sensors.cam_width},
                    {"cam_height", c.sensors.cam_height},
                    {"cam_hfov_deg", c.sensors.cam_hfov_deg},
                    {"cam_depth_ref_m", c.sensors.cam_depth_ref_m}};
    j["scene"] = {{"templates", c.templates},
                  {"blocker_count", c.blocker_count},
                  {"tick_s", c.tick_s},
                  {"rsu_height_m", c.rsu_height_m},
                  {"user_height_m", c.user_height_m},
                  {"reflection_coeff", c.reflection_coeff}};
    json sp;
    for (const auto& [name, ss] : c.splits)
        sp[name] = {{"trajectories", ss.trajectories}, {"duration_s", ss.duration_s}};
    j["splits"] = sp;
    return j;
}

// ---------------------------------------------------------------------------

struct FrameRecord {
    int t_index = 0;
    phy::PathSet paths;
    int p_star = 0;
    int q_star = 0;
    std::vector<double> gain_table;  // q_rx x q_tx row-major
    std::optional<PointCloud> lidar;
    std::optional<scenegen::ImageRaster> image;
};

namespace detail {
inline double round_to(double v, int decimals) {
    const double f = std::pow(10.0, decimals);
    return std::round(v * f) / f;
}
}  // namespace detail

inline json frame_to_json(const FrameRecord& f) {
    json j;
    j["t"] = f.t_index;
    json paths = json::array();
    for (const auto& p : f.paths)
        paths.push_back({p.gain.real(), p.gain.imag(), p.delay_s, p.aod_rad, p.aoa_rad});
    j["paths"] = paths;
    j["p"] = f.p_star;
    j["q"] = f.q_star;
    j["gains"] = f.gain_table;
    if (f.lidar) {
        // sensor samples are bulky; millimetre/three-decimal quantization
        // keeps files compact and still round-trips exactly through JSON
        std::vector<double> pts(f.lidar->xyzi.size());
        for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = detail::round_to(f.lidar->xyzi[i], 3);
        j["lidar"] = {{"o", {f.lidar->origin_x, f.lidar->origin_y, f.lidar->origin_z}},
                      {"pts", pts}};
    }
    if (f.image) {
        std::vector<double> d(f.image->chw.size());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = detail::round_to(f.image->chw[i], 4);
        j["img"] = {{"h", f.image->height}, {"w", f.image->width}, {"d", d}};
    }
    return j;
}

inline FrameRecord frame_from_json(const json& j) {
    FrameRecord f;
    f.t_index = j.at("t").get<int>();
    for (const auto& pj : j.at("paths")) {
        phy::Path p;
        p.gain = {pj.at(0).get<double>(), pj.at(1).get<double>()};
        p.delay_s = pj.at(2).get<double>();
        p.aod_rad = pj.at(3).get<double>();
        p.aoa_rad = pj.at(4).get<double>();
        f.paths.push_back(p);
    }
    f.p_star = j.at("p").get<int>();
    f.q_star = j.at("q").get<int>();
    f.gain_table = j.at("gains").get<std::vector<double>>();
    if (j.contains("lidar")) {
        PointCloud pc;
        const auto& o = j.at("lidar").at("o");
        pc.origin_x = o.at(0).get<double>();
        pc.origin_y = o.at(1).get<double>();
        pc.origin_z = o.at(2).get<double>();
        pc.xyzi = j.at("lidar").at("pts").get<std::vector<double>>();
        f.lidar = std::move(pc);
    }
    if (j.contains("img")) {
        scenegen::ImageRaster img;
        img.height = j.at("img").at("h").get<int>();
        img.width = j.at("img").at("w").get<int>();
        img.chw = j.at("img").at("d").get<std::vector<double>>();
        f.image = std::move(img);
    }
    return f;
}

struct TrajMeta {
    std::string id;
    std::uint64_t seed = 0;
    std::string template_name;
    double duration_s = 0.0;
    double tick_s = 0.01;
    int n_frames = 0;
    std::string rel_path;
    double rsu_x = 0, rsu_y = 0, rsu_z = 6.0, rsu_heading = 0.0;
};

struct Manifest {
    GenConfig cfg;
    std::uint64_t seed = 0;
    std::map<std::string, std::vector<TrajMeta>> splits;
};

inline json manifest_to_json(const Manifest& m) {
    json j;
    j["format"] = kFormatVersion;
    j["seed"] = m.seed;
    j["gen"] = gen_config_to_json(m.cfg);
    json splits;
    for (const auto& [name, list] : m.splits) {
        json arr = json::array();
        for (const auto& t : list)
            arr.push_back({{"id", t.id},
                           {"seed", t.seed},
                           {"template", t.template_name},
                           {"duration_s", t.duration_s},
                           {"tick_s", t.tick_s},
                           {"n_frames", t.n_frames},
                           {"path", t.rel_path},
                           {"rsu", {t.rsu_x, t.rsu_y, t.rsu_z, t.rsu_heading}}});
        splits[name] = arr;
    }
    j["splits"] = splits;
    return j;
}

inline Manifest manifest_from_json(const json& j) {
    if (!j.contains("format") || j.at("format") != kFormatVersion)
        throw std::runtime_error("manifest: missing or unsupported format tag");
    Manifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.cfg = gen_config_from_json(j.at("gen"));
    for (const auto& [name, arr] : j.at("splits").items()) {
        std::vector<TrajMeta> list;
        for (const auto& tj : arr) {
            TrajMeta t;
            t.id = tj.at("id").get<std::string>();
            t.seed = tj.at("seed").get<std::uint64_t>();
            t.template_name = tj.at("template").get<std::string>();
            t.duration_s = tj.at("duration_s").get<double>();
            t.tick_s = tj.at("tick_s").get<double>();
            t.n_frames = tj.at("n_frames").get<int>();
            t.rel_path = tj.at("path").get<std::string>();
            t.rsu_x = tj.at("rsu").at(0).get<double>();
            t.rsu_y = tj.at("rsu").at(1).get<double>();
            t.rsu_z = tj.at("rsu").at(2).get<double>();
            t.rsu_heading = tj.at("rsu").at(3).get<double>();
            list.push_back(t);
        }
        m.splits[name] = list;
    }
    return m;
}

// ---------------------------------------------------------------------------
// generation

inline scenegen::SceneConfig scene_config_for(const GenConfig& cfg, const std::string& tmpl,
                                              double duration_s) {
    scenegen::SceneConfig sc;
    sc.template_name = tmpl;
    sc.duration_s = duration_s;
    sc.tick_s = cfg.tick_s;
    sc.blocker_count = cfg.blocker_count;
    sc.rsu_height_m = cfg.rsu_height_m;
    sc.user_height_m = cfg.user_height_m;
    sc.reflection_coeff = cfg.reflection_coeff;
    return sc;
}

// renders, labels and serializes one full trajectory; pure in (cfg, meta)
inline std::string render_trajectory_jsonl(const GenConfig& cfg, const TrajMeta& meta) {
    const auto scene_cfg = scene_config_for(cfg, meta.template_name, meta.duration_s);
    const auto sc = scenegen::build_scenario(scene_cfg, meta.seed);
    const auto tx_cb = phy::dft_codebook(cfg.q_tx, cfg.array.n_tx);
    const auto rx_cb = phy::dft_codebook(cfg.q_rx, cfg.array.n_rx);
    std::string out;
    out.reserve(static_cast<std::size_t>(meta.n_frames) * 512);
    for (int t = 0; t < meta.n_frames; ++t) {
        FrameRecord f;
        f.t_index = t;
        f.paths = scenegen::trace_paths(sc, t, cfg.array);
        const auto h_avg = phy::avg_channel(phy::synth_channel(f.paths, cfg.grid, cfg.array));
        auto res = phy::optimal_beam_pair(h_avg, tx_cb, rx_cb);
        f.p_star = res.p_star;
        f.q_star = res.q_star;
        f.gain_table = std::move(res.gain_table);
        if (scenegen::is_sensor_tick(t, cfg.sensors.period_ticks)) {
            f.lidar = scenegen::render_lidar(sc, t, cfg.sensors);
            if (cfg.sensors.record_camera) f.image = scenegen::render_camera(sc, t, cfg.sensors);
        }
        out += frame_to_json(f).dump();
        out += '\n';
    }
    return out;
}

inline Manifest plan_manifest(const GenConfig& cfg, std::uint64_t seed) {
    Manifest m;
    m.cfg = cfg;
    m.seed = seed;
    for (const auto& [split, spec] : cfg.splits) {
        std::vector<TrajMeta> list;
        for (int i = 0; i < spec.trajectories; ++i) {
            TrajMeta t;
            char buf[32];
            std::snprintf(buf, sizeof buf, "%s_%03d", split.c_str(), i);
            t.id = buf;
            t.seed = derive_seed(seed, fnv1a(split), static_cast<std::uint64_t>(i));
            t.template_name = cfg.templates[static_cast<std::size_t>(i) % cfg.templates.size()];
            t.duration_s = spec.duration_s;
            t.tick_s = cfg.tick_s;
            t.n_frames = static_cast<int>(std::llround(spec.duration_s / cfg.tick_s));
            t.rel_path = split + "/" + t.id + "/frames.jsonl";
            t.rsu_z = cfg.rsu_height_m;
            list.push_back(t);
        }
        m.splits[split] = list;
    }
    return m;
}

// writes the dataset tree; output bytes are independent of `workers`
inline Manifest gen_dataset(const GenConfig& cfg, const std::string& out_dir, std::uint64_t seed,
                            int workers = 1) {
    namespace fs = std::filesystem;
    Manifest m = plan_manifest(cfg, seed);
    std::vector<const TrajMeta*> jobs;
    for (const auto& [split, list] : m.splits)
        for (const auto& t : list) jobs.push_back(&t);

    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::string first_error;
    std::mutex err_mu;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= jobs.size() || failed.load()) return;
            const TrajMeta& t = *jobs[i];
            try {
                const std::string body = render_trajectory_jsonl(cfg, t);
                const fs::path p = fs::path(out_dir) / t.rel_path;
                fs::create_directories(p.parent_path());
                write_text_file(p.string(), body);
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!failed.exchange(true)) first_error = std::string(e.what()) + " (" + t.rel_path + ")";
            }
        }
    };
    const int n = std::max(1, workers);
    std::vector<std::thread> pool;
    for (int i = 0; i < n - 1; ++i) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();
    if (failed.load()) throw std::runtime_error("gen_dataset: " + first_error);

    write_text_file((fs::path(out_dir) / "manifest.json").string(), manifest_to_json(m).dump(2) + "\n");
    return m;
}

// ---------------------------------------------------------------------------
// loading and sample extraction

struct LoadedTrajectory {
    TrajMeta meta;
    std::vector<FrameRecord> frames;
};

inline Manifest load_manifest(const std::string& root) {
    return manifest_from_json(json::parse(read_text_file(root + "/manifest.json")));
}

inline LoadedTrajectory load_trajectory(const std::string& root, const TrajMeta& meta) {
    LoadedTrajectory out;
    out.meta = meta;
    std::istringstream is(read_text_file(root + "/" + meta.rel_path));
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        out.frames.push_back(frame_from_json(json::parse(line)));
    }
    if (static_cast<int>(out.frames.size()) != meta.n_frames)
        throw std::runtime_error("trajectory " + meta.id + ": frame count mismatch with manifest");
    return out;
}

inline std::vector<LoadedTrajectory> load_split(const std::string& root, const Manifest& m,
                                                const std::string& split) {
    auto it = m.splits.find(split);
    if (it == m.splits.end()) throw std::runtime_error("no such split: " + split);
    std::vector<LoadedTrajectory> out;
    out.reserve(it->second.size());
    for (const auto& t : it->second) out.push_back(load_trajectory(root, t));
    return out;
}

// One training/evaluation window: the anchor is the last history index and
// is always the end of a sensor window, so sensor features align exactly as
// backward replication expects.
struct SampleRef {
    int traj = 0;
    int anchor = 0;
};

inline std::vector<SampleRef> window_anchors(const std::vector<LoadedTrajectory>& trajs, int P,
                                             int W, int j_ratio, int stride_windows = 1) {
    if (P % j_ratio != 0)
        throw std::invalid_argument("window_anchors: history length not divisible by sensor period");
    std::vector<SampleRef> out;
    const int step = j_ratio * std::max(1, stride_windows);
    for (std::size_t ti = 0; ti < trajs.size(); ++ti) {
        const int n = static_cast<int>(trajs[ti].frames.size());
        for (int a = P - 1; a + W < n; a += step) out.push_back({static_cast<int>(ti), a});
    }
    return out;
}

}  // namespace mmwl::dataset

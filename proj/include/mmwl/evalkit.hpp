#pragma once

// Evaluation: per-step normalized gain and Top-k accuracy against stored
// oracle gain tables, baseline predictors, modality/BGAM ablation grids,
// transmit-array robustness sweeps and attention-map dumps. Per-sample work
// is parallel; aggregation uses fixed sample slots and pairwise sums, so
// reports do not depend on the worker count.

#include <atomic>
#include <thread>

#include "mmwl/model.hpp"

namespace mmwl::evalkit {

enum class Predictor { Model, Oracle, Random, Persistence };

inline Predictor predictor_from_string(const std::string& s) {
    if (s == "model") return Predictor::Model;
    if (s == "oracle") return Predictor::Oracle;
    if (s == "random") return Predictor::Random;
    if (s == "persistence") return Predictor::Persistence;
    throw std::runtime_error("unknown predictor: " + s);
}

struct Report {
    std::vector<double> gain;  // per horizon step, mean over samples
    std::vector<double> acc1;
    std::vector<double> acc3;
    double avg_gain = 0.0;
    double avg_acc1 = 0.0;
    double avg_acc3 = 0.0;
    int n_samples = 0;
};

// last observed optimal beam repeated across the horizon
inline model::Forecast persistence_baseline(const model::SampleInput& s, int w_horizon) {
    model::Forecast f;
    f.q_hat.assign(static_cast<std::size_t>(w_horizon), s.q_hist.back());
    f.y_hat.assign(static_cast<std::size_t>(w_horizon), 0.0);
    return f;
}

namespace detail {

struct StepScore {
    double gain = 0.0;
    double a1 = 0.0;
    double a3 = 0.0;
};

// Scores one predicted step against the stored gain table of that future
// frame, with the oracle combiner row. A dead channel carries no beam-choice
// penalty, so its gain is 1 by convention; top-k membership stays literal
// (an all-zero row ranks beams purely by the index tie-break).
inline StepScore score_step(const dataset::FrameRecord& future, int q_hat, int q_tx) {
    StepScore sc;
    const double* row = future.gain_table.data() + static_cast<std::size_t>(future.p_star) * q_tx;
    const double denom = row[future.q_star];
    sc.gain = denom == 0.0 ? 1.0 : row[q_hat] / denom;
    const auto top3 = phy::topk_beams(row, q_tx, 3);
    sc.a1 = (q_hat == top3[0]) ? 1.0 : 0.0;
    sc.a3 = (std::find(top3.begin(), top3.end(), q_hat) != top3.end()) ? 1.0 : 0.0;
    return sc;
}

}  // namespace detail

struct EvalOptions {
    Predictor predictor = Predictor::Model;
    std::uint64_t random_seed = 999;
    int workers = 1;
    int window_stride = 1;
};

inline Report evaluate(const nn::ParamStore& ps, const model::ModelConfig& cfg,
                       const model::BoundData& data, const EvalOptions& opts = {}) {
    const auto anchors = dataset::window_anchors(*data.trajs, cfg.p_hist, cfg.w_horizon, cfg.j_ratio,
                                                 opts.window_stride);
    if (anchors.empty()) throw std::runtime_error("evaluate: no evaluation windows");
    const int W = cfg.w_horizon;
    const int q_tx = cfg.q_count;
    const std::size_t n = anchors.size();

    std::vector<std::vector<detail::StepScore>> scores(n);
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::string err;
    std::mutex err_mu;
    auto work = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n || failed.load()) return;
            try {
                const auto& a = anchors[i];
                const auto& tr = (*data.trajs)[static_cast<std::size_t>(a.traj)];
                const auto s = model::make_sample(tr, a.traj, a.anchor, cfg);
                model::Forecast f;
                switch (opts.predictor) {
                    case Predictor::Model:
                        f = model::predict_sample(s, ps, cfg, data.grids[static_cast<std::size_t>(a.traj)],
                                                  data.origins[static_cast<std::size_t>(a.traj)].first,
                                                  data.origins[static_cast<std::size_t>(a.traj)].second);
                        break;
                    case Predictor::Oracle:
                        f.q_hat = s.labels;
                        break;
                    case Predictor::Random: {
                        std::mt19937_64 rng(derive_seed(opts.random_seed, i));
                        std::uniform_int_distribution<int> qd(0, q_tx - 1);
                        for (int m = 0; m < W; ++m) f.q_hat.push_back(qd(rng));
                        break;
                    }
                    case Predictor::Persistence:
                        f = persistence_baseline(s, W);
                        break;
                }
                std::vector<detail::StepScore> row(static_cast<std::size_t>(W));
                for (int m = 0; m < W; ++m)
                    row[static_cast<std::size_t>(m)] = detail::score_step(
                        tr.frames[static_cast<std::size_t>(a.anchor + 1 + m)],
                        f.q_hat[static_cast<std::size_t>(m)], q_tx);
                scores[i] = std::move(row);
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!failed.exchange(true)) err = e.what();
            }
        }
    };
    const int nw = std::max(1, opts.workers);
    std::vector<std::thread> pool;
    for (int i = 0; i < nw - 1; ++i) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
    if (failed.load()) throw std::runtime_error("evaluate: " + err);

    Report rep;
    rep.n_samples = static_cast<int>(n);
    rep.gain.resize(static_cast<std::size_t>(W));
    rep.acc1.resize(static_cast<std::size_t>(W));
    rep.acc3.resize(static_cast<std::size_t>(W));
    std::vector<double> col(n);
    for (int m = 0; m < W; ++m) {
        for (std::size_t i = 0; i < n; ++i) col[i] = scores[i][static_cast<std::size_t>(m)].gain;
        rep.gain[static_cast<std::size_t>(m)] = pairwise_mean(col);
        for (std::size_t i = 0; i < n; ++i) col[i] = scores[i][static_cast<std::size_t>(m)].a1;
        rep.acc1[static_cast<std::size_t>(m)] = pairwise_mean(col);
        for (std::size_t i = 0; i < n; ++i) col[i] = scores[i][static_cast<std::size_t>(m)].a3;
        rep.acc3[static_cast<std::size_t>(m)] = pairwise_mean(col);
    }
    rep.avg_gain = pairwise_sum(rep.gain.data(), rep.gain.size()) / W;
    rep.avg_acc1 = pairwise_sum(rep.acc1.data(), rep.acc1.size()) / W;
    rep.avg_acc3 = pairwise_sum(rep.acc3.data(), rep.acc3.size()) / W;
    return rep;
}

inline std::string report_csv(const Report& r) {
    std::string out = "m,gain,acc1,acc3\n";
    char buf[128];
    for (std::size_t m = 0; m < r.gain.size(); ++m) {
        std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g\n", m + 1, r.gain[m], r.acc1[m], r.acc3[m]);
        out += buf;
    }
    return out;
}

inline json report_json(const Report& r) {
    json j;
    j["gain"] = r.gain;
    j["acc1"] = r.acc1;
    j["acc3"] = r.acc3;
    j["avg_gain"] = r.avg_gain;
    j["avg_acc1"] = r.avg_acc1;
    j["avg_acc3"] = r.avg_acc3;
    j["n_samples"] = r.n_samples;
    return j;
}

// ---------------------------------------------------------------------------
// ablation grid: modality subsets x BGAM on/off, shared data and seed

struct AblationCell {
    std::string modalities;
    bool bgam = false;
    double avg_gain = 0.0;
    double avg_acc1 = 0.0;
    double best_val = 0.0;
};

inline model::ModelConfig apply_modalities(model::ModelConfig cfg, const std::string& subset) {
    cfg.use_lidar = subset.find("lidar") != std::string::npos;
    cfg.use_camera = subset.find("camera") != std::string::npos;
    return cfg;
}

inline std::vector<AblationCell> ablate(const model::ModelConfig& base,
                                        const std::vector<dataset::LoadedTrajectory>& train_trajs,
                                        const std::vector<dataset::LoadedTrajectory>& val_trajs,
                                        const std::vector<dataset::LoadedTrajectory>& test_trajs,
                                        const std::vector<std::string>& modality_sets,
                                        const std::vector<bool>& bgam_options, int eval_workers = 1) {
    std::vector<AblationCell> cells;
    for (const auto& subset : modality_sets) {
        for (bool bg : bgam_options) {
            model::ModelConfig cfg = apply_modalities(base, subset);
            cfg.bgam = bg;
            nn::ParamStore ps;
            model::register_params(ps, cfg);
            auto train_bound = model::bind_data(train_trajs, cfg);
            auto val_bound = model::bind_data(val_trajs, cfg);
            auto res = model::train(ps, cfg, train_bound, val_bound);
            auto test_bound = model::bind_data(test_trajs, cfg);
            EvalOptions opts;
            opts.workers = eval_workers;
            auto rep = evaluate(ps, cfg, test_bound, opts);
            AblationCell cell;
            cell.modalities = subset;
            cell.bgam = bg;
            cell.avg_gain = rep.avg_gain;
            cell.avg_acc1 = rep.avg_acc1;
            cell.best_val = res.best_val;
            cells.push_back(cell);
            log_at(LogLevel::info, "ablate %s bgam=%d gain %.4f acc1 %.4f", subset.c_str(),
                   bg ? 1 : 0, cell.avg_gain, cell.avg_acc1);
        }
    }
    return cells;
}

inline std::string ablation_csv(const std::vector<AblationCell>& cells) {
    std::string out = "modalities,bgam,avg_gain,avg_acc1,best_val\n";
    char buf[160];
    for (const auto& c : cells) {
        std::snprintf(buf, sizeof buf, "%s,%d,%.9g,%.9g,%.9g\n", c.modalities.c_str(), c.bgam ? 1 : 0,
                      c.avg_gain, c.avg_acc1, c.best_val);
        out += buf;
    }
    return out;
}

// ---------------------------------------------------------------------------
// robustness to transmit-array mismatch: regenerate the test split with a
// different N_t (same codebook size, same normalization) and evaluate the
// unmodified checkpoint

struct SweepRow {
    int n_tx = 0;
    Report report;
};

inline std::vector<SweepRow> robustness_sweep(const nn::ParamStore& ps,
                                              const model::ModelConfig& cfg,
                                              const dataset::GenConfig& base_gen,
                                              std::uint64_t gen_seed,
                                              const std::vector<int>& nt_values,
                                              const std::string& work_dir, int workers = 1) {
    std::vector<SweepRow> rows;
    for (int nt : nt_values) {
        dataset::GenConfig gen = base_gen;
        gen.array.n_tx = nt;
        const std::string dir = work_dir + "/nt_" + std::to_string(nt);
        auto manifest = dataset::gen_dataset(gen, dir, gen_seed, workers);
        auto trajs = dataset::load_split(dir, manifest, "test");
        auto bound = model::bind_data(trajs, cfg);
        EvalOptions opts;
        opts.workers = workers;
        SweepRow row;
        row.n_tx = nt;
        row.report = evaluate(ps, cfg, bound, opts);
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::string out = "n_tx,avg_gain,avg_acc1,avg_acc3,n_samples\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%d\n", r.n_tx, r.report.avg_gain,
                      r.report.avg_acc1, r.report.avg_acc3, r.report.n_samples);
        out += buf;
    }
    return out;
}

// ---------------------------------------------------------------------------
// attention dump: BEV pooling weights of the last history sensor frame of
// one sample, written as PGM (mean over heads, max-normalized) + CSV, next
// to the active BGAM mask

struct AttentionDump {
    std::vector<std::vector<double>> head_weights;
    geometry::BeamMask mask;
    int height = 0;
    int width = 0;
};

inline AttentionDump dump_attention(const nn::ParamStore& ps, const model::ModelConfig& cfg,
                                    const model::BoundData& data, int traj, int anchor,
                                    const std::string& out_prefix) {
    if (!cfg.use_lidar) throw std::runtime_error("dump_attention: the LiDAR modality is disabled");
    const auto& tr = (*data.trajs)[static_cast<std::size_t>(traj)];
    const auto s = model::make_sample(tr, traj, anchor, cfg);
    enc::AttnProbe probe;
    model::ForwardProbes probes;
    probes.lidar_pool = &probe;
    model::predict_sample(s, ps, cfg, data.grids[static_cast<std::size_t>(traj)],
                          data.origins[static_cast<std::size_t>(traj)].first,
                          data.origins[static_cast<std::size_t>(traj)].second, &probes);

    AttentionDump dump;
    dump.head_weights = probe.head_weights;
    dump.mask = probe.mask;
    dump.height = probe.mask.height;
    dump.width = probe.mask.width;

    const std::size_t cells = static_cast<std::size_t>(dump.height) * dump.width;
    std::vector<double> mean(cells, 0.0);
    for (const auto& head : dump.head_weights)
        for (std::size_t i = 0; i < cells; ++i) mean[i] += head[i] / dump.head_weights.size();
    double mx = 0.0;
    for (double v : mean) mx = std::max(mx, v);
    std::vector<unsigned char> bytes(cells, 0);
    if (mx > 0.0)
        for (std::size_t i = 0; i < cells; ++i)
            bytes[i] = static_cast<unsigned char>(std::lround(255.0 * mean[i] / mx));
    write_pgm(out_prefix + "_attn.pgm", dump.height, dump.width, bytes);
    geometry::write_mask_pgm(out_prefix + "_mask.pgm", dump.mask);

    std::string csv = "i,j";
    for (std::size_t h = 0; h < dump.head_weights.size(); ++h) csv += ",head" + std::to_string(h);
    csv += "\n";
    char buf[64];
    for (int i = 0; i < dump.height; ++i)
        for (int j = 0; j < dump.width; ++j) {
            csv += std::to_string(i) + "," + std::to_string(j);
            for (const auto& head : dump.head_weights) {
                std::snprintf(buf, sizeof buf, ",%.9g", head[static_cast<std::size_t>(i) * dump.width + j]);
                csv += buf;
            }
            csv += "\n";
        }
    write_text_file(out_prefix + "_attn.csv", csv);
    return dump;
}

}  // namespace mmwl::evalkit

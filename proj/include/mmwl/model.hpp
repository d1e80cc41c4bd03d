#pragma once

// End-to-end predictive model: per-sample feature assembly through the
// modality encoders and fusion stack, a small pre-norm causal transformer
// backbone, truncated-flatten output projection, index-scale MSE loss, and a
// deterministic Adam training loop with early stopping.

#include <atomic>
#include <thread>

#include "mmwl/autodiff.hpp"
#include "mmwl/dataset.hpp"
#include "mmwl/encoders.hpp"
#include "mmwl/fusion.hpp"
#include "mmwl/nn.hpp"

namespace mmwl::model {

using ad::Graph;
using ad::Node;

struct ModelConfig {
    // architecture
    int d_m = 16;
    int d_llm = 32;  // backbone width D
    int d_ff = 8;    // truncation width for the output projection
    int n_heads = 4;
    int n_layers = 2;
    int l_prom = 4;
    // window
    int p_hist = 40;
    int w_horizon = 10;
    // modalities
    bool use_lidar = true;
    bool use_camera = false;
    bool bgam = true;
    // encoder blocks
    int c_l = 8;
    enc::PillarConfig pillar;
    enc::ImageConfig image;
    // vocabulary
    int vocab_size = 128;
    int vocab_condensed = 12;
    std::uint64_t vocab_seed = 20240001;
    // training
    std::uint64_t seed = 1;
    double lr = 3e-3;
    int batch = 32;
    int epochs = 12;
    int patience = 10;
    double grad_clip = 10.0;  // global-norm clip, 0 disables
    int max_train_windows = 0;  // 0 keeps every window
    int window_stride = 1;
    int workers = 1;
    // bound from the dataset manifest
    int q_count = 16;
    int j_ratio = 10;

    void validate() const {
        if (d_ff > d_llm) throw std::invalid_argument("ModelConfig: d_ff must not exceed d_llm");
        if (d_m % n_heads != 0 || d_llm % n_heads != 0)
            throw std::invalid_argument("ModelConfig: widths must be divisible by the head count");
        if (p_hist % std::max(1, j_ratio) != 0)
            throw std::invalid_argument("ModelConfig: p_hist must be divisible by j_ratio");
        if (w_horizon < 1 || p_hist < 3) throw std::invalid_argument("ModelConfig: bad window");
        if (l_prom < 0) throw std::invalid_argument("ModelConfig: l_prom must be >= 0");
    }

    enc::EncoderConfig encoder_config() const {
        enc::EncoderConfig e;
        e.d_m = d_m;
        e.c_l = c_l;
        e.n_heads = n_heads;
        e.pillar = pillar;
        e.image = image;
        return e;
    }

    fusion::FusionConfig fusion_config() const {
        fusion::FusionConfig f;
        f.d_m = d_m;
        f.d_llm = d_llm;
        f.n_heads = n_heads;
        f.vocab_size = vocab_size;
        f.vocab_condensed = vocab_condensed;
        f.l_prom = l_prom;
        f.vocab_seed = vocab_seed;
        f.p_len = p_hist;
        return f;
    }
};

inline json model_config_to_json(const ModelConfig& c) {
    json j;
    j["format"] = "mmw-model/1";
    j["arch"] = {{"d_m", c.d_m},       {"d_llm", c.d_llm},       {"d_ff", c.d_ff},
                 {"n_heads", c.n_heads}, {"n_layers", c.n_layers}, {"l_prom", c.l_prom}};
    j["window"] = {{"p_hist", c.p_hist}, {"w_horizon", c.w_horizon}};
    std::vector<std::string> mods{"index"};
    if (c.use_lidar) mods.push_back("lidar");
    if (c.use_camera) mods.push_back("camera");
    j["modalities"] = mods;
    j["bgam"] = c.bgam;
    j["lidar"] = {{"c_l", c.c_l},
                  {"extent", std::vector<double>{c.pillar.x_min, c.pillar.x_max, c.pillar.y_min,
                                                 c.pillar.y_max}},
                  {"pillar_size_m", c.pillar.pillar_size_m},
                  {"max_pillars", c.pillar.max_pillars},
                  {"max_points", c.pillar.max_points_per_pillar},
                  {"coord_scale_m", c.pillar.coord_scale_m}};
    j["image"] = {{"patch_size", c.image.patch_size},
                  {"d_c", c.image.d_c},
                  {"n_heads", c.image.n_heads},
                  {"n_layers", c.image.n_layers}};
    j["vocab"] = {{"size", c.vocab_size}, {"condensed", c.vocab_condensed}, {"seed", c.vocab_seed}};
    // workers is a run-time execution knob, never persisted
    j["train"] = {{"seed", c.seed},
                  {"lr", c.lr},
                  {"batch", c.batch},
                  {"epochs", c.epochs},
                  {"patience", c.patience},
                  {"grad_clip", c.grad_clip},
                  {"max_train_windows", c.max_train_windows},
                  {"window_stride", c.window_stride}};
    return j;
}

inline ModelConfig model_config_from_json(const json& j) {
    reject_unknown_keys(
        j, {"format", "arch", "window", "modalities", "bgam", "lidar", "image", "vocab", "train"},
        "model config");
    ModelConfig c;
    if (j.contains("arch")) {
        const json& a = j.at("arch");
        reject_unknown_keys(a, {"d_m", "d_llm", "d_ff", "n_heads", "n_layers", "l_prom"},
                            "model config arch");
        c.d_m = get_or(a, "d_m", c.d_m);
        c.d_llm = get_or(a, "d_llm", c.d_llm);
        c.d_ff = get_or(a, "d_ff", c.d_ff);
        c.n_heads = get_or(a, "n_heads", c.n_heads);
        c.n_layers = get_or(a, "n_layers", c.n_layers);
        c.l_prom = get_or(a, "l_prom", c.l_prom);
    }
    if (j.contains("window")) {
        const json& w = j.at("window");
        reject_unknown_keys(w, {"p_hist", "w_horizon"}, "model config window");
        c.p_hist = get_or(w, "p_hist", c.p_hist);
        c.w_horizon = get_or(w, "w_horizon", c.w_horizon);
    }
    if (j.contains("modalities")) {
        c.use_lidar = false;
        c.use_camera = false;
        bool has_index = false;
        for (const auto& m : j.at("modalities")) {
            const std::string s = m.get<std::string>();
            if (s == "index") has_index = true;
            else if (s == "lidar") c.use_lidar = true;
            else if (s == "camera") c.use_camera = true;
            else throw std::runtime_error("model config: unknown modality " + s);
        }
        if (!has_index) throw std::runtime_error("model config: the index modality is required");
    }
    c.bgam = get_or(j, "bgam", c.bgam);
    if (j.contains("lidar")) {
        const json& l = j.at("lidar");
        reject_unknown_keys(l, {"c_l", "extent", "pillar_size_m", "max_pillars", "max_points",
                                "coord_scale_m"},
                            "model config lidar");
        c.c_l = get_or(l, "c_l", c.c_l);
        if (l.contains("extent")) {
            auto e = l.at("extent").get<std::vector<double>>();
            if (e.size() != 4) throw std::runtime_error("model config: extent needs 4 entries");
            c.pillar.x_min = e[0];
            c.pillar.x_max = e[1];
            c.pillar.y_min = e[2];
            c.pillar.y_max = e[3];
        }
        c.pillar.pillar_size_m = get_or(l, "pillar_size_m", c.pillar.pillar_size_m);
        c.pillar.max_pillars = get_or(l, "max_pillars", c.pillar.max_pillars);
        c.pillar.max_points_per_pillar = get_or(l, "max_points", c.pillar.max_points_per_pillar);
        c.pillar.coord_scale_m = get_or(l, "coord_scale_m", c.pillar.coord_scale_m);
    }
    if (j.contains("image")) {
        const json& im = j.at("image");
        reject_unknown_keys(im, {"patch_size", "d_c", "n_heads", "n_layers"}, "model config image");
        c.image.patch_size = get_or(im, "patch_size", c.image.patch_size);
        c.image.d_c = get_or(im, "d_c", c.image.d_c);
        c.image.n_heads = get_or(im, "n_heads", c.image.n_heads);
        c.image.n_layers = get_or(im, "n_layers", c.image.n_layers);
    }
    if (j.contains("vocab")) {
        const json& v = j.at("vocab");
        reject_unknown_keys(v, {"size", "condensed", "seed"}, "model config vocab");
        c.vocab_size = get_or(v, "size", c.vocab_size);
        c.vocab_condensed = get_or(v, "condensed", c.vocab_condensed);
        c.vocab_seed = get_or(v, "seed", c.vocab_seed);
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        reject_unknown_keys(t,
                            {"seed", "lr", "batch", "epochs", "patience", "grad_clip",
                             "max_train_windows", "window_stride"},
                            "model config train");
        c.seed = get_or(t, "seed", c.seed);
        c.lr = get_or(t, "lr", c.lr);
        c.batch = get_or(t, "batch", c.batch);
        c.epochs = get_or(t, "epochs", c.epochs);
        c.patience = get_or(t, "patience", c.patience);
        c.grad_clip = get_or(t, "grad_clip", c.grad_clip);
        c.max_train_windows = get_or(t, "max_train_windows", c.max_train_windows);
        c.window_stride = get_or(t, "window_stride", c.window_stride);
    }
    return c;
}

// ---------------------------------------------------------------------------
// parameters

inline void register_params(nn::ParamStore& ps, const ModelConfig& cfg) {
    cfg.validate();
    const std::uint64_t seed = cfg.seed;
    const auto ec = cfg.encoder_config();
    enc::register_index_params(ps, ec, seed);
    if (cfg.use_lidar) enc::register_lidar_params(ps, ec, seed);
    if (cfg.use_camera) enc::register_image_params(ps, ec, seed);
    fusion::register_fusion_params(ps, cfg.fusion_config(), seed);

    const int d = cfg.d_llm;
    if (cfg.n_layers > 0) {
        nn::fill_scaled_normal(ps.add("bb.pos", {cfg.l_prom + cfg.p_hist, d}), seed, 0.02);
        nn::fill_constant(ps.add("bb.lnf.g", {d}), 1.0);
        ps.add("bb.lnf.b", {d});
    }
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "bb.l" + std::to_string(l);
        nn::fill_constant(ps.add(p + ".ln1.g", {d}), 1.0);
        ps.add(p + ".ln1.b", {d});
        nn::fill_scaled_normal(ps.add(p + ".attn.wq", {d, d}), seed, 1.0 / std::sqrt(1.0 * d));
        nn::fill_scaled_normal(ps.add(p + ".attn.wk", {d, d}), seed, 1.0 / std::sqrt(1.0 * d));
        nn::fill_scaled_normal(ps.add(p + ".attn.wv", {d, d}), seed, 1.0 / std::sqrt(1.0 * d));
        nn::fill_scaled_normal(ps.add(p + ".attn.wo", {d, d}), seed, 1.0 / std::sqrt(1.0 * d));
        ps.add(p + ".attn.bo", {1, d});
        nn::fill_constant(ps.add(p + ".ln2.g", {d}), 1.0);
        ps.add(p + ".ln2.b", {d});
        nn::fill_scaled_normal(ps.add(p + ".ffn.w1", {d, 2 * d}), seed, 1.0 / std::sqrt(1.0 * d));
        ps.add(p + ".ffn.b1", {1, 2 * d});
        nn::fill_scaled_normal(ps.add(p + ".ffn.w2", {2 * d, d}), seed, 1.0 / std::sqrt(2.0 * d));
        ps.add(p + ".ffn.b2", {1, d});
    }
    nn::fill_scaled_normal(ps.add("out.w", {cfg.p_hist * cfg.d_ff, cfg.w_horizon}), seed,
                           1.0 / std::sqrt(1.0 * cfg.p_hist * cfg.d_ff));
    ps.add("out.b", {1, cfg.w_horizon});
}

// ---------------------------------------------------------------------------
// backbone

// pre-norm causal self-attention + feed-forward stack with learned positional
// embeddings and a final layer norm; with n_layers = 0 the input passes
// through unchanged
inline Node* backbone_forward(Graph& g, Node* z, const nn::ParamStore& ps, const ModelConfig& cfg) {
    const int rows = z->shape[0];
    Node* causal = nullptr;
    Node* x = z;
    if (cfg.n_layers > 0) {
        std::vector<double> bias(static_cast<std::size_t>(rows) * rows, 0.0);
        for (int i = 0; i < rows; ++i)
            for (int j = i + 1; j < rows; ++j) bias[static_cast<std::size_t>(i) * rows + j] = -1e30;
        causal = g.value({rows, rows}, bias);
        x = g.add(x, ps.use(g, "bb.pos"));
    }
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "bb.l" + std::to_string(l);
        Node* ln1 = g.layer_norm(x, ps.use(g, p + ".ln1.g"), ps.use(g, p + ".ln1.b"));
        nn::AttnWeights w{ps.use(g, p + ".attn.wq"), ps.use(g, p + ".attn.wk"),
                          ps.use(g, p + ".attn.wv")};
        Node* attn = nn::multi_head_cross_attention(g, ln1, ln1, w, cfg.n_heads, causal);
        attn = nn::linear(g, attn, ps.use(g, p + ".attn.wo"), ps.use(g, p + ".attn.bo"));
        x = g.add(x, attn);
        Node* ln2 = g.layer_norm(x, ps.use(g, p + ".ln2.g"), ps.use(g, p + ".ln2.b"));
        Node* h = g.gelu(nn::linear(g, ln2, ps.use(g, p + ".ffn.w1"), ps.use(g, p + ".ffn.b1")));
        h = nn::linear(g, h, ps.use(g, p + ".ffn.w2"), ps.use(g, p + ".ffn.b2"));
        x = g.add(x, h);
    }
    if (cfg.n_layers > 0) x = g.layer_norm(x, ps.use(g, "bb.lnf.g"), ps.use(g, "bb.lnf.b"));
    return x;
}

// keep the last P rows, truncate each to the first d_ff components, flatten
// and project to the W-step forecast
inline Node* project_output(Graph& g, Node* o, const nn::ParamStore& ps, const ModelConfig& cfg) {
    Node* hist = g.slice_rows(o, o->shape[0] - cfg.p_hist, o->shape[0]);
    Node* trunc = g.slice_cols(hist, 0, cfg.d_ff);
    Node* flat = g.reshape(trunc, {1, cfg.p_hist * cfg.d_ff});
    return nn::linear(g, flat, ps.use(g, "out.w"), ps.use(g, "out.b"));  // 1 x W
}

inline int denormalize(double y, int q_count) {
    const long r = std::lround(y * q_count);
    return static_cast<int>(std::clamp<long>(r, 0, q_count - 1));
}

struct Forecast {
    std::vector<double> y_hat;  // normalized scale
    std::vector<int> q_hat;
};

// ---------------------------------------------------------------------------
// per-sample inputs

struct SampleInput {
    std::vector<int> q_hist;                      // P beam indices
    std::vector<int> labels;                      // W future optimal beams
    std::vector<const dataset::FrameRecord*> sensor_frames;  // P/j frames, in order
    std::vector<int> guide_beams;                 // q* at each sensor frame's own step
    std::vector<std::uint64_t> frame_seeds;       // pillar subsampling streams
    int traj = 0;
    int anchor = 0;
};

inline SampleInput make_sample(const dataset::LoadedTrajectory& tr, int traj_index, int anchor,
                               const ModelConfig& cfg) {
    SampleInput s;
    s.traj = traj_index;
    s.anchor = anchor;
    const int P = cfg.p_hist, W = cfg.w_horizon, j = cfg.j_ratio;
    if (anchor - P + 1 < 0 || anchor + W >= static_cast<int>(tr.frames.size()))
        throw std::invalid_argument("make_sample: window out of trajectory bounds");
    if ((anchor + 1) % j != 0)
        throw std::invalid_argument("make_sample: anchor must close a sensor window");
    for (int t = anchor - P + 1; t <= anchor; ++t) s.q_hist.push_back(tr.frames[static_cast<std::size_t>(t)].q_star);
    for (int m = 1; m <= W; ++m) s.labels.push_back(tr.frames[static_cast<std::size_t>(anchor + m)].q_star);
    for (int t = anchor - P + 1; t <= anchor; ++t) {
        const auto& f = tr.frames[static_cast<std::size_t>(t)];
        if ((t + 1) % j != 0) continue;
        if (!f.lidar && (cfg.use_lidar))
            throw std::runtime_error("make_sample: missing LiDAR frame at sensor tick");
        s.sensor_frames.push_back(&f);
        s.guide_beams.push_back(f.q_star);
        s.frame_seeds.push_back(derive_seed(tr.meta.seed, static_cast<std::uint64_t>(t)));
    }
    return s;
}

// ---------------------------------------------------------------------------
// forward

struct ForwardProbes {
    enc::AttnProbe* lidar_pool = nullptr;  // filled for the last sensor frame
    // additive C x H x W perturbation of every frame's BEV feature map,
    // applied between the backbone and the masking stage (invariance tests)
    const std::vector<double>* bev_cell_delta = nullptr;
};

inline Node* forward_sample(Graph& g, const SampleInput& s, const nn::ParamStore& ps,
                            const ModelConfig& cfg, const geometry::AngleGrid& grid,
                            double grid_origin_x, double grid_origin_y,
                            const ForwardProbes* probes = nullptr) {
    const auto q_norm = enc::normalize_indices(s.q_hist, cfg.q_count);
    std::vector<Node*> modality_rows;
    modality_rows.push_back(enc::embed_indices(g, q_norm, ps));

    if (cfg.use_lidar) {
        std::vector<Node*> frame_rows;
        for (std::size_t i = 0; i < s.sensor_frames.size(); ++i) {
            const auto& f = *s.sensor_frames[i];
            if (!f.lidar) throw std::runtime_error("forward_sample: sensor frame lacks LiDAR");
            const auto pil =
                enc::pillarize(*f.lidar, cfg.pillar, grid_origin_x, grid_origin_y, s.frame_seeds[i]);
            Node* bev = enc::pillar_encode(g, pil, cfg.pillar, ps);
            if (probes && probes->bev_cell_delta)
                bev = g.add(bev, g.value(bev->shape, *probes->bev_cell_delta));
            enc::AttnProbe* probe = nullptr;
            if (probes && probes->lidar_pool && i + 1 == s.sensor_frames.size())
                probe = probes->lidar_pool;
            frame_rows.push_back(enc::encode_lidar_frame(g, bev, s.guide_beams[i], cfg.q_count, grid,
                                                         ps, cfg.n_heads, cfg.bgam, probe));
        }
        Node* sparse = g.concat_rows(frame_rows);
        modality_rows.push_back(fusion::temporal_align(g, sparse, cfg.j_ratio, cfg.p_hist));
    }
    if (cfg.use_camera) {
        std::vector<Node*> frame_rows;
        for (const auto* f : s.sensor_frames) {
            if (!f->image) throw std::runtime_error("forward_sample: sensor frame lacks an image");
            frame_rows.push_back(enc::encode_image(g, *f->image, cfg.image, ps, cfg.n_heads));
        }
        Node* sparse = g.concat_rows(frame_rows);
        modality_rows.push_back(fusion::temporal_align(g, sparse, cfg.j_ratio, cfg.p_hist));
    }

    Node* stacked = fusion::stack_modalities(g, modality_rows);
    Node* fused = fusion::cross_modality_attend(g, stacked, ps, cfg.n_heads);
    Node* z = fusion::reprogram(g, fused, ps, cfg.n_heads);
    Node* prefix = cfg.l_prom > 0
                       ? fusion::build_prompt_prefix(g, q_norm, ps, cfg.l_prom, cfg.d_llm)
                       : nullptr;
    Node* z_tilde = fusion::assemble_llm_input(g, prefix, z);
    Node* o = backbone_forward(g, z_tilde, ps, cfg);
    return project_output(g, o, ps, cfg);
}

// MSE on the denormalized index scale: mean over the horizon of
// (y_hat * Q - q_star)^2
inline Node* mse_loss(Graph& g, Node* y_hat, const std::vector<int>& labels, int q_count) {
    if (static_cast<int>(labels.size()) != y_hat->shape[1])
        throw std::invalid_argument("mse_loss: horizon mismatch");
    std::vector<double> lab(labels.begin(), labels.end());
    Node* scaled = g.scale(y_hat, static_cast<double>(q_count));
    Node* diff = g.sub(scaled, g.value({1, static_cast<int>(lab.size())}, lab));
    return g.mean_all(g.mul(diff, diff));
}

inline Forecast predict_sample(const SampleInput& s, const nn::ParamStore& ps, const ModelConfig& cfg,
                               const geometry::AngleGrid& grid, double gx, double gy,
                               const ForwardProbes* probes = nullptr) {
    Graph g;
    g.set_grad_enabled(false);
    Node* y = forward_sample(g, s, ps, cfg, grid, gx, gy, probes);
    Forecast f;
    f.y_hat = y->val;
    for (double v : f.y_hat) f.q_hat.push_back(denormalize(v, cfg.q_count));
    return f;
}

// ---------------------------------------------------------------------------
// training

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
};

struct TrainResult {
    std::vector<EpochLog> log;
    int best_epoch = 0;
    double best_val = 0.0;
};

struct BoundData {
    const std::vector<dataset::LoadedTrajectory>* trajs = nullptr;
    std::vector<geometry::AngleGrid> grids;       // one per trajectory
    std::vector<std::pair<double, double>> origins;  // grid origin per trajectory
};

inline BoundData bind_data(const std::vector<dataset::LoadedTrajectory>& trajs,
                           const ModelConfig& cfg) {
    BoundData b;
    b.trajs = &trajs;
    for (const auto& t : trajs) {
        const auto spec = cfg.pillar.grid_spec(t.meta.rsu_x, t.meta.rsu_y, t.meta.rsu_heading);
        b.grids.push_back(geometry::bev_angle_grid(spec));
        b.origins.emplace_back(spec.origin_x_m, spec.origin_y_m);
    }
    return b;
}

namespace detail {

// forward+backward for a batch, worker-parallel; gradients are reduced in
// sample order so the result is independent of the thread count
inline double batch_pass(const std::vector<SampleInput>& batch, const nn::ParamStore& ps,
                         const ModelConfig& cfg, const BoundData& data, int workers,
                         std::vector<std::vector<double>>* grads_out) {
    const std::size_t n = batch.size();
    std::vector<std::vector<std::pair<int, std::vector<double>>>> per_sample(n);
    std::vector<double> losses(n, 0.0);
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::string err;
    std::mutex err_mu;
    auto work = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n || failed.load()) return;
            try {
                const auto& s = batch[i];
                Graph g;
                Node* y = forward_sample(g, s, ps, cfg, data.grids[static_cast<std::size_t>(s.traj)],
                                         data.origins[static_cast<std::size_t>(s.traj)].first,
                                         data.origins[static_cast<std::size_t>(s.traj)].second);
                Node* loss = mse_loss(g, y, s.labels, cfg.q_count);
                losses[i] = loss->val[0];
                if (grads_out) {
                    g.backward(loss);
                    per_sample[i] = g.collect_param_grads();
                }
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!failed.exchange(true)) err = e.what();
            }
        }
    };
    const int nw = std::max(1, workers);
    std::vector<std::thread> pool;
    for (int i = 0; i < nw - 1; ++i) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
    if (failed.load()) throw std::runtime_error("batch_pass: " + err);

    if (grads_out) {
        grads_out->assign(static_cast<std::size_t>(ps.size()), {});
        for (int p = 0; p < ps.size(); ++p)
            (*grads_out)[static_cast<std::size_t>(p)].assign(ps.at(p).value.size(), 0.0);
        const double inv = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i)
            for (const auto& [pid, gvec] : per_sample[i]) {
                auto& acc = (*grads_out)[static_cast<std::size_t>(pid)];
                for (std::size_t k = 0; k < gvec.size(); ++k) acc[k] += gvec[k] * inv;
            }
    }
    return pairwise_sum(losses.data(), n) / static_cast<double>(n);
}

}  // namespace detail

// deterministic training: fixed seeds drive initialization, window
// subsampling and batch order; early stopping tracks validation MSE and the
// best parameters are restored at the end
inline TrainResult train(nn::ParamStore& ps, const ModelConfig& cfg, const BoundData& train_data,
                         const BoundData& val_data) {
    cfg.validate();
    auto train_anchors = dataset::window_anchors(*train_data.trajs, cfg.p_hist, cfg.w_horizon,
                                                 cfg.j_ratio, cfg.window_stride);
    auto val_anchors =
        dataset::window_anchors(*val_data.trajs, cfg.p_hist, cfg.w_horizon, cfg.j_ratio, 1);
    if (train_anchors.empty()) throw std::runtime_error("train: empty training split");
    if (val_anchors.empty()) throw std::runtime_error("train: empty validation split");

    std::mt19937_64 rng(derive_seed(cfg.seed, fnv1a("train-loop")));
    if (cfg.max_train_windows > 0 &&
        static_cast<int>(train_anchors.size()) > cfg.max_train_windows) {
        std::shuffle(train_anchors.begin(), train_anchors.end(), rng);
        train_anchors.resize(static_cast<std::size_t>(cfg.max_train_windows));
    }

    std::vector<SampleInput> train_samples, val_samples;
    train_samples.reserve(train_anchors.size());
    for (const auto& a : train_anchors)
        train_samples.push_back(make_sample((*train_data.trajs)[static_cast<std::size_t>(a.traj)],
                                            a.traj, a.anchor, cfg));
    for (const auto& a : val_anchors)
        val_samples.push_back(make_sample((*val_data.trajs)[static_cast<std::size_t>(a.traj)], a.traj,
                                          a.anchor, cfg));

    nn::AdamState adam;
    TrainResult res;
    res.best_val = 1e300;
    std::vector<nn::Parameter> best;

    std::vector<std::size_t> order(train_samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // step decay: half the rate at 60% and again at 85% of the schedule
        double lr = cfg.lr;
        if (epoch >= (cfg.epochs * 17) / 20) lr = cfg.lr * 0.25;
        else if (epoch >= (cfg.epochs * 3) / 5) lr = cfg.lr * 0.5;
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<double> batch_losses;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
            std::vector<SampleInput> batch;
            for (std::size_t i = start;
                 i < std::min(order.size(), start + static_cast<std::size_t>(cfg.batch)); ++i)
                batch.push_back(train_samples[order[i]]);
            std::vector<std::vector<double>> grads;
            batch_losses.push_back(
                detail::batch_pass(batch, ps, cfg, train_data, cfg.workers, &grads));
            if (cfg.grad_clip > 0.0) {
                double norm2 = 0.0;
                for (const auto& g : grads)
                    for (double v : g) norm2 += v * v;
                const double norm = std::sqrt(norm2);
                if (norm > cfg.grad_clip) {
                    const double s = cfg.grad_clip / norm;
                    for (auto& g : grads)
                        for (double& v : g) v *= s;
                }
            }
            nn::adam_step(ps, grads, adam, lr);
        }
        const double train_loss = pairwise_sum(batch_losses.data(), batch_losses.size()) /
                                  static_cast<double>(batch_losses.size());
        const double val_loss = detail::batch_pass(val_samples, ps, cfg, val_data, cfg.workers, nullptr);
        res.log.push_back({epoch, train_loss, val_loss});
        log_at(LogLevel::info, "epoch %d train %.5f val %.5f", epoch, train_loss, val_loss);

        if (val_loss < res.best_val) {
            res.best_val = val_loss;
            res.best_epoch = epoch;
            best.clear();
            for (int p = 0; p < ps.size(); ++p) best.push_back(ps.at(p));
        } else if (epoch - res.best_epoch >= cfg.patience) {
            break;
        }
    }
    for (auto& p : best) ps.get(p.name).value = p.value;
    return res;
}

inline std::string training_log_csv(const TrainResult& r) {
    std::string out = "epoch,train_loss,val_loss\n";
    char buf[96];
    for (const auto& e : r.log) {
        std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g\n", e.epoch, e.train_loss, e.val_loss);
        out += buf;
    }
    return out;
}

// ---------------------------------------------------------------------------
// checkpoint glue

inline void save_model(const std::string& path, const nn::ParamStore& ps, const ModelConfig& cfg) {
    json meta = model_config_to_json(cfg);
    // dataset-bound values live outside the config file schema
    meta["bound"] = {{"q_count", cfg.q_count}, {"j_ratio", cfg.j_ratio}};
    nn::save_checkpoint(path, ps, meta);
}

inline ModelConfig load_model(const std::string& path, nn::ParamStore& ps) {
    json meta = nn::load_checkpoint(path, ps);
    json cfg_json = meta;
    cfg_json.erase("bound");
    ModelConfig cfg = model_config_from_json(cfg_json);
    cfg.q_count = meta.at("bound").at("q_count").get<int>();
    cfg.j_ratio = meta.at("bound").at("j_ratio").get<int>();
    return cfg;
}

}  // namespace mmwl::model

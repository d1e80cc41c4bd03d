#pragma once

// Modality encoders: beam-index conv embedding, pillar-lite BEV LiDAR
// encoder with beam-guided attention masking, and a patch-based image
// encoder. Each produces one d_m-wide row per frame. All stages are
// trainable; the BEV pooling attention restricts its softmax support to
// in-mask cells carrying nonzero features.

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "mmwl/autodiff.hpp"
#include "mmwl/geometry.hpp"
#include "mmwl/nn.hpp"
#include "mmwl/pointcloud.hpp"
#include "mmwl/scenegen.hpp"

namespace mmwl::enc {

using ad::Graph;
using ad::Node;

// ---------------------------------------------------------------------------
// beam-index branch

inline std::vector<double> normalize_indices(const std::vector<int>& q_hist, int q_count) {
    std::vector<double> out(q_hist.size());
    for (std::size_t i = 0; i < q_hist.size(); ++i) {
        if (q_hist[i] < 0 || q_hist[i] >= q_count)
            throw std::invalid_argument("normalize_indices: beam index out of range");
        out[i] = static_cast<double>(q_hist[i]) / q_count;
    }
    return out;
}

// conv1d embedding of the normalized index sequence, P x 1 -> P x d_m
inline Node* embed_indices(Graph& g, const std::vector<double>& normalized,
                           const nn::ParamStore& ps) {
    if (normalized.size() < 3)
        throw std::invalid_argument("embed_indices: history must span at least 3 steps");
    Node* x = g.value({static_cast<int>(normalized.size()), 1}, normalized);
    return g.conv1d(x, ps.use(g, "enc.idx.conv.w"), ps.use(g, "enc.idx.conv.b"));
}

// ---------------------------------------------------------------------------
// pillar-lite LiDAR branch

struct PillarConfig {
    double x_min = 0.0, x_max = 60.0;
    double y_min = -30.0, y_max = 30.0;
    double pillar_size_m = 5.0;
    int max_pillars = 96;
    int max_points_per_pillar = 12;
    double coord_scale_m = 80.0;  // absolute coordinates are divided by this
    static constexpr int feat_dim = 9;

    int width_cells() const { return static_cast<int>(std::llround((x_max - x_min) / pillar_size_m)); }
    int height_cells() const { return static_cast<int>(std::llround((y_max - y_min) / pillar_size_m)); }

    void validate() const {
        if (max_pillars < 1 || max_points_per_pillar < 1)
            throw std::invalid_argument("PillarConfig: caps must be >= 1");
        if (pillar_size_m <= 0.0) throw std::invalid_argument("PillarConfig: pillar size must be > 0");
        if (width_cells() % 2 != 0 || height_cells() % 2 != 0)
            throw std::invalid_argument("PillarConfig: grid dimensions must be even");
    }

    geometry::BevGridSpec grid_spec(double rsu_x, double rsu_y, double rsu_heading) const {
        geometry::BevGridSpec s;
        s.height_cells = height_cells();
        s.width_cells = width_cells();
        s.cell_size_m = pillar_size_m;
        s.origin_x_m = rsu_x + x_min;
        s.origin_y_m = rsu_y + y_min;
        s.rsu_x_m = rsu_x;
        s.rsu_y_m = rsu_y;
        s.rsu_heading_rad = rsu_heading;
        return s;
    }
};

struct Pillarized {
    std::vector<double> tensor;     // n_pillars * max_points x 9
    std::vector<double> occupancy;  // n_pillars * max_points x 1
    std::vector<std::pair<int, int>> coords;
    int n_pillars = 0;
    int max_points = 0;
};

// Bins points into vertical pillars (grid anchored at the RSU), augments each
// point to 9 features: x, y, z, intensity, offsets from the pillar's point
// centroid, and planar offsets from the pillar center. Absolute coordinates
// are scaled by 1/coord_scale_m and offsets by 1/pillar_size_m so every
// feature stays O(1). Overflow points are subsampled with a
// frame-deterministic seed; overflowing pillars keep the densest cells.
inline Pillarized pillarize(const PointCloud& cloud, const PillarConfig& cfg, double grid_origin_x,
                            double grid_origin_y, std::uint64_t frame_seed) {
    cfg.validate();
    const int W = cfg.width_cells(), H = cfg.height_cells();
    std::map<int, std::vector<std::size_t>> cells;
    for (std::size_t p = 0; p < cloud.size(); ++p) {
        const double lx = cloud.x(p) - grid_origin_x;
        const double ly = cloud.y(p) - grid_origin_y;
        if (lx < 0.0 || ly < 0.0) continue;
        const int j = static_cast<int>(lx / cfg.pillar_size_m);
        const int i = static_cast<int>(ly / cfg.pillar_size_m);
        if (j >= W || i >= H) continue;
        cells[i * W + j].push_back(p);
    }

    std::vector<int> chosen;
    chosen.reserve(cells.size());
    for (const auto& [idx, pts] : cells) chosen.push_back(idx);
    if (static_cast<int>(chosen.size()) > cfg.max_pillars) {
        std::stable_sort(chosen.begin(), chosen.end(), [&](int a, int b) {
            const auto sa = cells[a].size(), sb = cells[b].size();
            if (sa != sb) return sa > sb;
            return a < b;
        });
        chosen.resize(static_cast<std::size_t>(cfg.max_pillars));
        std::sort(chosen.begin(), chosen.end());
    }

    Pillarized out;
    out.n_pillars = static_cast<int>(chosen.size());
    out.max_points = cfg.max_points_per_pillar;
    out.tensor.assign(static_cast<std::size_t>(out.n_pillars) * out.max_points * PillarConfig::feat_dim, 0.0);
    out.occupancy.assign(static_cast<std::size_t>(out.n_pillars) * out.max_points, 0.0);
    out.coords.reserve(chosen.size());

    for (std::size_t pi = 0; pi < chosen.size(); ++pi) {
        const int cell = chosen[pi];
        const int ci = cell / W, cj = cell % W;
        out.coords.emplace_back(ci, cj);
        auto pts = cells[cell];
        if (static_cast<int>(pts.size()) > cfg.max_points_per_pillar) {
            std::mt19937_64 rng(derive_seed(frame_seed, static_cast<std::uint64_t>(cell)));
            std::shuffle(pts.begin(), pts.end(), rng);
            pts.resize(static_cast<std::size_t>(cfg.max_points_per_pillar));
        }
        double mx = 0, my = 0, mz = 0;
        for (auto p : pts) {
            mx += cloud.x(p);
            my += cloud.y(p);
            mz += cloud.z(p);
        }
        const double inv = 1.0 / static_cast<double>(pts.size());
        mx *= inv;
        my *= inv;
        mz *= inv;
        const double pcx = grid_origin_x + (cj + 0.5) * cfg.pillar_size_m;
        const double pcy = grid_origin_y + (ci + 0.5) * cfg.pillar_size_m;
        const double cs = 1.0 / cfg.coord_scale_m;
        const double os = 1.0 / cfg.pillar_size_m;
        for (std::size_t r = 0; r < pts.size(); ++r) {
            const std::size_t p = pts[r];
            double* f = out.tensor.data() + ((pi * out.max_points) + r) * PillarConfig::feat_dim;
            f[0] = cloud.x(p) * cs;
            f[1] = cloud.y(p) * cs;
            f[2] = cloud.z(p) * cs;
            f[3] = cloud.intensity(p);
            f[4] = (cloud.x(p) - mx) * os;
            f[5] = (cloud.y(p) - my) * os;
            f[6] = (cloud.z(p) - mz) * os;
            f[7] = (cloud.x(p) - pcx) * os;
            f[8] = (cloud.y(p) - pcy) * os;
            out.occupancy[pi * out.max_points + r] = 1.0;
        }
    }
    return out;
}

// per-point MLP, masked max-pool over each pillar, scatter to the BEV grid
inline Node* pillar_scatter(Graph& g, const Pillarized& pil, const PillarConfig& cfg,
                            const nn::ParamStore& ps) {
    const int H = cfg.height_cells(), W = cfg.width_cells();
    const int cl = static_cast<int>(ps.get("enc.pil.mlp.w").shape[1]);
    if (pil.n_pillars == 0) return g.constant({cl, H, W}, 0.0);
    Node* x = g.value({pil.n_pillars * pil.max_points, PillarConfig::feat_dim}, pil.tensor);
    Node* h = g.relu(nn::linear(g, x, ps.use(g, "enc.pil.mlp.w"), ps.use(g, "enc.pil.mlp.b")));
    Node* occ = g.value({pil.n_pillars * pil.max_points, 1}, pil.occupancy);
    h = g.mul(h, occ);  // padded slots contribute nothing to the max
    Node* pooled = g.rowgroup_max(h, pil.max_points);
    return g.scatter_rows_to_chw(pooled, pil.coords, H, W);
}

// two-scale conv backbone: stride-2 down, nearest-neighbour up, channel concat
inline Node* pillar_backbone(Graph& g, Node* scattered, const nn::ParamStore& ps) {
    const int cl = scattered->shape[0], H = scattered->shape[1], W = scattered->shape[2];
    Node* a = g.relu(g.conv2d(scattered, ps.use(g, "enc.pil.bb.c1.w"), 1));
    Node* b = g.relu(g.conv2d(a, ps.use(g, "enc.pil.bb.c2.w"), 2));
    Node* b2 = g.relu(g.conv2d(b, ps.use(g, "enc.pil.bb.c3.w"), 1));
    Node* up = g.upsample2x(b2);
    Node* cat2d = g.concat_rows({g.reshape(a, {cl, H * W}), g.reshape(up, {cl, H * W})});
    Node* cat = g.reshape(cat2d, {2 * cl, H, W});
    return g.conv2d(cat, ps.use(g, "enc.pil.bb.c4.w"), 1);  // linear head keeps zeros exact
}

inline Node* pillar_encode(Graph& g, const Pillarized& pil, const PillarConfig& cfg,
                           const nn::ParamStore& ps) {
    return pillar_backbone(g, pillar_scatter(g, pil, cfg, ps), ps);
}

// optional inspection of the pooling attention
struct AttnProbe {
    std::vector<std::vector<double>> head_weights;  // per head, one weight per cell
    geometry::BeamMask mask;
};

// BGAM then cross-attention pooling: mask the BEV map spatially, flatten to
// cells x channels, and pool with a learnable query. The softmax support is
// limited to in-mask cells with nonzero features; with BGAM off the mask
// stage is bypassed (ablation).
inline Node* encode_lidar_frame(Graph& g, Node* bev, int guide_q, int q_count,
                                const geometry::AngleGrid& grid, const nn::ParamStore& ps,
                                int n_heads, bool bgam_on, AttnProbe* probe = nullptr) {
    const int H = bev->shape[1], W = bev->shape[2];
    if (grid.height != H || grid.width != W)
        throw std::invalid_argument("encode_lidar_frame: angle grid does not match the BEV map");
    Node* cells = g.chw_to_nc(bev);  // (H*W) x C
    geometry::BeamMask mask;
    if (bgam_on) {
        mask = geometry::beam_mask(guide_q, q_count, grid);
        std::vector<double> bits(mask.bits.size());
        for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = mask.bits[i] ? 1.0 : 0.0;
        cells = g.mul(cells, g.value({H * W, 1}, bits));
    } else {
        mask.height = H;
        mask.width = W;
        mask.bits.assign(static_cast<std::size_t>(H) * W, 1);
    }

    // softmax support: cells that can actually carry signal
    const int C = cells->shape[1];
    std::vector<double> bias(static_cast<std::size_t>(H) * W, 0.0);
    bool any = false;
    for (int r = 0; r < H * W; ++r) {
        bool nonzero = false;
        if (mask.bits[static_cast<std::size_t>(r)]) {
            for (int c = 0; c < C; ++c)
                if (cells->val[static_cast<std::size_t>(r) * C + c] != 0.0) {
                    nonzero = true;
                    break;
                }
        }
        if (nonzero)
            any = true;
        else
            bias[static_cast<std::size_t>(r)] = -1e30;
    }
    Node* score_bias = any ? g.value({1, H * W}, bias) : nullptr;

    nn::AttnWeights w{ps.use(g, "enc.lid.wq"), ps.use(g, "enc.lid.wk"), ps.use(g, "enc.lid.wv")};
    std::vector<std::vector<double>> attn;
    Node* u = nn::multi_head_cross_attention(g, ps.use(g, "enc.lid.query"), cells, w, n_heads,
                                             score_bias, probe ? &attn : nullptr);
    if (probe) {
        probe->head_weights = std::move(attn);
        probe->mask = std::move(mask);
    }
    return u;  // 1 x d_m
}

// ---------------------------------------------------------------------------
// image branch

struct ImageConfig {
    int patch_size = 8;  // Z
    int d_c = 16;
    int n_heads = 4;
    int n_layers = 2;
};

// flatten the 2-channel raster into per-patch rows of width 2*Z*Z; the class
// channel is scaled to [0, 1]
inline std::vector<double> patchify(const scenegen::ImageRaster& img, int z) {
    if (img.height % z != 0 || img.width % z != 0)
        throw std::invalid_argument("patchify: raster dimensions must be divisible by the patch size");
    const int gh = img.height / z, gw = img.width / z;
    const int pdim = 2 * z * z;
    std::vector<double> out(static_cast<std::size_t>(gh) * gw * pdim);
    for (int pi = 0; pi < gh; ++pi)
        for (int pj = 0; pj < gw; ++pj) {
            double* row = out.data() + (static_cast<std::size_t>(pi) * gw + pj) * pdim;
            int k = 0;
            for (int c = 0; c < 2; ++c)
                for (int di = 0; di < z; ++di)
                    for (int dj = 0; dj < z; ++dj) {
                        const int i = pi * z + di, j = pj * z + dj;
                        double v = img.chw[(static_cast<std::size_t>(c) * img.height + i) * img.width + j];
                        if (c == 1) v /= 3.0;
                        row[k++] = v;
                    }
        }
    return out;
}

namespace detail {
inline Node* encoder_block(Graph& g, Node* x, const nn::ParamStore& ps, const std::string& prefix,
                           int heads) {
    Node* ln1 = g.layer_norm(x, ps.use(g, prefix + ".ln1.g"), ps.use(g, prefix + ".ln1.b"));
    nn::AttnWeights w{ps.use(g, prefix + ".attn.wq"), ps.use(g, prefix + ".attn.wk"),
                      ps.use(g, prefix + ".attn.wv")};
    Node* attn = nn::multi_head_cross_attention(g, ln1, ln1, w, heads);
    attn = nn::linear(g, attn, ps.use(g, prefix + ".attn.wo"), ps.use(g, prefix + ".attn.bo"));
    x = g.add(x, attn);
    Node* ln2 = g.layer_norm(x, ps.use(g, prefix + ".ln2.g"), ps.use(g, prefix + ".ln2.b"));
    Node* h = g.gelu(nn::linear(g, ln2, ps.use(g, prefix + ".ffn.w1"), ps.use(g, prefix + ".ffn.b1")));
    h = nn::linear(g, h, ps.use(g, prefix + ".ffn.w2"), ps.use(g, prefix + ".ffn.b2"));
    return g.add(x, h);
}
}  // namespace detail

// patch projection + class token + positional embeddings, a small
// self-attention encoder, then cross-attention pooling of the patch tokens
// (the class-token row is produced and discarded)
inline Node* encode_image(Graph& g, const scenegen::ImageRaster& img, const ImageConfig& cfg,
                          const nn::ParamStore& ps, int pool_heads) {
    const auto patches = patchify(img, cfg.patch_size);
    const int pdim = 2 * cfg.patch_size * cfg.patch_size;
    const int n_p = static_cast<int>(patches.size()) / pdim;
    Node* x = g.value({n_p, pdim}, patches);
    Node* tok = g.matmul(x, ps.use(g, "enc.cam.patch.w"));
    Node* seq = g.concat_rows({ps.use(g, "enc.cam.cls"), tok});
    seq = g.add(seq, ps.use(g, "enc.cam.pos"));
    for (int l = 0; l < cfg.n_layers; ++l)
        seq = detail::encoder_block(g, seq, ps, "enc.cam.blk" + std::to_string(l), cfg.n_heads);
    Node* patches_out = g.slice_rows(seq, 1, n_p + 1);
    nn::AttnWeights w{ps.use(g, "enc.cam.pool.wq"), ps.use(g, "enc.cam.pool.wk"),
                      ps.use(g, "enc.cam.pool.wv")};
    return nn::multi_head_cross_attention(g, ps.use(g, "enc.cam.query"), patches_out, w, pool_heads);
}

// ---------------------------------------------------------------------------
// parameter registration

struct EncoderConfig {
    int d_m = 16;
    int c_l = 8;
    int n_heads = 4;
    PillarConfig pillar;
    ImageConfig image;
    int cam_height = 64;
    int cam_width = 64;
};

inline void register_index_params(nn::ParamStore& ps, const EncoderConfig& cfg, std::uint64_t seed) {
    nn::fill_scaled_normal(ps.add("enc.idx.conv.w", {cfg.d_m, 1, 3}), seed, 1.0 / std::sqrt(3.0));
    ps.add("enc.idx.conv.b", {cfg.d_m});
}

inline void register_lidar_params(nn::ParamStore& ps, const EncoderConfig& cfg, std::uint64_t seed) {
    const int cl = cfg.c_l;
    nn::fill_scaled_normal(ps.add("enc.pil.mlp.w", {PillarConfig::feat_dim, cl}), seed,
                           1.0 / std::sqrt(9.0));
    ps.add("enc.pil.mlp.b", {1, cl});
    nn::fill_scaled_normal(ps.add("enc.pil.bb.c1.w", {cl, cl, 3, 3}), seed, 1.0 / std::sqrt(9.0 * cl));
    nn::fill_scaled_normal(ps.add("enc.pil.bb.c2.w", {cl, cl, 3, 3}), seed, 1.0 / std::sqrt(9.0 * cl));
    nn::fill_scaled_normal(ps.add("enc.pil.bb.c3.w", {cl, cl, 3, 3}), seed, 1.0 / std::sqrt(9.0 * cl));
    nn::fill_scaled_normal(ps.add("enc.pil.bb.c4.w", {cl, 2 * cl, 3, 3}), seed,
                           1.0 / std::sqrt(9.0 * 2 * cl));
    nn::fill_scaled_normal(ps.add("enc.lid.query", {1, cl}), seed, 1.0);
    nn::fill_scaled_normal(ps.add("enc.lid.wq", {cl, cfg.d_m}), seed, 1.0 / std::sqrt(1.0 * cl));
    nn::fill_scaled_normal(ps.add("enc.lid.wk", {cl, cfg.d_m}), seed, 1.0 / std::sqrt(1.0 * cl));
    nn::fill_scaled_normal(ps.add("enc.lid.wv", {cl, cfg.d_m}), seed, 1.0 / std::sqrt(1.0 * cl));
}

inline void register_image_params(nn::ParamStore& ps, const EncoderConfig& cfg, std::uint64_t seed) {
    const int z = cfg.image.patch_size, dc = cfg.image.d_c;
    const int pdim = 2 * z * z;
    const int n_p = (cfg.cam_height / z) * (cfg.cam_width / z);
    nn::fill_scaled_normal(ps.add("enc.cam.patch.w", {pdim, dc}), seed, 1.0 / std::sqrt(1.0 * pdim));
    nn::fill_scaled_normal(ps.add("enc.cam.cls", {1, dc}), seed, 0.02);
    nn::fill_scaled_normal(ps.add("enc.cam.pos", {n_p + 1, dc}), seed, 0.02);
    for (int l = 0; l < cfg.image.n_layers; ++l) {
        const std::string p = "enc.cam.blk" + std::to_string(l);
        nn::fill_constant(ps.add(p + ".ln1.g", {dc}), 1.0);
        ps.add(p + ".ln1.b", {dc});
        nn::fill_scaled_normal(ps.add(p + ".attn.wq", {dc, dc}), seed, 1.0 / std::sqrt(1.0 * dc));
        nn::fill_scaled_normal(ps.add(p + ".attn.wk", {dc, dc}), seed, 1.0 / std::sqrt(1.0 * dc));
        nn::fill_scaled_normal(ps.add(p + ".attn.wv", {dc, dc}), seed, 1.0 / std::sqrt(1.0 * dc));
        nn::fill_scaled_normal(ps.add(p + ".attn.wo", {dc, dc}), seed, 1.0 / std::sqrt(1.0 * dc));
        ps.add(p + ".attn.bo", {1, dc});
        nn::fill_constant(ps.add(p + ".ln2.g", {dc}), 1.0);
        ps.add(p + ".ln2.b", {dc});
        nn::fill_scaled_normal(ps.add(p + ".ffn.w1", {dc, 2 * dc}), seed, 1.0 / std::sqrt(1.0 * dc));
        ps.add(p + ".ffn.b1", {1, 2 * dc});
        nn::fill_scaled_normal(ps.add(p + ".ffn.w2", {2 * dc, dc}), seed, 1.0 / std::sqrt(2.0 * dc));
        ps.add(p + ".ffn.b2", {1, dc});
    }
    nn::fill_scaled_normal(ps.add("enc.cam.query", {1, dc}), seed, 1.0);
    nn::fill_scaled_normal(ps.add("enc.cam.pool.wq", {dc, cfg.d_m}), seed, 1.0 / std::sqrt(1.0 * dc));
    nn::fill_scaled_normal(ps.add("enc.cam.pool.wk", {dc, cfg.d_m}), seed, 1.0 / std::sqrt(1.0 * dc));
    nn::fill_scaled_normal(ps.add("enc.cam.pool.wv", {dc, cfg.d_m}), seed, 1.0 / std::sqrt(1.0 * dc));
}

}  // namespace mmwl::enc

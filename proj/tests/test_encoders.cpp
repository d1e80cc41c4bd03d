#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "mmwl/encoders.hpp"

using namespace mmwl;
using ad::Graph;
using ad::Node;

namespace {

enc::EncoderConfig tiny_config() {
    enc::EncoderConfig cfg;
    cfg.d_m = 8;
    cfg.c_l = 4;
    cfg.n_heads = 2;
    cfg.pillar.x_min = 0.0;
    cfg.pillar.x_max = 20.0;
    cfg.pillar.y_min = -10.0;
    cfg.pillar.y_max = 10.0;
    cfg.pillar.pillar_size_m = 5.0;  // 4 x 4 grid
    cfg.pillar.max_pillars = 8;
    cfg.pillar.max_points_per_pillar = 4;
    cfg.image.patch_size = 4;
    cfg.image.d_c = 8;
    cfg.image.n_heads = 2;
    cfg.image.n_layers = 2;
    cfg.cam_height = 16;
    cfg.cam_width = 16;
    return cfg;
}

nn::ParamStore full_store(const enc::EncoderConfig& cfg, std::uint64_t seed = 5) {
    nn::ParamStore ps;
    enc::register_index_params(ps, cfg, seed);
    enc::register_lidar_params(ps, cfg, seed);
    enc::register_image_params(ps, cfg, seed);
    return ps;
}

geometry::AngleGrid grid_for(const enc::PillarConfig& p) {
    return geometry::bev_angle_grid(p.grid_spec(0.0, 0.0, 0.0));
}

}  // namespace

TEST_CASE("normalize_indices") {
    CHECK(enc::normalize_indices({32}, 64) == std::vector<double>{0.5});
    CHECK(enc::normalize_indices({0}, 16) == std::vector<double>{0.0});
    CHECK(enc::normalize_indices({63}, 64) == std::vector<double>{0.984375});
    CHECK_THROWS_AS(enc::normalize_indices({64}, 64), std::invalid_argument);
    CHECK_THROWS_AS(enc::normalize_indices({-1}, 64), std::invalid_argument);
}

TEST_CASE("embed_indices") {
    auto cfg = tiny_config();
    auto ps = full_store(cfg);

    SECTION("shape contract") {
        Graph g;
        std::vector<double> x(40, 0.25);
        Node* u = enc::embed_indices(g, x, ps);
        CHECK(u->shape == ad::Shape{40, 8});
    }

    SECTION("constant input gives identical rows") {
        Graph g;
        std::vector<double> x(12, 0.7);
        Node* u = enc::embed_indices(g, x, ps);
        for (int t = 1; t < 12; ++t)
            for (int c = 0; c < 8; ++c)
                CHECK(u->val[t * 8 + c] == Catch::Approx(u->val[c]).margin(1e-12));
    }

    SECTION("centered unit kernels pass the input through") {
        nn::ParamStore ps2;
        auto& w = ps2.add("enc.idx.conv.w", {2, 1, 3});
        w.value = {0, 1, 0, 0, 2, 0};  // channel 0 copies, channel 1 doubles
        ps2.add("enc.idx.conv.b", {2});
        Graph g;
        std::vector<double> x{0.1, 0.5, 0.9, 0.3};
        Node* u = enc::embed_indices(g, x, ps2);
        for (int t = 0; t < 4; ++t) {
            CHECK(u->val[t * 2 + 0] == Catch::Approx(x[t]).margin(1e-15));
            CHECK(u->val[t * 2 + 1] == Catch::Approx(2 * x[t]).margin(1e-15));
        }
    }

    SECTION("too-short history is rejected") {
        Graph g;
        CHECK_THROWS_AS(enc::embed_indices(g, {0.1, 0.2}, ps), std::invalid_argument);
    }
}

TEST_CASE("pillarize") {
    auto cfg = tiny_config().pillar;

    SECTION("single point pillar has zero centroid offsets") {
        PointCloud c;
        c.push(7.0, 3.0, 1.0, 0.5);
        auto pil = enc::pillarize(c, cfg, 0.0, -10.0, 1);
        REQUIRE(pil.n_pillars == 1);
        CHECK(pil.coords[0] == std::pair<int, int>{2, 1});  // y=3 -> row 2, x=7 -> col 1
        const double* f = pil.tensor.data();
        CHECK(f[0] == Catch::Approx(7.0 / cfg.coord_scale_m).margin(1e-15));
        CHECK(f[3] == 0.5);
        CHECK(f[4] == 0.0);  // centroid offsets
        CHECK(f[5] == 0.0);
        CHECK(f[6] == 0.0);
        CHECK(pil.occupancy[0] == 1.0);
        CHECK(pil.occupancy[1] == 0.0);
    }

    SECTION("point at the pillar center has zero planar center offsets") {
        PointCloud c;
        c.push(7.5, 2.5, 0.3, 0.5);  // center of cell (2,1)
        auto pil = enc::pillarize(c, cfg, 0.0, -10.0, 1);
        const double* f = pil.tensor.data();
        CHECK(f[7] == 0.0);
        CHECK(f[8] == 0.0);
    }

    SECTION("two symmetric points carry opposite centroid offsets") {
        PointCloud c;
        c.push(6.0, 2.0, 1.0, 0.5);
        c.push(8.0, 4.0, 1.0, 0.5);
        auto pil = enc::pillarize(c, cfg, 0.0, -10.0, 1);
        REQUIRE(pil.n_pillars == 1);
        const double* a = pil.tensor.data();
        const double* b = pil.tensor.data() + enc::PillarConfig::feat_dim;
        CHECK(a[4] == Catch::Approx(-b[4]).margin(1e-12));
        CHECK(a[5] == Catch::Approx(-b[5]).margin(1e-12));
    }

    SECTION("points outside the extent are discarded and caps hold") {
        PointCloud c;
        std::mt19937_64 rng(2);
        std::uniform_real_distribution<double> xd(-30.0, 50.0), yd(-40.0, 40.0);
        for (int i = 0; i < 500; ++i) c.push(xd(rng), yd(rng), 0.5, 0.5);
        auto pil = enc::pillarize(c, cfg, 0.0, -10.0, 7);
        CHECK(pil.n_pillars <= cfg.max_pillars);
        for (auto [i, j] : pil.coords) {
            CHECK(i >= 0);
            CHECK(i < 4);
            CHECK(j >= 0);
            CHECK(j < 4);
        }
        // deterministic in the frame seed
        auto pil2 = enc::pillarize(c, cfg, 0.0, -10.0, 7);
        CHECK(pil.tensor == pil2.tensor);
    }
}

TEST_CASE("pillar encoding") {
    auto cfg = tiny_config();
    auto ps = full_store(cfg);

    SECTION("empty cloud yields an all-zero BEV map") {
        Graph g;
        PointCloud empty;
        auto pil = enc::pillarize(empty, cfg.pillar, 0.0, -10.0, 1);
        Node* bev = enc::pillar_encode(g, pil, cfg.pillar, ps);
        CHECK(bev->shape == ad::Shape{4, 4, 4});
        for (double v : bev->val) CHECK(v == 0.0);
    }

    SECTION("permuting points within a pillar leaves the output unchanged") {
        PointCloud c;
        c.push(6.0, 2.0, 1.0, 0.5);
        c.push(8.0, 4.0, 0.2, 0.9);
        c.push(7.0, 3.0, 0.7, 0.1);
        auto pil = enc::pillarize(c, cfg.pillar, 0.0, -10.0, 1);
        REQUIRE(pil.n_pillars == 1);
        auto permuted = pil;
        const int fd = enc::PillarConfig::feat_dim;
        // swap point rows 0 and 2
        for (int k = 0; k < fd; ++k) std::swap(permuted.tensor[k], permuted.tensor[2 * fd + k]);
        Graph g1, g2;
        Node* a = enc::pillar_encode(g1, pil, cfg.pillar, ps);
        Node* b = enc::pillar_encode(g2, permuted, cfg.pillar, ps);
        CHECK(a->val == b->val);
    }

    SECTION("a single occupied pillar stays confined before the backbone") {
        PointCloud c;
        c.push(7.0, 3.0, 1.0, 0.5);
        auto pil = enc::pillarize(c, cfg.pillar, 0.0, -10.0, 1);
        Graph g;
        Node* scattered = enc::pillar_scatter(g, pil, cfg.pillar, ps);
        for (int ch = 0; ch < 4; ++ch)
            for (int i = 0; i < 4; ++i)
                for (int j = 0; j < 4; ++j) {
                    const double v = scattered->val[(ch * 4 + i) * 4 + j];
                    if (i == 2 && j == 1) continue;
                    CHECK(v == 0.0);
                }
    }

    SECTION("gradient check") {
        std::mt19937_64 rng(3);
        std::normal_distribution<double> d;
        enc::Pillarized pil;
        pil.n_pillars = 2;
        pil.max_points = 3;
        pil.tensor.resize(54);
        for (auto& v : pil.tensor) v = d(rng);
        pil.occupancy = {1, 1, 0, 1, 0, 0};
        pil.coords = {{0, 1}, {3, 2}};
        nn::ParamStore local = full_store(cfg, 31);
        const enc::PillarConfig pc = cfg.pillar;
        auto err = nn::grad_check_params(
            [&](Graph& g, const nn::ParamStore& store) {
                Node* bev = enc::pillar_encode(g, pil, pc, store);
                return g.mean_all(g.mul(bev, bev));
            },
            local,
            {"enc.pil.mlp.w", "enc.pil.mlp.b", "enc.pil.bb.c1.w", "enc.pil.bb.c2.w",
             "enc.pil.bb.c3.w", "enc.pil.bb.c4.w"});
        CHECK(err < 1e-5);
    }
}

TEST_CASE("lidar frame encoding with BGAM") {
    auto cfg = tiny_config();
    auto ps = full_store(cfg);
    auto grid = grid_for(cfg.pillar);
    const int Q = 8;

    SECTION("all-zero BEV input maps to the zero vector") {
        Graph g;
        Node* bev = g.constant({4, 4, 4}, 0.0);
        Node* u = enc::encode_lidar_frame(g, bev, 4, Q, grid, ps, cfg.n_heads, true);
        for (double v : u->val) CHECK(v == 0.0);
    }

    SECTION("a mask that zeroes everything matches the zero input") {
        std::mt19937_64 rng(4);
        std::normal_distribution<double> d;
        std::vector<double> feat(64);
        for (auto& v : feat) v = d(rng);
        // beam 0 of a large codebook points almost -90 degrees where the
        // 4x4 front grid has no cells
        Graph g;
        Node* bev = g.value({4, 4, 4}, feat);
        Node* u = enc::encode_lidar_frame(g, bev, 0, 64, grid, ps, cfg.n_heads, true);
        Graph g2;
        Node* zero = g2.constant({4, 4, 4}, 0.0);
        Node* u0 = enc::encode_lidar_frame(g2, zero, 0, 64, grid, ps, cfg.n_heads, true);
        REQUIRE(enc::pillarize(PointCloud{}, cfg.pillar, 0, 0, 0).n_pillars == 0);
        CHECK(u->val == u0->val);
    }

    SECTION("perturbing features outside the mask leaves the output unchanged") {
        std::mt19937_64 rng(5);
        std::normal_distribution<double> d;
        std::vector<double> feat(64);
        for (auto& v : feat) v = d(rng);
        const int guide = 5;
        auto mask = geometry::beam_mask(guide, Q, grid);
        REQUIRE(mask.count() > 0);
        REQUIRE(mask.count() < 16);

        Graph g;
        Node* u = enc::encode_lidar_frame(g, g.value({4, 4, 4}, feat), guide, Q, grid, ps,
                                          cfg.n_heads, true);
        auto perturbed = feat;
        for (int ch = 0; ch < 4; ++ch)
            for (int cell = 0; cell < 16; ++cell)
                if (!mask.bits[cell]) perturbed[ch * 16 + cell] += d(rng) * 3.0;
        Graph g2;
        Node* u2 = enc::encode_lidar_frame(g2, g2.value({4, 4, 4}, perturbed), guide, Q, grid, ps,
                                           cfg.n_heads, true);
        CHECK(u->val == u2->val);  // exact equality at 64-bit

        // with BGAM off the perturbation must show up
        Graph g3, g4;
        Node* v1 = enc::encode_lidar_frame(g3, g3.value({4, 4, 4}, feat), guide, Q, grid, ps,
                                           cfg.n_heads, false);
        Node* v2 = enc::encode_lidar_frame(g4, g4.value({4, 4, 4}, perturbed), guide, Q, grid, ps,
                                           cfg.n_heads, false);
        CHECK(v1->val != v2->val);
    }

    SECTION("gradients never reach masked-out cells") {
        std::mt19937_64 rng(6);
        std::normal_distribution<double> d;
        std::vector<double> feat(64);
        for (auto& v : feat) v = d(rng);
        const int guide = 5;
        auto mask = geometry::beam_mask(guide, Q, grid);

        Graph g;
        Node* bev = g.leaf({4, 4, 4}, feat.data(), true, 0);
        Node* u = enc::encode_lidar_frame(g, bev, guide, Q, grid, ps, cfg.n_heads, true);
        g.backward(g.mean_all(g.mul(u, u)));
        auto grads = g.collect_param_grads();
        bool found = false;
        for (auto& [id, gvec] : grads) {
            if (id != 0) continue;
            found = true;
            double in_mask_mag = 0.0;
            for (int ch = 0; ch < 4; ++ch)
                for (int cell = 0; cell < 16; ++cell) {
                    if (mask.bits[cell])
                        in_mask_mag += std::fabs(gvec[ch * 16 + cell]);
                    else
                        CHECK(gvec[ch * 16 + cell] == 0.0);
                }
            CHECK(in_mask_mag > 0.0);
        }
        CHECK(found);
    }

    SECTION("attention support excludes zero cells and sums to one") {
        std::vector<double> feat(64, 0.0);
        // populate two in-mask cells
        const int guide = 5;
        auto mask = geometry::beam_mask(guide, Q, grid);
        std::vector<int> in_cells;
        for (int cell = 0; cell < 16; ++cell)
            if (mask.bits[cell]) in_cells.push_back(cell);
        REQUIRE(in_cells.size() >= 2);
        for (int ch = 0; ch < 4; ++ch) feat[ch * 16 + in_cells[0]] = 0.5;
        feat[0 * 16 + in_cells[1]] = -0.3;

        Graph g;
        enc::AttnProbe probe;
        enc::encode_lidar_frame(g, g.value({4, 4, 4}, feat), guide, Q, grid, ps, cfg.n_heads, true,
                                &probe);
        REQUIRE(probe.head_weights.size() == static_cast<std::size_t>(cfg.n_heads));
        for (const auto& head : probe.head_weights) {
            double sum = 0.0;
            for (int cell = 0; cell < 16; ++cell) {
                sum += head[cell];
                const bool nonzero_cell = cell == in_cells[0] || cell == in_cells[1];
                if (!nonzero_cell) CHECK(head[cell] == 0.0);
            }
            CHECK(sum == Catch::Approx(1.0).margin(1e-12));
        }
    }

    SECTION("lidar pooling gradient check") {
        std::mt19937_64 rng(7);
        std::normal_distribution<double> d;
        std::vector<double> feat(64);
        for (auto& v : feat) v = d(rng);
        nn::ParamStore local = full_store(cfg, 37);
        auto err = nn::grad_check_params(
            [&](Graph& g, const nn::ParamStore& store) {
                Node* bev = g.value({4, 4, 4}, feat);
                Node* u = enc::encode_lidar_frame(g, bev, 4, Q, grid, store, 2, true);
                return g.mean_all(g.mul(u, u));
            },
            local, {"enc.lid.query", "enc.lid.wq", "enc.lid.wk", "enc.lid.wv"});
        CHECK(err < 1e-5);
    }
}

TEST_CASE("image encoding") {
    auto cfg = tiny_config();
    auto ps = full_store(cfg);

    SECTION("patch counts") {
        scenegen::ImageRaster img;
        img.height = 64;
        img.width = 64;
        img.chw.assign(2 * 64 * 64, 0.25);
        auto p = enc::patchify(img, 8);
        CHECK(p.size() / (2 * 8 * 8) == 64);

        scenegen::ImageRaster vit;
        vit.height = 224;
        vit.width = 224;
        vit.chw.assign(2 * 224 * 224, 0.0);
        auto pv = enc::patchify(vit, 16);
        CHECK(pv.size() / (2 * 16 * 16) == 196);

        scenegen::ImageRaster odd;
        odd.height = 30;
        odd.width = 64;
        odd.chw.assign(2 * 30 * 64, 0.0);
        CHECK_THROWS_AS(enc::patchify(odd, 8), std::invalid_argument);
    }

    SECTION("shape contract and zero-raster independence from the patch projection") {
        scenegen::ImageRaster img;
        img.height = 16;
        img.width = 16;
        img.chw.assign(2 * 16 * 16, 0.0);
        Graph g;
        Node* u = enc::encode_image(g, img, cfg.image, ps, cfg.n_heads);
        CHECK(u->shape == ad::Shape{1, 8});

        auto ps2 = full_store(cfg, 5);
        nn::fill_scaled_normal(ps2.get("enc.cam.patch.w"), 991, 2.0);  // different projection
        Graph g2;
        Node* u2 = enc::encode_image(g2, img, cfg.image, ps2, cfg.n_heads);
        for (std::size_t i = 0; i < u->val.size(); ++i)
            CHECK(u->val[i] == Catch::Approx(u2->val[i]).margin(1e-12));
    }

    SECTION("image encoder gradient check on a tiny raster") {
        std::mt19937_64 rng(8);
        std::normal_distribution<double> d;
        enc::EncoderConfig small = cfg;
        small.cam_height = 8;
        small.cam_width = 8;
        small.image.patch_size = 4;
        small.image.n_layers = 1;
        scenegen::ImageRaster img;
        img.height = 8;
        img.width = 8;
        img.chw.resize(2 * 64);
        for (auto& v : img.chw) v = std::fabs(d(rng));

        nn::ParamStore base;
        enc::register_image_params(base, small, 11);
        auto err = nn::grad_check_params(
            [&](Graph& g, const nn::ParamStore& store) {
                Node* u = enc::encode_image(g, img, small.image, store, 2);
                return g.mean_all(g.mul(u, u));
            },
            base,
            {"enc.cam.patch.w", "enc.cam.cls", "enc.cam.pos", "enc.cam.blk0.attn.wq",
             "enc.cam.blk0.ffn.w1", "enc.cam.pool.wv"});
        CHECK(err < 1e-5);
    }
}

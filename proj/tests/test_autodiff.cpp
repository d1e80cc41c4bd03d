#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "mmwl/autodiff.hpp"
#include "mmwl/nn.hpp"

using namespace mmwl;
using ad::Graph;
using ad::Node;
using ad::Shape;

namespace {

std::vector<double> randvec(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> d(0.0, scale);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

// independent single-pass scalar reimplementation of multi-head
// cross-attention with shared projections
std::vector<double> attention_oracle(const std::vector<double>& query, int nq,
                                     const std::vector<double>& kv, int nkv, int din,
                                     const std::vector<double>& wq, const std::vector<double>& wk,
                                     const std::vector<double>& wv, int dm, int heads) {
    auto project = [&](const std::vector<double>& x, int rows, const std::vector<double>& w) {
        std::vector<double> out(static_cast<std::size_t>(rows) * dm, 0.0);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < dm; ++j) {
                double acc = 0.0;
                for (int k = 0; k < din; ++k) acc += x[i * din + k] * w[k * dm + j];
                out[i * dm + j] = acc;
            }
        return out;
    };
    const auto q = project(query, nq, wq);
    const auto kk = project(kv, nkv, wk);
    const auto vv = project(kv, nkv, wv);
    const int dh = dm / heads;
    std::vector<double> out(static_cast<std::size_t>(nq) * dm, 0.0);
    for (int i = 0; i < nq; ++i)
        for (int h = 0; h < heads; ++h) {
            std::vector<double> s(static_cast<std::size_t>(nkv));
            for (int r = 0; r < nkv; ++r) {
                double acc = 0.0;
                for (int u = 0; u < dh; ++u) acc += q[i * dm + h * dh + u] * kk[r * dm + h * dh + u];
                s[r] = acc / std::sqrt(static_cast<double>(dh));
            }
            double mx = s[0];
            for (double x : s) mx = std::max(mx, x);
            double z = 0.0;
            for (auto& x : s) {
                x = std::exp(x - mx);
                z += x;
            }
            for (int r = 0; r < nkv; ++r)
                for (int u = 0; u < dh; ++u) out[i * dm + h * dh + u] += (s[r] / z) * vv[r * dm + h * dh + u];
        }
    return out;
}

}  // namespace

TEST_CASE("softmax basics") {
    Graph g;
    Node* x = g.value({1, 4}, {0.0, 0.0, 0.0, 0.0});
    Node* y = g.softmax_rows(x);
    for (double v : y->val) CHECK(v == Catch::Approx(0.25).margin(1e-15));

    std::mt19937_64 rng(3);
    auto data = randvec(24, rng);
    Node* a = g.value({4, 6}, data);
    Node* sa = g.softmax_rows(a);
    for (int r = 0; r < 4; ++r) {
        double s = 0.0;
        for (int c = 0; c < 6; ++c) s += sa->val[r * 6 + c];
        CHECK(s == Catch::Approx(1.0).margin(1e-12));
    }

    // shift invariance
    auto shifted = data;
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 6; ++c) shifted[r * 6 + c] += 7.5;
    Node* b = g.value({4, 6}, shifted);
    Node* sb = g.softmax_rows(b);
    for (std::size_t i = 0; i < sa->val.size(); ++i)
        CHECK(sa->val[i] == Catch::Approx(sb->val[i]).margin(1e-12));
}

TEST_CASE("matmul identity and shape errors") {
    Graph g;
    std::mt19937_64 rng(5);
    auto data = randvec(12, rng);
    Node* a = g.value({3, 4}, data);
    Node* eye = g.value({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Node* out = g.matmul(eye, a);
    for (std::size_t i = 0; i < data.size(); ++i) CHECK(out->val[i] == data[i]);

    CHECK_THROWS_WITH(g.matmul(a, a), Catch::Matchers::ContainsSubstring("matmul"));
}

TEST_CASE("conv1d with a centered unit kernel is the identity") {
    Graph g;
    std::mt19937_64 rng(11);
    const int P = 9, C = 3;
    auto data = randvec(P * C, rng);
    Node* x = g.value({P, C}, data);
    // C output kernels, each [0,1,0] wired to its own channel
    std::vector<double> w(C * C * 3, 0.0);
    for (int c = 0; c < C; ++c) w[(c * C + c) * 3 + 1] = 1.0;
    Node* wk = g.value({C, C, 3}, w);
    Node* y = g.conv1d(x, wk, nullptr);
    for (std::size_t i = 0; i < data.size(); ++i) CHECK(y->val[i] == Catch::Approx(data[i]).margin(1e-15));
}

TEST_CASE("attention degenerate cases") {
    std::mt19937_64 rng(21);
    const int din = 6, dm = 8, heads = 2;
    auto wq = randvec(din * dm, rng), wk = randvec(din * dm, rng), wv = randvec(din * dm, rng);

    SECTION("single kv row: output equals the projected value regardless of query") {
        auto kv = randvec(din, rng);
        for (int t = 0; t < 3; ++t) {
            Graph g;
            nn::AttnWeights w{g.value({din, dm}, wq), g.value({din, dm}, wk), g.value({din, dm}, wv)};
            Node* qn = g.value({1, din}, randvec(din, rng));
            Node* kvn = g.value({1, din}, kv);
            Node* out = nn::multi_head_cross_attention(g, qn, kvn, w, heads);
            Node* pv = g.matmul(kvn, w.wv);
            for (int j = 0; j < dm; ++j) CHECK(out->val[j] == Catch::Approx(pv->val[j]).margin(1e-12));
        }
    }

    SECTION("identical kv rows give uniform attention") {
        auto row = randvec(din, rng);
        std::vector<double> kv;
        for (int r = 0; r < 5; ++r) kv.insert(kv.end(), row.begin(), row.end());
        Graph g;
        nn::AttnWeights w{g.value({din, dm}, wq), g.value({din, dm}, wk), g.value({din, dm}, wv)};
        Node* qn = g.value({2, din}, randvec(2 * din, rng));
        Node* kvn = g.value({5, din}, kv);
        std::vector<std::vector<double>> attn;
        nn::multi_head_cross_attention(g, qn, kvn, w, heads, nullptr, &attn);
        for (const auto& head : attn)
            for (double a : head) CHECK(a == Catch::Approx(0.2).margin(1e-12));
    }
}

TEST_CASE("attention matches the scalar oracle") {
    std::mt19937_64 rng(31);
    const int nq = 3, nkv = 7, din = 6, dm = 8, heads = 2;
    auto query = randvec(nq * din, rng);
    auto kv = randvec(nkv * din, rng);
    auto wq = randvec(din * dm, rng), wk = randvec(din * dm, rng), wv = randvec(din * dm, rng);

    Graph g;
    nn::AttnWeights w{g.value({din, dm}, wq), g.value({din, dm}, wk), g.value({din, dm}, wv)};
    Node* out = nn::multi_head_cross_attention(g, g.value({nq, din}, query), g.value({nkv, din}, kv), w, heads);
    auto expect = attention_oracle(query, nq, kv, nkv, din, wq, wk, wv, dm, heads);
    REQUIRE(out->val.size() == expect.size());
    for (std::size_t i = 0; i < expect.size(); ++i)
        CHECK(out->val[i] == Catch::Approx(expect[i]).margin(1e-10));
}

TEST_CASE("attention convexity per head") {
    std::mt19937_64 rng(41);
    const int nkv = 9, din = 5, dm = 12, heads = 3, dh = dm / heads;
    Graph g;
    nn::AttnWeights w{g.value({din, dm}, randvec(din * dm, rng)),
                      g.value({din, dm}, randvec(din * dm, rng)),
                      g.value({din, dm}, randvec(din * dm, rng))};
    Node* kvn = g.value({nkv, din}, randvec(nkv * din, rng));
    Node* qn = g.value({1, din}, randvec(din, rng));
    Node* out = nn::multi_head_cross_attention(g, qn, kvn, w, heads);
    Node* pv = g.matmul(kvn, w.wv);
    for (int h = 0; h < heads; ++h)
        for (int u = 0; u < dh; ++u) {
            double lo = 1e300, hi = -1e300;
            for (int r = 0; r < nkv; ++r) {
                lo = std::min(lo, pv->val[r * dm + h * dh + u]);
                hi = std::max(hi, pv->val[r * dm + h * dh + u]);
            }
            CHECK(out->val[h * dh + u] >= lo - 1e-12);
            CHECK(out->val[h * dh + u] <= hi + 1e-12);
        }
}

TEST_CASE("grouped attention matches the per-step formula") {
    std::mt19937_64 rng(51);
    const int P = 5, gsz = 3, dm = 8, heads = 2, dh = dm / heads;
    auto Q = randvec(P * dm, rng);
    auto K = randvec(P * gsz * dm, rng);
    auto V = randvec(P * gsz * dm, rng);
    Graph g;
    Node* out = g.grouped_attention(g.value({P, dm}, Q), g.value({P * gsz, dm}, K),
                                    g.value({P * gsz, dm}, V), gsz, heads);
    for (int t = 0; t < P; ++t)
        for (int h = 0; h < heads; ++h) {
            std::vector<double> s(gsz);
            for (int r = 0; r < gsz; ++r) {
                double acc = 0.0;
                for (int u = 0; u < dh; ++u) acc += Q[t * dm + h * dh + u] * K[(t * gsz + r) * dm + h * dh + u];
                s[r] = acc / std::sqrt(static_cast<double>(dh));
            }
            double mx = *std::max_element(s.begin(), s.end());
            double z = 0.0;
            for (auto& x : s) {
                x = std::exp(x - mx);
                z += x;
            }
            for (int u = 0; u < dh; ++u) {
                double acc = 0.0;
                for (int r = 0; r < gsz; ++r) acc += (s[r] / z) * V[(t * gsz + r) * dm + h * dh + u];
                CHECK(out->val[t * dm + h * dh + u] == Catch::Approx(acc).margin(1e-11));
            }
        }
}

TEST_CASE("gradient checks for every op") {
    std::mt19937_64 rng(61);
    auto inp = [&](Shape s, double scale = 1.0) {
        return std::make_pair(s, randvec(ad::numel(s), rng, scale));
    };

    SECTION("quadratic") {
        auto err = nn::grad_check(
            [](Graph& g, const std::vector<Node*>& in) { return g.mean_all(g.mul(in[0], in[0])); },
            {inp({4, 5})});
        CHECK(err < 1e-9);
    }

    SECTION("add and mul broadcasts") {
        for (auto mode : {0, 1, 2, 3}) {
            Shape bshape = mode == 0 ? Shape{3, 4} : mode == 1 ? Shape{1, 4} : mode == 2 ? Shape{3, 1} : Shape{1};
            auto err = nn::grad_check(
                [](Graph& g, const std::vector<Node*>& in) {
                    return g.mean_all(g.mul(g.add(in[0], in[1]), g.mul(in[0], in[2])));
                },
                {inp({3, 4}), inp(bshape), inp(bshape)});
            CHECK(err < 1e-7);
        }
    }

    SECTION("matmul transpose slice concat") {
        auto err = nn::grad_check(
            [](Graph& g, const std::vector<Node*>& in) {
                Node* m = g.matmul(in[0], in[1]);       // 3x5
                Node* t = g.transpose(m);               // 5x3
                Node* s1 = g.slice_rows(t, 0, 2);       // 2x3
                Node* s2 = g.slice_rows(t, 2, 5);       // 3x3
                Node* c = g.concat_cols({g.transpose(s1), s2});  // 3x5
                return g.mean_all(g.mul(c, c));
            },
            {inp({3, 4}), inp({4, 5})});
        CHECK(err < 1e-7);
    }

    SECTION("concat_rows repeat_rows reshape") {
        auto err = nn::grad_check(
            [](Graph& g, const std::vector<Node*>& in) {
                Node* c = g.concat_rows({in[0], in[1]});
                Node* r = g.repeat_rows(c, 3);
                Node* rs = g.reshape(r, {3, 15});
                return g.mean_all(g.mul(rs, rs));
            },
            {inp({2, 3}), inp({3, 3})});
        CHECK(err < 1e-7);
    }

    SECTION("relu gelu") {
        auto err = nn::grad_check(
            [](Graph& g, const std::vector<Node*>& in) {
                return g.mean_all(g.add(g.relu(in[0]), g.gelu(in[0])));
            },
            {inp({4, 4})});
        CHECK(err < 1e-6);
    }

    SECTION("softmax layer_norm") {
        auto err = nn::grad_check(
            [](Graph& g, const std::vector<Node*>& in) {
                Node* s = g.softmax_rows(in[0]);
                Node* ln = g.layer_norm(in[0], in[1], in[2]);
                return g.mean_all(g.mul(s, ln));
            },
            {inp({3, 6}), inp({6}), inp({6})});
        CHECK(err < 1e-6);
    }

    SECTION("conv1d plus relu chain") {
        auto err = nn::grad_check(
            [](Graph& g, const std::vector<Node*>& in) {
                Node* y = g.conv1d(in[0], in[1], in[2]);
                return g.mean_all(g.mul(g.relu(y), g.relu(y)));
            },
            {inp({6, 2}), inp({3, 2, 3}), inp({3})});
        CHECK(err < 1e-5);
    }

    SECTION("conv2d stride 1 and 2 with upsample") {
        auto err = nn::grad_check(
            [](Graph& g, const std::vector<Node*>& in) {
                Node* a = g.conv2d(in[0], in[1], 1);
                Node* b = g.conv2d(a, in[2], 2);
                Node* u = g.upsample2x(b);
                return g.mean_all(g.mul(u, u));
            },
            {inp({2, 4, 4}), inp({3, 2, 3, 3}), inp({3, 3, 3, 3})});
        CHECK(err < 1e-5);
    }

    SECTION("rowgroup_max scatter chw_to_nc") {
        auto err = nn::grad_check(
            [](Graph& g, const std::vector<Node*>& in) {
                Node* mx = g.rowgroup_max(in[0], 3);
                Node* sc = g.scatter_rows_to_chw(mx, {{0, 1}, {1, 0}, {2, 2}, {1, 1}}, 3, 3);
                Node* nc = g.chw_to_nc(sc);
                return g.mean_all(g.mul(nc, nc));
            },
            {inp({12, 2})});
        CHECK(err < 1e-6);
    }

    SECTION("full attention block") {
        auto err = nn::grad_check(
            [](Graph& g, const std::vector<Node*>& in) {
                nn::AttnWeights w{in[2], in[3], in[4]};
                Node* out = nn::multi_head_cross_attention(g, in[0], in[1], w, 2);
                return g.mean_all(g.mul(out, out));
            },
            {inp({2, 5}), inp({6, 5}), inp({5, 8}), inp({5, 8}), inp({5, 8})});
        CHECK(err < 1e-5);
    }

    SECTION("grouped attention") {
        auto err = nn::grad_check(
            [](Graph& g, const std::vector<Node*>& in) {
                Node* out = g.grouped_attention(in[0], in[1], in[2], 3, 2);
                return g.mean_all(g.mul(out, out));
            },
            {inp({4, 6}), inp({12, 6}), inp({12, 6})});
        CHECK(err < 1e-5);
    }
}

TEST_CASE("slice and concat round-trip gradients exactly") {
    std::mt19937_64 rng(71);
    auto data = randvec(20, rng);
    Graph g;
    Node* x = g.leaf({4, 5}, data.data(), true, 0);
    Node* top = g.slice_rows(x, 0, 2);
    Node* bot = g.slice_rows(x, 2, 4);
    Node* back = g.concat_rows({top, bot});
    Node* loss = g.mean_all(back);
    g.backward(loss);
    auto grads = g.collect_param_grads();
    REQUIRE(grads.size() == 1);
    for (double v : grads[0].second) CHECK(v == 0.05);  // exactly 1/20 each, no loss or double count
}

TEST_CASE("adam") {
    SECTION("zero gradient leaves parameters unchanged") {
        nn::ParamStore ps;
        auto& p = ps.add("w", {2, 2});
        p.value = {1.0, -2.0, 3.0, 4.0};
        nn::AdamState st;
        nn::adam_step(ps, {std::vector<double>(4, 0.0)}, st, 0.1);
        CHECK(ps.get("w").value == std::vector<double>{1.0, -2.0, 3.0, 4.0});
    }

    SECTION("first step from zero state is sign-scaled") {
        nn::ParamStore ps;
        auto& p = ps.add("w", {3});
        p.value = {0.0, 0.0, 0.0};
        nn::AdamState st;
        nn::adam_step(ps, {{0.5, -2.0, 7.0}}, st, 0.01);
        // bias-corrected m-hat = g and v-hat = g^2, so the update is
        // -lr * g / (|g| + eps), i.e. -lr * sign(g) up to eps
        CHECK(ps.get("w").value[0] == Catch::Approx(-0.01).epsilon(1e-6));
        CHECK(ps.get("w").value[1] == Catch::Approx(0.01).epsilon(1e-6));
        CHECK(ps.get("w").value[2] == Catch::Approx(-0.01).epsilon(1e-6));
    }

    SECTION("identical runs are bitwise identical") {
        auto run = [] {
            nn::ParamStore ps;
            auto& p = ps.add("w", {4});
            nn::fill_scaled_normal(p, 99, 0.3);
            nn::AdamState st;
            std::mt19937_64 rng(5);
            for (int i = 0; i < 50; ++i) {
                std::normal_distribution<double> d;
                std::vector<double> gvec(4);
                for (auto& v : gvec) v = d(rng);
                nn::adam_step(ps, {gvec}, st, 0.003);
            }
            return ps.get("w").value;
        };
        auto a = run();
        auto b = run();
        CHECK(a == b);  // exact equality
    }
}

TEST_CASE("checkpoint round trip") {
    nn::ParamStore ps;
    auto& a = ps.add("alpha", {2, 3});
    nn::fill_scaled_normal(a, 17, 1.0);
    auto& b = ps.add("beta", {4}, false);
    nn::fill_constant(b, 2.5);
    json meta;
    meta["note"] = "t";

    const std::string path = "ckpt_test.bin";
    nn::save_checkpoint(path, ps, meta);

    nn::ParamStore loaded;
    json m2 = nn::load_checkpoint(path, loaded);
    CHECK(m2.at("note") == "t");
    REQUIRE(loaded.size() == 2);
    CHECK(loaded.get("alpha").value == ps.get("alpha").value);
    CHECK(loaded.get("beta").value == ps.get("beta").value);
    CHECK_FALSE(loaded.get("beta").trainable);

    // byte determinism
    nn::save_checkpoint("ckpt_test2.bin", ps, meta);
    CHECK(read_text_file(path) == read_text_file("ckpt_test2.bin"));
    std::remove(path.c_str());
    std::remove("ckpt_test2.bin");
}

TEST_CASE("errors name the op and shapes") {
    Graph g;
    Node* a = g.constant({2, 3}, 1.0);
    Node* b = g.constant({4, 4}, 1.0);
    CHECK_THROWS_WITH(g.add(a, b), Catch::Matchers::ContainsSubstring("add") &&
                                       Catch::Matchers::ContainsSubstring("(2,3)") &&
                                       Catch::Matchers::ContainsSubstring("(4,4)"));
}

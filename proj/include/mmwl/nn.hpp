#pragma once

// Trainable-parameter plumbing on top of the autodiff graph: named parameter
// store, seeded initializers, Adam, finite-difference gradient checking, the
// shared multi-head cross-attention composite and the checkpoint format.

#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "mmwl/autodiff.hpp"
#include "mmwl/common.hpp"

namespace mmwl::nn {

struct Parameter {
    std::string name;
    ad::Shape shape;
    std::vector<double> value;
    bool trainable = true;
};

class ParamStore {
public:
    Parameter& add(const std::string& name, ad::Shape shape, bool trainable = true) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
        index_[name] = static_cast<int>(params_.size());
        params_.push_back(Parameter{name, std::move(shape), {}, trainable});
        auto& p = params_.back();
        p.value.assign(ad::numel(p.shape), 0.0);
        return p;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    int id_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no such parameter: " + name);
        return it->second;
    }
    Parameter& get(const std::string& name) { return params_[static_cast<std::size_t>(id_of(name))]; }
    const Parameter& get(const std::string& name) const {
        return params_[static_cast<std::size_t>(id_of(name))];
    }
    Parameter& at(int id) { return params_[static_cast<std::size_t>(id)]; }
    const Parameter& at(int id) const { return params_[static_cast<std::size_t>(id)]; }
    int size() const { return static_cast<int>(params_.size()); }

    // graph leaf bound to this parameter; id doubles as the gradient key
    ad::Node* use(ad::Graph& g, const std::string& name) const {
        const int id = id_of(name);
        const Parameter& p = at(id);
        return g.leaf(p.shape, p.value.data(), p.trainable, id);
    }

private:
    std::vector<Parameter> params_;
    std::map<std::string, int> index_;
};

// seeded initializers; the stream is derived from the name so registration
// order does not matter
inline void fill_scaled_normal(Parameter& p, std::uint64_t seed, double scale) {
    std::mt19937_64 rng(derive_seed(seed, fnv1a(p.name)));
    std::normal_distribution<double> dist(0.0, scale);
    for (auto& v : p.value) v = dist(rng);
}

inline void fill_constant(Parameter& p, double c) {
    for (auto& v : p.value) v = c;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
    std::vector<std::vector<double>> m, v;
    long t = 0;
};

inline void adam_step(ParamStore& params, const std::vector<std::vector<double>>& grads,
                      AdamState& state, double lr, double beta1 = 0.9, double beta2 = 0.999,
                      double eps = 1e-8) {
    const int n = params.size();
    if (static_cast<int>(grads.size()) != n)
        throw std::invalid_argument("adam_step: gradient count does not match parameter count");
    if (state.m.empty()) {
        state.m.resize(static_cast<std::size_t>(n));
        state.v.resize(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            state.m[static_cast<std::size_t>(i)].assign(params.at(i).value.size(), 0.0);
            state.v[static_cast<std::size_t>(i)].assign(params.at(i).value.size(), 0.0);
        }
    }
    state.t += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    for (int i = 0; i < n; ++i) {
        Parameter& p = params.at(i);
        if (!p.trainable) continue;
        const auto& g = grads[static_cast<std::size_t>(i)];
        if (g.size() != p.value.size())
            throw std::invalid_argument("adam_step: gradient shape mismatch for " + p.name);
        auto& m = state.m[static_cast<std::size_t>(i)];
        auto& v = state.v[static_cast<std::size_t>(i)];
        for (std::size_t j = 0; j < g.size(); ++j) {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            const double mh = m[j] / bc1;
            const double vh = v[j] / bc2;
            p.value[j] -= lr * mh / (std::sqrt(vh) + eps);
        }
    }
}

// ---------------------------------------------------------------------------
// attention composite

struct AttnWeights {
    ad::Node* wq = nullptr;  // d_q_in x d_model
    ad::Node* wk = nullptr;  // d_kv_in x d_model
    ad::Node* wv = nullptr;  // d_kv_in x d_model
};

// Multi-head cross-attention per the shared-projection formulation: project
// query and key/value rows, split into heads, per-head scaled dot-product
// softmax, concatenate head outputs. An optional additive score bias
// restricts the softmax support (e.g. -1e30 entries), applied to every head.
// attn_out, when given, receives the per-head attention rows.
inline ad::Node* multi_head_cross_attention(ad::Graph& g, ad::Node* query, ad::Node* kv,
                                            const AttnWeights& w, int heads,
                                            ad::Node* score_bias = nullptr,
                                            std::vector<std::vector<double>>* attn_out = nullptr) {
    ad::Node* q = g.matmul(query, w.wq);
    ad::Node* k = g.matmul(kv, w.wk);
    ad::Node* v = g.matmul(kv, w.wv);
    const int dm = q->shape[1];
    if (dm % heads != 0)
        throw std::invalid_argument("multi_head_cross_attention: d_m not divisible by head count");
    const int dh = dm / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    if (attn_out) attn_out->clear();
    std::vector<ad::Node*> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        ad::Node* qh = g.slice_cols(q, h * dh, (h + 1) * dh);
        ad::Node* kh = g.slice_cols(k, h * dh, (h + 1) * dh);
        ad::Node* vh = g.slice_cols(v, h * dh, (h + 1) * dh);
        ad::Node* scores = g.scale(g.matmul(qh, g.transpose(kh)), scale);
        if (score_bias) scores = g.add(scores, score_bias);
        ad::Node* alpha = g.softmax_rows(scores);
        if (attn_out) attn_out->push_back(alpha->val);
        outs.push_back(g.matmul(alpha, vh));
    }
    return g.concat_cols(outs);
}

inline ad::Node* linear(ad::Graph& g, ad::Node* x, ad::Node* w, ad::Node* b = nullptr) {
    ad::Node* y = g.matmul(x, w);
    return b ? g.add(y, b) : y;
}

// ---------------------------------------------------------------------------
// finite-difference gradient check

// Builds the scalar function twice per perturbed element (central
// differences) and compares against tape gradients. Returns the worst
// relative error across all input elements.
inline double grad_check(
    const std::function<ad::Node*(ad::Graph&, const std::vector<ad::Node*>&)>& build,
    std::vector<std::pair<ad::Shape, std::vector<double>>> inputs, double eps = 1e-5) {
    auto eval = [&](bool with_grad, std::vector<std::vector<double>>* grads) -> double {
        ad::Graph g;
        g.set_grad_enabled(with_grad);
        std::vector<ad::Node*> leaves;
        leaves.reserve(inputs.size());
        for (std::size_t i = 0; i < inputs.size(); ++i)
            leaves.push_back(g.leaf(inputs[i].first, inputs[i].second.data(), true, static_cast<int>(i)));
        ad::Node* out = build(g, leaves);
        if (out->val.size() != 1) throw std::invalid_argument("grad_check: function must be scalar");
        if (!std::isfinite(out->val[0])) throw std::runtime_error("grad_check: non-finite output");
        if (with_grad) {
            g.backward(out);
            grads->assign(inputs.size(), {});
            for (auto& [id, gvec] : g.collect_param_grads())
                (*grads)[static_cast<std::size_t>(id)] = std::move(gvec);
        }
        return out->val[0];
    };

    std::vector<std::vector<double>> analytic;
    eval(true, &analytic);

    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        auto& data = inputs[i].second;
        for (std::size_t j = 0; j < data.size(); ++j) {
            const double keep = data[j];
            data[j] = keep + eps;
            const double up = eval(false, nullptr);
            data[j] = keep - eps;
            const double dn = eval(false, nullptr);
            data[j] = keep;
            const double numeric = (up - dn) / (2.0 * eps);
            const double a = analytic[i].empty() ? 0.0 : analytic[i][j];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
            worst = std::max(worst, std::abs(a - numeric) / denom);
        }
    }
    return worst;
}

// Variant for parameter-store modules: the builder pulls leaves through
// ParamStore::use, and the named parameters are perturbed in place.
inline double grad_check_params(const std::function<ad::Node*(ad::Graph&, const ParamStore&)>& build,
                                ParamStore& ps, const std::vector<std::string>& names,
                                double eps = 1e-5) {
    auto eval = [&](bool with_grad, std::vector<std::vector<double>>* grads) -> double {
        ad::Graph g;
        g.set_grad_enabled(with_grad);
        ad::Node* out = build(g, ps);
        if (out->val.size() != 1) throw std::invalid_argument("grad_check_params: function must be scalar");
        if (!std::isfinite(out->val[0])) throw std::runtime_error("grad_check_params: non-finite output");
        if (with_grad) {
            g.backward(out);
            grads->assign(static_cast<std::size_t>(ps.size()), {});
            for (auto& [id, gvec] : g.collect_param_grads()) {
                auto& slot = (*grads)[static_cast<std::size_t>(id)];
                if (slot.empty())
                    slot = std::move(gvec);
                else  // the same parameter may appear as several leaves
                    for (std::size_t k = 0; k < gvec.size(); ++k) slot[k] += gvec[k];
            }
        }
        return out->val[0];
    };

    std::vector<std::vector<double>> analytic;
    eval(true, &analytic);

    double worst = 0.0;
    for (const auto& name : names) {
        const int id = ps.id_of(name);
        auto& data = ps.get(name).value;
        for (std::size_t j = 0; j < data.size(); ++j) {
            const double keep = data[j];
            data[j] = keep + eps;
            const double up = eval(false, nullptr);
            data[j] = keep - eps;
            const double dn = eval(false, nullptr);
            data[j] = keep;
            const double numeric = (up - dn) / (2.0 * eps);
            const double a = analytic[static_cast<std::size_t>(id)].empty()
                                 ? 0.0
                                 : analytic[static_cast<std::size_t>(id)][j];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
            worst = std::max(worst, std::abs(a - numeric) / denom);
        }
    }
    return worst;
}

// ---------------------------------------------------------------------------
// checkpoint format "mmw-ckpt/1": little-endian u64 header length, JSON
// header (names, shapes, offsets, dtype), then the flat f64 payload

inline void save_checkpoint(const std::string& path, const ParamStore& params, const json& meta) {
    json header;
    header["format"] = "mmw-ckpt/1";
    header["dtype"] = "f64";
    header["meta"] = meta;
    json plist = json::array();
    std::size_t offset = 0;
    for (int i = 0; i < params.size(); ++i) {
        const Parameter& p = params.at(i);
        json pj;
        pj["name"] = p.name;
        pj["shape"] = p.shape;
        pj["offset"] = offset;
        pj["trainable"] = p.trainable;
        plist.push_back(pj);
        offset += p.value.size();
    }
    header["params"] = plist;
    const std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    const std::uint64_t hlen = hs.size();
    unsigned char lenb[8];
    for (int i = 0; i < 8; ++i) lenb[i] = static_cast<unsigned char>((hlen >> (8 * i)) & 0xff);
    f.write(reinterpret_cast<const char*>(lenb), 8);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (int i = 0; i < params.size(); ++i) {
        const auto& v = params.at(i).value;
        f.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
    }
    if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

// rebuilds the store in the stored parameter order and returns the meta block
inline json load_checkpoint(const std::string& path, ParamStore& params) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for read: " + path);
    unsigned char lenb[8];
    f.read(reinterpret_cast<char*>(lenb), 8);
    if (!f) throw std::runtime_error("checkpoint truncated: " + path);
    std::uint64_t hlen = 0;
    for (int i = 0; i < 8; ++i) hlen |= static_cast<std::uint64_t>(lenb[i]) << (8 * i);
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!f) throw std::runtime_error("checkpoint truncated: " + path);
    json header = json::parse(hs);
    if (header.at("format") != "mmw-ckpt/1")
        throw std::runtime_error("checkpoint " + path + ": unsupported format tag");
    if (header.at("dtype") != "f64") throw std::runtime_error("checkpoint " + path + ": unsupported dtype");
    for (const auto& pj : header.at("params")) {
        Parameter& p = params.add(pj.at("name").get<std::string>(), pj.at("shape").get<ad::Shape>(),
                                  pj.at("trainable").get<bool>());
        f.read(reinterpret_cast<char*>(p.value.data()), static_cast<std::streamsize>(p.value.size() * 8));
        if (!f) throw std::runtime_error("checkpoint payload truncated: " + path);
    }
    return header.at("meta");
}

}  // namespace mmwl::nn

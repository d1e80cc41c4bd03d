#pragma once

// Modality interface: backward-replication temporal alignment, modality
// stacking, per-step cross-modality attention, vocabulary reprogramming and
// the numeric prompt-statistics prefix (min/max/median, trend sign, top-5
// autocorrelation lags found via FFT).

#include <complex>

#include "mmwl/autodiff.hpp"
#include "mmwl/nn.hpp"

namespace mmwl::fusion {

using ad::Graph;
using ad::Node;

// ---------------------------------------------------------------------------
// temporal alignment: dense row t = sparse row floor(t/j); each sensor
// feature sits at the end of its acquisition window and is copied backward

inline Node* temporal_align(Graph& g, Node* sparse, int j_ratio, int p_len) {
    if (j_ratio < 1) throw std::invalid_argument("temporal_align: j must be >= 1");
    if (p_len % j_ratio != 0)
        throw std::invalid_argument("temporal_align: history length not divisible by j");
    if (sparse->shape[0] * j_ratio != p_len)
        throw std::invalid_argument("temporal_align: sparse row count does not match P/j");
    return g.repeat_rows(sparse, j_ratio);
}

// plain-array reference used by tests and by feature precomputation
inline std::vector<double> temporal_align_values(const std::vector<double>& sparse, int rows,
                                                 int cols, int j_ratio) {
    std::vector<double> out(static_cast<std::size_t>(rows) * j_ratio * cols);
    for (int r = 0; r < rows; ++r)
        for (int t = 0; t < j_ratio; ++t)
            std::copy(sparse.begin() + static_cast<std::ptrdiff_t>(r) * cols,
                      sparse.begin() + static_cast<std::ptrdiff_t>(r + 1) * cols,
                      out.begin() + (static_cast<std::ptrdiff_t>(r) * j_ratio + t) * cols);
    return out;
}

// ---------------------------------------------------------------------------
// modality stacking: P x M x d_m with fixed order (index, lidar, camera);
// missing modalities are simply omitted. Laid out so that the 2-d view has M
// consecutive rows per time step.

inline Node* stack_modalities(Graph& g, const std::vector<Node*>& modality_rows) {
    if (modality_rows.empty()) throw std::invalid_argument("stack_modalities: no modalities");
    const int p = modality_rows[0]->shape[0];
    const int dm = modality_rows[0]->shape[1];
    for (Node* m : modality_rows)
        if (m->shape[0] != p || m->shape[1] != dm)
            throw std::invalid_argument("stack_modalities: modality length mismatch");
    const int mcount = static_cast<int>(modality_rows.size());
    // concat along columns then reshape: row t becomes M consecutive rows
    Node* wide = mcount == 1 ? modality_rows[0] : g.concat_cols(modality_rows);
    Node* stacked = g.reshape(wide, {p, mcount, dm});
    return stacked;
}

// per-step multi-head cross-attention with the learnable query tensor R;
// keys and values are the M modality rows of that step
inline Node* cross_modality_attend(Graph& g, Node* stacked, const nn::ParamStore& ps, int n_heads) {
    if (stacked->shape.size() != 3)
        throw std::invalid_argument("cross_modality_attend: expected P x M x d_m input");
    const int p = stacked->shape[0], mcount = stacked->shape[1], dm = stacked->shape[2];
    Node* u2d = g.reshape(stacked, {p * mcount, dm});
    Node* q = g.matmul(ps.use(g, "fus.cross.query"), ps.use(g, "fus.cross.wq"));
    Node* k = g.matmul(u2d, ps.use(g, "fus.cross.wk"));
    Node* v = g.matmul(u2d, ps.use(g, "fus.cross.wv"));
    return g.grouped_attention(q, k, v, mcount, n_heads);  // P x d_m
}

// ---------------------------------------------------------------------------
// vocabulary reprogramming: a frozen synthetic vocabulary E (V x D) is
// condensed to V' latent prototypes by a learnable linear map, then the
// lifted features attend over the prototypes

inline Node* reprogram(Graph& g, Node* fused, const nn::ParamStore& ps, int n_heads) {
    Node* lifted = g.matmul(fused, ps.use(g, "fus.rep.lift"));     // P x D
    Node* protos = g.matmul(ps.use(g, "fus.rep.vproj"), ps.use(g, "fus.rep.vocab"));  // V' x D
    nn::AttnWeights w{ps.use(g, "fus.rep.wq"), ps.use(g, "fus.rep.wk"), ps.use(g, "fus.rep.wv")};
    return nn::multi_head_cross_attention(g, lifted, protos, w, n_heads);  // P x D
}

// ---------------------------------------------------------------------------
// FFT (iterative radix-2 plus Bluestein for arbitrary lengths)

namespace detail {

using cplx = std::complex<double>;

inline void fft_pow2(std::vector<cplx>& a, bool inverse) {
    const std::size_t n = a.size();
    if (n < 2) return;
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = 2.0 * 3.14159265358979323846 / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
        const cplx wl(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            cplx w(1.0, 0.0);
            for (std::size_t k = 0; k < len / 2; ++k) {
                const cplx u = a[i + k];
                const cplx v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wl;
            }
        }
    }
    if (inverse)
        for (auto& x : a) x /= static_cast<double>(n);
}

inline std::vector<cplx> fft_any(std::vector<cplx> x, bool inverse) {
    const std::size_t n = x.size();
    if (n == 0) return x;
    if ((n & (n - 1)) == 0) {
        fft_pow2(x, inverse);
        return x;
    }
    // Bluestein: rewrite the DFT as a convolution of chirped sequences
    const double sign = inverse ? 1.0 : -1.0;
    std::size_t m = 1;
    while (m < 2 * n - 1) m <<= 1;
    std::vector<cplx> a(m, cplx(0, 0)), b(m, cplx(0, 0));
    std::vector<cplx> chirp(n);
    for (std::size_t k = 0; k < n; ++k) {
        const double ang = sign * 3.14159265358979323846 * static_cast<double>(k) * k / static_cast<double>(n);
        chirp[k] = cplx(std::cos(ang), std::sin(ang));
        a[k] = x[k] * chirp[k];
        b[k] = std::conj(chirp[k]);
        if (k > 0) b[m - k] = std::conj(chirp[k]);
    }
    fft_pow2(a, false);
    fft_pow2(b, false);
    for (std::size_t i = 0; i < m; ++i) a[i] *= b[i];
    fft_pow2(a, true);
    std::vector<cplx> out(n);
    for (std::size_t k = 0; k < n; ++k) out[k] = a[k] * chirp[k];
    if (inverse)
        for (auto& v : out) v /= static_cast<double>(n);
    return out;
}

}  // namespace detail

// circular autocorrelation of the zero-meaned sequence via FFT
inline std::vector<double> autocorr_fft(const std::vector<double>& x) {
    const std::size_t n = x.size();
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(n);
    std::vector<detail::cplx> a(n);
    for (std::size_t i = 0; i < n; ++i) a[i] = detail::cplx(x[i] - mean, 0.0);
    auto f = detail::fft_any(std::move(a), false);
    for (auto& v : f) v = detail::cplx(std::norm(v), 0.0);
    auto r = detail::fft_any(std::move(f), true);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = r[i].real();
    return out;
}

// Ranking of lags 1..P-1 by autocorrelation, ties toward the smaller lag.
// The circular autocorrelation is symmetric (r[tau] = r[P-tau]), so the key
// folds the pair and is quantized to single precision: exact mathematical
// ties then collapse identically no matter which route computed r, and the
// lag tie-break decides deterministically.
inline std::vector<int> rank_lags(const std::vector<double>& autocorr) {
    const std::size_t n = autocorr.size();
    std::vector<float> key(n, 0.0f);
    for (std::size_t t = 1; t < n; ++t)
        key[t] = static_cast<float>(autocorr[t] + autocorr[(n - t) % n]);
    std::vector<int> lags(n - 1);
    for (std::size_t i = 0; i < lags.size(); ++i) lags[i] = static_cast<int>(i) + 1;
    std::stable_sort(lags.begin(), lags.end(), [&](int a, int b) {
        if (key[static_cast<std::size_t>(a)] != key[static_cast<std::size_t>(b)])
            return key[static_cast<std::size_t>(a)] > key[static_cast<std::size_t>(b)];
        return a < b;
    });
    return lags;
}

struct PromptStats {
    double min = 0.0, max = 0.0, median = 0.0;
    bool upward = true;       // sign of the summed first differences; ties upward
    std::vector<int> top_lags;  // five most significant intervals
};

inline PromptStats prompt_stats(const std::vector<double>& q_norm) {
    if (q_norm.size() < 8) throw std::invalid_argument("prompt_stats: history must span >= 8 steps");
    PromptStats s;
    std::vector<double> sorted = q_norm;
    std::sort(sorted.begin(), sorted.end());
    s.min = sorted.front();
    s.max = sorted.back();
    const std::size_t n = sorted.size();
    s.median = n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    double trend = 0.0;
    for (std::size_t i = 1; i < q_norm.size(); ++i) trend += q_norm[i] - q_norm[i - 1];
    s.upward = trend >= 0.0;
    auto ranked = rank_lags(autocorr_fft(q_norm));
    ranked.resize(std::min<std::size_t>(5, ranked.size()));
    s.top_lags = ranked;
    return s;
}

// numeric prompt vector (3 stats + trend bit + 5 lags scaled by 1/P)
// projected to L_prom rows of width D; the projection bias carries the
// static portion of the prompt
inline Node* build_prompt_prefix(Graph& g, const std::vector<double>& q_norm,
                                 const nn::ParamStore& ps, int l_prom, int d_llm) {
    const PromptStats s = prompt_stats(q_norm);
    std::vector<double> feats{s.min, s.max, s.median, s.upward ? 1.0 : 0.0};
    for (int lag : s.top_lags) feats.push_back(static_cast<double>(lag) / static_cast<double>(q_norm.size()));
    while (feats.size() < 9) feats.push_back(0.0);
    Node* x = g.value({1, 9}, feats);
    Node* rows = nn::linear(g, x, ps.use(g, "fus.prompt.w"), ps.use(g, "fus.prompt.b"));
    return g.reshape(rows, {l_prom, d_llm});
}

inline Node* assemble_llm_input(Graph& g, Node* prompt_prefix, Node* reprogrammed) {
    if (!prompt_prefix) return reprogrammed;  // empty-prompt ablation
    if (prompt_prefix->shape[1] != reprogrammed->shape[1])
        throw std::invalid_argument("assemble_llm_input: width mismatch");
    return g.concat_rows({prompt_prefix, reprogrammed});
}

// ---------------------------------------------------------------------------
// parameter registration

struct FusionConfig {
    int d_m = 16;
    int d_llm = 32;  // D
    int n_heads = 4;
    int vocab_size = 128;    // V
    int vocab_condensed = 12;  // V'
    int l_prom = 4;
    std::uint64_t vocab_seed = 20240001;
    int p_len = 40;
};

inline void register_fusion_params(nn::ParamStore& ps, const FusionConfig& cfg, std::uint64_t seed) {
    nn::fill_scaled_normal(ps.add("fus.cross.query", {cfg.p_len, cfg.d_m}), seed, 1.0);
    nn::fill_scaled_normal(ps.add("fus.cross.wq", {cfg.d_m, cfg.d_m}), seed, 1.0 / std::sqrt(1.0 * cfg.d_m));
    nn::fill_scaled_normal(ps.add("fus.cross.wk", {cfg.d_m, cfg.d_m}), seed, 1.0 / std::sqrt(1.0 * cfg.d_m));
    nn::fill_scaled_normal(ps.add("fus.cross.wv", {cfg.d_m, cfg.d_m}), seed, 1.0 / std::sqrt(1.0 * cfg.d_m));
    nn::fill_scaled_normal(ps.add("fus.rep.lift", {cfg.d_m, cfg.d_llm}), seed,
                           1.0 / std::sqrt(1.0 * cfg.d_m));
    // the vocabulary is a fixed seeded matrix; only its condensing projection trains
    nn::fill_scaled_normal(ps.add("fus.rep.vocab", {cfg.vocab_size, cfg.d_llm}, false),
                           cfg.vocab_seed, 1.0);
    nn::fill_scaled_normal(ps.add("fus.rep.vproj", {cfg.vocab_condensed, cfg.vocab_size}), seed,
                           1.0 / std::sqrt(1.0 * cfg.vocab_size));
    nn::fill_scaled_normal(ps.add("fus.rep.wq", {cfg.d_llm, cfg.d_llm}), seed,
                           1.0 / std::sqrt(1.0 * cfg.d_llm));
    nn::fill_scaled_normal(ps.add("fus.rep.wk", {cfg.d_llm, cfg.d_llm}), seed,
                           1.0 / std::sqrt(1.0 * cfg.d_llm));
    nn::fill_scaled_normal(ps.add("fus.rep.wv", {cfg.d_llm, cfg.d_llm}), seed,
                           1.0 / std::sqrt(1.0 * cfg.d_llm));
    nn::fill_scaled_normal(ps.add("fus.prompt.w", {9, cfg.l_prom * cfg.d_llm}), seed, 1.0 / 3.0);
    nn::fill_scaled_normal(ps.add("fus.prompt.b", {1, cfg.l_prom * cfg.d_llm}), seed, 0.1);
}

}  // namespace mmwl::fusion

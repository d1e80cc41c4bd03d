#pragma once

// Oracle layer: geometric multipath channel synthesis, DFT beam codebooks,
// exhaustive beam search and the gain/accuracy metrics everything else is
// measured against. All complex arithmetic is double precision.

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace mmwl::phy {

using cplx = std::complex<double>;
inline constexpr double kPi = std::numbers::pi;
inline constexpr double kSpeedOfLight = 299792458.0;

struct ArrayConfig {
    int n_tx = 16;
    int n_rx = 4;
    double spacing_ratio = 0.5;  // d / lambda
    double carrier_hz = 28e9;

    void validate() const {
        if (n_tx < 1 || n_rx < 1) throw std::invalid_argument("ArrayConfig: antenna counts must be >= 1");
        if (!(spacing_ratio > 0.0)) throw std::invalid_argument("ArrayConfig: spacing_ratio must be > 0");
    }
    double wavelength_m() const { return kSpeedOfLight / carrier_hz; }
};

struct Path {
    cplx gain;         // complex amplitude, linear scale
    double delay_s = 0.0;
    double aod_rad = 0.0;  // departure angle at the transmit array
    double aoa_rad = 0.0;  // arrival angle at the receive array
};

using PathSet = std::vector<Path>;

struct SubcarrierGrid {
    int k_count = 64;
    double spacing_hz = 120e3;

    // baseband frequency of subcarrier k (0-based index); the grid is
    // symmetric about DC: f_k = (k+1 - (K+1)/2) * df
    double baseband_hz(int k) const {
        return (static_cast<double>(k) - (k_count - 1) / 2.0) * spacing_hz;
    }
};

struct ChannelMatrix {
    int n_rx = 0;
    int n_tx = 0;
    std::vector<cplx> m;  // row-major n_rx x n_tx
    int subcarrier_index = -1;

    ChannelMatrix() = default;
    ChannelMatrix(int rows, int cols) : n_rx(rows), n_tx(cols), m(static_cast<std::size_t>(rows) * cols) {}

    cplx& at(int r, int c) { return m[static_cast<std::size_t>(r) * n_tx + c]; }
    const cplx& at(int r, int c) const { return m[static_cast<std::size_t>(r) * n_tx + c]; }
};

struct Codebook {
    int size = 0;        // Q
    int n_antennas = 0;  // N
    std::vector<std::vector<cplx>> vectors;  // Q unit-norm vectors of length N
};

// ---------------------------------------------------------------------------

// ULA steering vector: element i = exp(j 2 pi i (d/lambda) sin(angle)).
inline std::vector<cplx> steering_vector(double angle_rad, int n_antennas, double spacing_ratio) {
    if (n_antennas < 1) throw std::invalid_argument("steering_vector: n_antennas must be >= 1");
    std::vector<cplx> v(static_cast<std::size_t>(n_antennas));
    const double base = 2.0 * kPi * spacing_ratio * std::sin(angle_rad);
    for (int i = 0; i < n_antennas; ++i) v[static_cast<std::size_t>(i)] = std::polar(1.0, base * i);
    return v;
}

// DFT beam codebook with beam centers on the uniform sin-grid
// sin(phi_q) = 2(q+0.5)/Q - 1, covering the front half-plane without
// wrap-around: element n of vector q is exp(j pi n (2(q+0.5)/Q - 1)) / sqrt(N)
// (d = lambda/2 phase progression). Beam q therefore points exactly at the
// center angle asin(2(q+0.5)/Q - 1), and for Q = N the vectors stay mutually
// orthogonal.
inline Codebook dft_codebook(int q_count, int n_antennas) {
    if (q_count < 1 || n_antennas < 1)
        throw std::invalid_argument("dft_codebook: Q and N must be >= 1");
    Codebook cb;
    cb.size = q_count;
    cb.n_antennas = n_antennas;
    cb.vectors.resize(static_cast<std::size_t>(q_count));
    const double norm = 1.0 / std::sqrt(static_cast<double>(n_antennas));
    for (int q = 0; q < q_count; ++q) {
        const double s = 2.0 * (q + 0.5) / q_count - 1.0;  // sin of the beam center
        auto& v = cb.vectors[static_cast<std::size_t>(q)];
        v.resize(static_cast<std::size_t>(n_antennas));
        for (int n = 0; n < n_antennas; ++n)
            v[static_cast<std::size_t>(n)] = std::polar(norm, kPi * n * s);
    }
    return cb;
}

namespace detail {
inline void check_finite(const PathSet& paths) {
    for (const auto& p : paths) {
        if (!std::isfinite(p.gain.real()) || !std::isfinite(p.gain.imag()) ||
            !std::isfinite(p.delay_s) || !std::isfinite(p.aod_rad) || !std::isfinite(p.aoa_rad))
            throw std::invalid_argument("synth_channel: non-finite path parameter");
        if (p.delay_s < 0.0) throw std::invalid_argument("synth_channel: negative delay");
    }
}
}  // namespace detail

// Channel assembly from precomputed per-path gain matrices:
// A_l = sqrt(Nt*Nr/L) alpha_l a_r(theta_l) a_t(phi_l)^H, then
// H_k = sum_l A_l exp(-j 2 pi f_k tau_l).
inline std::vector<ChannelMatrix> synth_channel(const PathSet& paths, const SubcarrierGrid& grid,
                                                const ArrayConfig& cfg) {
    cfg.validate();
    detail::check_finite(paths);
    const int nr = cfg.n_rx, nt = cfg.n_tx;
    std::vector<ChannelMatrix> out(static_cast<std::size_t>(grid.k_count), ChannelMatrix(nr, nt));
    for (int k = 0; k < grid.k_count; ++k) out[static_cast<std::size_t>(k)].subcarrier_index = k;
    if (paths.empty()) return out;

    const double scale = std::sqrt(static_cast<double>(nt) * nr / static_cast<double>(paths.size()));
    std::vector<std::vector<cplx>> path_mats;
    path_mats.reserve(paths.size());
    for (const auto& p : paths) {
        const auto ar = steering_vector(p.aoa_rad, nr, cfg.spacing_ratio);
        const auto at = steering_vector(p.aod_rad, nt, cfg.spacing_ratio);
        std::vector<cplx> a(static_cast<std::size_t>(nr) * nt);
        const cplx g = scale * p.gain;
        for (int r = 0; r < nr; ++r)
            for (int c = 0; c < nt; ++c)
                a[static_cast<std::size_t>(r) * nt + c] =
                    g * ar[static_cast<std::size_t>(r)] * std::conj(at[static_cast<std::size_t>(c)]);
        path_mats.push_back(std::move(a));
    }
    for (int k = 0; k < grid.k_count; ++k) {
        auto& h = out[static_cast<std::size_t>(k)];
        for (std::size_t l = 0; l < paths.size(); ++l) {
            const cplx phase = std::polar(1.0, -2.0 * kPi * grid.baseband_hz(k) * paths[l].delay_s);
            const auto& a = path_mats[l];
            for (std::size_t i = 0; i < h.m.size(); ++i) h.m[i] += a[i] * phase;
        }
    }
    return out;
}

// Direct coherent-sum assembly: for every subcarrier the per-path rank-one
// contribution is rebuilt from the steering vectors. Algebraically identical
// to synth_channel; kept as an independent route for cross-checking.
inline std::vector<ChannelMatrix> synth_channel_direct(const PathSet& paths,
                                                       const SubcarrierGrid& grid,
                                                       const ArrayConfig& cfg) {
    cfg.validate();
    detail::check_finite(paths);
    const int nr = cfg.n_rx, nt = cfg.n_tx;
    std::vector<ChannelMatrix> out(static_cast<std::size_t>(grid.k_count), ChannelMatrix(nr, nt));
    for (int k = 0; k < grid.k_count; ++k) out[static_cast<std::size_t>(k)].subcarrier_index = k;
    if (paths.empty()) return out;

    const double scale = std::sqrt(static_cast<double>(nt) * nr / static_cast<double>(paths.size()));
    for (int k = 0; k < grid.k_count; ++k) {
        auto& h = out[static_cast<std::size_t>(k)];
        const double fk = grid.baseband_hz(k);
        for (const auto& p : paths) {
            const auto ar = steering_vector(p.aoa_rad, nr, cfg.spacing_ratio);
            const auto at = steering_vector(p.aod_rad, nt, cfg.spacing_ratio);
            const cplx g = scale * p.gain * std::polar(1.0, -2.0 * kPi * fk * p.delay_s);
            for (int r = 0; r < nr; ++r)
                for (int c = 0; c < nt; ++c)
                    h.at(r, c) += g * ar[static_cast<std::size_t>(r)] * std::conj(at[static_cast<std::size_t>(c)]);
        }
    }
    return out;
}

inline ChannelMatrix avg_channel(const std::vector<ChannelMatrix>& channels) {
    if (channels.empty()) throw std::invalid_argument("avg_channel: empty channel list");
    const int nr = channels.front().n_rx, nt = channels.front().n_tx;
    ChannelMatrix acc(nr, nt);
    for (const auto& h : channels) {
        if (h.n_rx != nr || h.n_tx != nt) throw std::invalid_argument("avg_channel: shape mismatch");
        for (std::size_t i = 0; i < acc.m.size(); ++i) acc.m[i] += h.m[i];
    }
    const double inv = 1.0 / static_cast<double>(channels.size());
    for (auto& v : acc.m) v *= inv;
    return acc;
}

// ---------------------------------------------------------------------------
// exhaustive beam search and metrics

// |w(p)^H H f(q)|^2
inline double beam_pair_power(const ChannelMatrix& h, const std::vector<cplx>& w,
                              const std::vector<cplx>& f) {
    if (static_cast<int>(w.size()) != h.n_rx || static_cast<int>(f.size()) != h.n_tx)
        throw std::invalid_argument("beam_pair_power: beamformer/channel shape mismatch");
    cplx acc = 0.0;
    for (int r = 0; r < h.n_rx; ++r) {
        cplx row = 0.0;
        for (int c = 0; c < h.n_tx; ++c) row += h.at(r, c) * f[static_cast<std::size_t>(c)];
        acc += std::conj(w[static_cast<std::size_t>(r)]) * row;
    }
    return std::norm(acc);
}

struct BeamSearchResult {
    int p_star = 0;  // combiner (receive) index
    int q_star = 0;  // precoder (transmit) index
    std::vector<double> gain_table;  // row-major Q_rx x Q_tx of |w^H H f|^2
    int q_rx = 0;
    int q_tx = 0;

    double at(int p, int q) const { return gain_table[static_cast<std::size_t>(p) * q_tx + q]; }
};

// Exhaustive search over both codebooks. Ties are broken toward the smallest
// p, then the smallest q, so the oracle is deterministic.
inline BeamSearchResult optimal_beam_pair(const ChannelMatrix& h_avg, const Codebook& tx_cb,
                                          const Codebook& rx_cb) {
    if (tx_cb.n_antennas != h_avg.n_tx || rx_cb.n_antennas != h_avg.n_rx)
        throw std::invalid_argument("optimal_beam_pair: codebook/channel shape mismatch");
    BeamSearchResult res;
    res.q_rx = rx_cb.size;
    res.q_tx = tx_cb.size;
    res.gain_table.resize(static_cast<std::size_t>(rx_cb.size) * tx_cb.size);
    double best = -1.0;
    for (int p = 0; p < rx_cb.size; ++p) {
        for (int q = 0; q < tx_cb.size; ++q) {
            const double pow = beam_pair_power(h_avg, rx_cb.vectors[static_cast<std::size_t>(p)],
                                               tx_cb.vectors[static_cast<std::size_t>(q)]);
            res.gain_table[static_cast<std::size_t>(p) * tx_cb.size + q] = pow;
            if (pow > best) {
                best = pow;
                res.p_star = p;
                res.q_star = q;
            }
        }
    }
    return res;
}

// Normalized beamforming gain with the oracle combiner fixed to p_star.
// Returns exactly 1.0 when q_hat == q_star, and 1.0 by convention when the
// optimal pair carries zero power (dead channel).
inline double normalized_gain(const ChannelMatrix& h_avg, int q_hat, int p_star, int q_star,
                              const Codebook& tx_cb, const Codebook& rx_cb) {
    if (q_hat < 0 || q_hat >= tx_cb.size || q_star < 0 || q_star >= tx_cb.size ||
        p_star < 0 || p_star >= rx_cb.size)
        throw std::invalid_argument("normalized_gain: beam index out of codebook range");
    const auto& w = rx_cb.vectors[static_cast<std::size_t>(p_star)];
    const double denom = beam_pair_power(h_avg, w, tx_cb.vectors[static_cast<std::size_t>(q_star)]);
    if (denom == 0.0) return 1.0;
    const double num = beam_pair_power(h_avg, w, tx_cb.vectors[static_cast<std::size_t>(q_hat)]);
    return num / denom;
}

// Indices of the k highest entries of a power row; ties broken toward the
// smaller beam index.
inline std::vector<int> topk_beams(const double* row, int q_count, int k) {
    std::vector<int> idx(static_cast<std::size_t>(q_count));
    for (int i = 0; i < q_count; ++i) idx[static_cast<std::size_t>(i)] = i;
    const int kk = std::min(k, q_count);
    std::partial_sort(idx.begin(), idx.begin() + kk, idx.end(), [&](int a, int b) {
        if (row[a] != row[b]) return row[a] > row[b];
        return a < b;
    });
    idx.resize(static_cast<std::size_t>(kk));
    return idx;
}

// One evaluated step: the predicted transmit beam plus the gain-table row of
// the oracle combiner at that future step.
struct StepGains {
    int q_hat = 0;
    int q_star = 0;
    std::vector<double> power_row;  // Q_tx powers under w(p_star)
};

// Top-k accuracy per horizon step. predictions[sample][m] pairs a predicted
// beam with the oracle row for that step; returns acc[m][ki] for the
// requested k values.
inline std::vector<std::vector<double>> topk_accuracy(
    const std::vector<std::vector<StepGains>>& samples, const std::vector<int>& ks) {
    if (samples.empty()) throw std::invalid_argument("topk_accuracy: no samples");
    const std::size_t horizon = samples.front().size();
    std::vector<std::vector<double>> acc(horizon, std::vector<double>(ks.size(), 0.0));
    for (const auto& steps : samples) {
        if (steps.size() != horizon) throw std::invalid_argument("topk_accuracy: ragged horizon");
        for (std::size_t m = 0; m < horizon; ++m) {
            const auto& sg = steps[m];
            for (std::size_t ki = 0; ki < ks.size(); ++ki) {
                const auto top = topk_beams(sg.power_row.data(), static_cast<int>(sg.power_row.size()), ks[ki]);
                if (std::find(top.begin(), top.end(), sg.q_hat) != top.end())
                    acc[m][ki] += 1.0;
            }
        }
    }
    for (auto& row : acc)
        for (auto& v : row) v /= static_cast<double>(samples.size());
    return acc;
}

}  // namespace mmwl::phy

#pragma once

// Beam-index <-> angle mapping and beam-guided spatial masks over the BEV
// grid. Masking works in sin-space: the Q beams tile [-1, 1) with half-open
// intervals of width exactly 2/Q, so every front-half-plane cell belongs to
// exactly one beam.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmwl/common.hpp"

namespace mmwl::geometry {

inline constexpr double kPi = 3.14159265358979323846;

struct BevGridSpec {
    int height_cells = 16;   // rows, indexed i, along +y
    int width_cells = 16;    // cols, indexed j, along +x
    double cell_size_m = 5.0;
    double origin_x_m = 0.0;  // world coordinates of the (0,0) cell corner
    double origin_y_m = 0.0;
    double rsu_x_m = 0.0;
    double rsu_y_m = 0.0;
    double rsu_heading_rad = 0.0;  // boresight direction in world frame

    void validate() const {
        if (height_cells < 1 || width_cells < 1)
            throw std::invalid_argument("BevGridSpec: grid dimensions must be >= 1");
        if (!(cell_size_m > 0.0)) throw std::invalid_argument("BevGridSpec: cell_size_m must be > 0");
    }
    int cell_count() const { return height_cells * width_cells; }
};

// Per-cell signed angle relative to the RSU boresight plus sector flags.
struct AngleGrid {
    int height = 0;
    int width = 0;
    std::vector<double> angle_rad;   // in (-pi, pi]
    std::vector<unsigned char> in_sector;   // |angle| <= pi/2
    std::vector<unsigned char> degenerate;  // cell center coincides with the RSU

    double at(int i, int j) const { return angle_rad[static_cast<std::size_t>(i) * width + j]; }
    bool sector(int i, int j) const { return in_sector[static_cast<std::size_t>(i) * width + j] != 0; }
};

struct BeamMask {
    int height = 0;
    int width = 0;
    std::vector<unsigned char> bits;  // 0 or 1, row-major

    bool at(int i, int j) const { return bits[static_cast<std::size_t>(i) * width + j] != 0; }
    int count() const {
        int c = 0;
        for (auto b : bits) c += b;
        return c;
    }
};

// Center pointing angle of beam q: asin(2(q+0.5)/Q - 1).
inline double beam_center_angle(int q, int q_count) {
    if (q < 0 || q >= q_count) throw std::invalid_argument("beam_center_angle: q out of range");
    return std::asin(2.0 * (q + 0.5) / q_count - 1.0);
}

// Half-open sin-space interval [2q/Q - 1, 2(q+1)/Q - 1) owned by beam q. The
// intervals tile [-1, 1) exactly; the adaptive angular half-width of the
// paper is recoverable as half the arcsin-image width.
inline std::pair<double, double> beam_sin_interval(int q, int q_count) {
    if (q < 0 || q >= q_count) throw std::invalid_argument("beam_sin_interval: q out of range");
    return {2.0 * q / q_count - 1.0, 2.0 * (q + 1) / q_count - 1.0};
}

inline double wrap_angle(double a) {
    while (a > kPi) a -= 2.0 * kPi;
    while (a <= -kPi) a += 2.0 * kPi;
    return a;
}

inline AngleGrid bev_angle_grid(const BevGridSpec& spec) {
    spec.validate();
    AngleGrid g;
    g.height = spec.height_cells;
    g.width = spec.width_cells;
    const std::size_t n = static_cast<std::size_t>(spec.cell_count());
    g.angle_rad.resize(n);
    g.in_sector.resize(n);
    g.degenerate.assign(n, 0);
    for (int i = 0; i < spec.height_cells; ++i) {
        for (int j = 0; j < spec.width_cells; ++j) {
            const double cx = spec.origin_x_m + (j + 0.5) * spec.cell_size_m;
            const double cy = spec.origin_y_m + (i + 0.5) * spec.cell_size_m;
            const double dx = cx - spec.rsu_x_m;
            const double dy = cy - spec.rsu_y_m;
            const std::size_t idx = static_cast<std::size_t>(i) * spec.width_cells + j;
            if (dx == 0.0 && dy == 0.0) {
                g.angle_rad[idx] = 0.0;
                g.in_sector[idx] = 1;
                g.degenerate[idx] = 1;
                continue;
            }
            const double a = wrap_angle(std::atan2(dy, dx) - spec.rsu_heading_rad);
            g.angle_rad[idx] = a;
            g.in_sector[idx] = std::fabs(a) <= kPi / 2.0 ? 1 : 0;
        }
    }
    return g;
}

// Binary mask of beam q over the grid: 1 iff the cell is in-sector and
// sin(angle) falls in the beam's sin interval. The top beam closes its upper
// bound so a cell at exactly +90 degrees still belongs to one beam.
inline BeamMask beam_mask(int q, int q_count, const AngleGrid& grid) {
    const auto [lo, hi] = beam_sin_interval(q, q_count);
    BeamMask m;
    m.height = grid.height;
    m.width = grid.width;
    m.bits.assign(grid.angle_rad.size(), 0);
    const bool top = (q == q_count - 1);
    for (std::size_t idx = 0; idx < grid.angle_rad.size(); ++idx) {
        if (!grid.in_sector[idx]) continue;
        const double s = std::sin(grid.angle_rad[idx]);
        const bool inside = top ? (s >= lo && s <= hi) : (s >= lo && s < hi);
        m.bits[idx] = inside ? 1 : 0;
    }
    return m;
}

// Zero out the feature vectors of masked-out cells; features are laid out
// channel-major (C x H x W).
inline std::vector<double> apply_mask(const std::vector<double>& features, int channels,
                                      const BeamMask& mask) {
    const std::size_t cells = mask.bits.size();
    if (features.size() != cells * static_cast<std::size_t>(channels))
        throw std::invalid_argument("apply_mask: feature/mask shape mismatch");
    std::vector<double> out(features.size());
    for (int c = 0; c < channels; ++c) {
        const std::size_t base = static_cast<std::size_t>(c) * cells;
        for (std::size_t idx = 0; idx < cells; ++idx)
            out[base + idx] = mask.bits[idx] ? features[base + idx] : 0.0;
    }
    return out;
}

inline void write_mask_pgm(const std::string& path, const BeamMask& mask) {
    std::vector<unsigned char> bytes(mask.bits.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask.bits[i] ? 255 : 0;
    mmwl::write_pgm(path, mask.height, mask.width, bytes);
}

}  // namespace mmwl::geometry

#pragma once

// LiDAR point cloud container shared by the scene renderer, the weather
// impairment transforms and the pillar encoder.

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace mmwl {

struct PointCloud {
    // sensor origin, required to move points along their rays
    double origin_x = 0.0;
    double origin_y = 0.0;
    double origin_z = 0.0;
    std::vector<double> xyzi;  // flat [x, y, z, intensity] per point

    std::size_t size() const { return xyzi.size() / 4; }

    void push(double x, double y, double z, double intensity) {
        xyzi.push_back(x);
        xyzi.push_back(y);
        xyzi.push_back(z);
        xyzi.push_back(intensity);
    }

    double x(std::size_t i) const { return xyzi[i * 4 + 0]; }
    double y(std::size_t i) const { return xyzi[i * 4 + 1]; }
    double z(std::size_t i) const { return xyzi[i * 4 + 2]; }
    double intensity(std::size_t i) const { return xyzi[i * 4 + 3]; }
};

}  // namespace mmwl

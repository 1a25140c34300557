#pragma once

#include "agcm/roimaps.hpp"

#include <algorithm>
#include <vector>

namespace agcm::testing {

// Literal block sum: for each patch cell, sum over x then y of the block.
inline Grid block_sum_oracle(const Grid& g, std::size_t sx, std::size_t sy)
{
    Grid out(g.rows / sy, g.cols / sx);
    for (std::size_t i = 0; i < out.rows; ++i) {
        for (std::size_t j = 0; j < out.cols; ++j) {
            double s = 0.0;
            for (std::size_t x = j * sx; x < j * sx + sx; ++x)
                for (std::size_t y = i * sy; y < i * sy + sy; ++y) s += g.values[y * g.cols + x];
            out.values[i * out.cols + j] = (1.0 / static_cast<double>(sx * sy)) * s;
        }
    }
    return out;
}

// Indicator-weighted sum then min-max normalisation, cell by cell; all
// zeros when the indicator sum is empty or flat.
inline std::vector<double> weighted_map_oracle(const std::vector<std::vector<double>>& maps,
                                               const std::vector<double>& probs, double rho)
{
    const std::size_t cells = maps.front().size();
    std::vector<double> sum(cells, 0.0);
    bool included = false;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        const double indicator = probs[i] >= rho ? 1.0 : 0.0;
        included = included || indicator == 1.0;
        for (std::size_t c = 0; c < cells; ++c) sum[c] += maps[i][c] * probs[i] * indicator;
    }
    if (!included) return std::vector<double>(cells, 0.0);
    double lo = sum[0], hi = sum[0];
    for (const double v : sum) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi == lo) return std::vector<double>(cells, 0.0);
    std::vector<double> out(cells);
    for (std::size_t c = 0; c < cells; ++c) out[c] = (sum[c] - lo) / (hi - lo);
    return out;
}

} // namespace agcm::testing

#pragma once

#include "agcm/concepts.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

namespace agcm {

struct Point {
    double x = 0.0; // column, pixels
    double y = 0.0; // row, pixels

    bool operator==(const Point&) const = default;
};

struct LandmarkSet {
    std::vector<Point> points;
    std::size_t width = 0;
    std::size_t height = 0;

    void validate() const
    {
        for (std::size_t i = 0; i < points.size(); ++i) {
            const auto& p = points[i];
            if (!(p.x >= 0.0 && p.x < static_cast<double>(width) && p.y >= 0.0 && p.y < static_cast<double>(height))) {
                throw ConfigError("landmark " + std::to_string(i) + " (" + std::to_string(p.x) + ", " +
                                  std::to_string(p.y) + ") outside image " + std::to_string(width) + "x" +
                                  std::to_string(height));
            }
        }
    }
};

/// Row-major real grid.
struct Grid {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    Grid() = default;
    Grid(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}
    Grid(std::size_t r, std::size_t c, std::vector<double> v) : rows(r), cols(c), values(std::move(v))
    {
        if (values.size() != r * c) throw ShapeError("grid values do not match " + std::to_string(r) + "x" + std::to_string(c));
    }

    double& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
    std::size_t size() const { return values.size(); }

    double max() const { return values.empty() ? 0.0 : *std::max_element(values.begin(), values.end()); }

    double mean() const
    {
        double s = 0.0;
        for (const double v : values) s += v;
        return values.empty() ? 0.0 : s / static_cast<double>(values.size());
    }

    bool operator==(const Grid&) const = default;
};

struct RoiMap {
    std::size_t concept_index = 0;
    Grid grid; // image resolution
};

struct PatchMap {
    std::size_t concept_index = 0;
    Grid grid; // patch resolution
};

/// Width of the linear falloff band outside each ROI disk, in pixels.
inline constexpr double kRoiFalloff = 2.0;

inline double default_roi_radius(std::size_t image_width) { return 0.12 * static_cast<double>(image_width); }

/// Value of one disk at distance `d` from its centre: 1 inside the radius,
/// then a linear ramp down to 0 across the falloff band.
inline double disk_profile(double d, double radius)
{
    if (d <= radius) return 1.0;
    return std::clamp((radius + kRoiFalloff - d) / kRoiFalloff, 0.0, 1.0);
}

inline std::vector<Point> roi_centers(const LandmarkSet& landmarks, const ConceptSpec& spec)
{
    if (spec.landmark_subset.empty()) {
        throw ConfigError("concept " + spec.name + " has an empty landmark subset");
    }
    std::vector<Point> centers;
    for (const auto idx : spec.landmark_subset) {
        if (idx >= landmarks.points.size()) {
            throw ConfigError("concept " + spec.name + " references landmark " + std::to_string(idx) + " of " +
                              std::to_string(landmarks.points.size()));
        }
        centers.push_back(landmarks.points[idx]);
    }
    if (spec.roi_mode == RoiMode::Centroid) {
        Point c;
        for (const auto& p : centers) {
            c.x += p.x;
            c.y += p.y;
        }
        c.x /= static_cast<double>(centers.size());
        c.y /= static_cast<double>(centers.size());
        centers = {c};
    }
    return centers;
}

/// Region of interest for one concept: union (pointwise max) of disks of
/// `radius` pixels around the concept's landmarks, with a 2-pixel falloff.
/// Pixel (col, row) is evaluated at its integer coordinates.
inline RoiMap roi_from_landmarks(const LandmarkSet& landmarks, const ConceptSpec& spec, std::size_t concept_index,
                                 double radius)
{
    if (!spec.roi_bearing) {
        throw ConfigError("concept " + spec.name + " is not ROI-bearing");
    }
    if (!(radius > 0.0)) {
        throw ConfigError("ROI radius must be positive");
    }
    const auto centers = roi_centers(landmarks, spec);
    RoiMap out{concept_index, Grid(landmarks.height, landmarks.width)};
    for (std::size_t r = 0; r < landmarks.height; ++r) {
        for (std::size_t c = 0; c < landmarks.width; ++c) {
            double v = 0.0;
            for (const auto& p : centers) {
                const double dx = static_cast<double>(c) - p.x, dy = static_cast<double>(r) - p.y;
                const double d = std::sqrt(dx * dx + dy * dy);
                v = std::max(v, disk_profile(d, radius));
            }
            out.grid.at(r, c) = v;
        }
    }
    return out;
}

/// Block-average downsampling of an image-resolution map to patch
/// resolution: each patch cell is (1 / (S_x S_y)) times the sum over its
/// S_x x S_y source block, summed column-major within the block.
inline PatchMap patchify(const RoiMap& roi, std::size_t scale_x, std::size_t scale_y)
{
    const auto& g = roi.grid;
    if (scale_x == 0 || scale_y == 0 || g.cols % scale_x != 0 || g.rows % scale_y != 0) {
        throw ConfigError("patchify: image extents " + std::to_string(g.cols) + "x" + std::to_string(g.rows) +
                          " are not divisible by scale factors " + std::to_string(scale_x) + "x" +
                          std::to_string(scale_y));
    }
    const std::size_t pw = g.cols / scale_x;
    const std::size_t ph = g.rows / scale_y;
    const double norm = 1.0 / static_cast<double>(scale_x * scale_y);
    PatchMap out{roi.concept_index, Grid(ph, pw)};
    for (std::size_t py = 0; py < ph; ++py) {
        for (std::size_t px = 0; px < pw; ++px) {
            double s = 0.0;
            for (std::size_t x = px * scale_x; x < (px + 1) * scale_x; ++x) {
                for (std::size_t y = py * scale_y; y < (py + 1) * scale_y; ++y) {
                    s += g.at(y, x);
                }
            }
            out.grid.at(py, px) = norm * s;
        }
    }
    return out;
}

/// Affine map of a raw measurement onto [0, 1] using the concept's bounds,
/// clamped. Gaze and head-pose concepts declare bounds so that 1 is fully
/// forward and 0 fully averted.
inline double scalar_concept_value(double raw, const ConceptSpec& spec)
{
    if (!spec.norm_bounds) {
        throw ConfigError("concept " + spec.name + " has no normalisation bounds");
    }
    const auto [lo, hi] = *spec.norm_bounds;
    if (lo == hi) {
        throw ConfigError("concept " + spec.name + ": normalisation bounds have min == max");
    }
    return std::clamp((raw - lo) / (hi - lo), 0.0, 1.0);
}

/// Shortest round-trip decimal form, so CSV output is byte-stable.
inline std::string format_double(double v)
{
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline void write_grid_csv(const std::string& path, const Grid& grid)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    for (std::size_t r = 0; r < grid.rows; ++r) {
        for (std::size_t c = 0; c < grid.cols; ++c) {
            out << (c ? "," : "") << format_double(grid.at(r, c));
        }
        out << '\n';
    }
}

} // namespace agcm

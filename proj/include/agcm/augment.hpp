#pragma once

#include "agcm/dataset.hpp"
#include "agcm/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace agcm {

struct AugmentOps {
    double hflip_p = 0.5;
    double max_degrees = 10.0;
    double erase_area = 0.1; // fraction of the image; 0 disables
};

inline ImageGrid hflip_image(const ImageGrid& img)
{
    ImageGrid out = img;
    for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t r = 0; r < img.height; ++r)
            for (std::size_t x = 0; x < img.width; ++x) out.at(c, r, x) = img.at(c, r, img.width - 1 - x);
    return out;
}

inline LandmarkSet hflip_landmarks(LandmarkSet lm)
{
    for (auto& p : lm.points) p.x = static_cast<double>(lm.width - 1) - p.x;
    return lm;
}

/// Rotation about the image centre by `degrees` (counter-clockwise on screen),
/// bilinear resampling, zero outside the source.
inline ImageGrid rotate_image(const ImageGrid& img, double degrees)
{
    if (degrees == 0.0) return img;
    const double th = degrees * std::numbers::pi / 180.0;
    const double c = std::cos(th), s = std::sin(th);
    const double cx = (static_cast<double>(img.width) - 1.0) / 2.0;
    const double cy = (static_cast<double>(img.height) - 1.0) / 2.0;
    ImageGrid out(img.channels, img.height, img.width);
    const auto W = static_cast<long>(img.width), H = static_cast<long>(img.height);
    for (std::size_t r = 0; r < img.height; ++r) {
        for (std::size_t x = 0; x < img.width; ++x) {
            // inverse map: output pixel -> source coordinate
            const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(r) - cy;
            const double sx = c * dx - s * dy + cx;
            const double sy = s * dx + c * dy + cy;
            const long x0 = static_cast<long>(std::floor(sx)), y0 = static_cast<long>(std::floor(sy));
            const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
            for (std::size_t ch = 0; ch < img.channels; ++ch) {
                auto px = [&](long yy, long xx) {
                    if (xx < 0 || yy < 0 || xx >= W || yy >= H) return 0.0;
                    return img.at(ch, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
                };
                out.at(ch, r, x) = (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
                                   fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
            }
        }
    }
    return out;
}

/// Forward map of rotate_image for landmark coordinates.
inline LandmarkSet rotate_landmarks(LandmarkSet lm, double degrees)
{
    if (degrees == 0.0) return lm;
    const double th = degrees * std::numbers::pi / 180.0;
    const double c = std::cos(th), s = std::sin(th);
    const double cx = (static_cast<double>(lm.width) - 1.0) / 2.0;
    const double cy = (static_cast<double>(lm.height) - 1.0) / 2.0;
    for (auto& p : lm.points) {
        const double dx = p.x - cx, dy = p.y - cy;
        p.x = c * dx + s * dy + cx;
        p.y = -s * dx + c * dy + cy;
    }
    return lm;
}

struct Rect {
    std::size_t x = 0, y = 0, w = 0, h = 0;
};

/// Rectangle covering about `area` of the image, aspect ratio in [1/2, 2].
inline Rect erase_rect(std::size_t width, std::size_t height, double area, CounterRng& rng)
{
    const double target = area * static_cast<double>(width * height);
    const double aspect = std::exp(rng.uniform(std::log(0.5), std::log(2.0)));
    auto w = static_cast<std::size_t>(std::lround(std::sqrt(target * aspect)));
    auto h = static_cast<std::size_t>(std::lround(std::sqrt(target / aspect)));
    w = std::clamp<std::size_t>(w, 1, width);
    h = std::clamp<std::size_t>(h, 1, height);
    Rect r{0, 0, w, h};
    r.x = static_cast<std::size_t>(rng.below(width - w + 1));
    r.y = static_cast<std::size_t>(rng.below(height - h + 1));
    return r;
}

inline void fill_noise(ImageGrid& img, const Rect& r, CounterRng& rng)
{
    for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t y = r.y; y < r.y + r.h; ++y)
            for (std::size_t x = r.x; x < r.x + r.w; ++x) img.at(c, y, x) = rng.uniform();
}

/// Random flip, rotation and erasing. Labels are untouched; ground-truth
/// patch maps are rebuilt from the transformed landmarks.
inline Sample augment(const Sample& in, const AugmentOps& ops, const ConceptSet& concepts, std::size_t patch,
                      double radius, std::uint64_t key)
{
    CounterRng rng(key);
    Sample s = in;
    bool moved = false;
    if (ops.hflip_p > 0.0 && rng.bernoulli(ops.hflip_p)) {
        s.image = hflip_image(s.image);
        s.landmarks = hflip_landmarks(s.landmarks);
        moved = true;
    }
    const double deg = ops.max_degrees > 0.0 ? rng.uniform(-ops.max_degrees, ops.max_degrees) : 0.0;
    if (deg != 0.0) {
        s.image = rotate_image(s.image, deg);
        s.landmarks = rotate_landmarks(s.landmarks, deg);
        moved = true;
    }
    if (ops.erase_area > 0.0) {
        const auto r = erase_rect(s.image.width, s.image.height, ops.erase_area, rng);
        fill_noise(s.image, r, rng);
    }
    if (moved) attach_patch_maps(s, concepts, patch, radius);
    return s;
}

} // namespace agcm

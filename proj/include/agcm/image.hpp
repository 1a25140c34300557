#pragma once

#include "agcm/array.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

namespace agcm {

/// channels x height x width intensities in [0, 1], channel-major.
struct ImageGrid {
    std::size_t channels = 1;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> values;

    ImageGrid() = default;
    ImageGrid(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0)
        : channels(c), height(h), width(w), values(c * h * w, fill)
    {
    }

    double& at(std::size_t c, std::size_t r, std::size_t x) { return values[(c * height + r) * width + x]; }
    double at(std::size_t c, std::size_t r, std::size_t x) const { return values[(c * height + r) * width + x]; }

    bool operator==(const ImageGrid&) const = default;
};

/// Rounds every intensity to the nearest 1/255 step, matching what a PPM
/// round trip stores.
inline void quantize8(ImageGrid& img)
{
    for (auto& v : img.values) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
}

/// Flattens an image into patch tokens, [H_p * W_p, C * P * P]. Patches are
/// row-major; inside a patch the order is channel, row, column.
inline Array extract_patches(const ImageGrid& img, std::size_t patch)
{
    if (patch == 0 || img.height % patch != 0 || img.width % patch != 0) {
        throw ShapeError("extract_patches: image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                         " not divisible by patch " + std::to_string(patch));
    }
    const std::size_t ph = img.height / patch, pw = img.width / patch;
    const std::size_t dim = img.channels * patch * patch;
    Array out({ph * pw, dim});
    for (std::size_t py = 0; py < ph; ++py) {
        for (std::size_t px = 0; px < pw; ++px) {
            double* row = out.data() + (py * pw + px) * dim;
            std::size_t k = 0;
            for (std::size_t c = 0; c < img.channels; ++c) {
                for (std::size_t dy = 0; dy < patch; ++dy) {
                    for (std::size_t dx = 0; dx < patch; ++dx) {
                        row[k++] = img.at(c, py * patch + dy, px * patch + dx);
                    }
                }
            }
        }
    }
    return out;
}

inline std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

/// Binary PPM (P6). Single-channel images are written as equal RGB.
inline void write_ppm(const std::string& path, const ImageGrid& img)
{
    if (img.channels != 1 && img.channels != 3) {
        throw ConfigError("write_ppm: only 1 or 3 channels supported");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
    std::vector<char> bytes;
    bytes.reserve(img.width * img.height * 3);
    for (std::size_t r = 0; r < img.height; ++r) {
        for (std::size_t x = 0; x < img.width; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                const std::size_t src = img.channels == 1 ? 0 : c;
                bytes.push_back(static_cast<char>(to_byte(img.at(src, r, x))));
            }
        }
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + path);
}

/// Reads a P6 file into `channels` channels (1 keeps the red channel).
inline ImageGrid read_ppm(const std::string& path, std::size_t channels)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read image " + path);
    std::string magic;
    std::size_t w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (magic != "P6" || maxval != 255 || w == 0 || h == 0) {
        throw ConfigError("unsupported PPM header in " + path);
    }
    in.get();
    std::vector<unsigned char> bytes(w * h * 3);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw ConfigError("truncated PPM " + path);
    ImageGrid img(channels, h, w);
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < channels; ++c) {
                img.at(c, r, x) = bytes[(r * w + x) * 3 + c] / 255.0;
            }
        }
    }
    return img;
}

} // namespace agcm

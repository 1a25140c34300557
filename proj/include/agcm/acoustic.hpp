#pragma once

#include "agcm/concepts.hpp"
#include "agcm/roimaps.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace agcm {

inline constexpr std::size_t kClipFrames = 30;
inline constexpr double kFrameStrideMs = 33.0;

/// Raw per-frame measurements of one clip.
struct AcousticTrack {
    std::vector<double> pitch;    // Hz, 0 when unvoiced
    std::vector<double> loudness; // dB above silence
    std::vector<double> jitter;   // percent
    std::vector<double> rate;     // syllables per second

    std::size_t frames() const { return pitch.size(); }

    void validate() const
    {
        const auto k = pitch.size();
        if (k == 0) throw ConfigError("acoustic track is empty");
        if (loudness.size() != k || jitter.size() != k || rate.size() != k) {
            throw ShapeError("acoustic track channels differ in length");
        }
    }

    bool silent() const
    {
        return std::all_of(loudness.begin(), loudness.end(), [](double v) { return v == 0.0; });
    }
};

inline std::vector<ConceptSpec> default_acoustic_specs()
{
    auto spec = [](std::string name, double lo, double hi) {
        ConceptSpec c;
        c.name = std::move(name);
        c.modality = kAcoustic;
        c.kind = ConceptKind::Continuous;
        c.norm_bounds = NormBounds{lo, hi};
        return c;
    };
    return {spec("pitch", 80.0, 300.0),   spec("pitch_variation", 0.0, 20.0),   spec("jitter", 0.0, 100.0),
            spec("loudness", 0.0, 80.0), spec("loudness_variation", 0.0, 10.0), spec("speech_rate", 0.0, 8.0)};
}

namespace detail {

inline double mean_of(const std::vector<double>& v)
{
    double s = 0.0;
    for (const double x : v) s += x;
    return s / static_cast<double>(v.size());
}

inline double mean_abs_diff(const std::vector<double>& v)
{
    if (v.size() < 2) return 0.0;
    double s = 0.0;
    for (std::size_t j = 1; j < v.size(); ++j) s += std::abs(v[j] - v[j - 1]);
    return s / static_cast<double>(v.size() - 1);
}

} // namespace detail

/// Concept targets in [0, 1] for every concept of `concepts` (acoustic
/// modality, recognised by name). A fully silent clip has pitch and
/// loudness 0.
inline std::vector<double> derive_acoustic_labels(const AcousticTrack& track, const ConceptSet& concepts)
{
    track.validate();
    const bool silent = track.silent();
    std::vector<double> out;
    for (const auto& c : concepts.specs()) {
        if (c.name == "jitter") {
            out.push_back(std::clamp(detail::mean_of(track.jitter) / 100.0, 0.0, 1.0));
            continue;
        }
        double raw = 0.0;
        if (c.name == "pitch") raw = detail::mean_of(track.pitch);
        else if (c.name == "pitch_variation") raw = detail::mean_abs_diff(track.pitch);
        else if (c.name == "loudness") raw = detail::mean_of(track.loudness);
        else if (c.name == "loudness_variation") raw = detail::mean_abs_diff(track.loudness);
        else if (c.name == "speech_rate") raw = detail::mean_of(track.rate);
        else throw ConfigError("no acoustic rule for concept " + c.name);
        double v = scalar_concept_value(raw, c);
        if (silent && (c.name == "pitch" || c.name == "loudness")) v = 0.0;
        out.push_back(v);
    }
    return out;
}

/// Fixed-length descriptor: the four channels scaled by their bounds,
/// channel-major (pitch, loudness, jitter, rate), k values each.
inline std::vector<double> acoustic_descriptor(const AcousticTrack& track, const ConceptSet& concepts)
{
    track.validate();
    const auto& pitch = concepts[concepts.index_of("pitch")];
    const auto& loud = concepts[concepts.index_of("loudness")];
    const auto& rate = concepts[concepts.index_of("speech_rate")];
    std::vector<double> out;
    out.reserve(4 * track.frames());
    for (const double v : track.pitch) out.push_back(scalar_concept_value(v, pitch));
    for (const double v : track.loudness) out.push_back(scalar_concept_value(v, loud));
    for (const double v : track.jitter) out.push_back(std::clamp(v / 100.0, 0.0, 1.0));
    for (const double v : track.rate) out.push_back(scalar_concept_value(v, rate));
    return out;
}

} // namespace agcm

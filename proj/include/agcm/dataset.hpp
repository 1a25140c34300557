#pragma once

#include "agcm/acg.hpp"
#include "agcm/image.hpp"
#include "agcm/roimaps.hpp"

#include <span>
#include <string>
#include <vector>

namespace agcm {

/// One visual frame with its supervision.
struct Sample {
    std::string id;
    std::string split; // train / val / test
    ImageGrid image;
    LandmarkSet landmarks;
    std::vector<double> concepts; // one label in [0, 1] per visual concept
    int label = 0;                // classification target
    double target = 0.0;          // regression target
    /// Ground-truth patch maps per visual concept; an empty grid marks a
    /// concept without a map.
    std::vector<Grid> patch_maps;
};

/// Recomputes the cached ground-truth patch maps from the landmarks.
inline void attach_patch_maps(Sample& s, const ConceptSet& concepts, std::size_t patch, double radius)
{
    s.patch_maps.assign(concepts.size(), Grid{});
    for (std::size_t i = 0; i < concepts.size(); ++i) {
        if (!concepts[i].roi_bearing) continue;
        const auto roi = roi_from_landmarks(s.landmarks, concepts[i], i, radius);
        s.patch_maps[i] = patchify(roi, patch, patch).grid;
    }
}

struct VisualBatch {
    Array patches; // [B * P, patch_dim]
    std::size_t size = 0;
    VisualTargets targets;
};

inline VisualBatch make_batch(const ModelConfig& cfg, std::span<const Sample* const> samples)
{
    const auto B = samples.size();
    const auto n = cfg.n_concepts();
    const auto P = cfg.num_patches();
    const auto pd = cfg.patch_dim();
    VisualBatch batch;
    batch.size = B;
    batch.patches = Array({B * P, pd});
    batch.targets.regression = Array({B});
    batch.targets.concepts = Array({n * B});
    batch.targets.maps = Array({n * B, P});
    batch.targets.map_mask = Array({n * B});
    for (std::size_t b = 0; b < B; ++b) {
        const Sample& s = *samples[b];
        if (s.image.channels != cfg.channels || s.image.height != cfg.image_height || s.image.width != cfg.image_width) {
            throw ShapeError("sample " + s.id + ": image " + std::to_string(s.image.channels) + "x" +
                             std::to_string(s.image.height) + "x" + std::to_string(s.image.width) +
                             " does not match the model configuration");
        }
        if (s.concepts.size() != n) {
            throw ShapeError("sample " + s.id + ": " + std::to_string(s.concepts.size()) + " concept labels, expected " +
                             std::to_string(n));
        }
        const auto tokens = extract_patches(s.image, cfg.patch);
        std::copy(tokens.values().begin(), tokens.values().end(), batch.patches.data() + b * P * pd);
        batch.targets.labels.push_back(s.label);
        batch.targets.regression[b] = s.target;
        for (std::size_t i = 0; i < n; ++i) {
            batch.targets.concepts[i * B + b] = s.concepts[i];
            if (i < s.patch_maps.size() && s.patch_maps[i].size() == P && s.patch_maps[i].max() > 0.0) {
                std::copy(s.patch_maps[i].values.begin(), s.patch_maps[i].values.end(),
                          batch.targets.maps.data() + (i * B + b) * P);
                batch.targets.map_mask[i * B + b] = 1.0;
            }
        }
    }
    return batch;
}

/// Pointers to the samples of one split, in dataset order.
inline std::vector<const Sample*> split_view(const std::vector<Sample>& samples, const std::string& split)
{
    std::vector<const Sample*> out;
    for (const auto& s : samples) {
        if (s.split == split) out.push_back(&s);
    }
    return out;
}

} // namespace agcm

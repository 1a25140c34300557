#pragma once

#include "agcm/synthdata.hpp"
#include "agcm/train.hpp"

#include <vector>

namespace agcm::testing {

/// 32x32 plant with three sites and three classes, small enough to train in
/// seconds.
inline PlantSpec tiny_plant()
{
    PlantSpec p;
    p.width = p.height = 32;
    p.patch = 8;
    p.motif_radius = 3.0;
    p.global_jitter = 1.0;
    p.landmark_jitter = 0.5;
    p.motif_gain = 0.6;
    p.concepts = {{"left", {6.0, 8.0}, Motif::Ring}, {"right", {25.0, 8.0}, Motif::Cross},
                  {"bottom", {16.0, 25.0}, Motif::BarH}};
    p.classes = {{"l", {{{0}, 1.0}}}, {"r", {{{1}, 1.0}}}, {"lb", {{{0, 2}, 1.0}}}};
    p.acoustic.visual_classes = {0, 1};
    return p;
}

inline ModelConfig tiny_model(const Dataset& d)
{
    ModelConfig c;
    c.d_model = 16;
    c.backbone_layers = 1;
    c.backbone_heads = 2;
    c.mlp_hidden = 16;
    c.concept_embed = 4;
    c.cacm_hidden = 4;
    return d.model_config(c);
}

inline std::vector<const Sample*> split_ptrs(const Dataset& d, const std::string& split)
{
    std::vector<const Sample*> out;
    for (const auto& s : d.samples) {
        if (s.split == split) out.push_back(&s);
    }
    return out;
}

} // namespace agcm::testing

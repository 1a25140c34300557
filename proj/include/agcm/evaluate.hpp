#pragma once

#include "agcm/metrics.hpp"
#include "agcm/train.hpp"

#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace agcm {

/// Cosine between a predicted attention row and a ground-truth map; 0 when
/// either is all zeros.
inline double map_cosine(const double* attn, const Grid& truth)
{
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t p = 0; p < truth.size(); ++p) {
        dot += attn[p] * truth.values[p];
        na += attn[p] * attn[p];
        nb += truth.values[p] * truth.values[p];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / std::sqrt(na * nb);
}

/// Mean map cosine over (sample, concept) pairs whose concept is active and
/// carries a ground-truth map. Per-concept means go to `per_concept` when
/// given (NaN for concepts never active).
inline double mean_map_cosine(const VisualPredictions& pr, std::span<const Sample* const> samples,
                              std::vector<double>* per_concept = nullptr)
{
    if (pr.count == 0) return 0.0;
    const auto n = pr.attn.dim(1), P = pr.attn.dim(2);
    std::vector<double> sum(n, 0.0);
    std::vector<std::size_t> count(n, 0);
    for (std::size_t s = 0; s < samples.size(); ++s) {
        for (std::size_t i = 0; i < n; ++i) {
            const auto& truth = samples[s]->patch_maps.at(i);
            if (truth.size() == 0 || samples[s]->concepts.at(i) < 0.5) continue;
            if (truth.size() != P) throw ShapeError("map cosine: ground-truth map does not match the patch grid");
            sum[i] += map_cosine(pr.attn.data() + (s * n + i) * P, truth);
            ++count[i];
        }
    }
    double total = 0.0;
    std::size_t pairs = 0;
    if (per_concept) per_concept->assign(n, std::nan(""));
    for (std::size_t i = 0; i < n; ++i) {
        total += sum[i];
        pairs += count[i];
        if (per_concept && count[i]) (*per_concept)[i] = sum[i] / static_cast<double>(count[i]);
    }
    return pairs ? total / static_cast<double>(pairs) : 0.0;
}

/// Labels of the visual concepts as an [N, n] array.
inline Array concept_label_matrix(std::span<const Sample* const> samples, std::size_t n)
{
    Array y({samples.size(), n});
    for (std::size_t s = 0; s < samples.size(); ++s) {
        for (std::size_t i = 0; i < n; ++i) y.at(s, i) = samples[s]->concepts.at(i);
    }
    return y;
}

inline EvalReport evaluate_visual(const VisualModel& model, std::span<const Sample* const> samples,
                                  const std::string& split, std::uint64_t seed)
{
    if (samples.empty()) throw ConfigError("evaluation split '" + split + "' is empty");
    const auto& cfg = model.config();
    const auto n = cfg.n_concepts();
    const auto pr = predict(model, samples);
    EvalReport r;
    r.split = split;
    r.seed = seed;
    if (cfg.task == TaskKind::Classification) {
        std::vector<int> labels;
        for (const auto* s : samples) labels.push_back(s->label);
        r.classification = classification_metrics(pr.predicted, labels, cfg.n_classes);
    } else {
        std::vector<double> out, target;
        for (std::size_t s = 0; s < samples.size(); ++s) {
            out.push_back(pr.task_out.at(s, 0));
            target.push_back(samples[s]->target);
        }
        r.ccc_value = ccc(out, target);
    }
    const auto labels = concept_label_matrix(samples, n);
    if (samples.size() >= 2) r.cas = cas(pr.mixed, labels);
    for (std::size_t i = 0; i < n; ++i) {
        r.concept_names.push_back(cfg.concepts[i].name);
        std::vector<double> p(samples.size()), y(samples.size());
        for (std::size_t s = 0; s < samples.size(); ++s) {
            p[s] = pr.probs.at(s, i);
            y[s] = labels.at(s, i);
        }
        r.concept_auc.push_back(concept_auc(p, y));
    }
    r.map_cosine = mean_map_cosine(pr, samples);
    return r;
}

} // namespace agcm

#pragma once

#include "agcm/array.hpp"
#include "agcm/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace agcm {

struct ClassificationMetrics {
    double overall = 0.0;
    std::map<int, double> per_class; // recall for every class present in the labels
    double macro_f1 = 0.0;
    std::vector<std::vector<std::size_t>> confusion; // [label][prediction]
};

inline ClassificationMetrics classification_metrics(std::span<const int> preds, std::span<const int> labels,
                                                    std::size_t n_classes)
{
    if (preds.empty()) throw ConfigError("classification_metrics: empty input");
    if (preds.size() != labels.size()) throw ShapeError("classification_metrics: length mismatch");
    const auto in_range = [n_classes](int v) { return v >= 0 && static_cast<std::size_t>(v) < n_classes; };
    ClassificationMetrics m;
    m.confusion.assign(n_classes, std::vector<std::size_t>(n_classes, 0));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (!in_range(labels[i]) || !in_range(preds[i])) throw ConfigError("classification_metrics: class out of range");
        ++m.confusion[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(preds[i])];
        if (preds[i] == labels[i]) ++correct;
    }
    m.overall = static_cast<double>(correct) / static_cast<double>(preds.size());
    double f1_sum = 0.0;
    std::size_t f1_count = 0;
    for (std::size_t c = 0; c < n_classes; ++c) {
        std::size_t tp = m.confusion[c][c], fn = 0, fp = 0;
        for (std::size_t o = 0; o < n_classes; ++o) {
            if (o == c) continue;
            fn += m.confusion[c][o];
            fp += m.confusion[o][c];
        }
        if (tp + fn > 0) m.per_class[static_cast<int>(c)] = static_cast<double>(tp) / static_cast<double>(tp + fn);
        if (tp + fn + fp == 0) continue; // absent from both
        f1_sum += 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
        ++f1_count;
    }
    m.macro_f1 = f1_sum / static_cast<double>(f1_count);
    return m;
}

/// Concordance correlation coefficient with population moments. Two
/// constant sequences with equal means give 1.
inline double ccc(std::span<const double> preds, std::span<const double> labels)
{
    if (preds.size() != labels.size()) throw ShapeError("ccc: length mismatch");
    if (preds.size() < 2) throw ConfigError("ccc: need at least two values");
    const double n = static_cast<double>(preds.size());
    const double mp = std::accumulate(preds.begin(), preds.end(), 0.0) / n;
    const double ml = std::accumulate(labels.begin(), labels.end(), 0.0) / n;
    double vp = 0.0, vl = 0.0, cov = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        vp += (preds[i] - mp) * (preds[i] - mp);
        vl += (labels[i] - ml) * (labels[i] - ml);
        cov += (preds[i] - mp) * (labels[i] - ml);
    }
    vp /= n;
    vl /= n;
    cov /= n;
    const double denom = vp + vl + (mp - ml) * (mp - ml);
    if (denom == 0.0) return 1.0;
    return 2.0 * cov / denom;
}

/// Rank-based AUC; ties count one half. Empty when the thresholded labels
/// hold a single class.
inline std::optional<double> concept_auc(std::span<const double> probs, std::span<const double> labels)
{
    if (probs.size() != labels.size()) throw ShapeError("concept_auc: length mismatch");
    std::vector<std::size_t> order(probs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] < probs[b]; });
    std::vector<double> rank(probs.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && probs[order[j + 1]] == probs[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
        i = j + 1;
    }
    double pos = 0.0, rank_sum = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= 0.5) {
            pos += 1.0;
            rank_sum += rank[i];
        }
    }
    const double neg = static_cast<double>(labels.size()) - pos;
    if (pos == 0.0 || neg == 0.0) return std::nullopt;
    return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

/// Homogeneity of a clustering against ground-truth classes: 1 - H(C|K)/H(C),
/// 1 when the ground truth has a single class.
inline double homogeneity(std::span<const int> classes, std::span<const int> clusters)
{
    if (classes.size() != clusters.size() || classes.empty()) throw ShapeError("homogeneity: bad input");
    std::map<std::pair<int, int>, double> joint;
    std::map<int, double> pc, pk;
    for (std::size_t i = 0; i < classes.size(); ++i) {
        joint[{classes[i], clusters[i]}] += 1.0;
        pc[classes[i]] += 1.0;
        pk[clusters[i]] += 1.0;
    }
    const double n = static_cast<double>(classes.size());
    double h_c = 0.0;
    for (const auto& [c, cnt] : pc) h_c -= cnt / n * std::log(cnt / n);
    if (h_c == 0.0) return 1.0;
    double h_ck = 0.0;
    for (const auto& [ck, cnt] : joint) h_ck -= cnt / n * std::log(cnt / pk[ck.second]);
    return 1.0 - h_ck / h_c;
}

struct KMeansResult {
    std::vector<int> assignment;
    double inertia = 0.0;
};

/// Lloyd's k-means with k-means++ seeding; best inertia over `restarts`.
/// `points` is [N, d].
inline KMeansResult kmeans(const Array& points, std::size_t k, std::size_t restarts, std::uint64_t seed,
                           std::size_t max_iter = 100)
{
    const auto N = points.dim(0), d = points.dim(1);
    if (N < k) throw ConfigError("kmeans: fewer points than clusters");
    auto dist2 = [&](const double* a, const double* b) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
        return s;
    };
    KMeansResult best;
    best.inertia = std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < restarts; ++r) {
        CounterRng rng(stream_key(seed, fnv1a64("kmeans"), r));
        std::vector<double> centers;
        const auto first = rng.below(N);
        centers.insert(centers.end(), points.data() + first * d, points.data() + (first + 1) * d);
        std::vector<double> near(N, std::numeric_limits<double>::infinity());
        while (centers.size() < k * d) {
            const double* last = centers.data() + centers.size() - d;
            double total = 0.0;
            for (std::size_t i = 0; i < N; ++i) {
                near[i] = std::min(near[i], dist2(points.data() + i * d, last));
                total += near[i];
            }
            std::size_t pick = rng.below(N);
            if (total > 0.0) {
                const double u = rng.uniform() * total;
                double acc = 0.0;
                for (std::size_t i = 0; i < N; ++i) {
                    acc += near[i];
                    if (u < acc) {
                        pick = i;
                        break;
                    }
                }
            }
            centers.insert(centers.end(), points.data() + pick * d, points.data() + (pick + 1) * d);
        }
        std::vector<int> assign(N, -1);
        double inertia = 0.0;
        for (std::size_t it = 0; it < max_iter; ++it) {
            bool changed = false;
            inertia = 0.0;
            for (std::size_t i = 0; i < N; ++i) {
                int arg = 0;
                double bd = std::numeric_limits<double>::infinity();
                for (std::size_t c = 0; c < k; ++c) {
                    const double dd = dist2(points.data() + i * d, centers.data() + c * d);
                    if (dd < bd) {
                        bd = dd;
                        arg = static_cast<int>(c);
                    }
                }
                if (assign[i] != arg) changed = true;
                assign[i] = arg;
                inertia += bd;
            }
            if (!changed) break;
            std::vector<double> sums(k * d, 0.0);
            std::vector<std::size_t> counts(k, 0);
            for (std::size_t i = 0; i < N; ++i) {
                const auto c = static_cast<std::size_t>(assign[i]);
                ++counts[c];
                for (std::size_t j = 0; j < d; ++j) sums[c * d + j] += points[i * d + j];
            }
            for (std::size_t c = 0; c < k; ++c) {
                if (counts[c] == 0) continue; // keep the previous centre
                for (std::size_t j = 0; j < d; ++j) centers[c * d + j] = sums[c * d + j] / static_cast<double>(counts[c]);
            }
        }
        if (inertia < best.inertia) {
            best.inertia = inertia;
            best.assignment = assign;
        }
    }
    return best;
}

inline constexpr std::uint64_t kCasSeed = 0x5eed;
inline constexpr std::size_t kCasRestarts = 10;

/// Concept alignment score in percent. `embeddings` is [N, n, m]; `labels`
/// is [N, n]. Per concept: 2-means over the N embeddings, homogeneity
/// against labels thresholded at 0.5; mean over concepts.
inline double cas(const Array& embeddings, const Array& labels)
{
    if (embeddings.ndim() != 3 || labels.ndim() != 2 || labels.dim(0) != embeddings.dim(0) ||
        labels.dim(1) != embeddings.dim(1)) {
        throw ShapeError("cas: embeddings " + to_string(embeddings.shape()) + " vs labels " + to_string(labels.shape()));
    }
    const auto N = embeddings.dim(0), n = embeddings.dim(1), m = embeddings.dim(2);
    if (N < 2) throw ConfigError("cas: need at least two samples");
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        Array pts({N, m});
        std::vector<int> truth(N);
        for (std::size_t s = 0; s < N; ++s) {
            std::copy_n(embeddings.data() + (s * n + i) * m, m, pts.data() + s * m);
            truth[s] = labels.at(s, i) >= 0.5 ? 1 : 0;
        }
        const auto km = kmeans(pts, 2, kCasRestarts, stream_key(kCasSeed, i));
        total += homogeneity(truth, km.assignment);
    }
    return 100.0 * total / static_cast<double>(n);
}

struct EvalReport {
    std::string split;
    std::uint64_t seed = 0;
    std::optional<ClassificationMetrics> classification;
    std::optional<double> ccc_value;
    double cas = 0.0;
    std::vector<std::string> concept_names;
    std::vector<std::optional<double>> concept_auc;
    double map_cosine = 0.0; // mean over active concepts with a ground-truth map
};

inline nlohmann::json to_json(const EvalReport& r)
{
    nlohmann::json j;
    j["split"] = r.split;
    j["seed"] = r.seed;
    if (r.classification) {
        j["overall_accuracy"] = 100.0 * r.classification->overall;
        nlohmann::json pc = nlohmann::json::object();
        for (const auto& [c, v] : r.classification->per_class) pc[std::to_string(c)] = 100.0 * v;
        j["per_class_accuracy"] = pc;
        j["macro_f1"] = 100.0 * r.classification->macro_f1;
    }
    if (r.ccc_value) j["ccc"] = *r.ccc_value;
    j["cas"] = r.cas;
    nlohmann::json auc = nlohmann::json::object();
    for (std::size_t i = 0; i < r.concept_names.size(); ++i) {
        auc[r.concept_names[i]] = r.concept_auc[i] ? nlohmann::json(*r.concept_auc[i]) : nlohmann::json("n/a");
    }
    j["concept_auc"] = auc;
    j["map_cosine"] = r.map_cosine;
    return j;
}

/// Flat metric name -> value view used for CSV rows and aggregation.
inline std::vector<std::pair<std::string, double>> flat_metrics(const EvalReport& r)
{
    std::vector<std::pair<std::string, double>> out;
    if (r.classification) {
        out.emplace_back("accuracy", 100.0 * r.classification->overall);
        out.emplace_back("macro_f1", 100.0 * r.classification->macro_f1);
    }
    if (r.ccc_value) out.emplace_back("ccc", *r.ccc_value);
    out.emplace_back("cas", r.cas);
    double auc_sum = 0.0;
    std::size_t auc_n = 0;
    for (const auto& a : r.concept_auc) {
        if (a) {
            auc_sum += *a;
            ++auc_n;
        }
    }
    out.emplace_back("mean_concept_auc", auc_n ? auc_sum / static_cast<double>(auc_n) : std::nan(""));
    out.emplace_back("map_cosine", r.map_cosine);
    return out;
}

} // namespace agcm

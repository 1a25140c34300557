#pragma once

#include "agcm/augment.hpp"
#include "agcm/train.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <optional>
#include <string>
#include <vector>

namespace agcm {

/// Probability-weighted sum of the maps of every concept with p >= rho,
/// min-max normalised. All zeros when nothing passes or the sum is flat.
inline Grid weighted_map(const std::vector<Grid>& maps, std::span<const double> probs, double rho)
{
    if (maps.empty()) return {};
    if (maps.size() != probs.size()) throw ShapeError("weighted_map: maps and probabilities differ in count");
    Grid out{maps[0].rows, maps[0].cols, std::vector<double>(maps[0].size(), 0.0)};
    bool any = false;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        if (maps[i].rows != out.rows || maps[i].cols != out.cols) throw ShapeError("weighted_map: map shapes differ");
        if (!(probs[i] >= rho)) continue;
        any = true;
        for (std::size_t p = 0; p < out.size(); ++p) out.values[p] += maps[i].values[p] * probs[i];
    }
    if (!any) return out;
    const auto [lo, hi] = std::minmax_element(out.values.begin(), out.values.end());
    const double min = *lo, range = *hi - *lo;
    if (range == 0.0) {
        std::fill(out.values.begin(), out.values.end(), 0.0);
        return out;
    }
    for (auto& v : out.values) v = (v - min) / range;
    return out;
}

struct ConceptRecord {
    std::string name;
    double prob = 0.0;
    Grid attn; // patch grid; empty for temporal concepts
};

struct Explanation {
    std::string sample_id;
    std::vector<double> task_output;
    int predicted = 0;
    std::vector<ConceptRecord> concepts;
    Grid weighted;
    std::vector<std::size_t> ranking; // top-k concept indices
};

/// Concept indices by descending probability, ties by index; first k.
inline std::vector<std::size_t> rank_concepts(std::span<const double> probs, std::size_t k)
{
    std::vector<std::size_t> idx(probs.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
    idx.resize(std::min(k, idx.size()));
    return idx;
}

inline Explanation explain_sample(const VisualModel& model, const Sample& sample, std::size_t top_k)
{
    const auto& cfg = model.config();
    const Sample* one[] = {&sample};
    const auto pr = predict(model, one);
    const auto n = cfg.n_concepts(), P = cfg.num_patches();
    Explanation e;
    e.sample_id = sample.id;
    e.task_output.assign(pr.task_out.data(), pr.task_out.data() + pr.task_out.size());
    e.predicted = pr.predicted[0];
    std::vector<Grid> maps;
    std::vector<double> probs;
    for (std::size_t i = 0; i < n; ++i) {
        ConceptRecord r;
        r.name = cfg.concepts[i].name;
        r.prob = pr.probs.at(0, i);
        r.attn = Grid{cfg.patch_rows(), cfg.patch_cols(),
                      std::vector<double>(pr.attn.data() + i * P, pr.attn.data() + (i + 1) * P)};
        maps.push_back(r.attn);
        probs.push_back(r.prob);
        e.concepts.push_back(std::move(r));
    }
    e.weighted = weighted_map(maps, probs, cfg.rho);
    e.ranking = rank_concepts(probs, top_k);
    return e;
}

inline nlohmann::json grid_json(const Grid& g)
{
    auto rows = nlohmann::json::array();
    for (std::size_t r = 0; r < g.rows; ++r) {
        rows.push_back(std::vector<double>(g.values.begin() + static_cast<long>(r * g.cols),
                                           g.values.begin() + static_cast<long>((r + 1) * g.cols)));
    }
    return rows;
}

/// `renders` maps concept names (and "weighted") to rendered file paths.
inline nlohmann::json to_json(const Explanation& e, const std::map<std::string, std::string>& renders = {})
{
    nlohmann::json j;
    j["sample"] = e.sample_id;
    j["task_output"] = e.task_output;
    j["predicted"] = e.predicted;
    auto ranked = nlohmann::json::array();
    for (const auto i : e.ranking) {
        ranked.push_back({{"concept", e.concepts[i].name}, {"probability_pct", 100.0 * e.concepts[i].prob}});
    }
    j["ranking"] = ranked;
    auto concepts = nlohmann::json::array();
    for (const auto& c : e.concepts) {
        nlohmann::json jc = {{"name", c.name}, {"probability_pct", 100.0 * c.prob}};
        if (c.attn.size() > 0) jc["attention"] = grid_json(c.attn);
        if (auto it = renders.find(c.name); it != renders.end()) jc["render"] = it->second;
        concepts.push_back(jc);
    }
    j["concepts"] = concepts;
    j["weighted_map"] = grid_json(e.weighted);
    if (auto it = renders.find("weighted"); it != renders.end()) j["weighted_render"] = it->second;
    return j;
}

// Occlusion --------------------------------------------------------------------

struct Region {
    enum class Kind { UpperHalf, LowerHalf, Rectangle } kind = Kind::UpperHalf;
    Rect rect; // used by Rectangle

    std::string name() const
    {
        switch (kind) {
        case Kind::UpperHalf: return "upper";
        case Kind::LowerHalf: return "lower";
        case Kind::Rectangle:
            return "rect:" + std::to_string(rect.x) + "," + std::to_string(rect.y) + "," + std::to_string(rect.w) +
                   "," + std::to_string(rect.h);
        }
        return "?";
    }

    Rect resolve(std::size_t width, std::size_t height) const
    {
        switch (kind) {
        case Kind::UpperHalf: return {0, 0, width, height / 2};
        case Kind::LowerHalf: return {0, height / 2, width, height - height / 2};
        case Kind::Rectangle: break;
        }
        if (rect.w == 0 || rect.h == 0 || rect.x + rect.w > width || rect.y + rect.h > height) {
            throw ConfigError("occlusion region " + name() + " is outside the " + std::to_string(width) + "x" +
                              std::to_string(height) + " image");
        }
        return rect;
    }
};

/// "upper", "lower" or "rect:x,y,w,h".
inline Region parse_region(const std::string& s)
{
    if (s == "upper") return {Region::Kind::UpperHalf, {}};
    if (s == "lower") return {Region::Kind::LowerHalf, {}};
    if (s.rfind("rect:", 0) == 0) {
        std::array<std::size_t, 4> v{};
        std::stringstream ss(s.substr(5));
        std::string cell;
        std::size_t k = 0;
        while (std::getline(ss, cell, ',')) {
            if (k == 4) throw ConfigError("bad rectangle " + s);
            try {
                v[k++] = std::stoul(cell);
            } catch (const std::exception&) {
                throw ConfigError("bad rectangle " + s);
            }
        }
        if (k != 4) throw ConfigError("bad rectangle " + s);
        return {Region::Kind::Rectangle, {v[0], v[1], v[2], v[3]}};
    }
    throw ConfigError("unknown occlusion region " + s);
}

struct OcclusionFill {
    bool noise = false;
    std::uint64_t seed = 0;
};

/// Replaces the pixels of `region`; labels and landmarks are kept.
inline Sample occlude(const Sample& in, const Region& region, const OcclusionFill& fill = {})
{
    Sample s = in;
    const auto r = region.resolve(s.image.width, s.image.height);
    if (fill.noise) {
        CounterRng rng(stream_key(fill.seed, fnv1a64("occlude")));
        fill_noise(s.image, r, rng);
    } else {
        for (std::size_t c = 0; c < s.image.channels; ++c)
            for (std::size_t y = r.y; y < r.y + r.h; ++y)
                for (std::size_t x = r.x; x < r.x + r.w; ++x) s.image.at(c, y, x) = 0.0;
    }
    return s;
}

struct OcclusionRow {
    std::string region;
    std::vector<double> before;
    std::vector<double> after;
    std::vector<double> delta;
    std::vector<double> task_before;
    std::vector<double> task_after;
    int predicted_before = 0;
    int predicted_after = 0;
    Grid weighted_before;
    Grid weighted_after;
};

inline std::vector<OcclusionRow> occlusion_report(const VisualModel& model, const Sample& sample,
                                                  const std::vector<Region>& regions, const OcclusionFill& fill = {})
{
    std::vector<OcclusionRow> rows;
    if (regions.empty()) return rows;
    const auto base = explain_sample(model, sample, 0);
    for (const auto& reg : regions) {
        const auto occ = explain_sample(model, occlude(sample, reg, fill), 0);
        OcclusionRow row;
        row.region = reg.name();
        for (std::size_t i = 0; i < base.concepts.size(); ++i) {
            row.before.push_back(base.concepts[i].prob);
            row.after.push_back(occ.concepts[i].prob);
            row.delta.push_back(occ.concepts[i].prob - base.concepts[i].prob);
        }
        row.task_before = base.task_output;
        row.task_after = occ.task_output;
        row.predicted_before = base.predicted;
        row.predicted_after = occ.predicted;
        row.weighted_before = base.weighted;
        row.weighted_after = occ.weighted;
        rows.push_back(std::move(row));
    }
    return rows;
}

// Rendering --------------------------------------------------------------------

/// Linear black -> red -> yellow -> white.
inline std::array<double, 3> heat_color(double v)
{
    v = std::clamp(v, 0.0, 1.0) * 3.0;
    return {std::min(v, 1.0), std::clamp(v - 1.0, 0.0, 1.0), std::clamp(v - 2.0, 0.0, 1.0)};
}

/// Writes `map` upsampled (nearest neighbour) to width x height as P6,
/// blended 0.5/0.5 with the grey level of `base` when given. With a base
/// image its extents win.
inline void render_heatmap(const Grid& map, const ImageGrid* base, const std::string& path, std::size_t width = 0,
                           std::size_t height = 0)
{
    if (map.rows == 0 || map.cols == 0) throw ShapeError("render_heatmap: empty map");
    if (base) {
        width = base->width;
        height = base->height;
    }
    if (width == 0) width = map.cols;
    if (height == 0) height = map.rows;
    ImageGrid out(3, height, width);
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            const auto color = heat_color(map.at(y * map.rows / height, x * map.cols / width));
            double gray = 0.0;
            if (base) {
                for (std::size_t c = 0; c < base->channels; ++c) gray += base->at(c, y, x);
                gray /= static_cast<double>(base->channels);
            }
            for (std::size_t c = 0; c < 3; ++c) out.at(c, y, x) = base ? 0.5 * gray + 0.5 * color[c] : color[c];
        }
    }
    write_ppm(path, out);
}

} // namespace agcm

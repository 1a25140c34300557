#pragma once

#include "agcm/array.hpp"

#include <json.hpp>

#include <algorithm>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace agcm {

enum class ConceptKind { Binary, Continuous };

/// How an ROI-bearing concept turns its landmark subset into a region:
/// a disk around every landmark, or one disk at their centroid (head pose).
enum class RoiMode { Union, Centroid };

struct NormBounds {
    double min = 0.0;
    double max = 1.0;
};

inline const std::string kVisual = "visual";
inline const std::string kAcoustic = "acoustic";

struct ConceptSpec {
    std::string name;
    /// "visual" or the name of a temporal modality ("acoustic", ...).
    std::string modality = kVisual;
    ConceptKind kind = ConceptKind::Binary;
    bool roi_bearing = false;
    std::vector<std::size_t> landmark_subset;
    RoiMode roi_mode = RoiMode::Union;
    /// Raw-value bounds for continuous concepts. min > max is allowed and
    /// reverses the mapping (e.g. a gaze deviation where 0 means forward).
    std::optional<NormBounds> norm_bounds;

    bool is_visual() const { return modality == kVisual; }
};

/// Ordered concept inventory; position in the set is the concept index
/// used by every tensor and report.
class ConceptSet {
public:
    ConceptSet() = default;
    explicit ConceptSet(std::vector<ConceptSpec> specs) : specs_(std::move(specs)) { validate(); }

    const std::vector<ConceptSpec>& specs() const noexcept { return specs_; }
    std::size_t size() const noexcept { return specs_.size(); }
    bool empty() const noexcept { return specs_.empty(); }
    const ConceptSpec& operator[](std::size_t i) const { return specs_.at(i); }

    std::size_t index_of(const std::string& name) const
    {
        for (std::size_t i = 0; i < specs_.size(); ++i) {
            if (specs_[i].name == name) return i;
        }
        throw ConfigError("unknown concept: " + name);
    }

    /// Concepts of one modality, in inventory order.
    ConceptSet of_modality(const std::string& modality) const
    {
        std::vector<ConceptSpec> out;
        std::copy_if(specs_.begin(), specs_.end(), std::back_inserter(out),
                     [&](const ConceptSpec& c) { return c.modality == modality; });
        return ConceptSet(std::move(out));
    }

    std::vector<std::string> modalities() const
    {
        std::vector<std::string> out;
        for (const auto& c : specs_) {
            if (std::find(out.begin(), out.end(), c.modality) == out.end()) out.push_back(c.modality);
        }
        return out;
    }

    std::vector<std::string> names() const
    {
        std::vector<std::string> out;
        for (const auto& c : specs_) out.push_back(c.name);
        return out;
    }

private:
    void validate() const
    {
        std::set<std::string> seen;
        for (const auto& c : specs_) {
            if (c.name.empty()) throw ConfigError("concept with empty name");
            if (!seen.insert(c.name).second) throw ConfigError("duplicate concept name: " + c.name);
            if (c.roi_bearing && !c.is_visual()) {
                throw ConfigError("concept " + c.name + ": only visual concepts may carry an ROI");
            }
            if (c.norm_bounds && c.norm_bounds->min == c.norm_bounds->max) {
                throw ConfigError("concept " + c.name + ": normalisation bounds have min == max");
            }
            if (c.kind == ConceptKind::Continuous && !c.norm_bounds) {
                throw ConfigError("concept " + c.name + ": continuous concept without normalisation bounds");
            }
        }
    }

    std::vector<ConceptSpec> specs_;
};

// JSON mapping -------------------------------------------------------------

inline void to_json(nlohmann::json& j, const ConceptSpec& c)
{
    j = nlohmann::json{{"name", c.name},
                       {"modality", c.modality},
                       {"kind", c.kind == ConceptKind::Binary ? "binary" : "continuous"},
                       {"roi_bearing", c.roi_bearing},
                       {"landmark_subset", c.landmark_subset},
                       {"roi_mode", c.roi_mode == RoiMode::Union ? "union" : "centroid"}};
    if (c.norm_bounds) {
        j["norm_bounds"] = {c.norm_bounds->min, c.norm_bounds->max};
    }
}

inline void from_json(const nlohmann::json& j, ConceptSpec& c)
{
    c.name = j.at("name").get<std::string>();
    c.modality = j.value("modality", kVisual);
    const auto kind = j.value("kind", std::string("binary"));
    if (kind != "binary" && kind != "continuous") throw ConfigError("concept " + c.name + ": bad kind " + kind);
    c.kind = kind == "binary" ? ConceptKind::Binary : ConceptKind::Continuous;
    c.roi_bearing = j.value("roi_bearing", false);
    c.landmark_subset = j.value("landmark_subset", std::vector<std::size_t>{});
    const auto mode = j.value("roi_mode", std::string("union"));
    if (mode != "union" && mode != "centroid") throw ConfigError("concept " + c.name + ": bad roi_mode " + mode);
    c.roi_mode = mode == "union" ? RoiMode::Union : RoiMode::Centroid;
    if (j.contains("norm_bounds")) {
        const auto b = j.at("norm_bounds").get<std::vector<double>>();
        if (b.size() != 2) throw ConfigError("concept " + c.name + ": norm_bounds needs two values");
        c.norm_bounds = NormBounds{b[0], b[1]};
    } else {
        c.norm_bounds.reset();
    }
}

inline nlohmann::json to_json(const ConceptSet& set) { return nlohmann::json(set.specs()); }

inline ConceptSet concept_set_from_json(const nlohmann::json& j)
{
    return ConceptSet(j.get<std::vector<ConceptSpec>>());
}

} // namespace agcm

#pragma once

#include "agcm/concepts.hpp"
#include "agcm/params.hpp"

#include <json.hpp>

#include <string>
#include <utility>
#include <vector>

namespace agcm {

enum class TaskKind { Classification, Regression };

/// Component switches of the visual concept generator.
struct Toggles {
    bool msa = true;  // multi-scale score pooling
    bool mha = true;  // several attention heads
    bool cacm = true; // channel gating of the attended context
    bool cml = true;  // concept-map loss term

    bool operator==(const Toggles&) const = default;
};

struct ModelConfig {
    std::size_t image_width = 64;
    std::size_t image_height = 64;
    std::size_t channels = 1;
    std::size_t patch = 16;

    std::size_t d_model = 64;
    std::size_t backbone_layers = 2;
    std::size_t backbone_heads = 4;
    std::size_t mlp_hidden = 128;
    bool positional = true;

    std::size_t concept_embed = 16; // m
    std::size_t msa_heads = 3;
    std::vector<std::size_t> msa_scales{1, 2, 3};
    std::size_t cacm_hidden = 16;
    Toggles toggles;

    double dropout = 0.01;
    double leaky_slope = 0.01;
    double lambda_concept = 1.0;
    double lambda_map = 1.0;
    double rho = 0.5;

    TaskKind task = TaskKind::Classification;
    std::size_t n_classes = 4;

    ConceptSet concepts; // visual concepts, in index order

    std::size_t patch_rows() const { return image_height / patch; }
    std::size_t patch_cols() const { return image_width / patch; }
    std::size_t num_patches() const { return patch_rows() * patch_cols(); }
    std::size_t patch_dim() const { return channels * patch * patch; }
    std::size_t n_concepts() const { return concepts.size(); }

    void validate() const
    {
        auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
        if (patch == 0 || image_width % patch != 0 || image_height % patch != 0) {
            fail("image " + std::to_string(image_height) + "x" + std::to_string(image_width) +
                 " is not divisible by patch size " + std::to_string(patch));
        }
        if (channels == 0) fail("channels must be positive");
        if (d_model == 0 || backbone_heads == 0 || d_model % backbone_heads != 0) {
            fail("d_model must be a positive multiple of backbone_heads");
        }
        if (msa_heads < 1) fail("msa_heads must be >= 1");
        if (msa_scales.size() != msa_heads) fail("msa_scales needs one window per MSA head");
        for (const auto s : msa_scales) {
            if (s == 0) fail("MSA window sizes must be positive");
        }
        if (concept_embed == 0 || cacm_hidden == 0 || mlp_hidden == 0) fail("layer widths must be positive");
        if (dropout < 0.0 || dropout >= 1.0) fail("dropout must lie in [0, 1)");
        if (lambda_concept < 0.0 || lambda_map < 0.0) fail("loss weights must be non-negative");
        if (rho < 0.0 || rho > 1.0) fail("rho must lie in [0, 1]");
        if (task == TaskKind::Classification && n_classes < 2) fail("classification needs >= 2 classes");
        if (concepts.empty()) fail("no visual concepts declared");
        for (const auto& c : concepts.specs()) {
            if (!c.is_visual()) fail("concept " + c.name + " is not visual");
        }
    }
};

/// (H_p, W_p) for a validated configuration.
inline std::pair<std::size_t, std::size_t> num_patches(const ModelConfig& cfg)
{
    cfg.validate();
    return {cfg.patch_rows(), cfg.patch_cols()};
}

struct TrainConfig {
    AdamConfig adam;
    std::size_t max_epochs = 100;
    std::size_t patience = 10;
    std::size_t batch_size = 8;
    bool augment = false;

    void validate() const
    {
        if (batch_size == 0) throw ConfigError("train config: batch_size must be positive");
        if (adam.lr < 0.0) throw ConfigError("train config: learning rate must be non-negative");
        if (patience == 0) throw ConfigError("train config: patience must be positive");
    }
};

// JSON ---------------------------------------------------------------------

inline nlohmann::json to_json(const ModelConfig& c)
{
    return {{"image_width", c.image_width},
            {"image_height", c.image_height},
            {"channels", c.channels},
            {"patch", c.patch},
            {"d_model", c.d_model},
            {"backbone_layers", c.backbone_layers},
            {"backbone_heads", c.backbone_heads},
            {"mlp_hidden", c.mlp_hidden},
            {"positional", c.positional},
            {"concept_embed", c.concept_embed},
            {"msa_heads", c.msa_heads},
            {"msa_scales", c.msa_scales},
            {"cacm_hidden", c.cacm_hidden},
            {"toggles", {{"msa", c.toggles.msa}, {"mha", c.toggles.mha}, {"cacm", c.toggles.cacm}, {"cml", c.toggles.cml}}},
            {"dropout", c.dropout},
            {"leaky_slope", c.leaky_slope},
            {"lambda_concept", c.lambda_concept},
            {"lambda_map", c.lambda_map},
            {"rho", c.rho},
            {"task", c.task == TaskKind::Classification ? "classification" : "regression"},
            {"n_classes", c.n_classes},
            {"concepts", to_json(c.concepts)}};
}

/// Reads fields present in `j` on top of `base`.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {})
{
    auto& c = base;
    c.image_width = j.value("image_width", c.image_width);
    c.image_height = j.value("image_height", c.image_height);
    c.channels = j.value("channels", c.channels);
    c.patch = j.value("patch", c.patch);
    c.d_model = j.value("d_model", c.d_model);
    c.backbone_layers = j.value("backbone_layers", c.backbone_layers);
    c.backbone_heads = j.value("backbone_heads", c.backbone_heads);
    c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
    c.positional = j.value("positional", c.positional);
    c.concept_embed = j.value("concept_embed", c.concept_embed);
    c.msa_heads = j.value("msa_heads", c.msa_heads);
    c.msa_scales = j.value("msa_scales", c.msa_scales);
    c.cacm_hidden = j.value("cacm_hidden", c.cacm_hidden);
    if (j.contains("toggles")) {
        const auto& t = j.at("toggles");
        c.toggles.msa = t.value("msa", c.toggles.msa);
        c.toggles.mha = t.value("mha", c.toggles.mha);
        c.toggles.cacm = t.value("cacm", c.toggles.cacm);
        c.toggles.cml = t.value("cml", c.toggles.cml);
    }
    c.dropout = j.value("dropout", c.dropout);
    c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
    c.lambda_concept = j.value("lambda_concept", c.lambda_concept);
    c.lambda_map = j.value("lambda_map", c.lambda_map);
    c.rho = j.value("rho", c.rho);
    if (j.contains("task")) {
        const auto task = j.at("task").get<std::string>();
        if (task != "classification" && task != "regression") throw ConfigError("unknown task kind: " + task);
        c.task = task == "classification" ? TaskKind::Classification : TaskKind::Regression;
    }
    c.n_classes = j.value("n_classes", c.n_classes);
    if (j.contains("concepts")) c.concepts = concept_set_from_json(j.at("concepts"));
    return c;
}

inline nlohmann::json to_json(const TrainConfig& t)
{
    return {{"lr", t.adam.lr},         {"beta1", t.adam.beta1},     {"beta2", t.adam.beta2},
            {"adam_eps", t.adam.eps},  {"max_epochs", t.max_epochs}, {"patience", t.patience},
            {"batch_size", t.batch_size}, {"augment", t.augment}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig t = {})
{
    t.adam.lr = j.value("lr", t.adam.lr);
    t.adam.beta1 = j.value("beta1", t.adam.beta1);
    t.adam.beta2 = j.value("beta2", t.adam.beta2);
    t.adam.eps = j.value("adam_eps", t.adam.eps);
    t.max_epochs = j.value("max_epochs", t.max_epochs);
    t.patience = j.value("patience", t.patience);
    t.batch_size = j.value("batch_size", t.batch_size);
    t.augment = j.value("augment", t.augment);
    return t;
}

} // namespace agcm

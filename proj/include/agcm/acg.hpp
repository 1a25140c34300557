#pragma once

// Attention-guided concept generator and the visual task head.
//
// All per-concept computations are stacked along a leading concept axis, so
// the shapes below use n = concepts, B = batch, P = patches, D = d_model,
// m = concept embedding size.

#include "agcm/backbone.hpp"
#include "agcm/config.hpp"
#include "agcm/diffcore.hpp"
#include "agcm/params.hpp"

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace agcm {

/// Averaging window over the patch grid as a [P, P] matrix W with
/// pooled = scores * W, i.e. W(q, p) = 1/|window(p)| for q in window(p).
/// The window spans offsets [-(s-1)/2, s/2] in both directions, clipped at
/// the borders.
inline Array pooling_matrix(std::size_t rows, std::size_t cols, std::size_t window)
{
    const std::size_t P = rows * cols;
    Array w({P, P});
    const auto lo = -static_cast<long>((window - 1) / 2);
    const auto hi = static_cast<long>(window / 2);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            std::vector<std::size_t> members;
            for (long dr = lo; dr <= hi; ++dr) {
                for (long dc = lo; dc <= hi; ++dc) {
                    const long rr = static_cast<long>(r) + dr, cc = static_cast<long>(c) + dc;
                    if (rr < 0 || cc < 0 || rr >= static_cast<long>(rows) || cc >= static_cast<long>(cols)) continue;
                    members.push_back(static_cast<std::size_t>(rr) * cols + static_cast<std::size_t>(cc));
                }
            }
            const double share = 1.0 / static_cast<double>(members.size());
            for (const auto q : members) w.at(q, r * cols + c) = share;
        }
    }
    return w;
}

/// Attention layout implied by the MSA/MHA switches.
struct AttentionLayout {
    /// Windows of the separate heads (post-softmax mixture).
    std::vector<std::size_t> head_scales;
    /// Windows pooled inside the single head (pre-softmax mixture); empty
    /// unless MSA is on and MHA is off.
    std::vector<std::size_t> inner_scales;
};

inline AttentionLayout attention_layout(const ModelConfig& cfg)
{
    AttentionLayout l;
    if (cfg.toggles.mha) {
        l.head_scales = cfg.toggles.msa ? cfg.msa_scales : std::vector<std::size_t>(cfg.msa_heads, 1);
    } else {
        l.head_scales = {1};
        if (cfg.toggles.msa) l.inner_scales = cfg.msa_scales;
    }
    return l;
}

struct MsaOutput {
    DTensor attn;    // [n, B, P], rows sum to 1
    DTensor context; // [n, B, D]
    std::vector<DTensor> head_maps; // per head, [n, B, P]
};

struct ConceptHeadOutput {
    DTensor embed_pos; // [n, B, m]
    DTensor embed_neg; // [n, B, m]
    DTensor prob;      // [n, B, 1]
    DTensor mixed;     // [n, B, m]
};

/// Per-concept activated/inactivated embeddings, the probability head over
/// their concatenation, and the probability-weighted mixture. Input is
/// [n, B, D]; every concept has its own weights.
struct ConceptHead {
    Parameter *pos_w = nullptr, *pos_b = nullptr, *neg_w = nullptr, *neg_b = nullptr;
    Parameter *prob_w = nullptr, *prob_b = nullptr;
    double slope = 0.01;
    double dropout_rate = 0.0;

    ConceptHead() = default;

    ConceptHead(ParamFactory& make, const std::string& p, std::size_t n, std::size_t d, std::size_t m,
                double leaky_slope, double dropout)
        : slope(leaky_slope), dropout_rate(dropout)
    {
        pos_w = &make.make(p + "embed_pos.w", {n, d, m}, InitScheme::UniformScaled);
        pos_b = &make.make(p + "embed_pos.b", {n, 1, m}, InitScheme::Zeros);
        neg_w = &make.make(p + "embed_neg.w", {n, d, m}, InitScheme::UniformScaled);
        neg_b = &make.make(p + "embed_neg.b", {n, 1, m}, InitScheme::Zeros);
        prob_w = &make.make(p + "prob.w", {n, 2 * m, 1}, InitScheme::UniformScaled);
        prob_b = &make.make(p + "prob.b", {n, 1, 1}, InitScheme::Zeros);
    }

    ConceptHeadOutput apply(Tape& t, const DTensor& input) const
    {
        ConceptHeadOutput out;
        auto project = [&](Parameter* w, Parameter* b) {
            auto e = leaky_relu(add_bcast(bmm(input, t.param(*w)), t.param(*b)), slope);
            return dropout(e, dropout_rate);
        };
        out.embed_pos = project(pos_w, pos_b);
        out.embed_neg = project(neg_w, neg_b);
        out.prob = sigmoid(add_bcast(bmm(concat_last({out.embed_pos, out.embed_neg}), t.param(*prob_w)),
                                     t.param(*prob_b)));
        out.mixed = convex_mix(out.prob, out.embed_pos, out.embed_neg);
        return out;
    }
};

struct VisualOutputs {
    DTensor tokens;  // [B, P, D]
    DTensor attn;    // [n, B, P]
    DTensor context; // [n, B, D]
    DTensor refined; // [n, B, D]
    DTensor embed_pos, embed_neg, prob, mixed_stacked;
    DTensor mixed;   // [B, n*m], concept-major blocks
    DTensor logits;  // [B, n_classes] or [B, 1]
    DTensor task_out; // logits (classification) or sigmoid output (regression)
};

/// Supervision for one batch. Concept-major layouts match VisualOutputs.
struct VisualTargets {
    std::vector<int> labels;   // classification
    Array regression;          // [B], regression
    Array concepts;            // [n * B], concept-major
    Array maps;                // [n * B, P]
    Array map_mask;            // [n * B], 1 where a ground-truth map exists
};

struct LossTerms {
    DTensor total;
    double task = 0.0;
    double concept_loss = 0.0; // unweighted
    double map = 0.0;     // unweighted
};

/// Which terms of the joint objective to include.
struct LossSelection {
    bool task = true;
    bool concepts = true;
    bool map = true; // also requires cfg.toggles.cml
};

class VisualModel {
public:
    explicit VisualModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), seed_(seed)
    {
        cfg_.validate();
        ParamFactory make(store_, seed);
        backbone_ = Backbone(cfg_, make);
        build_acg(make);
    }

    VisualModel(VisualModel&&) = default;
    VisualModel& operator=(VisualModel&&) = default;

    const ModelConfig& config() const noexcept { return cfg_; }
    std::uint64_t seed() const noexcept { return seed_; }
    ParameterStore& params() noexcept { return store_; }
    const ParameterStore& params() const noexcept { return store_; }
    const Backbone& backbone() const noexcept { return backbone_; }

    /// Names of the task predictor's parameters.
    static std::vector<std::string> task_param_names() { return {"acg.task.w", "acg.task.b"}; }

    DTensor encode(Tape& t, const Array& patches, std::size_t batch) const
    {
        return backbone_.encode(t, patches, batch);
    }

    /// Per-concept spatial attention over the patch tokens.
    MsaOutput msa_attend(Tape& t, const DTensor& tokens) const
    {
        const auto n = cfg_.n_concepts();
        const auto B = tokens.dim(0);
        const auto P = tokens.dim(1);
        const auto D = tokens.dim(2);
        const double temp = 1.0 / std::sqrt(static_cast<double>(D));
        const auto flat = reshape(tokens, {B * P, D});

        auto scores_for = [&](Parameter* query) {
            auto s = reshape(matmul(flat, t.param(*query)), {B, P, n});
            return reshape(permute(s, {2, 0, 1}), {n * B, P});
        };
        auto pooled = [&](const DTensor& s, std::size_t window) {
            if (window == 1) return s;
            return matmul(s, t.constant(pooling_matrix(cfg_.patch_rows(), cfg_.patch_cols(), window)));
        };

        MsaOutput out;
        if (!layout_.inner_scales.empty()) {
            const auto s = scores_for(queries_[0]);
            const auto w = softmax(t.param(*inner_mix_)); // [n, S]
            DTensor pre;
            for (std::size_t k = 0; k < layout_.inner_scales.size(); ++k) {
                auto term = mul_bcast(reshape(pooled(s, layout_.inner_scales[k]), {n, B, P}),
                                      reshape(slice(w, 1, k, 1), {n, 1, 1}));
                pre = k == 0 ? term : add(pre, term);
            }
            out.attn = softmax(scale(pre, temp));
            out.head_maps = {out.attn};
        } else {
            for (std::size_t h = 0; h < layout_.head_scales.size(); ++h) {
                const auto s = pooled(scores_for(queries_[h]), layout_.head_scales[h]);
                out.head_maps.push_back(reshape(softmax(scale(s, temp)), {n, B, P}));
            }
            if (out.head_maps.size() == 1) {
                out.attn = out.head_maps[0];
            } else {
                out.attn = mix_heads(t, out.head_maps, softmax(t.param(*head_mix_)));
            }
        }
        // context[i, b] = sum_p attn[i, b, p] * tokens[b, p]
        out.context = permute(bmm(permute(out.attn, {1, 0, 2}), tokens), {1, 0, 2});
        return out;
    }

    /// Combines per-head maps with per-concept weights w [n, H].
    static DTensor mix_heads(Tape&, const std::vector<DTensor>& maps, const DTensor& w)
    {
        const auto n = maps[0].dim(0);
        DTensor acc;
        for (std::size_t h = 0; h < maps.size(); ++h) {
            auto term = mul_bcast(maps[h], reshape(slice(w, 1, h, 1), {n, 1, 1}));
            acc = h == 0 ? term : add(acc, term);
        }
        return acc;
    }

    /// Channel gating of the attended context; identity when CACM is off.
    DTensor cacm_refine(Tape& t, const DTensor& context) const
    {
        if (!cfg_.toggles.cacm) return context;
        return mul(cacm_gates(t, context), context);
    }

    DTensor cacm_gates(Tape& t, const DTensor& context) const
    {
        auto h = leaky_relu(add_bcast(bmm(context, t.param(*cacm_w1_)), t.param(*cacm_b1_)), cfg_.leaky_slope);
        return sigmoid(add_bcast(bmm(h, t.param(*cacm_w2_)), t.param(*cacm_b2_)));
    }

    ConceptHeadOutput concept_head(Tape& t, const DTensor& refined) const { return head_.apply(t, refined); }

    /// [n, B, m] -> [B, n*m]
    static DTensor flatten_mixed(const DTensor& mixed)
    {
        const auto n = mixed.dim(0), B = mixed.dim(1), m = mixed.dim(2);
        return reshape(permute(mixed, {1, 0, 2}), {B, n * m});
    }

    /// One-layer task predictor. Returns logits; regression callers apply
    /// the sigmoid via task_output.
    DTensor task_predict(Tape& t, const DTensor& mixed_flat) const
    {
        return add_bcast(matmul(mixed_flat, t.param(*task_w_)), t.param(*task_b_));
    }

    DTensor task_output(const DTensor& logits) const
    {
        return cfg_.task == TaskKind::Regression ? sigmoid(logits) : logits;
    }

    VisualOutputs forward(Tape& t, const Array& patches, std::size_t batch) const
    {
        VisualOutputs o;
        o.tokens = encode(t, patches, batch);
        return forward_from_tokens(t, std::move(o));
    }

    VisualOutputs forward_tokens(Tape& t, const DTensor& tokens) const
    {
        VisualOutputs o;
        o.tokens = tokens;
        return forward_from_tokens(t, std::move(o));
    }

    LossTerms joint_loss(const VisualOutputs& o, const VisualTargets& y, LossSelection sel = {}) const
    {
        auto& t = *o.logits.tape();
        const auto B = o.logits.dim(0);
        const auto n = cfg_.n_concepts();
        const double inv_b = 1.0 / static_cast<double>(B);
        LossTerms terms;
        std::vector<DTensor> parts;

        if (sel.task) {
            DTensor task;
            if (cfg_.task == TaskKind::Classification) {
                task = cross_entropy(o.logits, y.labels);
            } else {
                task = mse(reshape(o.task_out, {B}), y.regression);
            }
            terms.task = task.item();
            parts.push_back(task);
        }
        if (sel.concepts) {
            if (y.concepts.size() != n * B) {
                throw ShapeError("joint_loss: concept targets " + to_string(y.concepts.shape()) + " for " +
                                 std::to_string(n) + " concepts x " + std::to_string(B) + " samples");
            }
            auto concept_term = scale(sum(bce(reshape(o.prob, {n * B}), y.concepts)), inv_b);
            terms.concept_loss = concept_term.item();
            parts.push_back(scale(concept_term, cfg_.lambda_concept));
        }
        if (sel.map && cfg_.toggles.cml) {
            const auto P = o.attn.dim(2);
            if (y.maps.shape() != Shape{n * B, P} || y.map_mask.size() != n * B) {
                throw ShapeError("joint_loss: ground-truth maps " + to_string(y.maps.shape()) + " vs attention [" +
                                 std::to_string(n * B) + "," + std::to_string(P) + "]");
            }
            double count = 0.0;
            for (const double v : y.map_mask.values()) count += v;
            const auto cos = cosine_rows(reshape(o.attn, {n * B, P}), t.constant(y.maps));
            // sum over masked rows of (1 - cos), averaged over the batch
            auto map = affine(sum(mul(cos, t.constant(y.map_mask))), -inv_b, count * inv_b);
            terms.map = map.item();
            parts.push_back(scale(map, cfg_.lambda_map));
        }
        if (parts.empty()) throw ConfigError("joint_loss: no terms selected");
        terms.total = parts[0];
        for (std::size_t i = 1; i < parts.size(); ++i) terms.total = add(terms.total, parts[i]);
        return terms;
    }

private:
    void build_acg(ParamFactory& make)
    {
        const auto n = cfg_.n_concepts();
        const auto D = cfg_.d_model;
        const auto m = cfg_.concept_embed;
        const auto hc = cfg_.cacm_hidden;
        layout_ = attention_layout(cfg_);
        for (std::size_t h = 0; h < layout_.head_scales.size(); ++h) {
            queries_.push_back(&make.make("acg.msa.query" + std::to_string(h), {D, n}, InitScheme::UniformScaled));
        }
        if (layout_.head_scales.size() > 1) {
            head_mix_ = &make.make("acg.msa.head_mix", {n, layout_.head_scales.size()}, InitScheme::Zeros);
        }
        if (!layout_.inner_scales.empty()) {
            inner_mix_ = &make.make("acg.msa.scale_mix", {n, layout_.inner_scales.size()}, InitScheme::Zeros);
        }
        if (cfg_.toggles.cacm) {
            cacm_w1_ = &make.make("acg.cacm.w1", {n, D, hc}, InitScheme::UniformScaled);
            cacm_b1_ = &make.make("acg.cacm.b1", {n, 1, hc}, InitScheme::Zeros);
            cacm_w2_ = &make.make("acg.cacm.w2", {n, hc, D}, InitScheme::UniformScaled);
            cacm_b2_ = &make.make("acg.cacm.b2", {n, 1, D}, InitScheme::Zeros);
        }
        head_ = ConceptHead(make, "acg.", n, D, m, cfg_.leaky_slope, cfg_.dropout);
        const auto out_dim = cfg_.task == TaskKind::Classification ? cfg_.n_classes : 1;
        task_w_ = &make.make("acg.task.w", {n * m, out_dim}, InitScheme::UniformScaled);
        task_b_ = &make.make("acg.task.b", {1, out_dim}, InitScheme::Zeros);
    }

    VisualOutputs forward_from_tokens(Tape& t, VisualOutputs o) const
    {
        auto msa = msa_attend(t, o.tokens);
        o.attn = msa.attn;
        o.context = msa.context;
        o.refined = cacm_refine(t, o.context);
        auto head = concept_head(t, o.refined);
        o.embed_pos = head.embed_pos;
        o.embed_neg = head.embed_neg;
        o.prob = head.prob;
        o.mixed_stacked = head.mixed;
        o.mixed = flatten_mixed(head.mixed);
        o.logits = task_predict(t, o.mixed);
        o.task_out = task_output(o.logits);
        return o;
    }

    ModelConfig cfg_;
    std::uint64_t seed_ = 0;
    ParameterStore store_;
    Backbone backbone_;
    AttentionLayout layout_;
    std::vector<Parameter*> queries_;
    Parameter* head_mix_ = nullptr;
    Parameter* inner_mix_ = nullptr;
    Parameter *cacm_w1_ = nullptr, *cacm_b1_ = nullptr, *cacm_w2_ = nullptr, *cacm_b2_ = nullptr;
    ConceptHead head_;
    Parameter *task_w_ = nullptr, *task_b_ = nullptr;
};

} // namespace agcm

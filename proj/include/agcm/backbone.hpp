#pragma once

#include "agcm/config.hpp"
#include "agcm/diffcore.hpp"
#include "agcm/params.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace agcm {

/// Pre-norm transformer encoder block: x + MHSA(LN(x)), then x + MLP(LN(x))
/// with a leaky-rectifier hidden layer.
struct EncoderBlock {
    Parameter *ln1_g = nullptr, *ln1_b = nullptr, *qkv_w = nullptr, *qkv_b = nullptr, *out_w = nullptr,
              *out_b = nullptr;
    Parameter *ln2_g = nullptr, *ln2_b = nullptr, *fc1_w = nullptr, *fc1_b = nullptr, *fc2_w = nullptr,
              *fc2_b = nullptr;
    std::size_t heads = 1;
    double slope = 0.01;

    EncoderBlock() = default;

    EncoderBlock(ParamFactory& make, const std::string& p, std::size_t d, std::size_t hidden, std::size_t n_heads,
                 double leaky_slope)
        : heads(n_heads), slope(leaky_slope)
    {
        if (d % n_heads != 0) {
            throw ConfigError("encoder block " + p + ": width " + std::to_string(d) + " not divisible by " +
                              std::to_string(n_heads) + " heads");
        }
        ln1_g = &make.make(p + "ln1.g", {1, d}, InitScheme::Ones);
        ln1_b = &make.make(p + "ln1.b", {1, d}, InitScheme::Zeros);
        qkv_w = &make.make(p + "attn.qkv.w", {d, 3 * d}, InitScheme::UniformScaled);
        qkv_b = &make.make(p + "attn.qkv.b", {1, 3 * d}, InitScheme::Zeros);
        out_w = &make.make(p + "attn.out.w", {d, d}, InitScheme::UniformScaled);
        out_b = &make.make(p + "attn.out.b", {1, d}, InitScheme::Zeros);
        ln2_g = &make.make(p + "ln2.g", {1, d}, InitScheme::Ones);
        ln2_b = &make.make(p + "ln2.b", {1, d}, InitScheme::Zeros);
        fc1_w = &make.make(p + "mlp.fc1.w", {d, hidden}, InitScheme::UniformScaled);
        fc1_b = &make.make(p + "mlp.fc1.b", {1, hidden}, InitScheme::Zeros);
        fc2_w = &make.make(p + "mlp.fc2.w", {hidden, d}, InitScheme::UniformScaled);
        fc2_b = &make.make(p + "mlp.fc2.b", {1, d}, InitScheme::Zeros);
    }

    static DTensor norm(Tape& t, const DTensor& x, Parameter* g, Parameter* b)
    {
        return add_bcast(mul_bcast(layer_norm(x), t.param(*g)), t.param(*b));
    }

    /// x: [B * L, D] for B sequences of length L; bidirectional attention.
    DTensor apply(Tape& t, const DTensor& x, std::size_t batch, std::size_t len) const
    {
        auto y = add(x, attention(t, norm(t, x, ln1_g, ln1_b), batch, len));
        auto h = norm(t, y, ln2_g, ln2_b);
        h = leaky_relu(add_bcast(matmul(h, t.param(*fc1_w)), t.param(*fc1_b)), slope);
        return add(y, add_bcast(matmul(h, t.param(*fc2_w)), t.param(*fc2_b)));
    }

    DTensor attention(Tape& t, const DTensor& x, std::size_t batch, std::size_t len) const
    {
        const auto D = x.dim(1);
        const auto H = heads;
        const auto dh = D / H;
        auto qkv = add_bcast(matmul(x, t.param(*qkv_w)), t.param(*qkv_b));
        // [B*L, 3D] -> [3, B*H, L, dh]
        qkv = reshape(permute(reshape(qkv, {batch, len, 3, H, dh}), {2, 0, 3, 1, 4}), {3, batch * H, len, dh});
        auto take = [&](std::size_t i) { return reshape(slice(qkv, 0, i, 1), {batch * H, len, dh}); };
        const auto q = take(0), k = take(1), v = take(2);
        auto att = softmax(scale(bmm(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(dh))));
        auto ctx = bmm(att, v); // [B*H, L, dh]
        ctx = reshape(permute(reshape(ctx, {batch, H, len, dh}), {0, 2, 1, 3}), {batch * len, D});
        return add_bcast(matmul(ctx, t.param(*out_w)), t.param(*out_b));
    }
};

/// Patch-embedding transformer encoder: linear patch projection, learned
/// positional embeddings, pre-norm encoder blocks, final layer norm. No
/// class token; every patch token is returned.
class Backbone {
public:
    Backbone() = default;

    Backbone(const ModelConfig& cfg, ParamFactory& make) : cfg_(cfg)
    {
        const auto d = cfg.d_model;
        embed_w_ = &make.make("backbone.embed.w", {cfg.patch_dim(), d}, InitScheme::UniformScaled);
        embed_b_ = &make.make("backbone.embed.b", {1, d}, InitScheme::Zeros);
        pos_ = &make.make("backbone.pos", {1, cfg.num_patches(), d}, InitScheme::UniformScaled);
        for (std::size_t l = 0; l < cfg.backbone_layers; ++l) {
            blocks_.emplace_back(make, "backbone.block" + std::to_string(l) + ".", d, cfg.mlp_hidden,
                                 cfg.backbone_heads, cfg.leaky_slope);
        }
        final_g_ = &make.make("backbone.final.g", {1, d}, InitScheme::Ones);
        final_b_ = &make.make("backbone.final.b", {1, d}, InitScheme::Zeros);
    }

    /// patches: [B * P, patch_dim] (see extract_patches). Returns [B, P, D].
    DTensor encode(Tape& t, const Array& patches, std::size_t batch) const
    {
        const auto& cfg = cfg_;
        const auto P = cfg.num_patches();
        const auto D = cfg.d_model;
        if (patches.ndim() != 2 || patches.dim(0) != batch * P || patches.dim(1) != cfg.patch_dim()) {
            throw ShapeError("backbone: expected patches [" + std::to_string(batch * P) + "," +
                             std::to_string(cfg.patch_dim()) + "], got " + to_string(patches.shape()));
        }
        auto x = add_bcast(matmul(t.constant(patches), t.param(*embed_w_)), t.param(*embed_b_));
        if (cfg.positional) {
            x = reshape(add_bcast(reshape(x, {batch, P, D}), t.param(*pos_)), {batch * P, D});
        }
        for (const auto& b : blocks_) x = b.apply(t, x, batch, P);
        return reshape(EncoderBlock::norm(t, x, final_g_, final_b_), {batch, P, D});
    }

private:
    ModelConfig cfg_;
    Parameter* embed_w_ = nullptr;
    Parameter* embed_b_ = nullptr;
    Parameter* pos_ = nullptr;
    std::vector<EncoderBlock> blocks_;
    Parameter* final_g_ = nullptr;
    Parameter* final_b_ = nullptr;
};

} // namespace agcm

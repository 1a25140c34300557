#pragma once

// Second stage: temporal concept generators next to a frozen visual concept
// branch, fused per frame and decoded by a bidirectional sequence model.

#include "agcm/synthdata.hpp"
#include "agcm/train.hpp"

#include <json.hpp>

#include <fstream>
#include <string>
#include <vector>

namespace agcm {

/// A clip-level temporal input: one fixed-length feature vector per clip
/// feeding a set of concepts that are shared by every frame.
struct TemporalModality {
    std::string name;
    std::size_t feature_dim = 0;
    ConceptSet concepts;
};

struct FusionConfig {
    std::size_t extractor_hidden = 64; // G(.) width
    std::size_t seq_heads = 4;
    std::size_t seq_mlp_hidden = 128;
    bool positional = true;
    std::size_t frames = kClipFrames;
    double lambda_concept = 1.0;
    bool use_visual = true;

    void validate() const
    {
        if (extractor_hidden == 0 || seq_heads == 0 || seq_mlp_hidden == 0 || frames == 0) {
            throw ConfigError("fusion config: sizes must be positive");
        }
        if (lambda_concept < 0.0) throw ConfigError("fusion config: negative concept weight");
    }
};

inline nlohmann::json to_json(const FusionConfig& f)
{
    return {{"extractor_hidden", f.extractor_hidden}, {"seq_heads", f.seq_heads},
            {"seq_mlp_hidden", f.seq_mlp_hidden},     {"positional", f.positional},
            {"frames", f.frames},                     {"lambda_concept", f.lambda_concept},
            {"use_visual", f.use_visual}};
}

inline FusionConfig fusion_config_from_json(const nlohmann::json& j, FusionConfig f = {})
{
    f.extractor_hidden = j.value("extractor_hidden", f.extractor_hidden);
    f.seq_heads = j.value("seq_heads", f.seq_heads);
    f.seq_mlp_hidden = j.value("seq_mlp_hidden", f.seq_mlp_hidden);
    f.positional = j.value("positional", f.positional);
    f.frames = j.value("frames", f.frames);
    f.lambda_concept = j.value("lambda_concept", f.lambda_concept);
    f.use_visual = j.value("use_visual", f.use_visual);
    f.validate();
    return f;
}

/// One training/inference unit: k frames, their cached frozen visual
/// embeddings [k, n_v * m], and one feature/label vector per modality.
struct FusionClip {
    std::string id;
    std::vector<const Sample*> frames;
    Array visual; // [k, n_v * m]
    std::vector<std::vector<double>> features;       // per modality
    std::vector<std::vector<double>> concept_labels; // per modality
};

struct FusionOutputs {
    std::vector<ConceptHeadOutput> temporal; // per modality, [n_a, B, *]
    DTensor fused;  // [B * k, d]
    DTensor logits; // [B * k, C]
};

struct FusionLoss {
    DTensor total;
    double task = 0.0;
    double concept_loss = 0.0; // unweighted
};

class FusionModel {
public:
    FusionModel(const ModelConfig& visual_cfg, std::vector<TemporalModality> modalities, FusionConfig cfg,
                std::uint64_t seed)
        : vcfg_(visual_cfg), mods_(std::move(modalities)), cfg_(cfg), seed_(seed)
    {
        cfg_.validate();
        vcfg_.validate();
        const auto m = vcfg_.concept_embed;
        ParamFactory make(store_, stream_key(seed, fnv1a64("fusion")));
        for (const auto& mod : mods_) {
            if (mod.feature_dim == 0 || mod.concepts.empty()) {
                throw ConfigError("temporal modality " + mod.name + " needs features and concepts");
            }
            Branch b;
            const auto p = "fusion." + mod.name + ".";
            const auto h = cfg_.extractor_hidden;
            b.g_w1 = &make.make(p + "g.w1", {mod.feature_dim, h}, InitScheme::UniformScaled);
            b.g_b1 = &make.make(p + "g.b1", {1, h}, InitScheme::Zeros);
            b.g_w2 = &make.make(p + "g.w2", {h, h}, InitScheme::UniformScaled);
            b.g_b2 = &make.make(p + "g.b2", {1, h}, InitScheme::Zeros);
            b.head = ConceptHead(make, p, mod.concepts.size(), h, m, vcfg_.leaky_slope, vcfg_.dropout);
            branches_.push_back(b);
        }
        const auto d = width();
        if (d == 0) throw ConfigError("fusion model has no inputs");
        pos_ = &make.make("fusion.seq.pos", {1, cfg_.frames, d}, InitScheme::UniformScaled);
        block_ = EncoderBlock(make, "fusion.seq.block0.", d, cfg_.seq_mlp_hidden, cfg_.seq_heads, vcfg_.leaky_slope);
        final_g_ = &make.make("fusion.seq.final.g", {1, d}, InitScheme::Ones);
        final_b_ = &make.make("fusion.seq.final.b", {1, d}, InitScheme::Zeros);
        const auto C = vcfg_.task == TaskKind::Classification ? vcfg_.n_classes : 1;
        head_w_ = &make.make("fusion.frame.w", {d, C}, InitScheme::UniformScaled);
        head_b_ = &make.make("fusion.frame.b", {1, C}, InitScheme::Zeros);
    }

    FusionModel(FusionModel&&) = default;
    FusionModel& operator=(FusionModel&&) = default;

    const FusionConfig& config() const noexcept { return cfg_; }
    const ModelConfig& visual_config() const noexcept { return vcfg_; }
    const std::vector<TemporalModality>& modalities() const noexcept { return mods_; }
    ParameterStore& params() noexcept { return store_; }
    const ParameterStore& params() const noexcept { return store_; }
    std::uint64_t seed() const noexcept { return seed_; }

    std::size_t visual_width() const { return cfg_.use_visual ? vcfg_.n_concepts() * vcfg_.concept_embed : 0; }

    /// Per-frame fused width: visual n_v * m plus n_a * m per modality.
    std::size_t width() const
    {
        std::size_t d = visual_width();
        for (const auto& mod : mods_) d += mod.concepts.size() * vcfg_.concept_embed;
        return d;
    }

    std::size_t total_concepts() const
    {
        std::size_t n = vcfg_.n_concepts();
        for (const auto& mod : mods_) n += mod.concepts.size();
        return n;
    }

    /// Temporal concept heads for B clips; features [B, F].
    ConceptHeadOutput temporal_concepts(Tape& t, std::size_t modality, const DTensor& features) const
    {
        const auto& b = branches_.at(modality);
        const auto n = mods_[modality].concepts.size();
        const auto B = features.dim(0);
        auto h = leaky_relu(add_bcast(matmul(features, t.param(*b.g_w1)), t.param(*b.g_b1)), vcfg_.leaky_slope);
        h = leaky_relu(add_bcast(matmul(h, t.param(*b.g_w2)), t.param(*b.g_b2)), vcfg_.leaky_slope);
        const auto H = h.dim(1);
        // every concept head reads the same G(.) output
        auto shared = add_bcast(t.constant(Array({n, B, H})), reshape(h, {1, B, H}));
        return b.head.apply(t, shared);
    }

    FusionOutputs forward(Tape& t, std::span<const FusionClip* const> clips) const
    {
        const auto B = clips.size();
        const auto k = cfg_.frames;
        const auto m = vcfg_.concept_embed;
        if (B == 0) throw ConfigError("fusion: empty batch");
        std::vector<DTensor> parts;
        if (cfg_.use_visual) {
            const auto vw = visual_width();
            Array vis({B * k, vw});
            for (std::size_t c = 0; c < B; ++c) {
                const auto& clip = *clips[c];
                if (clip.frames.size() != k || clip.visual.shape() != Shape{k, vw}) {
                    throw ShapeError("fusion: clip " + clip.id + " has " + std::to_string(clip.frames.size()) +
                                     " frames, model expects " + std::to_string(k));
                }
                std::copy(clip.visual.values().begin(), clip.visual.values().end(), vis.data() + c * k * vw);
            }
            parts.push_back(reshape(t.constant(vis), {B, k, vw}));
        }
        FusionOutputs out;
        for (std::size_t mi = 0; mi < mods_.size(); ++mi) {
            const auto F = mods_[mi].feature_dim;
            const auto n = mods_[mi].concepts.size();
            Array feats({B, F});
            for (std::size_t c = 0; c < B; ++c) {
                const auto& f = clips[c]->features.at(mi);
                if (f.size() != F) {
                    throw ShapeError("fusion: clip " + clips[c]->id + " modality " + mods_[mi].name + " has " +
                                     std::to_string(f.size()) + " features, expected " + std::to_string(F));
                }
                std::copy(f.begin(), f.end(), feats.data() + c * F);
            }
            auto head = temporal_concepts(t, mi, t.constant(feats));
            // [n, B, m] -> [B, 1, n*m], repeated over the k frames
            auto flat = reshape(VisualModel::flatten_mixed(head.mixed), {B, 1, n * m});
            parts.push_back(add_bcast(t.constant(Array({B, k, n * m})), flat));
            out.temporal.push_back(std::move(head));
        }
        const auto d = width();
        auto x = parts.size() == 1 ? parts[0] : concat_last(parts); // [B, k, d]
        if (cfg_.positional) x = add_bcast(x, t.param(*pos_));
        x = reshape(x, {B * k, d});
        out.fused = x;
        x = block_.apply(t, x, B, k);
        x = EncoderBlock::norm(t, x, final_g_, final_b_);
        out.logits = add_bcast(matmul(x, t.param(*head_w_)), t.param(*head_b_));
        return out;
    }

    FusionLoss loss(const FusionOutputs& o, std::span<const FusionClip* const> clips) const
    {
        const auto B = clips.size();
        const auto k = cfg_.frames;
        FusionLoss l;
        DTensor task;
        if (vcfg_.task == TaskKind::Classification) {
            std::vector<int> labels;
            for (const auto* c : clips)
                for (const auto* f : c->frames) labels.push_back(f->label);
            task = cross_entropy(o.logits, labels);
        } else {
            Array y({B * k});
            for (std::size_t c = 0; c < B; ++c)
                for (std::size_t j = 0; j < k; ++j) y[c * k + j] = clips[c]->frames[j]->target;
            task = mse(reshape(sigmoid(o.logits), {B * k}), y);
        }
        l.task = task.item();
        l.total = task;
        if (mods_.empty()) return l;
        DTensor concept_term;
        for (std::size_t mi = 0; mi < mods_.size(); ++mi) {
            const auto n = mods_[mi].concepts.size();
            Array y({n * B});
            for (std::size_t c = 0; c < B; ++c) {
                const auto& lab = clips[c]->concept_labels.at(mi);
                if (lab.size() != n) throw ShapeError("fusion: concept labels do not match modality " + mods_[mi].name);
                for (std::size_t i = 0; i < n; ++i) y[i * B + c] = lab[i];
            }
            auto term = sum(bce(reshape(o.temporal[mi].prob, {n * B}), y));
            concept_term = mi == 0 ? term : add(concept_term, term);
        }
        concept_term = scale(concept_term, 1.0 / static_cast<double>(B));
        l.concept_loss = concept_term.item();
        l.total = add(task, scale(concept_term, cfg_.lambda_concept));
        return l;
    }

private:
    struct Branch {
        Parameter *g_w1 = nullptr, *g_b1 = nullptr, *g_w2 = nullptr, *g_b2 = nullptr;
        ConceptHead head;
    };

    ModelConfig vcfg_;
    std::vector<TemporalModality> mods_;
    FusionConfig cfg_;
    std::uint64_t seed_ = 0;
    ParameterStore store_;
    std::vector<Branch> branches_;
    Parameter* pos_ = nullptr;
    EncoderBlock block_;
    Parameter *final_g_ = nullptr, *final_b_ = nullptr;
    Parameter *head_w_ = nullptr, *head_b_ = nullptr;
};

inline TemporalModality acoustic_modality(const Dataset& d)
{
    const auto acoustic = d.acoustic_concepts();
    if (acoustic.empty()) throw ConfigError("dataset has no acoustic concepts");
    if (d.clips.empty()) throw ConfigError("dataset has no clips");
    return {kAcoustic, d.clips.front().descriptor.size(), acoustic};
}

/// Clips of one split with frozen visual embeddings computed by `visual`
/// in eval mode. With `with_acoustic` each clip carries the acoustic
/// descriptor and labels as its single modality.
inline std::vector<FusionClip> fusion_clips(const Dataset& d, const std::string& split, const VisualModel& visual,
                                            bool with_acoustic = true)
{
    std::vector<FusionClip> out;
    const auto& vcfg = visual.config();
    const auto vw = vcfg.n_concepts() * vcfg.concept_embed;
    for (const auto& c : d.clips) {
        if (c.split != split) continue;
        FusionClip fc;
        fc.id = c.id;
        for (const auto f : c.frames) fc.frames.push_back(&d.samples[f]);
        const auto pr = predict(visual, fc.frames);
        fc.visual = Array({fc.frames.size(), vw}, std::vector<double>(pr.mixed.values().begin(), pr.mixed.values().end()));
        if (with_acoustic) {
            fc.features.push_back(c.descriptor);
            fc.concept_labels.push_back(c.acoustic_labels);
        }
        out.push_back(std::move(fc));
    }
    return out;
}

struct FusionTrainResult {
    FusionModel model;
    TrainLog log;
};

/// Optimises the temporal branches and sequence model; the visual branch
/// only enters through the cached embeddings of each clip.
inline FusionTrainResult train_fusion(std::span<const FusionClip> train, std::span<const FusionClip> val,
                                      const ModelConfig& visual_cfg, std::vector<TemporalModality> modalities,
                                      const FusionConfig& fcfg, const TrainConfig& tc, std::uint64_t seed,
                                      const EpochCallback& on_epoch = {})
{
    tc.validate();
    if (train.empty()) throw ConfigError("fusion: no training clips");
    FusionTrainResult result{FusionModel(visual_cfg, std::move(modalities), fcfg, seed), {}};
    auto& model = result.model;
    Adam adam(tc.adam);
    std::vector<std::size_t> order(train.size());
    std::size_t step = 0;
    const auto val_set = val.empty() ? train : val;

    auto run_epoch = [&](std::size_t epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        CounterRng shuffler(stream_key(seed, fnv1a64("shuffle:fusion"), epoch));
        shuffle(order, shuffler);
        EpochRecord rec;
        for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
            const auto B = std::min(tc.batch_size, order.size() - start);
            std::vector<const FusionClip*> batch;
            for (std::size_t c = 0; c < B; ++c) batch.push_back(&train[order[start + c]]);
            Tape t(true, stream_key(seed, fnv1a64("dropout:fusion"), step));
            const auto l = model.loss(model.forward(t, batch), batch);
            detail::check_finite(l.total.item(), epoch, step);
            model.params().zero_grad();
            t.backward(l.total);
            adam.step(model.params());
            rec.task += l.task * static_cast<double>(B);
            rec.concept_loss += l.concept_loss * static_cast<double>(B);
            rec.total += l.total.item() * static_cast<double>(B);
            ++step;
        }
        const double n = static_cast<double>(order.size());
        rec.task /= n;
        rec.concept_loss /= n;
        rec.total /= n;
        return rec;
    };
    auto evaluate = [&] {
        detail::ValScore score;
        std::size_t correct = 0, frames = 0;
        for (std::size_t start = 0; start < val_set.size(); start += kEvalBatch) {
            const auto B = std::min(kEvalBatch, val_set.size() - start);
            std::vector<const FusionClip*> batch;
            for (std::size_t c = 0; c < B; ++c) batch.push_back(&val_set[start + c]);
            Tape t(false);
            const auto o = model.forward(t, batch);
            score.loss += model.loss(o, batch).task * static_cast<double>(B);
            if (visual_cfg.task == TaskKind::Classification) {
                const auto C = o.logits.dim(1);
                std::size_t r = 0;
                for (const auto* c : batch) {
                    for (const auto* f : c->frames) {
                        const double* row = o.logits.value().data() + r++ * C;
                        if (std::max_element(row, row + C) - row == f->label) ++correct;
                        ++frames;
                    }
                }
            }
        }
        score.loss /= static_cast<double>(val_set.size());
        if (frames) score.accuracy = static_cast<double>(correct) / static_cast<double>(frames);
        return score;
    };
    detail::early_stopping_loop(model.params(), tc, "fusion", result.log, run_epoch, evaluate, on_epoch);
    return result;
}

struct FramePrediction {
    std::string clip_id;
    std::size_t frame = 0;
    int predicted = 0;
    double output = 0.0; // regression output or winning logit
    int label = 0;
    std::vector<double> visual_probs;
    std::vector<double> temporal_probs; // every modality, in order
};

inline std::vector<FramePrediction> predict_frames(const FusionModel& model, const VisualModel& visual,
                                                   std::span<const FusionClip> clips)
{
    std::vector<FramePrediction> out;
    const bool cls = model.visual_config().task == TaskKind::Classification;
    for (std::size_t start = 0; start < clips.size(); start += kEvalBatch) {
        const auto B = std::min(kEvalBatch, clips.size() - start);
        std::vector<const FusionClip*> batch;
        for (std::size_t c = 0; c < B; ++c) batch.push_back(&clips[start + c]);
        Tape t(false);
        const auto o = model.forward(t, batch);
        const auto C = o.logits.dim(1);
        const auto k = model.config().frames;
        for (std::size_t c = 0; c < B; ++c) {
            const auto vis = predict(visual, batch[c]->frames);
            std::vector<double> temporal;
            for (const auto& head : o.temporal) {
                const auto n = head.prob.dim(0);
                for (std::size_t i = 0; i < n; ++i) temporal.push_back(head.prob.value()[i * B + c]);
            }
            for (std::size_t j = 0; j < k; ++j) {
                FramePrediction fp;
                fp.clip_id = batch[c]->id;
                fp.frame = j;
                fp.label = batch[c]->frames[j]->label;
                const double* row = o.logits.value().data() + (c * k + j) * C;
                if (cls) {
                    fp.predicted = static_cast<int>(std::max_element(row, row + C) - row);
                    fp.output = row[fp.predicted];
                } else {
                    fp.output = 1.0 / (1.0 + std::exp(-row[0]));
                }
                const auto n_v = vis.probs.dim(1);
                fp.visual_probs.assign(vis.probs.data() + j * n_v, vis.probs.data() + (j + 1) * n_v);
                fp.temporal_probs = temporal;
                out.push_back(std::move(fp));
            }
        }
    }
    return out;
}

inline double frame_accuracy(std::span<const FramePrediction> preds)
{
    if (preds.empty()) return 0.0;
    std::size_t correct = 0;
    for (const auto& p : preds) correct += p.predicted == p.label;
    return static_cast<double>(correct) / static_cast<double>(preds.size());
}

inline void write_frame_predictions_csv(const std::string& path, const FusionModel& model,
                                        std::span<const FramePrediction> preds)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "clip_id,frame_idx,prediction";
    for (const auto& c : model.visual_config().concepts.specs()) out << ",p_" << c.name;
    for (const auto& mod : model.modalities())
        for (const auto& c : mod.concepts.specs()) out << ",p_" << c.name;
    out << '\n';
    const bool cls = model.visual_config().task == TaskKind::Classification;
    for (const auto& p : preds) {
        out << p.clip_id << ',' << p.frame << ',' << (cls ? std::to_string(p.predicted) : format_double(p.output));
        for (const double v : p.visual_probs) out << ',' << format_double(v);
        for (const double v : p.temporal_probs) out << ',' << format_double(v);
        out << '\n';
    }
}

} // namespace agcm

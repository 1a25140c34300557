#pragma once

#include "agcm/acg.hpp"
#include "agcm/augment.hpp"
#include "agcm/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace agcm {

struct EpochRecord {
    std::string stage = "joint";
    std::size_t epoch = 0;
    double task = 0.0;
    double concept_loss = 0.0;
    double map = 0.0;
    double total = 0.0;
    double val_loss = 0.0; // early-stopping criterion
    double val_accuracy = 0.0;
};

struct TrainLog {
    std::vector<EpochRecord> epochs;
    std::size_t epochs_run = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

struct VisualTrainResult {
    VisualModel model;
    TrainLog log;
};

/// Eval-mode outputs for a set of samples, sample-major.
struct VisualPredictions {
    std::size_t count = 0;
    Array probs;     // [N, n]
    Array attn;      // [N, n, P]
    Array mixed;     // [N, n, m]
    Array embed_pos; // [N, n, m]
    Array embed_neg; // [N, n, m]
    Array task_out;  // [N, C] logits or [N, 1] regression output
    std::vector<int> predicted; // argmax class (classification)
};

inline constexpr std::size_t kEvalBatch = 64;

inline VisualPredictions predict(const VisualModel& model, std::span<const Sample* const> samples)
{
    const auto& cfg = model.config();
    const auto n = cfg.n_concepts();
    const auto P = cfg.num_patches();
    const auto m = cfg.concept_embed;
    const auto N = samples.size();
    const auto C = cfg.task == TaskKind::Classification ? cfg.n_classes : 1;
    VisualPredictions out;
    out.count = N;
    if (N == 0) return out;
    out.probs = Array({N, n});
    out.attn = Array({N, n, P});
    out.mixed = Array({N, n, m});
    out.embed_pos = Array({N, n, m});
    out.embed_neg = Array({N, n, m});
    out.task_out = Array({N, C});
    for (std::size_t start = 0; start < N; start += kEvalBatch) {
        const auto B = std::min(kEvalBatch, N - start);
        const auto batch = make_batch(cfg, samples.subspan(start, B));
        Tape t(false);
        const auto o = model.forward(t, batch.patches, B);
        for (std::size_t b = 0; b < B; ++b) {
            const auto s = start + b;
            for (std::size_t i = 0; i < n; ++i) {
                out.probs.at(s, i) = o.prob.value()[i * B + b];
                for (std::size_t p = 0; p < P; ++p) out.attn[(s * n + i) * P + p] = o.attn.value()[(i * B + b) * P + p];
                for (std::size_t k = 0; k < m; ++k) {
                    out.mixed[(s * n + i) * m + k] = o.mixed_stacked.value()[(i * B + b) * m + k];
                    out.embed_pos[(s * n + i) * m + k] = o.embed_pos.value()[(i * B + b) * m + k];
                    out.embed_neg[(s * n + i) * m + k] = o.embed_neg.value()[(i * B + b) * m + k];
                }
            }
            for (std::size_t c = 0; c < C; ++c) out.task_out.at(s, c) = o.task_out.value().at(b, c);
        }
    }
    out.predicted.resize(N, 0);
    if (cfg.task == TaskKind::Classification) {
        for (std::size_t s = 0; s < N; ++s) {
            const double* row = out.task_out.data() + s * C;
            out.predicted[s] = static_cast<int>(std::max_element(row, row + C) - row);
        }
    }
    return out;
}

namespace detail {

struct ValScore {
    double loss = 0.0;
    double accuracy = 0.0;
};

/// Sample-weighted mean of the selected loss terms over a split, eval mode.
inline ValScore validate(const VisualModel& model, std::span<const Sample* const> samples, LossSelection sel)
{
    ValScore score;
    if (samples.empty()) return score;
    const auto& cfg = model.config();
    std::size_t correct = 0;
    for (std::size_t start = 0; start < samples.size(); start += kEvalBatch) {
        const auto B = std::min(kEvalBatch, samples.size() - start);
        const auto batch = make_batch(cfg, samples.subspan(start, B));
        Tape t(false);
        const auto o = model.forward(t, batch.patches, B);
        const auto terms = model.joint_loss(o, batch.targets, sel);
        score.loss += terms.total.item() * static_cast<double>(B);
        if (cfg.task == TaskKind::Classification) {
            const auto& lg = o.logits.value();
            const auto C = lg.dim(1);
            for (std::size_t b = 0; b < B; ++b) {
                const double* row = lg.data() + b * C;
                if (std::max_element(row, row + C) - row == batch.targets.labels[b]) ++correct;
            }
        }
    }
    score.loss /= static_cast<double>(samples.size());
    score.accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
    return score;
}

inline void check_finite(double loss, std::size_t epoch, std::size_t step)
{
    if (!std::isfinite(loss)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
    }
}

/// Shared early-stopping loop. `run_epoch` trains one epoch and returns its
/// record; `evaluate` scores the validation split (lower is better).
inline void early_stopping_loop(ParameterStore& store, const TrainConfig& tc, const std::string& stage, TrainLog& log,
                                const std::function<EpochRecord(std::size_t)>& run_epoch,
                                const std::function<ValScore()>& evaluate, const EpochCallback& on_epoch)
{
    double best = std::numeric_limits<double>::infinity();
    auto best_values = store.snapshot();
    std::size_t stale = 0;
    for (std::size_t epoch = 1; epoch <= tc.max_epochs; ++epoch) {
        auto rec = run_epoch(epoch);
        const auto val = evaluate();
        rec.stage = stage;
        rec.epoch = epoch;
        rec.val_loss = val.loss;
        rec.val_accuracy = val.accuracy;
        log.epochs.push_back(rec);
        ++log.epochs_run;
        if (on_epoch) on_epoch(rec);
        if (val.loss < best) {
            best = val.loss;
            best_values = store.snapshot();
            stale = 0;
        } else if (++stale >= tc.patience) {
            break;
        }
    }
    store.restore(best_values);
}

} // namespace detail

struct AugmentSettings {
    ConceptSet concepts;
    double radius = 0.0;
};

/// Trains the visual model on the `sel` terms with Adam, early stopping on
/// the `stop_on` terms over the validation split.
inline void fit_visual(VisualModel& model, std::span<const Sample* const> train, std::span<const Sample* const> val,
                       const TrainConfig& tc, std::uint64_t seed, LossSelection sel, LossSelection stop_on,
                       const std::string& stage, TrainLog& log, const EpochCallback& on_epoch = {})
{
    tc.validate();
    if (train.empty()) throw ConfigError("training split is empty");
    const auto& cfg = model.config();
    Adam adam(tc.adam);
    std::vector<std::size_t> order(train.size());
    std::size_t step = 0;
    const double radius = default_roi_radius(cfg.image_width);

    auto run_epoch = [&](std::size_t epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        CounterRng shuffler(stream_key(seed, fnv1a64("shuffle:" + stage), epoch));
        shuffle(order, shuffler);
        EpochRecord rec;
        double seen = 0.0;
        std::vector<Sample> augmented;
        for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
            const auto B = std::min(tc.batch_size, order.size() - start);
            std::vector<const Sample*> members;
            if (tc.augment) {
                augmented.clear();
                augmented.reserve(B);
                for (std::size_t k = 0; k < B; ++k) {
                    augmented.push_back(augment(*train[order[start + k]], AugmentOps{}, cfg.concepts, cfg.patch, radius,
                                                stream_key(seed, fnv1a64("augment"), step, k)));
                }
                for (const auto& s : augmented) members.push_back(&s);
            } else {
                for (std::size_t k = 0; k < B; ++k) members.push_back(train[order[start + k]]);
            }
            const auto batch = make_batch(cfg, members);
            Tape t(true, stream_key(seed, fnv1a64("dropout:" + stage), step));
            const auto o = model.forward(t, batch.patches, B);
            const auto terms = model.joint_loss(o, batch.targets, sel);
            detail::check_finite(terms.total.item(), epoch, step);
            model.params().zero_grad();
            t.backward(terms.total);
            adam.step(model.params());
            const double w = static_cast<double>(B);
            rec.task += terms.task * w;
            rec.concept_loss += terms.concept_loss * w;
            rec.map += terms.map * w;
            rec.total += terms.total.item() * w;
            seen += w;
            ++step;
        }
        rec.task /= seen;
        rec.concept_loss /= seen;
        rec.map /= seen;
        rec.total /= seen;
        return rec;
    };
    auto evaluate = [&] { return detail::validate(model, val.empty() ? train : val, stop_on); };
    detail::early_stopping_loop(model.params(), tc, stage, log, run_epoch, evaluate, on_epoch);
}

/// End-to-end training on the joint objective.
inline VisualTrainResult train_visual(std::span<const Sample* const> train, std::span<const Sample* const> val,
                                      const ModelConfig& cfg, const TrainConfig& tc, std::uint64_t seed,
                                      LossSelection sel = {}, const EpochCallback& on_epoch = {})
{
    VisualTrainResult result{VisualModel(cfg, seed), {}};
    fit_visual(result.model, train, val, tc, seed, sel, LossSelection{true, false, false}, "joint", result.log,
               on_epoch);
    return result;
}

/// Freezes every parameter except the task predictor.
inline void freeze_concept_branch(VisualModel& model)
{
    const auto keep = VisualModel::task_param_names();
    for (auto* p : model.params().all()) {
        p->trainable = std::find(keep.begin(), keep.end(), p->name) != keep.end();
    }
}

/// Two-stage training: concepts and maps first, then only the task
/// predictor on frozen (eval-mode) concept embeddings.
inline VisualTrainResult train_by_step(std::span<const Sample* const> train, std::span<const Sample* const> val,
                                       const ModelConfig& cfg, const TrainConfig& tc, std::uint64_t seed,
                                       const EpochCallback& on_epoch = {})
{
    VisualTrainResult result{VisualModel(cfg, seed), {}};
    auto& model = result.model;
    const LossSelection concept_terms{false, true, true};
    fit_visual(model, train, val, tc, seed, concept_terms, concept_terms, "concepts", result.log, on_epoch);

    freeze_concept_branch(model);
    const auto val_set = val.empty() ? train : val;
    const auto train_feats = predict(model, train);
    const auto val_feats = predict(model, val_set);
    const auto nm = cfg.n_concepts() * cfg.concept_embed;

    auto rows = [&](const VisualPredictions& f, std::span<const std::size_t> idx) {
        Array x({idx.size(), nm});
        for (std::size_t r = 0; r < idx.size(); ++r) {
            std::copy_n(f.mixed.data() + idx[r] * nm, nm, x.data() + r * nm);
        }
        return x;
    };
    auto head_loss = [&](Tape& t, const Array& x, std::span<const Sample* const> members) {
        const auto logits = model.task_predict(t, t.constant(x));
        if (cfg.task == TaskKind::Classification) {
            std::vector<int> labels;
            for (const auto* s : members) labels.push_back(s->label);
            return cross_entropy(logits, labels);
        }
        Array y({members.size()});
        for (std::size_t k = 0; k < members.size(); ++k) y[k] = members[k]->target;
        return mse(reshape(sigmoid(logits), {members.size()}), y);
    };

    Adam adam(tc.adam);
    std::vector<std::size_t> order(train.size());
    std::size_t step = 0;
    auto run_epoch = [&](std::size_t epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        CounterRng shuffler(stream_key(seed, fnv1a64("shuffle:task"), epoch));
        shuffle(order, shuffler);
        EpochRecord rec;
        for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
            const auto B = std::min(tc.batch_size, order.size() - start);
            std::span<const std::size_t> idx(order.data() + start, B);
            std::vector<const Sample*> members;
            for (const auto i : idx) members.push_back(train[i]);
            Tape t(true);
            const auto loss = head_loss(t, rows(train_feats, idx), members);
            detail::check_finite(loss.item(), epoch, step);
            model.params().zero_grad();
            t.backward(loss);
            adam.step(model.params());
            rec.task += loss.item() * static_cast<double>(B);
            ++step;
        }
        rec.task /= static_cast<double>(order.size());
        rec.total = rec.task;
        return rec;
    };
    auto evaluate = [&] {
        std::vector<std::size_t> idx(val_set.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        Tape t(false);
        const auto loss = head_loss(t, rows(val_feats, idx), val_set);
        detail::ValScore score{loss.item(), 0.0};
        if (cfg.task == TaskKind::Classification) {
            const auto logits = model.task_predict(t, t.constant(rows(val_feats, idx)));
            std::size_t correct = 0;
            const auto C = logits.dim(1);
            for (std::size_t r = 0; r < idx.size(); ++r) {
                const double* row = logits.value().data() + r * C;
                if (std::max_element(row, row + C) - row == val_set[r]->label) ++correct;
            }
            score.accuracy = static_cast<double>(correct) / static_cast<double>(idx.size());
        }
        return score;
    };
    detail::early_stopping_loop(model.params(), tc, "task", result.log, run_epoch, evaluate, on_epoch);
    model.params().set_trainable(true);
    return result;
}

} // namespace agcm

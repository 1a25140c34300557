#include "fixtures.hpp"

#include <gtest/gtest.h>

using namespace agcm;
using namespace agcm::testing;

namespace {

const Dataset& data()
{
    static const Dataset d = generate_visual(tiny_plant(), SplitCounts{64, 16, 16}, 3);
    return d;
}

TrainConfig quick(std::size_t epochs, double lr = 3e-3)
{
    TrainConfig tc;
    tc.adam.lr = lr;
    tc.max_epochs = epochs;
    tc.patience = epochs;
    return tc;
}

} // namespace

TEST(Train, ZeroLearningRateLeavesWeightsUnchanged)
{
    const auto cfg = tiny_model(data());
    const auto tr = split_ptrs(data(), "train"), va = split_ptrs(data(), "val");
    const VisualModel fresh(cfg, 5);
    const auto r = train_visual(tr, va, cfg, quick(2, 0.0), 5);
    EXPECT_EQ(r.model.params().digest(), fresh.params().digest());
    EXPECT_EQ(r.log.epochs_run, 2u);
}

TEST(Train, LossFallsOverTenEpochs)
{
    const auto cfg = tiny_model(data());
    const auto tr = split_ptrs(data(), "train"), va = split_ptrs(data(), "val");
    const auto r = train_visual(tr, va, cfg, quick(10), 6);
    ASSERT_EQ(r.log.epochs.size(), 10u);
    EXPECT_LT(r.log.epochs[9].total, r.log.epochs[0].total);
    for (const auto& e : r.log.epochs) {
        EXPECT_NEAR(e.total, e.task + cfg.lambda_concept * e.concept_loss + cfg.lambda_map * e.map, 1e-9);
    }
}

TEST(Train, DeterministicForFixedSeed)
{
    const auto cfg = tiny_model(data());
    const auto tr = split_ptrs(data(), "train"), va = split_ptrs(data(), "val");
    auto tc = quick(3);
    tc.augment = true;
    const auto a = train_visual(tr, va, cfg, tc, 7);
    const auto b = train_visual(tr, va, cfg, tc, 7);
    EXPECT_EQ(a.model.params().digest(), b.model.params().digest());
    const auto c = train_visual(tr, va, cfg, tc, 8);
    EXPECT_NE(a.model.params().digest(), c.model.params().digest());
}

TEST(Train, EarlyStoppingRestoresBestEpoch)
{
    const auto cfg = tiny_model(data());
    const auto tr = split_ptrs(data(), "train"), va = split_ptrs(data(), "val");
    auto tc = quick(40, 3e-2);
    tc.patience = 2;
    const auto r = train_visual(tr, va, cfg, tc, 9);
    double best = 1e300;
    for (const auto& e : r.log.epochs) best = std::min(best, e.val_loss);
    EXPECT_LE(r.log.epochs_run, 40u);
    // the restored weights reproduce the best validation loss
    double loss = 0.0;
    {
        const auto pr = predict(r.model, va);
        for (std::size_t s = 0; s < va.size(); ++s) {
            const double* row = pr.task_out.data() + s * cfg.n_classes;
            double mx = row[0];
            for (std::size_t c = 1; c < cfg.n_classes; ++c) mx = std::max(mx, row[c]);
            double z = 0.0;
            for (std::size_t c = 0; c < cfg.n_classes; ++c) z += std::exp(row[c] - mx);
            loss += -(row[va[s]->label] - mx - std::log(z));
        }
        loss /= static_cast<double>(va.size());
    }
    EXPECT_NEAR(loss, best, 1e-9);
}

TEST(Train, FreezeLeavesOnlyTaskPredictorTrainable)
{
    VisualModel m(tiny_model(data()), 1);
    freeze_concept_branch(m);
    for (const auto* p : m.params().all()) {
        EXPECT_EQ(p->trainable, p->name == "acg.task.w" || p->name == "acg.task.b") << p->name;
    }
}

TEST(Train, FrozenBranchGetsNoUpdate)
{
    const auto cfg = tiny_model(data());
    const auto tr = split_ptrs(data(), "train");
    VisualModel m(cfg, 2);
    freeze_concept_branch(m);
    const auto before = m.params().snapshot();
    const auto batch = make_batch(cfg, std::span<const Sample* const>(tr.data(), 8));
    Tape t(true, 1);
    m.params().zero_grad();
    t.backward(sum(m.forward(t, batch.patches, 8).logits));
    Adam adam(AdamConfig{1e-2});
    adam.step(m.params());
    const auto after = m.params().snapshot();
    const auto params = m.params().all();
    for (std::size_t k = 0; k < params.size(); ++k) {
        EXPECT_EQ(before[k] != after[k], params[k]->trainable) << params[k]->name;
    }
}

TEST(Train, ByStepFirstStageLowersConceptLoss)
{
    const auto cfg = tiny_model(data());
    const auto tr = split_ptrs(data(), "train"), va = split_ptrs(data(), "val");
    const auto r = train_by_step(tr, va, cfg, quick(6), 10);
    std::vector<EpochRecord> first, second;
    for (const auto& e : r.log.epochs) (e.stage == "concepts" ? first : second).push_back(e);
    ASSERT_EQ(first.size(), 6u);
    ASSERT_EQ(second.size(), 6u);
    EXPECT_LT(first.back().concept_loss, first.front().concept_loss);
    for (const auto& e : first) EXPECT_EQ(e.task, 0.0);
    EXPECT_LT(second.back().task, second.front().task);
    for (const auto* p : r.model.params().all()) EXPECT_TRUE(p->trainable);
}

TEST(Train, ByStepSecondStageKeepsConceptBranch)
{
    const auto cfg = tiny_model(data());
    const auto tr = split_ptrs(data(), "train"), va = split_ptrs(data(), "val");
    auto tc = quick(3);
    // stage-one only, for comparison: the same seed and schedule
    VisualModel stage1(cfg, 11);
    TrainLog log;
    fit_visual(stage1, tr, va, tc, 11, {false, true, true}, {false, true, true}, "concepts", log);
    const auto full = train_by_step(tr, va, cfg, tc, 11);
    for (const auto* p : stage1.params().all()) {
        if (p->name.starts_with("acg.task.")) continue;
        EXPECT_EQ(p->value, full.model.params().get(p->name).value) << p->name;
    }
}

TEST(Train, RejectsBadSettings)
{
    const auto cfg = tiny_model(data());
    const auto tr = split_ptrs(data(), "train");
    auto tc = quick(1);
    tc.batch_size = 0;
    EXPECT_THROW(train_visual(tr, {}, cfg, tc, 1), ConfigError);
    EXPECT_THROW(train_visual({}, {}, cfg, quick(1), 1), ConfigError);
}

TEST(Predict, MatchesBatchedForward)
{
    const auto cfg = tiny_model(data());
    const auto te = split_ptrs(data(), "test");
    const VisualModel m(cfg, 12);
    const auto pr = predict(m, te);
    const auto batch = make_batch(cfg, te);
    Tape t(false);
    const auto o = m.forward(t, batch.patches, te.size());
    const auto n = cfg.n_concepts();
    for (std::size_t s = 0; s < te.size(); ++s) {
        for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(pr.probs.at(s, i), o.prob.value()[i * te.size() + s], 1e-12);
        for (std::size_t c = 0; c < cfg.n_classes; ++c) EXPECT_NEAR(pr.task_out.at(s, c), o.logits.value().at(s, c), 1e-12);
    }
}

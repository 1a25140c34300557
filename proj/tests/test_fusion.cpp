#include "fixtures.hpp"

#include "agcm/fusion.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace agcm;
using namespace agcm::testing;

namespace {

constexpr std::size_t kFrames = 4;

struct World {
    Dataset data;
    VisualModel visual;
};

const World& world()
{
    static const World w = [] {
        auto p = tiny_plant();
        p.acoustic.silence_prob = 0.3;
        auto d = generate_multimodal(p, SplitCounts{60, 12, 12}, kFrames, 5);
        VisualModel v(tiny_model(d), 2);
        return World{std::move(d), std::move(v)};
    }();
    return w;
}

FusionConfig small_fusion(std::size_t frames = kFrames)
{
    FusionConfig f;
    f.extractor_hidden = 8;
    f.seq_heads = 2;
    f.seq_mlp_hidden = 8;
    f.frames = frames;
    return f;
}

std::vector<const FusionClip*> ptrs(const std::vector<FusionClip>& clips)
{
    std::vector<const FusionClip*> out;
    for (const auto& c : clips) out.push_back(&c);
    return out;
}

TrainConfig quick(std::size_t epochs, double lr)
{
    TrainConfig tc;
    tc.adam.lr = lr;
    tc.max_epochs = epochs;
    tc.patience = epochs;
    return tc;
}

} // namespace

TEST(Fusion, WidthConcatenatesModalities)
{
    const auto& w = world();
    const FusionModel f(w.visual.config(), {acoustic_modality(w.data)}, small_fusion(), 1);
    EXPECT_EQ(f.width(), (3 + 6) * 4u);
    EXPECT_EQ(f.total_concepts(), 9u);
    const auto clips = fusion_clips(w.data, "train", w.visual);
    Tape t(false);
    const auto o = f.forward(t, ptrs(clips));
    EXPECT_EQ(o.logits.shape(), (Shape{clips.size() * kFrames, 4}));
    EXPECT_EQ(o.temporal.size(), 1u);
}

TEST(Fusion, SingleFrameMatchesNonSequentialNetwork)
{
    const auto& w = world();
    auto d = generate_multimodal(tiny_plant(), SplitCounts{3, 0, 0}, 1, 8);
    const auto clips = fusion_clips(d, "train", w.visual);
    const FusionModel f(w.visual.config(), {acoustic_modality(d)}, small_fusion(1), 3);
    Tape t(false);
    const auto o = f.forward(t, ptrs(clips));

    // one attention position: the block reduces to x + out(v(LN x)) followed by the MLP
    const auto& ps = f.params();
    auto P = [&](const std::string& n) { return t.constant(ps.get("fusion.seq." + n).value); };
    const auto D = f.width();
    auto x = o.fused;
    auto ln = [&](const DTensor& v, const std::string& g, const std::string& b) {
        return add_bcast(mul_bcast(layer_norm(v), P(g)), P(b));
    };
    const auto qkv_w = P("block0.attn.qkv.w"), qkv_b = P("block0.attn.qkv.b");
    const auto v = add_bcast(matmul(ln(x, "block0.ln1.g", "block0.ln1.b"), slice(qkv_w, 1, 2 * D, D)),
                             slice(qkv_b, 1, 2 * D, D));
    auto y = add(x, add_bcast(matmul(v, P("block0.attn.out.w")), P("block0.attn.out.b")));
    auto h = leaky_relu(add_bcast(matmul(ln(y, "block0.ln2.g", "block0.ln2.b"), P("block0.mlp.fc1.w")),
                                  P("block0.mlp.fc1.b")),
                        w.visual.config().leaky_slope);
    y = add(y, add_bcast(matmul(h, P("block0.mlp.fc2.w")), P("block0.mlp.fc2.b")));
    y = ln(y, "final.g", "final.b");
    const auto logits = add_bcast(matmul(y, t.constant(ps.get("fusion.frame.w").value)),
                                  t.constant(ps.get("fusion.frame.b").value));
    for (std::size_t i = 0; i < logits.size(); ++i) EXPECT_NEAR(o.logits.value()[i], logits.value()[i], 1e-12);
}

TEST(Fusion, VisualEmbeddingsComeFromTheFrozenBranch)
{
    const auto& w = world();
    const auto clips = fusion_clips(w.data, "val", w.visual);
    const auto& c = clips.front();
    const auto pr = predict(w.visual, c.frames);
    EXPECT_TRUE(std::ranges::equal(c.visual.values(), pr.mixed.values()));

    // same frames, different acoustic window: identical visual part
    auto other = c;
    for (auto& v : other.features[0]) v = 1.0 - v;
    const FusionModel f(w.visual.config(), {acoustic_modality(w.data)}, small_fusion(), 4);
    Tape t(false);
    const FusionClip* both[] = {&c, &other};
    const auto o = f.forward(t, both);
    const auto vw = f.visual_width(), D = f.width();
    bool acoustic_differs = false;
    for (std::size_t j = 0; j < kFrames; ++j) {
        for (std::size_t k = 0; k < D; ++k) {
            const double a = o.fused.value()[j * D + k], b = o.fused.value()[(kFrames + j) * D + k];
            if (k < vw) EXPECT_EQ(a, b);
            else acoustic_differs = acoustic_differs || a != b;
        }
    }
    EXPECT_TRUE(acoustic_differs);
}

TEST(Fusion, AcousticEmbeddingsSharedAcrossFrames)
{
    const auto& w = world();
    auto fc = small_fusion();
    fc.positional = false;
    const FusionModel f(w.visual.config(), {acoustic_modality(w.data)}, fc, 5);
    const auto clips = fusion_clips(w.data, "test", w.visual);
    Tape t(false);
    const auto o = f.forward(t, ptrs(clips));
    const auto vw = f.visual_width(), D = f.width();
    for (std::size_t c = 0; c < clips.size(); ++c)
        for (std::size_t j = 1; j < kFrames; ++j)
            for (std::size_t k = vw; k < D; ++k)
                ASSERT_EQ(o.fused.value()[(c * kFrames + j) * D + k], o.fused.value()[c * kFrames * D + k]);
}

TEST(Fusion, PermutationEquivariantWithoutPositions)
{
    const auto& w = world();
    auto fc = small_fusion();
    fc.positional = false;
    const FusionModel f(w.visual.config(), {acoustic_modality(w.data)}, fc, 6);
    const auto clips = fusion_clips(w.data, "train", w.visual);
    const auto& c = clips[3];
    const std::size_t perm[kFrames] = {2, 0, 3, 1};
    auto shuffled = c;
    const auto vw = c.visual.dim(1);
    for (std::size_t j = 0; j < kFrames; ++j) {
        shuffled.frames[j] = c.frames[perm[j]];
        std::copy_n(c.visual.data() + perm[j] * vw, vw, shuffled.visual.data() + j * vw);
    }
    Tape t(false);
    const FusionClip* a[] = {&c};
    const FusionClip* b[] = {&shuffled};
    const auto oa = f.forward(t, a), ob = f.forward(t, b);
    const auto C = oa.logits.dim(1);
    for (std::size_t j = 0; j < kFrames; ++j)
        for (std::size_t k = 0; k < C; ++k)
            EXPECT_NEAR(ob.logits.value()[j * C + k], oa.logits.value()[perm[j] * C + k], 1e-12);
}

TEST(Fusion, LossDecomposes)
{
    const auto& w = world();
    auto fc = small_fusion();
    fc.lambda_concept = 0.7;
    const FusionModel f(w.visual.config(), {acoustic_modality(w.data)}, fc, 7);
    const auto clips = fusion_clips(w.data, "train", w.visual);
    Tape t(false);
    const auto batch = ptrs(clips);
    const auto l = f.loss(f.forward(t, batch), batch);
    EXPECT_NEAR(l.total.item(), l.task + 0.7 * l.concept_loss, 1e-10);
    EXPECT_GT(l.concept_loss, 0.0);
}

TEST(Fusion, TrainingLeavesVisualBranchBitIdentical)
{
    const auto& w = world();
    const auto before = w.visual.params().digest();
    const auto tr = fusion_clips(w.data, "train", w.visual), va = fusion_clips(w.data, "val", w.visual);
    const auto r = train_fusion(tr, va, w.visual.config(), {acoustic_modality(w.data)}, small_fusion(),
                                quick(3, 1e-3), 8);
    EXPECT_EQ(w.visual.params().digest(), before);
    const FusionModel fresh(w.visual.config(), {acoustic_modality(w.data)}, small_fusion(), 8);
    EXPECT_NE(r.model.params().digest(), fresh.params().digest());
    for (const auto* p : r.model.params().all()) EXPECT_TRUE(p->name.starts_with("fusion.")) << p->name;
}

TEST(Fusion, ZeroLearningRateLeavesWeightsUnchanged)
{
    const auto& w = world();
    const auto tr = fusion_clips(w.data, "train", w.visual);
    const auto r = train_fusion(tr, {}, w.visual.config(), {acoustic_modality(w.data)}, small_fusion(),
                                quick(2, 0.0), 9);
    const FusionModel fresh(w.visual.config(), {acoustic_modality(w.data)}, small_fusion(), 9);
    EXPECT_EQ(r.model.params().digest(), fresh.params().digest());
}

TEST(Fusion, TrainingIsDeterministic)
{
    const auto& w = world();
    const auto tr = fusion_clips(w.data, "train", w.visual);
    auto run = [&] {
        return train_fusion(tr, {}, w.visual.config(), {acoustic_modality(w.data)}, small_fusion(), quick(2, 1e-3), 10)
            .model.params()
            .digest();
    };
    EXPECT_EQ(run(), run());
}

TEST(Fusion, SilentClipsLearnLowPitchAndLoudness)
{
    const auto& w = world();
    const auto tr = fusion_clips(w.data, "train", w.visual);
    const auto r = train_fusion(tr, {}, w.visual.config(), {acoustic_modality(w.data)}, small_fusion(),
                                quick(60, 1e-2), 11);
    const auto acoustic = w.data.acoustic_concepts();
    const auto pi = acoustic.index_of("pitch"), li = acoustic.index_of("loudness");
    const auto all = fusion_clips(w.data, "test", w.visual);
    std::vector<FusionClip> silent;
    for (const auto& c : all) {
        if (std::all_of(c.features[0].begin() + kFrames, c.features[0].begin() + 2 * kFrames,
                        [](double v) { return v == 0.0; }))
            silent.push_back(c);
    }
    // a hand-made silent window as well
    silent.push_back(all.front());
    std::fill(silent.back().features[0].begin(), silent.back().features[0].begin() + 2 * kFrames, 0.0);
    Tape t(false);
    const auto o = r.model.forward(t, ptrs(silent));
    const auto B = silent.size();
    for (std::size_t c = 0; c < B; ++c) {
        EXPECT_LT(o.temporal[0].prob.value()[pi * B + c], 0.1);
        EXPECT_LT(o.temporal[0].prob.value()[li * B + c], 0.1);
    }
}

TEST(Fusion, SecondModalityNeedsNoNewPlumbing)
{
    const auto& w = world();
    std::vector<ConceptSpec> specs(2);
    specs[0].name = "dummy_a";
    specs[1].name = "dummy_b";
    for (auto& s : specs) s.modality = "dummy";
    TemporalModality dummy{"dummy", 3, ConceptSet(specs)};
    auto fc = small_fusion();
    const FusionModel f(w.visual.config(), {acoustic_modality(w.data), dummy}, fc, 12);
    EXPECT_EQ(f.width(), (3 + 6 + 2) * 4u);
    auto clips = fusion_clips(w.data, "train", w.visual);
    for (auto& c : clips) {
        c.features.push_back({0.1, 0.2, 0.3});
        c.concept_labels.push_back({1.0, 0.0});
    }
    Tape t(true, 1);
    const auto batch = ptrs(clips);
    const auto l = f.loss(f.forward(t, batch), batch);
    t.backward(l.total);
    EXPECT_TRUE(std::isfinite(l.total.item()));
    bool reached = false;
    for (const auto* p : f.params().all()) {
        if (!p->name.starts_with("fusion.dummy.")) continue;
        for (const double g : p->grad.values()) reached = reached || g != 0.0;
    }
    EXPECT_TRUE(reached);
}

TEST(Fusion, VisualOnlyBaselineHasNoTemporalBranch)
{
    const auto& w = world();
    const FusionModel f(w.visual.config(), {}, small_fusion(), 13);
    EXPECT_EQ(f.width(), 12u);
    const auto clips = fusion_clips(w.data, "train", w.visual, false);
    Tape t(false);
    const auto l = f.loss(f.forward(t, ptrs(clips)), ptrs(clips));
    EXPECT_EQ(l.concept_loss, 0.0);
}

TEST(Fusion, RejectsMismatchedClips)
{
    const auto& w = world();
    const FusionModel f(w.visual.config(), {acoustic_modality(w.data)}, small_fusion(3), 14);
    const auto clips = fusion_clips(w.data, "train", w.visual);
    Tape t(false);
    EXPECT_THROW(f.forward(t, ptrs(clips)), ShapeError);
    auto fc = small_fusion();
    fc.frames = 0;
    EXPECT_THROW(FusionModel(w.visual.config(), {}, fc, 1), ConfigError);
}

TEST(Fusion, FrameCsvHasOneRowPerFrame)
{
    const auto& w = world();
    const FusionModel f(w.visual.config(), {acoustic_modality(w.data)}, small_fusion(), 15);
    const auto clips = fusion_clips(w.data, "test", w.visual);
    const auto preds = predict_frames(f, w.visual, clips);
    ASSERT_EQ(preds.size(), clips.size() * kFrames);
    const auto path = (std::filesystem::temp_directory_path() / "agcm_frames.csv").string();
    write_frame_predictions_csv(path, f, preds);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header.rfind("clip_id,frame_idx,prediction,p_left,p_right,p_bottom,p_pitch", 0), 0u);
    std::size_t rows = 0;
    for (std::string line; std::getline(in, line);) ++rows;
    EXPECT_EQ(rows, preds.size());
    const double acc = frame_accuracy(preds);
    EXPECT_GE(acc, 0.0);
    EXPECT_LE(acc, 1.0);
    std::filesystem::remove(path);
}

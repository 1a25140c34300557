#include "agcm/acg.hpp"
#include "agcm/gradcheck.hpp"

#include <gtest/gtest.h>

using namespace agcm;

namespace {

ModelConfig small_config()
{
    auto c = micro_config();
    c.image_width = c.image_height = 16;
    c.d_model = 8;
    c.backbone_layers = 2;
    return c;
}

Array random_patches(const ModelConfig& c, std::size_t batch, std::uint64_t seed)
{
    CounterRng rng(seed);
    Array a({batch * c.num_patches(), c.patch_dim()});
    for (auto& v : a.values()) v = rng.uniform();
    return a;
}

} // namespace

TEST(Backbone, OutputShape)
{
    const auto cfg = small_config();
    VisualModel m(cfg, 1);
    Tape t;
    const auto tokens = m.encode(t, random_patches(cfg, 3, 2), 3);
    EXPECT_EQ(tokens.shape(), (Shape{3, cfg.num_patches(), cfg.d_model}));
}

TEST(Backbone, IdenticalPatchesGiveIdenticalTokens)
{
    auto cfg = small_config();
    cfg.positional = false;
    VisualModel m(cfg, 4);
    Tape t;
    const auto tokens = m.encode(t, Array({cfg.num_patches(), cfg.patch_dim()}, 0.0), 1);
    const auto D = cfg.d_model;
    for (std::size_t p = 1; p < cfg.num_patches(); ++p)
        for (std::size_t k = 0; k < D; ++k) EXPECT_EQ(tokens.value()[p * D + k], tokens.value()[k]);
}

TEST(Backbone, PermutationEquivariantWithoutPositions)
{
    auto cfg = small_config();
    cfg.positional = false;
    VisualModel m(cfg, 5);
    auto x = random_patches(cfg, 1, 9);
    auto y = x;
    const auto pd = cfg.patch_dim(), D = cfg.d_model;
    const std::size_t a = 2, b = 11;
    for (std::size_t k = 0; k < pd; ++k) std::swap(y[a * pd + k], y[b * pd + k]);
    Tape t;
    const auto tx = m.encode(t, x, 1), ty = m.encode(t, y, 1);
    for (std::size_t p = 0; p < cfg.num_patches(); ++p) {
        const auto q = p == a ? b : p == b ? a : p;
        for (std::size_t k = 0; k < D; ++k) EXPECT_NEAR(ty.value()[q * D + k], tx.value()[p * D + k], 1e-12);
    }
}

TEST(Backbone, PositionsBreakEquivariance)
{
    auto cfg = small_config();
    VisualModel m(cfg, 5);
    Tape t;
    const auto tokens = m.encode(t, Array({cfg.num_patches(), cfg.patch_dim()}, 0.0), 1);
    EXPECT_NE(tokens.value()[0], tokens.value()[cfg.d_model]);
}

TEST(Backbone, DeterministicForFixedSeed)
{
    const auto cfg = small_config();
    const auto x = random_patches(cfg, 2, 3);
    VisualModel a(cfg, 7), b(cfg, 7);
    Tape ta, tb;
    EXPECT_EQ(a.encode(ta, x, 2).value(), b.encode(tb, x, 2).value());
    EXPECT_EQ(a.params().digest(), b.params().digest());
}

TEST(Backbone, EveryParameterReceivesGradient)
{
    const auto cfg = small_config();
    VisualModel m(cfg, 8);
    const std::size_t B = 4, n = cfg.n_concepts(), P = cfg.num_patches();
    const auto x = random_patches(cfg, B, 10);
    VisualTargets y;
    y.labels = {0, 1, 2, 1};
    y.concepts = Array({n * B}, std::vector<double>{1, 0, 1, 0, 0, 1, 1, 0});
    CounterRng rng(12);
    y.maps = Array({n * B, P});
    for (auto& v : y.maps.values()) v = rng.uniform();
    y.map_mask = Array({n * B}, 1.0);
    Tape t(true, 3);
    m.params().zero_grad();
    t.backward(m.joint_loss(m.forward(t, x, B), y).total);
    for (const auto* p : m.params().all()) {
        bool nonzero = false;
        for (const double g : p->grad.values()) nonzero = nonzero || g != 0.0;
        EXPECT_TRUE(nonzero) << p->name;
    }
}

TEST(EncoderBlock, RejectsIndivisibleWidth)
{
    ParameterStore s;
    ParamFactory make(s, 1);
    EXPECT_THROW(EncoderBlock(make, "b.", 10, 8, 4, 0.01), ConfigError);
}

#include "fixtures.hpp"
#include "oracles.hpp"

#include "agcm/explain.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace agcm;
using namespace agcm::testing;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

Grid grid_of(std::size_t r, std::size_t c, std::vector<double> v) { return Grid(r, c, std::move(v)); }

struct Trained {
    Dataset data;
    VisualModel model;
};

const Trained& trained()
{
    static const Trained t = [] {
        auto d = generate_visual(tiny_plant(), SplitCounts{240, 40, 60}, 21);
        TrainConfig tc;
        tc.adam.lr = 3e-3;
        tc.max_epochs = 30;
        auto r = train_visual(split_ptrs(d, "train"), split_ptrs(d, "val"), tiny_model(d), tc, 1);
        return Trained{std::move(d), std::move(r.model)};
    }();
    return t;
}

} // namespace

TEST(WeightedMap, SingleConceptNormalises)
{
    const auto a = grid_of(2, 2, {0.1, 0.4, 0.2, 0.3});
    const auto w = weighted_map({a}, std::vector<double>{1.0}, 0.5);
    EXPECT_EQ(*std::min_element(w.values.begin(), w.values.end()), 0.0);
    EXPECT_EQ(*std::max_element(w.values.begin(), w.values.end()), 1.0);
    EXPECT_NEAR(w.values[2], 1.0 / 3.0, 1e-15);
}

TEST(WeightedMap, BelowThresholdConceptExcluded)
{
    const auto a = grid_of(2, 2, {0.1, 0.4, 0.2, 0.3});
    const auto b = grid_of(2, 2, {0.9, 0.0, 0.0, 0.0});
    const auto w = weighted_map({a, b}, std::vector<double>{0.8, 0.3}, 0.5);
    const auto alone = weighted_map({a}, std::vector<double>{1.0}, 0.5);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(w.values[k], alone.values[k], 1e-15);
}

TEST(WeightedMap, NothingPassesGivesZeros)
{
    const auto a = grid_of(2, 2, {0.1, 0.4, 0.2, 0.3});
    const auto w = weighted_map({a, a}, std::vector<double>{0.2, 0.49}, 0.5);
    EXPECT_EQ(w.values, std::vector<double>(4, 0.0));
    const auto flat = weighted_map({grid_of(2, 2, {0.25, 0.25, 0.25, 0.25})}, std::vector<double>{0.9}, 0.5);
    EXPECT_EQ(flat.values, std::vector<double>(4, 0.0));
}

TEST(WeightedMap, MatchesIndependentEvaluation)
{
    CounterRng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        const auto n = 1 + rng.below(6), rows = 1 + rng.below(5), cols = 1 + rng.below(5);
        std::vector<Grid> maps;
        std::vector<std::vector<double>> raw;
        std::vector<double> probs;
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> v(rows * cols);
            for (auto& x : v) x = rng.uniform();
            raw.push_back(v);
            maps.push_back(grid_of(rows, cols, v));
            probs.push_back(trial % 10 == 0 ? rng.uniform(0.0, 0.49) : rng.uniform());
        }
        const auto got = weighted_map(maps, probs, 0.5);
        const auto want = weighted_map_oracle(raw, probs, 0.5);
        ASSERT_EQ(got.values.size(), want.size());
        for (std::size_t k = 0; k < want.size(); ++k) EXPECT_NEAR(got.values[k], want[k], 1e-12);
    }
}

TEST(WeightedMap, RaisingRhoNeverAddsConcepts)
{
    CounterRng rng(5);
    std::vector<Grid> maps;
    std::vector<double> probs;
    for (std::size_t i = 0; i < 6; ++i) {
        std::vector<double> v(9, 0.0);
        v[i] = 1.0; // concept i lights cell i only
        maps.push_back(grid_of(3, 3, v));
        probs.push_back(rng.uniform(0.1, 1.0));
    }
    std::size_t previous = 7;
    for (double rho = 0.0; rho <= 1.0; rho += 0.05) {
        const auto w = weighted_map(maps, probs, rho);
        std::size_t lit = 0;
        for (std::size_t i = 0; i < 6; ++i) lit += w.values[i] > 0.0;
        EXPECT_LE(lit, previous);
        previous = lit;
    }
}

TEST(WeightedMap, ScaleInvariant)
{
    const auto a = grid_of(2, 2, {0.1, 0.4, 0.2, 0.3});
    const auto b = grid_of(2, 2, {0.5, 0.1, 0.0, 0.2});
    const auto w1 = weighted_map({a, b}, std::vector<double>{0.6, 0.9}, 0.5);
    auto a3 = a, b3 = b;
    for (auto& v : a3.values) v *= 3.0;
    for (auto& v : b3.values) v *= 3.0;
    const auto w2 = weighted_map({a3, b3}, std::vector<double>{0.6, 0.9}, 0.5);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(w1.values[k], w2.values[k], 1e-12);
}

TEST(Ranking, DescendingWithIndexTies)
{
    EXPECT_EQ(rank_concepts(std::vector<double>{0.2, 0.9, 0.2, 0.5}, 4), (std::vector<std::size_t>{1, 3, 0, 2}));
    EXPECT_EQ(rank_concepts(std::vector<double>{0.2, 0.9}, 10).size(), 2u);
}

TEST(Explain, TopRankingRecoversPlantedConcepts)
{
    const auto& t = trained();
    std::size_t hits = 0, total = 0;
    for (const auto* s : split_ptrs(t.data, "test")) {
        std::set<std::size_t> active;
        for (std::size_t i = 0; i < s->concepts.size(); ++i)
            if (s->concepts[i] >= 0.5) active.insert(i);
        const auto e = explain_sample(t.model, *s, active.size());
        hits += std::set<std::size_t>(e.ranking.begin(), e.ranking.end()) == active;
        ++total;
    }
    EXPECT_GE(static_cast<double>(hits) / static_cast<double>(total), 0.9);
}

TEST(Explain, ReportIsDeterministic)
{
    const auto& t = trained();
    const auto& s = t.data.samples[250];
    const auto a = to_json(explain_sample(t.model, s, 3)).dump();
    const auto b = to_json(explain_sample(t.model, s, 3)).dump();
    EXPECT_EQ(a, b);
    const auto e = explain_sample(t.model, s, 3);
    EXPECT_EQ(e.concepts.size(), 3u);
    EXPECT_EQ(e.weighted.rows, 4u);
}

TEST(Occlusion, UpperHalfZeroFill)
{
    ImageGrid img(1, 64, 64, 0.7);
    Sample s;
    s.image = img;
    s.concepts = {1.0, 0.0};
    s.landmarks = {{{3.0, 4.0}}, 64, 64};
    s.label = 2;
    const auto o = occlude(s, parse_region("upper"));
    for (std::size_t y = 0; y < 64; ++y)
        for (std::size_t x = 0; x < 64; ++x) EXPECT_EQ(o.image.at(0, y, x), y < 32 ? 0.0 : 0.7);
    EXPECT_EQ(o.concepts, s.concepts);
    EXPECT_EQ(o.label, s.label);
    EXPECT_EQ(o.landmarks.points, s.landmarks.points);
    const auto full = occlude(s, parse_region("rect:0,0,64,64"));
    EXPECT_EQ(full.image.values, std::vector<double>(64 * 64, 0.0));
}

TEST(Occlusion, NoiseFillReproducible)
{
    Sample s;
    s.image = ImageGrid(1, 16, 16, 0.5);
    const OcclusionFill fill{true, 9};
    const auto a = occlude(s, parse_region("lower"), fill), b = occlude(s, parse_region("lower"), fill);
    EXPECT_EQ(a.image, b.image);
    EXPECT_NE(a.image, s.image);
    EXPECT_NE(a.image, occlude(s, parse_region("lower"), OcclusionFill{true, 10}).image);
}

TEST(Occlusion, RegionValidation)
{
    Sample s;
    s.image = ImageGrid(1, 16, 16);
    EXPECT_THROW(occlude(s, parse_region("rect:10,0,8,4")), ConfigError);
    EXPECT_THROW(parse_region("middle"), ConfigError);
    EXPECT_THROW(parse_region("rect:1,2,3"), ConfigError);
    EXPECT_EQ(parse_region("rect:1,2,3,4").name(), "rect:1,2,3,4");
}

TEST(Occlusion, PlantedRoiDropsItsConcept)
{
    const auto& t = trained();
    // concept 0 sits at (6, 8), concept 1 at (25, 8); the bottom strip holds no ROI of either
    const Region left{Region::Kind::Rectangle, {0, 0, 14, 16}};
    const Region corner{Region::Kind::Rectangle, {0, 29, 4, 3}};
    double drop = 0.0, idle = 0.0;
    std::size_t count = 0;
    for (const auto* s : split_ptrs(t.data, "test")) {
        if (s->concepts[0] < 0.5) continue;
        const auto rows = occlusion_report(t.model, *s, {left, corner});
        ASSERT_EQ(rows.size(), 2u);
        drop += rows[0].delta[0];
        idle += std::abs(rows[1].delta[0]) + std::abs(rows[1].delta[1]);
        ++count;
    }
    ASSERT_GT(count, 0u);
    EXPECT_LT(drop / count, 0.0);
    EXPECT_LT(idle / (2 * count), std::abs(drop / count));
    EXPECT_TRUE(occlusion_report(t.model, t.data.samples[0], {}).empty());
}

TEST(Heatmap, EndpointsAndDeterminism)
{
    const auto dir = fs::temp_directory_path() / "agcm_heat";
    fs::create_directories(dir);
    render_heatmap(grid_of(2, 2, {0, 0, 0, 0}), nullptr, (dir / "zero.ppm").string(), 8, 8);
    const auto z = read_ppm((dir / "zero.ppm").string(), 3);
    EXPECT_EQ(z.width, 8u);
    EXPECT_EQ(z.values, std::vector<double>(3 * 64, 0.0));
    render_heatmap(grid_of(1, 1, {1.0}), nullptr, (dir / "one.ppm").string());
    EXPECT_EQ(read_ppm((dir / "one.ppm").string(), 3).values, std::vector<double>(3, 1.0));
    EXPECT_EQ(heat_color(0.5), (std::array<double, 3>{1.0, 0.5, 0.0}));

    const auto g = grid_of(2, 2, {0.1, 0.7, 0.3, 1.0});
    ImageGrid base(1, 4, 4, 0.4);
    render_heatmap(g, &base, (dir / "a.ppm").string());
    render_heatmap(g, &base, (dir / "b.ppm").string());
    EXPECT_EQ(slurp(dir / "a.ppm"), slurp(dir / "b.ppm"));
    const auto o = read_ppm((dir / "a.ppm").string(), 3);
    // nearest neighbour: pixel (3,3) takes cell (1,1) = 1 -> white, blended with grey 0.4
    EXPECT_NEAR(o.at(0, 3, 3), to_byte(0.7) / 255.0, 1e-12);
    fs::remove_all(dir);
}

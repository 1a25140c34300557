#include "agcm/params.hpp"
#include "agcm/rng.hpp"

#include <gtest/gtest.h>

#include <numeric>
#include <set>

using namespace agcm;

TEST(Rng, StreamsAreReproducible)
{
    CounterRng a(stream_key(7, 1, 2)), b(stream_key(7, 1, 2));
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, DistinctIdsGiveDistinctStreams)
{
    std::set<std::uint64_t> keys;
    for (std::uint64_t i = 0; i < 1000; ++i) keys.insert(stream_key(0, i));
    EXPECT_EQ(keys.size(), 1000u);
    EXPECT_NE(stream_key(1, 2), stream_key(2, 1));
}

TEST(Rng, UniformStaysInUnitInterval)
{
    CounterRng r(42);
    double sum = 0.0;
    for (int i = 0; i < 10000; ++i) {
        const double u = r.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        sum += u;
    }
    EXPECT_NEAR(sum / 10000.0, 0.5, 0.02);
}

TEST(Rng, BelowCoversRange)
{
    CounterRng r(3);
    std::vector<int> hits(5, 0);
    for (int i = 0; i < 5000; ++i) ++hits[r.below(5)];
    for (const int h : hits) EXPECT_GT(h, 800);
}

TEST(Rng, ShuffleIsAPermutation)
{
    std::vector<int> v(50);
    std::iota(v.begin(), v.end(), 0);
    CounterRng r(9);
    shuffle(v, r);
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
}

TEST(SeededInit, Zeros)
{
    const auto z = seeded_init({2, 2}, InitScheme::Zeros, 7);
    for (const double v : z.values()) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(z.shape(), (Shape{2, 2}));
}

TEST(SeededInit, SameSeedSameTensor)
{
    EXPECT_EQ(seeded_init({8, 4}, InitScheme::UniformScaled, 7), seeded_init({8, 4}, InitScheme::UniformScaled, 7));
    EXPECT_NE(seeded_init({8, 4}, InitScheme::UniformScaled, 7, 0),
              seeded_init({8, 4}, InitScheme::UniformScaled, 7, 1));
}

TEST(SeededInit, UniformScaledMeanNearZero)
{
    for (std::uint64_t call = 0; call < 10; ++call) {
        const auto a = seeded_init({64}, InitScheme::UniformScaled, 7, call);
        double mean = 0.0;
        for (const double v : a.values()) mean += v;
        mean /= 64.0;
        EXPECT_LT(std::abs(mean), 0.05) << "call " << call;
        for (const double v : a.values()) EXPECT_LE(std::abs(v), 1.0 / 8.0);
    }
}

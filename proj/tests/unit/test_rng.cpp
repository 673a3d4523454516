#include "ddram/rng.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace ddram;

// Known-answer vectors published with the Random123 reference implementation.
TEST(Philox, KnownAnswerZero) {
    const auto out = Philox4x32::generate({0, 0, 0, 0}, {0, 0});
    EXPECT_EQ(out[0], 0x6627e8d5u);
    EXPECT_EQ(out[1], 0xe169c58du);
    EXPECT_EQ(out[2], 0xbc57ac4cu);
    EXPECT_EQ(out[3], 0x9b00dbd8u);
}

TEST(Philox, KnownAnswerOnes) {
    const auto out = Philox4x32::generate({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu},
                                          {0xffffffffu, 0xffffffffu});
    EXPECT_EQ(out[0], 0x408f276du);
    EXPECT_EQ(out[1], 0x41c83b0eu);
    EXPECT_EQ(out[2], 0xa20bc7c6u);
    EXPECT_EQ(out[3], 0x6d5451fdu);
}

TEST(Philox, KnownAnswerPi) {
    const auto out = Philox4x32::generate({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u},
                                          {0xa4093822u, 0x299f31d0u});
    EXPECT_EQ(out[0], 0xd16cfe09u);
    EXPECT_EQ(out[1], 0x94fdcceb);
    EXPECT_EQ(out[2], 0x5001e420u);
    EXPECT_EQ(out[3], 0x24126ea1u);
}

TEST(RandomStream, Reproducible) {
    RandomStream a(42, "chain", 3, 7), b(42, "chain", 3, 7);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u32(), b.next_u32());
}

TEST(RandomStream, DistinctStreams) {
    std::set<std::uint32_t> firsts;
    for (std::uint64_t chain = 0; chain < 50; ++chain)
        for (std::uint32_t step = 0; step < 20; ++step) firsts.insert(RandomStream(1, "chain", chain, step).next_u32());
    EXPECT_GT(firsts.size(), 990u);
    EXPECT_NE(RandomStream(1, "a").next_u32(), RandomStream(1, "b").next_u32());
    EXPECT_NE(RandomStream(1, "a").next_u32(), RandomStream(2, "a").next_u32());
}

TEST(RandomStream, UniformRangeAndMoments) {
    RandomStream rng(5, "u");
    double s = 0, s2 = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        s += u;
        s2 += u * u;
    }
    EXPECT_NEAR(s / n, 0.5, 4e-3);
    EXPECT_NEAR(s2 / n - (s / n) * (s / n), 1.0 / 12.0, 2e-3);
}

TEST(RandomStream, NormalMoments) {
    RandomStream rng(9, "z");
    double s = 0, s2 = 0, s4 = 0;
    const int n = 400000;
    for (int i = 0; i < n; ++i) {
        const double z = rng.normal();
        s += z;
        s2 += z * z;
        s4 += z * z * z * z;
    }
    EXPECT_NEAR(s / n, 0.0, 8e-3);
    EXPECT_NEAR(s2 / n, 1.0, 1e-2);
    EXPECT_NEAR(s4 / n, 3.0, 6e-2);
}

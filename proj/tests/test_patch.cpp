#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <set>

#include "vmim/patch.hpp"

using namespace vmim;

namespace {

Volume random_volume(std::size_t c, Extents e, std::uint64_t seed) {
    Volume v(c, e);
    Rng rng(seed);
    for (double& x : v.data) x = rng.uniform(-1.0, 1.0);
    return v;
}

bool same_bytes(const Volume& a, const Volume& b) {
    return a.extents() == b.extents() && a.channels == b.channels &&
           std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

}  // namespace

TEST(Patchify, NinetySixCubeWithSixteenGivesTwoHundredSixteenTokens) {
    const Volume v(1, {96, 96, 96});
    const TokenBatch b = patchify(v, 16);
    EXPECT_EQ(b.tokens.shape(), (Shape{216, 4096}));
    EXPECT_EQ(b.coords.size(), 216u);
    EXPECT_EQ(b.coords[7], (GridCoord{0, 1, 1}));
}

TEST(Patchify, SinglePatchIsTheFlattenedVolume) {
    const Volume v = random_volume(1, {16, 16, 16}, 1);
    const TokenBatch b = patchify(v, 16);
    ASSERT_EQ(b.tokens.shape(), (Shape{1, 4096}));
    EXPECT_EQ(std::memcmp(b.tokens.data().data(), v.data.data(), 4096 * sizeof(double)), 0);
}

TEST(Patchify, RoundTripIsBitwise) {
    for (std::uint64_t s = 0; s < 5; ++s) {
        const Volume v = random_volume(1 + s % 3, {8, 16, 24}, s);
        EXPECT_TRUE(same_bytes(unpatchify(patchify(v, 8)), v));
        EXPECT_TRUE(same_bytes(unpatchify(patchify(v, 4)), v));
    }
}

TEST(Patchify, RowLayoutIsChannelThenDepthHeightWidth) {
    Volume v = random_volume(2, {4, 4, 4}, 3);
    const TokenBatch b = patchify(v, 2);
    // Token 5 sits at grid (1, 0, 1); entry (c=1, dz=1, dy=0, dx=1).
    EXPECT_EQ(b.tokens[5 * 16 + 8 + 4 + 1], v.at(1, 3, 0, 3));
}

TEST(Patchify, DivisibilityErrorNamesAxis) {
    try {
        patchify(Volume(1, {16, 20, 16}), 8);
        FAIL() << "expected invalid_argument";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("height"), std::string::npos) << e.what();
    }
}

TEST(Unpatchify, ZeroTokensGiveZeroVolume) {
    const PatchGrid g = make_grid({8, 8, 8}, 1, 4);
    const Volume v = unpatchify(Tensor::zeros({8, 64}), g);
    for (double x : v.data) EXPECT_EQ(x, 0.0);
}

TEST(Unpatchify, SingleTokenIndexArithmetic) {
    std::vector<double> values(4096);
    for (std::size_t i = 0; i < 4096; ++i) values[i] = static_cast<double>(i);
    const Volume v = unpatchify(Tensor({1, 4096}, values), make_grid({16, 16, 16}, 1, 16));
    for (std::size_t d : {0u, 3u, 15u})
        for (std::size_t h : {0u, 7u, 15u})
            for (std::size_t w : {0u, 9u, 15u}) EXPECT_EQ(v.at(0, d, h, w), static_cast<double>(d * 256 + h * 16 + w));
}

TEST(Unpatchify, ShapeMismatchIsRejected) {
    EXPECT_THROW(unpatchify(Tensor::zeros({7, 64}), make_grid({8, 8, 8}, 1, 4)), ShapeError);
}

TEST(Masking, SeventyFivePercentOfTwoHundredSixteen) {
    const PatchGrid g = make_grid({96, 96, 96}, 1, 16);
    Rng rng(0);
    const Mask m = sample_mask(g, {16, 0.75}, rng);
    EXPECT_EQ(m.masked.size(), 162u);
    EXPECT_EQ(m.visible().size(), 54u);
    EXPECT_TRUE(std::is_sorted(m.masked.begin(), m.masked.end()));
}

TEST(Masking, ZeroRatioIsEmpty) {
    Rng rng(1);
    EXPECT_TRUE(sample_mask(make_grid({32, 32, 32}, 1, 8), {16, 0.0}, rng).empty());
}

TEST(Masking, SuperCellArithmetic) {
    const PatchGrid g = make_grid({96, 96, 96}, 1, 16);
    EXPECT_EQ(super_cells(g, {32, 0.15}), 27u);
    Rng rng(2);
    const Mask m = sample_mask(g, {32, 0.15}, rng);
    ASSERT_EQ(m.masked.size(), 32u);
    // Masked tokens come in whole 2x2x2 blocks.
    const auto flags = m.flags();
    for (std::size_t id : m.masked) {
        const GridCoord c = g.coord(id);
        const GridCoord base{c[0] / 2 * 2, c[1] / 2 * 2, c[2] / 2 * 2};
        for (std::size_t z = 0; z < 2; ++z)
            for (std::size_t y = 0; y < 2; ++y)
                for (std::size_t x = 0; x < 2; ++x) {
                    EXPECT_TRUE(flags[((base[0] + z) * 6 + base[1] + y) * 6 + base[2] + x]);
                }
    }
}

TEST(Masking, InvalidConfigsAreRejected) {
    const PatchGrid g = make_grid({48, 48, 48}, 1, 16);
    Rng rng(3);
    EXPECT_THROW(sample_mask(g, {24, 0.5}, rng), std::invalid_argument);
    EXPECT_THROW(sample_mask(g, {32, 0.5}, rng), std::invalid_argument);  // 3 tokens per axis, span 2
    EXPECT_THROW(sample_mask(g, {16, 1.5}, rng), std::invalid_argument);
}

TEST(Masking, CountIsExactAcrossRandomConfigs) {
    Rng pick(4);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t p = std::size_t{1} << pick.uniform_index(3);
        const std::size_t m = 1 + pick.uniform_index(3);
        Extents e{};
        for (auto& x : e) x = p * m * (1 + pick.uniform_index(3));
        const PatchGrid g = make_grid(e, 1, p);
        const MaskingConfig cfg{p * m, pick.uniform()};
        Rng rng(static_cast<std::uint64_t>(trial));
        const Mask mask = sample_mask(g, cfg, rng);
        const std::size_t cells = super_cells(g, cfg);
        EXPECT_EQ(mask.masked.size(),
                  static_cast<std::size_t>(std::floor(cfg.ratio * static_cast<double>(cells))) * m * m * m);
        EXPECT_EQ(std::set<std::size_t>(mask.masked.begin(), mask.masked.end()).size(), mask.masked.size());
    }
}

TEST(Masking, DeterministicInSeed) {
    const PatchGrid g = make_grid({48, 48, 48}, 1, 8);
    Rng a(9);
    Rng b(9);
    EXPECT_EQ(sample_mask(g, {8, 0.6}, a).masked, sample_mask(g, {8, 0.6}, b).masked);
}

TEST(Masking, UniformAndWithoutCentreBias) {
    const PatchGrid g = make_grid({6, 6, 6}, 1, 1);
    const std::size_t draws = 10000;
    std::vector<std::size_t> hits(216, 0);
    double coord_sum[3] = {0, 0, 0};
    std::size_t masked_total = 0;
    Rng rng(5);
    for (std::size_t d = 0; d < draws; ++d) {
        for (std::size_t id : sample_mask(g, {1, 0.5}, rng).masked) {
            ++hits[id];
            const GridCoord c = g.coord(id);
            for (std::size_t a = 0; a < 3; ++a) coord_sum[a] += static_cast<double>(c[a]);
            ++masked_total;
        }
    }
    const double p = 108.0 / 216.0;
    const double sd = std::sqrt(static_cast<double>(draws) * p * (1 - p));
    for (std::size_t h : hits) EXPECT_LT(std::abs(static_cast<double>(h) - draws * p), 4 * sd);
    for (double s : coord_sum) EXPECT_NEAR(s / static_cast<double>(masked_total), 2.5, 0.02 * 6);
}

TEST(PositionalEncoding, OriginIsSinZeroCosOne) {
    const Tensor pe = positional_encoding(make_grid({32, 32, 32}, 1, 8), 24);
    ASSERT_EQ(pe.shape(), (Shape{64, 24}));
    for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t k = 0; k < 4; ++k) {
            EXPECT_EQ(pe[a * 8 + k], 0.0);
            EXPECT_EQ(pe[a * 8 + 4 + k], 1.0);
        }
}

TEST(PositionalEncoding, RowsAreDistinctUpToSixteenCubed) {
    for (std::size_t dim : {6u, 24u, 96u}) {
        const Tensor pe = positional_encoding(make_grid({16, 16, 16}, 1, 1), dim);
        std::set<std::vector<double>> rows;
        for (std::size_t t = 0; t < 4096; ++t) {
            rows.insert(std::vector<double>(pe.data().begin() + t * dim, pe.data().begin() + (t + 1) * dim));
        }
        EXPECT_EQ(rows.size(), 4096u) << dim;
    }
}

TEST(PositionalEncoding, DeterministicAndDimChecked) {
    const PatchGrid g = make_grid({24, 24, 24}, 1, 8);
    const Tensor a = positional_encoding(g, 48);
    const Tensor b = positional_encoding(g, 48);
    EXPECT_EQ(std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)), 0);
    EXPECT_THROW(positional_encoding(g, 64), std::invalid_argument);
    const Tensor padded = positional_encoding_padded(g, 64);
    ASSERT_EQ(padded.shape(), (Shape{27, 64}));
    const Tensor core = positional_encoding(g, 60);
    for (std::size_t t = 0; t < 27; ++t) {
        for (std::size_t j = 0; j < 60; ++j) EXPECT_EQ(padded[t * 64 + j], core[t * 60 + j]);
        for (std::size_t j = 60; j < 64; ++j) EXPECT_EQ(padded[t * 64 + j], 0.0);
    }
}

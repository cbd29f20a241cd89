#include "mantis/serialization.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <set>

namespace mantis {
namespace {

int grid_distance(const GridPoint& a, const GridPoint& b) {
  int d = 0;
  for (int i = 0; i < 3; ++i) d += std::abs(static_cast<int>(a[i]) - static_cast<int>(b[i]));
  return d;
}

TEST(Hilbert, EncodeDecodeIdentityOverAllCellsAtThreeBits) {
  std::set<std::uint64_t> codes;
  for (std::uint32_t x = 0; x < 8; ++x)
    for (std::uint32_t y = 0; y < 8; ++y)
      for (std::uint32_t z = 0; z < 8; ++z) {
        const GridPoint p{x, y, z};
        const std::uint64_t h = hilbert_encode_3d(p, 3);
        EXPECT_LT(h, 512u);
        EXPECT_EQ(hilbert_decode_3d(h, 3), p);
        codes.insert(h);
      }
  EXPECT_EQ(codes.size(), 512u);
}

TEST(Hilbert, ConsecutiveCodesAreGridNeighbors) {
  for (unsigned b = 1; b <= 4; ++b) {
    const std::uint64_t total = std::uint64_t{1} << (3 * b);
    for (std::uint64_t h = 0; h + 1 < total; ++h)
      ASSERT_EQ(grid_distance(hilbert_decode_3d(h, b), hilbert_decode_3d(h + 1, b)), 1) << "b=" << b << " h=" << h;
  }
}

TEST(Hilbert, StartsAtOriginAndNestsSubcubes) {
  // Every aligned run of 8^k codes fills one 2^k sub-cube.
  const unsigned b = 4;
  EXPECT_EQ(hilbert_decode_3d(0, b), (GridPoint{0, 0, 0}));
  for (unsigned k = 1; k < b; ++k) {
    const std::uint64_t run = std::uint64_t{1} << (3 * k);
    for (std::uint64_t start = 0; start < (std::uint64_t{1} << (3 * b)); start += run) {
      const GridPoint first = hilbert_decode_3d(start, b);
      for (std::uint64_t h = start; h < start + run; ++h) {
        const GridPoint p = hilbert_decode_3d(h, b);
        for (int i = 0; i < 3; ++i) ASSERT_EQ(p[i] >> k, first[i] >> k);
      }
    }
  }
}

TEST(Hilbert, RoundTripsAtHighResolution) {
  Rng rng(5);
  for (unsigned b : {10u, 16u, 21u})
    for (int i = 0; i < 500; ++i) {
      const std::uint32_t lim = 1u << b;
      const GridPoint p{static_cast<std::uint32_t>(rng.below(lim)), static_cast<std::uint32_t>(rng.below(lim)),
                        static_cast<std::uint32_t>(rng.below(lim))};
      EXPECT_EQ(hilbert_decode_3d(hilbert_encode_3d(p, b), b), p);
    }
}

TEST(Hilbert, RejectsOutOfRange) {
  EXPECT_THROW(hilbert_encode_3d({8, 0, 0}, 3), ArgumentError);
  EXPECT_THROW(hilbert_encode_3d({0, 0, 0}, 0), ArgumentError);
  EXPECT_THROW(hilbert_encode_3d({0, 0, 0}, 22), ArgumentError);
  EXPECT_THROW(hilbert_decode_3d(512, 3), ArgumentError);
}

// Bit-by-bit interleave, the definition rather than the magic-mask version.
std::uint64_t interleave(const GridPoint& p, unsigned bits) {
  std::uint64_t code = 0;
  for (unsigned j = 0; j < bits; ++j)
    for (unsigned a = 0; a < 3; ++a) code |= static_cast<std::uint64_t>((p[a] >> j) & 1u) << (3 * j + a);
  return code;
}

TEST(ZOrder, MatchesBitInterleaveOracle) {
  Rng rng(6);
  for (unsigned b : {1u, 3u, 10u, 21u})
    for (int i = 0; i < 300; ++i) {
      const std::uint32_t lim = 1u << b;
      const GridPoint p{static_cast<std::uint32_t>(rng.below(lim)), static_cast<std::uint32_t>(rng.below(lim)),
                        static_cast<std::uint32_t>(rng.below(lim))};
      const std::uint64_t code = zorder_encode_3d(p, b);
      EXPECT_EQ(code, interleave(p, b));
      EXPECT_EQ(zorder_decode_3d(code, b), p);
    }
}

TEST(Curves, TransposedVariantsPermuteAxesCyclically) {
  Rng rng(7);
  for (int i = 0; i < 200; ++i) {
    const GridPoint g{static_cast<std::uint32_t>(rng.below(1024)), static_cast<std::uint32_t>(rng.below(1024)),
                      static_cast<std::uint32_t>(rng.below(1024))};
    const GridPoint perm{g[2], g[0], g[1]};
    EXPECT_EQ(curve_code(CurveKind::trans_hilbert(), g, 10), hilbert_encode_3d(perm, 10));
    EXPECT_EQ(curve_code(CurveKind::trans_zorder(), g, 10), zorder_encode_3d(perm, 10));
  }
}

TEST(Curves, ParseAndName) {
  for (const char* s : {"hilbert", "trans-hilbert", "z", "trans-z", "random:42"})
    EXPECT_EQ(CurveKind::parse(s).name(), s);
  EXPECT_EQ(CurveKind::parse("random:42").seed, 42u);
  EXPECT_THROW(CurveKind::parse("peano"), ConfigError);
  EXPECT_THROW(CurveKind::parse("random:"), ConfigError);
  EXPECT_THROW(CurveKind::parse("random:x1"), ConfigError);
}

TEST(Quantize, MapsCornersAndRejectsUnnormalized) {
  EXPECT_EQ(quantize(Vec3(-1, -1, -1), 3), (GridPoint{0, 0, 0}));
  EXPECT_EQ(quantize(Vec3(1, 1, 1), 3), (GridPoint{7, 7, 7}));
  EXPECT_EQ(quantize(Vec3(1 + 1e-12, 0, 0), 3)[0], 7u);
  EXPECT_THROW(quantize(Vec3(1.5, 0, 0), 3), ValidationError);
}

KeyPoints random_keypoints(Rng& rng, std::size_t n) {
  KeyPoints k;
  for (std::size_t i = 0; i < n; ++i) {
    k.indices.push_back(i * 3);
    k.coords.emplace_back(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
  }
  return k;
}

TEST(Serialize, OrderIsAPermutationWithAscendingCodes) {
  Rng rng(8);
  for (const auto& curve : {CurveKind::hilbert(), CurveKind::trans_hilbert(), CurveKind::zorder(),
                            CurveKind::trans_zorder(), CurveKind::random(3)}) {
    const KeyPoints k = random_keypoints(rng, 40);
    const SerializedPatchSet s = serialize_keypoints(k, curve, 6);
    std::vector<std::size_t> sorted = s.order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(sorted[i], i);
    EXPECT_TRUE(std::is_sorted(s.codes.begin(), s.codes.end()));
    for (std::size_t t = 0; t < s.order.size(); ++t) {
      EXPECT_EQ(s.patches.centers.coords[t], k.coords[s.order[t]]);
      if (curve.family != CurveFamily::random)
        EXPECT_EQ(s.codes[t], curve_code(curve, quantize(k.coords[s.order[t]], 6), 6));
    }
  }
}

TEST(Serialize, TiesKeepOriginalIndexOrder) {
  KeyPoints k;
  for (std::size_t i = 0; i < 5; ++i) {
    k.indices.push_back(i);
    k.coords.emplace_back(i % 2 ? 0.5 : -0.5, 0.0, 0.0);
  }
  const SerializedPatchSet s = serialize_keypoints(k, CurveKind::hilbert(), 2);
  std::vector<std::size_t> evens, odds;
  for (std::size_t i : s.order) (i % 2 ? odds : evens).push_back(i);
  EXPECT_EQ(evens, (std::vector<std::size_t>{0, 2, 4}));
  EXPECT_EQ(odds, (std::vector<std::size_t>{1, 3}));
}

TEST(Serialize, RandomCurveIsSeedDeterministic) {
  Rng rng(9);
  const KeyPoints k = random_keypoints(rng, 30);
  EXPECT_EQ(serialize_keypoints(k, CurveKind::random(5)).order, serialize_keypoints(k, CurveKind::random(5)).order);
  EXPECT_NE(serialize_keypoints(k, CurveKind::random(5)).order, serialize_keypoints(k, CurveKind::random(6)).order);
}

TEST(Serialize, PatchesFollowTheirCenters) {
  Rng rng(10);
  PointCloud c = normalize(testing::random_cloud(rng, 60));
  const PatchSet p = knn_patches(c, farthest_point_sample(c, 12), 4);
  const SerializedPatchSet s = serialize_patches(p, CurveKind::zorder(), 5);
  for (std::size_t t = 0; t < s.order.size(); ++t) {
    EXPECT_EQ(s.patches.neighbor_indices[t], p.neighbor_indices[s.order[t]]);
    EXPECT_EQ(s.patches.centers.indices[t], p.centers.indices[s.order[t]]);
  }
}

}  // namespace
}  // namespace mantis

/*
 * Copyright 2026 The SPCM Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>

#include <limits>
#include <set>

#include "spcm/geom.hpp"
#include "test_util.hpp"

namespace spcm {
namespace {

using testing::brute_distance;
using testing::make_matrix;
using testing::random_cloud;

// Exhaustive oracle: sort every target by (distance, index).
std::vector<std::pair<double, std::uint32_t>> sorted_targets(const Matrix& q, std::size_t i, const Matrix& t) {
  std::vector<std::pair<double, std::uint32_t>> all;
  for (std::uint32_t j = 0; j < t.rows; ++j) all.emplace_back(brute_distance(q, i, t, j), j);
  std::sort(all.begin(), all.end());
  return all;
}

std::vector<std::uint32_t> greedy_fps_oracle(const Matrix& c, std::size_t m, std::size_t seed) {
  std::vector<std::uint32_t> chosen{static_cast<std::uint32_t>(seed)};
  while (chosen.size() < m) {
    double best = -1.0;
    std::uint32_t arg = 0;
    for (std::uint32_t i = 0; i < c.rows; ++i) {
      double nearest = std::numeric_limits<double>::infinity();
      for (auto s : chosen) nearest = std::min(nearest, brute_distance(c, i, c, s));
      if (nearest > best) {
        best = nearest;
        arg = i;
      }
    }
    chosen.push_back(arg);
  }
  return chosen;
}

TEST(Frame, ValidatesShapeAndDefaultsMaskToAllValid) {
  PointCloudFrame f(make_matrix(2, 3, {0, 0, 0, 1, 1, 1}));
  EXPECT_EQ(f.valid_mask(), (std::vector<std::uint8_t>{1, 1}));
  EXPECT_THROW(PointCloudFrame(Matrix(0, 3)), GeometryError);
  EXPECT_THROW(PointCloudFrame(Matrix(2, 2)), GeometryError);
  EXPECT_THROW(PointCloudFrame(make_matrix(1, 3, {0, std::nan(""), 0})), GeometryError);
  EXPECT_THROW(PointCloudFrame(Matrix(2, 3), Matrix(3, 1)), GeometryError);
}

TEST(Sequence, RequiresTwoFramesAndMatchingFlows) {
  CloudSequence s;
  s.frames = {PointCloudFrame(Matrix(2, 3))};
  EXPECT_THROW(s.validate(), GeometryError);
  s.frames.push_back(PointCloudFrame(Matrix(3, 3)));
  EXPECT_NO_THROW(s.validate());
  s.gt_flows = {Matrix(2, 3)};
  EXPECT_THROW(s.validate(), GeometryError);
  s.gt_flows = {Matrix(3, 3)};
  EXPECT_NO_THROW(s.validate());
}

TEST(Knn, OrdersByDistance) {
  const Matrix target = make_matrix(3, 3, {0, 0, 0, 1, 0, 0, 2, 0, 0});
  const Matrix query = make_matrix(1, 3, {0.9, 0, 0});
  const auto nb = knn(query, target, 2);
  ASSERT_EQ(nb[0].size(), 2u);
  EXPECT_EQ(nb[0][0].index, 1u);
  EXPECT_EQ(nb[0][1].index, 0u);
  EXPECT_NEAR(nb[0][0].distance, 0.1, 1e-15);
  EXPECT_NEAR(nb[0][1].distance, 0.9, 1e-15);
}

TEST(Knn, CoincidentPointHasZeroDistance) {
  const Matrix target = make_matrix(3, 3, {0, 0, 0, 1, 0, 0, 2, 0, 0});
  const auto nb = knn(make_matrix(1, 3, {2, 0, 0}), target, 1);
  EXPECT_EQ(nb[0][0].index, 2u);
  EXPECT_EQ(nb[0][0].distance, 0.0);
}

TEST(Knn, TooFewTargetsIsAnError) {
  try {
    knn(Matrix(1, 3), Matrix(2, 3), 3);
    FAIL();
  } catch (const GeometryError& e) {
    EXPECT_NE(std::string(e.what()).find("insufficient points"), std::string::npos);
  }
}

TEST(Knn, TiesBreakByIndex) {
  const Matrix target = make_matrix(4, 3, {1, 0, 0, -1, 0, 0, 0, 1, 0, 0, -1, 0});
  const auto nb = knn(Matrix(1, 3), target, 4);
  for (std::uint32_t i = 0; i < 4; ++i) EXPECT_EQ(nb[0][i].index, i);
}

TEST(Knn, MatchesExhaustiveSort) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Matrix t = random_cloud(20, seed), q = random_cloud(7, seed + 100);
    const auto nb = knn(q, t, 5);
    for (std::size_t i = 0; i < q.rows; ++i) {
      const auto oracle = sorted_targets(q, i, t);
      ASSERT_EQ(nb[i].size(), 5u);
      for (std::size_t k = 0; k < 5; ++k) {
        EXPECT_EQ(nb[i][k].index, oracle[k].second);
        EXPECT_DOUBLE_EQ(nb[i][k].distance, oracle[k].first);
      }
    }
  }
}

TEST(BallQuery, SmallCases) {
  const Matrix target = make_matrix(2, 3, {0, 0, 0, 1, 0, 0});
  const Matrix query(1, 3);
  auto nb = ball_query(query, target, 0.5, 4);
  ASSERT_EQ(nb[0].size(), 1u);
  EXPECT_EQ(nb[0][0].index, 0u);
  nb = ball_query(query, target, 2.0, 2);
  ASSERT_EQ(nb[0].size(), 2u);
  EXPECT_EQ(nb[0][0].index, 0u);
  EXPECT_EQ(nb[0][1].index, 1u);
  nb = ball_query(make_matrix(1, 3, {10, 0, 0}), target, 0.5, 2);
  EXPECT_TRUE(nb[0].empty());
}

TEST(BallQuery, MatchesFilterAndSort) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Matrix t = random_cloud(20, seed), q = random_cloud(6, seed + 50);
    const auto nb = ball_query(q, t, 0.7, 4);
    for (std::size_t i = 0; i < q.rows; ++i) {
      auto oracle = sorted_targets(q, i, t);
      std::erase_if(oracle, [](const auto& p) { return p.first > 0.7; });
      if (oracle.size() > 4) oracle.resize(4);
      ASSERT_EQ(nb[i].size(), oracle.size());
      for (std::size_t k = 0; k < oracle.size(); ++k) EXPECT_EQ(nb[i][k].index, oracle[k].second);
    }
  }
}

TEST(Fps, SmallCases) {
  EXPECT_EQ(farthest_point_sample(Matrix(1, 3), 1), (std::vector<std::uint32_t>{0}));
  const Matrix square = make_matrix(4, 3, {0, 0, 0, 1, 0, 0, 1, 1, 0, 0, 1, 0});
  EXPECT_EQ(farthest_point_sample(square, 2, 0), (std::vector<std::uint32_t>{0, 2}));
  EXPECT_THROW(farthest_point_sample(square, 5), GeometryError);
}

TEST(Fps, MatchesGreedyOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Matrix c = random_cloud(30, seed);
    for (std::size_t start : {0u, 7u})
      EXPECT_EQ(farthest_point_sample(c, 8, start), greedy_fps_oracle(c, 8, start));
  }
}

TEST(Fps, FullSampleIsAPermutation) {
  const Matrix c = random_cloud(40, 3);
  auto idx = farthest_point_sample(c, 40);
  std::sort(idx.begin(), idx.end());
  for (std::uint32_t i = 0; i < 40; ++i) EXPECT_EQ(idx[i], i);
}

TEST(Queries, InvariantUnderTargetPermutation) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Matrix t = random_cloud(64, seed), q = random_cloud(10, seed + 9);
    const auto perm = testing::random_permutation(64, seed);
    const Matrix tp = testing::permute_rows(t, perm);  // tp row r = t row perm[r]
    const auto a = knn(q, t, 6), b = knn(q, tp, 6);
    const auto ba = ball_query(q, t, 0.6, 5), bb = ball_query(q, tp, 0.6, 5);
    for (std::size_t i = 0; i < q.rows; ++i) {
      std::set<std::uint32_t> sa, sb, ba_set, bb_set;
      for (const auto& n : a[i]) sa.insert(n.index);
      for (const auto& n : b[i]) sb.insert(perm[n.index]);
      for (const auto& n : ba[i]) ba_set.insert(n.index);
      for (const auto& n : bb[i]) bb_set.insert(perm[n.index]);
      EXPECT_EQ(sa, sb);
      EXPECT_EQ(ba_set, bb_set);
    }
    // FPS from the same geometric seed point selects the same points.
    const std::size_t s = lexicographic_min_index(t), sp = lexicographic_min_index(tp);
    EXPECT_EQ(perm[sp], s);
    const auto fa = farthest_point_sample(t, 16, s), fb = farthest_point_sample(tp, 16, sp);
    for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(perm[fb[k]], fa[k]);
  }
}

TEST(Idw, ConstantFieldIsFixedPoint) {
  const Matrix coarse = random_cloud(10, 1), fine = random_cloud(30, 2);
  const Matrix values(10, 2, 0.7);
  const Matrix out = idw_interpolate(fine, coarse, values, 3);
  for (double v : out.data) EXPECT_EQ(v, 0.7);
}

TEST(Idw, CoincidentPointReturnsItsValue) {
  const Matrix coarse = make_matrix(3, 3, {0, 0, 0, 0.5, 0, 0, 0, 0.3, 0});
  const Matrix values = make_matrix(3, 1, {1.0, 2.0, 3.0});
  const Matrix out = idw_interpolate(make_matrix(1, 3, {0.5, 0, 0}), coarse, values, 3);
  EXPECT_NEAR(out(0, 0), 2.0, 2.0 * 1e-6);
}

TEST(Idw, EquidistantPointAverages) {
  const Matrix coarse = make_matrix(2, 3, {-1, 0, 0, 1, 0, 0});
  const Matrix values = make_matrix(2, 1, {3.0, 5.0});
  EXPECT_DOUBLE_EQ(idw_interpolate(make_matrix(1, 3, {0, 0.4, 0}), coarse, values, 2)(0, 0), 4.0);
}

TEST(Idw, WeightsAreNonnegativeAndNormalized) {
  const Matrix coarse = random_cloud(12, 4), fine = random_cloud(25, 5);
  const auto nb = knn(fine, coarse, 3);
  for (const auto& row : nb) {
    const auto w = idw_weights(row);
    double s = 0.0;
    for (double x : w) {
      EXPECT_GE(x, 0.0);
      s += x;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Idw, MatchesFormula) {
  const Matrix coarse = random_cloud(8, 6), fine = random_cloud(5, 7);
  const Matrix values = random_cloud(8, 8, -1, 1, 2);
  const Matrix out = idw_interpolate(fine, coarse, values, 3);
  for (std::size_t i = 0; i < fine.rows; ++i) {
    const auto oracle = sorted_targets(fine, i, coarse);
    double wsum = 0.0, acc[2] = {0, 0};
    for (std::size_t k = 0; k < 3; ++k) {
      const double w = 1.0 / (oracle[k].first + 1e-8);
      wsum += w;
      for (int c = 0; c < 2; ++c) acc[c] += w * values(oracle[k].second, c);
    }
    for (int c = 0; c < 2; ++c) EXPECT_NEAR(out(i, c), acc[c] / wsum, 1e-12);
  }
}

}  // namespace
}  // namespace spcm

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

#include <set>

#include "spcm/net.hpp"
#include "spcm/objectives.hpp"
#include "test_util.hpp"

namespace spcm {
namespace {

using testing::permute_rows;
using testing::random_cloud;

std::vector<std::vector<double>> sorted_rows(const Matrix& m) {
  std::vector<std::vector<double>> rows;
  for (std::size_t r = 0; r < m.rows; ++r)
    rows.emplace_back(m.data.begin() + r * m.cols, m.data.begin() + (r + 1) * m.cols);
  std::sort(rows.begin(), rows.end());
  return rows;
}

CloudSequence permute_sequence(const CloudSequence& seq, std::uint64_t seed) {
  CloudSequence out = seq;
  for (std::size_t t = 0; t < seq.frames.size(); ++t) {
    const auto perm = testing::random_permutation(seq.frames[t].size(), seed + t);
    out.frames[t] = PointCloudFrame(permute_rows(seq.frames[t].coords(), perm));
    if (t > 0) out.gt_flows[t - 1] = permute_rows(seq.gt_flows[t - 1], perm);
  }
  out.future_frames.clear();
  out.future_flows.clear();
  return out;
}

TEST(Arch, LevelSizes) {
  const ArchConfig a = default_arch(3);
  EXPECT_EQ(a.level_sizes(64), (std::vector<std::size_t>{4, 16, 64}));
  EXPECT_EQ(a.level_sizes(256), (std::vector<std::size_t>{16, 64, 256}));
  EXPECT_THROW(a.level_sizes(15), GeometryError);
}

TEST(Pyramid, LevelCountsAndIndices) {
  const Model model(default_arch(3));
  const ParamStore p = model.init_params(1);
  const PointCloudFrame frame(random_cloud(64, 2));
  const auto levels = build_pyramid(model, p, frame);
  ASSERT_EQ(levels.size(), 3u);
  const std::size_t sizes[3] = {4, 16, 64};
  for (std::size_t l = 0; l < 3; ++l) {
    EXPECT_EQ(levels[l].coords.rows, sizes[l]);
    EXPECT_EQ(levels[l].feats.rows, sizes[l]);
    EXPECT_EQ(levels[l].feats.cols, model.arch().feature_dims[l]);
  }
  EXPECT_TRUE(levels[2].fps_indices.empty());
  for (std::size_t l = 0; l < 2; ++l) {
    ASSERT_EQ(levels[l].fps_indices.size(), sizes[l]);
    std::set<std::uint32_t> seen;
    for (std::size_t i = 0; i < sizes[l]; ++i) {
      const std::uint32_t j = levels[l].fps_indices[i];
      ASSERT_LT(j, sizes[l + 1]);
      seen.insert(j);
      for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(levels[l].coords(i, c), levels[l + 1].coords(j, c));
    }
    EXPECT_EQ(seen.size(), sizes[l]);
  }
}

TEST(Pyramid, TranslatedNeighborhoodsGiveEqualFeatures) {
  ArchConfig a = default_arch(3);
  a.input_dim = 1;
  const Model model(a);
  const ParamStore p = model.init_params(3);
  const std::size_t side = 6;
  Matrix grid(side * side * side, 3);
  for (std::size_t i = 0; i < grid.rows; ++i) {
    grid(i, 0) = double(i / (side * side));
    grid(i, 1) = double(i / side % side);
    grid(i, 2) = double(i % side);
  }
  const auto levels = build_pyramid(model, p, PointCloudFrame(grid, Matrix(grid.rows, 1, 1.0)));
  const Matrix& f = levels.back().feats;
  auto index = [&](std::size_t x, std::size_t y, std::size_t z) { return (x * side + y) * side + z; };
  // Interior points whose neighborhoods are translates of each other. The
  // first layer projects absolute coordinates, so equality is up to rounding.
  for (auto [a0, b0] : {std::pair{index(2, 2, 2), index(3, 2, 2)}, std::pair{index(2, 2, 2), index(2, 3, 3)}})
    for (std::size_t c = 0; c < f.cols; ++c) EXPECT_NEAR(f(a0, c), f(b0, c), 1e-12 * (1.0 + std::abs(f(a0, c))));
}

TEST(Pyramid, PermutationKeepsCoarsePointSets) {
  const Model model(default_arch(3));
  const ParamStore p = model.init_params(4);
  const Matrix c = random_cloud(64, 5);
  const auto base = build_pyramid(model, p, PointCloudFrame(c));
  const auto perm = testing::random_permutation(64, 6);
  const auto moved = build_pyramid(model, p, PointCloudFrame(permute_rows(c, perm)));
  EXPECT_EQ(moved.back().feats, permute_rows(base.back().feats, perm));
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_EQ(sorted_rows(moved[l].coords), sorted_rows(base[l].coords));
    EXPECT_EQ(sorted_rows(moved[l].feats), sorted_rows(base[l].feats));
  }
}

TEST(Pyramid, TooFewPointsThrows) {
  const Model model(default_arch(3));
  EXPECT_THROW(build_pyramid(model, model.init_params(1), PointCloudFrame(random_cloud(10, 1))), GeometryError);
}

TEST(Model, ParamCountIsSumOfSlices) {
  for (std::size_t levels : {1, 2, 3}) {
    const Model model(default_arch(levels));
    const ParamStore p = model.layout();
    std::size_t total = 0;
    for (const auto& s : p.slices()) total += s.size();
    EXPECT_EQ(model.param_count(), total);
    EXPECT_EQ(p.size(), total);
  }
}

TEST(Model, InitIsDeterministic) {
  const Model model(default_arch(2));
  EXPECT_EQ(model.init_params(7), model.init_params(7));
  EXPECT_NE(model.init_params(7).values(), model.init_params(8).values());
}

TEST(EstimateFlows, Shapes) {
  const Model model(default_arch(3));
  const ParamStore p = model.init_params(1);
  const CloudSequence seq = testing::small_sequence(64, 4, 0, 2);
  const FlowPyramid fp = estimate_flows(model, p, seq);
  ASSERT_EQ(fp.flows.size(), 3u);
  for (std::size_t t = 0; t < 3; ++t) {
    ASSERT_EQ(fp.flows[t].size(), 3u);
    EXPECT_EQ(fp.finest(t).rows, 64u);
    EXPECT_EQ(fp.finest(t).cols, 3u);
    EXPECT_EQ(fp.flows[t][0].rows, 4u);
  }
}

TEST(EstimateFlows, TwoFramesMatchFirstStepOfLongerSequence) {
  const Model model(default_arch(3));
  const ParamStore p = model.init_params(2);
  const CloudSequence seq = testing::small_sequence(64, 4, 0, 3);
  CloudSequence pair = seq;
  pair.frames.resize(2);
  pair.gt_flows.resize(1);
  EXPECT_EQ(estimate_flows(model, p, pair).flows[0], estimate_flows(model, p, seq).flows[0]);
}

TEST(EstimateFlows, StaticSequenceWithoutMemoryRepeatsTheFirstStep) {
  const Model model(default_arch(3));
  const ParamStore p = model.init_params(3);
  const PointCloudFrame frame(random_cloud(64, 4));
  CloudSequence seq;
  seq.frames.assign(4, frame);
  const FlowPyramid fp = estimate_flows(model, p, seq, {.reset_state = true});
  CloudSequence pair;
  pair.frames.assign(2, frame);
  const FlowPyramid two = estimate_flows(model, p, pair, {.reset_state = true});
  for (std::size_t t = 0; t < 3; ++t) EXPECT_EQ(fp.flows[t], two.flows[0]);
}

TEST(EstimateFlows, PermutationEquivariance) {
  const Model model(default_arch(3));
  const ParamStore p = model.init_params(5);
  const CloudSequence seq = testing::small_sequence(64, 3, 0, 6);
  const FlowPyramid base = estimate_flows(model, p, seq);
  for (std::uint64_t s = 0; s < 3; ++s) {
    const CloudSequence moved = permute_sequence(seq, 100 * s);
    const FlowPyramid fp = estimate_flows(model, p, moved);
    for (std::size_t t = 0; t < 2; ++t) {
      const auto perm = testing::random_permutation(64, 100 * s + t + 1);
      EXPECT_EQ(fp.finest(t), permute_rows(base.finest(t), perm));
    }
  }
}

TEST(EstimateFlows, NeedsTwoFrames) {
  const Model model(default_arch(3));
  CloudSequence seq;
  seq.frames.push_back(PointCloudFrame(random_cloud(64, 1)));
  EXPECT_ANY_THROW(estimate_flows(model, model.init_params(1), seq));
}

TEST(EstimateFlows, SsfeLossGradient) {
  ArchConfig a = default_arch(2);
  a.conv_k = 4;
  a.neighborhoods.assign(2, NeighborhoodSpec{.k = 4});
  a.hidden = 4;
  a.cost_hidden = 4;
  a.weight_hidden = 3;
  a.feature_dims = {6, 4};
  a.refine_width = 4;
  a.head_width = 4;
  const Model model(a);
  ParamStore p = model.init_params(7);
  const Matrix jitter = random_cloud(1, 8, -0.05, 0.05, p.size());
  for (std::size_t i = 0; i < p.size(); ++i) p.values()[i] += jitter.data[i];
  const CloudSequence seq = testing::small_sequence(16, 3, 0, 9);
  const SequenceGeometry geometry = sequence_geometry(a, seq);
  const std::vector<double> alpha{0.3, 1.0};
  auto loss = [&](const ParamStore& q, std::vector<double>* grad) {
    Tape tape;
    ParamBinding bound(tape, q);
    Var l = ssfe_loss(estimate_flows(model, bound, seq, geometry), seq, geometry, alpha);
    if (grad) {
      tape.backward(l);
      *grad = bound.gradient();
    }
    return l.value().item();
  };
  std::vector<double> analytic;
  loss(p, &analytic);
  auto f = [&](const std::vector<double>& v) {
    ParamStore q = p;
    q.values() = v;
    return loss(q, nullptr);
  };
  const auto r = testing::finite_difference_check(f, p.values(), analytic, 1e-5, 1e-4, 1e-7, 5);
  EXPECT_TRUE(r.ok) << "worst " << r.worst_rel << " at " << r.worst;
}

TEST(Forecast, SingleStepShape) {
  const Model model(default_arch(3));
  const CloudSequence seq = testing::small_sequence(64, 3, 1, 10);
  const Forecast f = forecast(model, model.init_params(1), seq, 1);
  ASSERT_EQ(f.frames.size(), 1u);
  EXPECT_EQ(f.frames[0].rows, 64u);
  EXPECT_EQ(f.frames[0].cols, 3u);
  EXPECT_THROW(forecast(model, model.init_params(1), seq, 0), ShapeError);
}

TEST(Forecast, ZeroHeadRepeatsLastFrame) {
  const Model model(default_arch(3));
  ParamStore p = model.init_params(11);
  for (const auto& name : model.head_slices())
    for (double& v : p.values(name)) v = 0.0;
  const CloudSequence seq = testing::small_sequence(64, 4, 3, 12);
  const Forecast f = forecast(model, p, seq, 3);
  for (const Matrix& m : f.frames) EXPECT_EQ(m, seq.frames.back().coords());
}

TEST(Forecast, AutoregressiveChaining) {
  const Model model(default_arch(3));
  const CloudSequence seq = testing::small_sequence(64, 3, 3, 13);
  const Forecast f = forecast(model, model.init_params(14), seq, 3);
  ASSERT_EQ(f.inputs.size(), 3u);
  EXPECT_EQ(f.inputs[0], seq.frames.back().coords());
  for (std::size_t k = 1; k < 3; ++k) EXPECT_EQ(f.inputs[k], f.frames[k - 1]);
  EXPECT_NE(f.frames[0], f.frames[1]);
}

TEST(Forecast, PermutationEquivariance) {
  const Model model(default_arch(3));
  const ParamStore p = model.init_params(15);
  const CloudSequence seq = testing::small_sequence(64, 3, 0, 16);
  const Forecast base = forecast(model, p, seq, 2);
  const CloudSequence moved = permute_sequence(seq, 500);
  const auto perm = testing::random_permutation(64, 500 + 2);
  const Forecast f = forecast(model, p, moved, 2);
  for (std::size_t k = 0; k < 2; ++k) EXPECT_EQ(f.frames[k], permute_rows(base.frames[k], perm));
}

TEST(ArchHash, SensitiveToEveryField) {
  const ArchConfig a = default_arch(3);
  ArchConfig b = a;
  b.hidden = 8;
  ArchConfig c = a;
  c.neighborhoods[1].radius = 0.7;
  EXPECT_EQ(arch_hash(a), arch_hash(default_arch(3)));
  EXPECT_NE(arch_hash(a), arch_hash(b));
  EXPECT_NE(arch_hash(a), arch_hash(c));
}

}  // namespace
}  // namespace spcm

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

#include "spcm/costvol.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "spcm/random.hpp"

namespace spcm {

NeighborList NeighborhoodSpec::query(const Matrix& query_coords,
                                     const Matrix& target_coords) const {
  if (mode == Mode::kKnn) return knn(query_coords, target_coords, std::min(k, target_coords.rows));
  return ball_query(query_coords, target_coords, radius, k);
}

void CostVolumeSpec::validate() const {
  cost.validate();
  weight_within.validate();
  weight_across.validate();
  if (cost.in_width() != 3 + prev_dim + cur_dim) {
    std::ostringstream os;
    os << "cost volume " << name << ": cost MLP input " << cost.in_width()
       << " != 3 + " << prev_dim << " + " << cur_dim;
    throw ShapeError(os.str());
  }
  if (weight_within.in_width() != 3 || weight_within.out_width() != 1 ||
      weight_across.in_width() != 3 || weight_across.out_width() != 1)
    throw ShapeError("cost volume " + name + ": weight MLPs must map 3 -> 1");
}

void CostVolumeSpec::declare(ParamStore& params) const {
  validate();
  cost.declare(params);
  weight_within.declare(params);
  weight_across.declare(params);
}

CostVolumeSpec make_cost_volume_spec(const std::string& name, std::size_t prev_dim,
                                     std::size_t cur_dim, std::size_t out_dim,
                                     std::size_t cost_hidden, std::size_t weight_hidden,
                                     NeighborhoodSpec within, NeighborhoodSpec across) {
  CostVolumeSpec s;
  s.name = name;
  s.prev_dim = prev_dim;
  s.cur_dim = cur_dim;
  s.cost = make_mlp(name + ".cost", {3 + prev_dim + cur_dim, cost_hidden, out_dim},
                    Activation::kLeakyRelu);
  s.weight_within = make_mlp(name + ".wm", {3, weight_hidden, 1}, Activation::kLeakyRelu);
  s.weight_across = make_mlp(name + ".wn", {3, weight_hidden, 1}, Activation::kLeakyRelu);
  s.within = within;
  s.across = across;
  return s;
}

void init_mlp(const MlpSpec& mlp, ParamStore& params, std::uint64_t seed, double last_scale,
              double last_bias, double offset_scale) {
  Rng rng(derive_seed(seed, mlp.name));
  for (std::size_t l = 0; l < mlp.layers(); ++l) {
    const double bound = std::sqrt(3.0 / static_cast<double>(mlp.widths[l]));
    const bool last = l + 1 == mlp.layers();
    auto w = params.values(mlp.weight(l));
    const std::size_t offset_end = l == 0 ? 3 * mlp.widths[1] : 0;
    for (std::size_t i = 0; i < w.size(); ++i)
      w[i] = rng.uniform(-bound, bound) * (last ? last_scale : 1.0) * (i < offset_end ? offset_scale : 1.0);
    for (double& b : params.values(mlp.bias(l))) b = last ? last_bias : 0.0;
  }
}

void init_cost_volume(const CostVolumeSpec& spec, ParamStore& params, std::uint64_t seed) {
  init_mlp(spec.cost, params, seed, 1.0, 0.0, kOffsetInitGain);
  init_mlp(spec.weight_within, params, seed, 0.1,
           1.0 / static_cast<double>(std::max<std::size_t>(1, spec.within.k)), kOffsetInitGain);
  init_mlp(spec.weight_across, params, seed, 0.1,
           1.0 / static_cast<double>(std::max<std::size_t>(1, spec.across.k)), kOffsetInitGain);
}

CostVolumeGeometry cost_volume_geometry(const NeighborhoodSpec& within,
                                        const NeighborhoodSpec& across,
                                        const Matrix& cur_coords, const Matrix& prev_coords) {
  return {within.query(cur_coords, cur_coords), across.query(cur_coords, prev_coords)};
}

Var matching_cost(const CostVolumeSpec& spec, ParamBinding& params, Var prev_coord,
                  Var prev_feat, Var cur_coord, std::optional<Var> cur_feat) {
  spec.validate();
  if (prev_feat.cols() != spec.prev_dim)
    throw ShapeError("matching cost " + spec.name + ": previous feature width " +
                     std::to_string(prev_feat.cols()) + " != " + std::to_string(spec.prev_dim));
  if (spec.cur_dim == 0) {
    if (cur_feat) throw ShapeError("matching cost " + spec.name + " takes no current features");
    return mlp_forward(spec.cost, params, concat_cols({sub(prev_coord, cur_coord), prev_feat}));
  }
  if (!cur_feat || cur_feat->cols() != spec.cur_dim)
    throw ShapeError("matching cost " + spec.name + ": current feature width mismatch");
  return mlp_forward(spec.cost, params,
                     concat_cols({sub(prev_coord, cur_coord), prev_feat, *cur_feat}));
}

namespace {

struct EdgeList {
  std::vector<std::uint32_t> src;  // neighbor row
  std::vector<std::uint32_t> dst;  // query row
  std::vector<std::uint32_t> offsets{0};
};

}  // namespace

Var cost_volume(const CostVolumeSpec& spec, ParamBinding& params, const CostVolumeGeometry& geometry,
                Var cur_coords, std::optional<Var> cur_feats, Var prev_coords, Var prev_feats) {
  spec.validate();
  Tape& tape = params.tape();
  const std::size_t n_cur = cur_coords.rows();
  const std::size_t n_prev = prev_coords.rows();
  if (prev_feats.rows() != n_prev || prev_feats.cols() != spec.prev_dim)
    throw ShapeError("cost volume " + spec.name + ": previous features " +
                     shape_str(prev_feats.value()) + " do not match spec width " +
                     std::to_string(spec.prev_dim));
  if (spec.cur_dim > 0 && (!cur_feats || cur_feats->rows() != n_cur || cur_feats->cols() != spec.cur_dim))
    throw ShapeError("cost volume " + spec.name + ": current features do not match spec width " +
                     std::to_string(spec.cur_dim));
  if (geometry.within.size() != n_cur || geometry.across.size() != n_cur)
    throw ShapeError("cost volume " + spec.name + ": geometry does not match point count");

  // Cross-frame edges grouped by current point; empty groups get one
  // virtual previous point appended after the real ones.
  EdgeList across;
  std::vector<std::uint32_t> fallback;
  for (std::size_t k = 0; k < n_cur; ++k) {
    if (geometry.across[k].empty()) {
      across.src.push_back(static_cast<std::uint32_t>(n_prev + fallback.size()));
      across.dst.push_back(static_cast<std::uint32_t>(k));
      fallback.push_back(static_cast<std::uint32_t>(k));
    } else {
      for (const Neighbor& nb : geometry.across[k]) {
        across.src.push_back(nb.index);
        across.dst.push_back(static_cast<std::uint32_t>(k));
      }
    }
    across.offsets.push_back(static_cast<std::uint32_t>(across.src.size()));
  }
  EdgeList within;
  for (std::size_t j = 0; j < n_cur; ++j) {
    if (geometry.within[j].empty())
      throw ShapeError("cost volume " + spec.name + ": empty same-frame neighborhood");
    for (const Neighbor& nb : geometry.within[j]) {
      within.src.push_back(nb.index);
      within.dst.push_back(static_cast<std::uint32_t>(j));
    }
    within.offsets.push_back(static_cast<std::uint32_t>(within.src.size()));
  }

  Var ext_prev_coords = prev_coords;
  Var ext_prev_feats = prev_feats;
  if (!fallback.empty()) {
    ext_prev_coords = concat_rows({prev_coords, gather_rows(cur_coords, fallback)});
    ext_prev_feats = concat_rows({prev_feats, tape.constant(Tensor(fallback.size(), spec.prev_dim))});
  }

  // First cost layer split by input block: W = [Wc; Wp; Wx].
  const MlpSpec& cost = spec.cost;
  Var w0 = params(cost.weight(0));
  Var wc = slice_rows(w0, 0, 3);
  Var wp = slice_rows(w0, 3, 3 + spec.prev_dim);
  Var prev_proj = add(matmul(ext_prev_coords, wc), matmul(ext_prev_feats, wp));
  Var cur_proj = add_bias(neg(matmul(cur_coords, wc)), params(cost.bias(0)));
  if (spec.cur_dim > 0) {
    Var wx = slice_rows(w0, 3 + spec.prev_dim, 3 + spec.prev_dim + spec.cur_dim);
    cur_proj = add(cur_proj, matmul(*cur_feats, wx));
  }
  Var costs = mlp_forward_from_first(
      cost, params, add(gather_rows(prev_proj, across.src), gather_rows(cur_proj, across.dst)));

  // Scalar weight of a relative position, first layer split the same way.
  auto edge_weights = [&](const MlpSpec& mlp, Var src_coords, Var dst_coords, const EdgeList& e) {
    Var w = params(mlp.weight(0));
    Var src = matmul(src_coords, w);
    Var dst = matmul(dst_coords, w);
    Var pre = add_bias(sub(gather_rows(src, e.src), gather_rows(dst, e.dst)), params(mlp.bias(0)));
    return mlp_forward_from_first(mlp, params, pre);
  };

  Var w_across = edge_weights(spec.weight_across, ext_prev_coords, cur_coords, across);
  if (!fallback.empty()) {
    Tensor keep(across.src.size(), 1, 1.0);
    Tensor fill(across.src.size(), 1, 0.0);
    for (std::size_t e = 0; e < across.src.size(); ++e)
      if (across.src[e] >= n_prev) {
        keep.values[e] = 0.0;
        fill.values[e] = 1.0;
      }
    w_across = add(mul(w_across, tape.constant(std::move(keep))), tape.constant(std::move(fill)));
  }
  Var inner = segment_weighted_sum(costs, w_across, across.offsets);

  Var w_within = edge_weights(spec.weight_within, cur_coords, cur_coords, within);
  return segment_weighted_sum(gather_rows(inner, within.src), w_within, within.offsets);
}

Var cost_volume(const CostVolumeSpec& spec, ParamBinding& params, const PointCloudFrame& cur,
                const Matrix& prev_coords, const Matrix& prev_feats) {
  Tape& tape = params.tape();
  const auto geometry = cost_volume_geometry(spec.within, spec.across, cur.coords(), prev_coords);
  std::optional<Var> feats;
  if (spec.cur_dim > 0) {
    if (!cur.feats()) throw ShapeError("cost volume " + spec.name + " needs current features");
    feats = tape.constant(Tensor::from_matrix(*cur.feats()));
  }
  return cost_volume(spec, params, geometry, tape.constant(Tensor::from_matrix(cur.coords())), feats,
                     tape.constant(Tensor::from_matrix(prev_coords)),
                     tape.constant(Tensor::from_matrix(prev_feats)));
}

}  // namespace spcm

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

// Set-to-set matching cost between two consecutive frames.
//
// For a current point j the cost volume is
//
//   CV(j) = sum_{k in M(j)} wM(c_k - c_j) * sum_{i in N(k)} wN(c'_i - c_k) * Cost(i, k)
//   Cost(i, k) = phi(c'_i - c_k, x'_i, x_k)
//
// where M(j) is a neighborhood in the current frame and N(k) one in the
// previous frame (primed). The inner sum depends only on k, so it is
// evaluated once per current point and then gathered by the outer sum.

#pragma once

#include <optional>
#include <string>

#include "spcm/diff.hpp"
#include "spcm/geom.hpp"

namespace spcm {

struct NeighborhoodSpec {
  enum class Mode { kKnn, kBall };
  Mode mode = Mode::kKnn;
  std::size_t k = 8;      // knn count, or kmax for ball queries
  double radius = 0.5;    // ball queries only

  /// Runs the query. knn clamps k to the target size.
  NeighborList query(const Matrix& query_coords, const Matrix& target_coords) const;
  bool operator==(const NeighborhoodSpec&) const = default;
};

struct CostVolumeSpec {
  std::string name;
  std::size_t prev_dim = 0;  // feature width of the previous frame (or state)
  std::size_t cur_dim = 0;   // feature width of the current frame; 0 drops the slot
  MlpSpec cost;              // (3 + prev_dim + cur_dim) -> ... -> out
  MlpSpec weight_within;     // wM: 3 -> h -> 1
  MlpSpec weight_across;     // wN: 3 -> h -> 1
  NeighborhoodSpec within;
  NeighborhoodSpec across;

  std::size_t out_dim() const { return cost.out_width(); }
  void declare(ParamStore& params) const;
  void validate() const;
};

CostVolumeSpec make_cost_volume_spec(const std::string& name, std::size_t prev_dim,
                                     std::size_t cur_dim, std::size_t out_dim,
                                     std::size_t cost_hidden, std::size_t weight_hidden,
                                     NeighborhoodSpec within, NeighborhoodSpec across);

/// Initial gain on relative-offset inputs, which are small next to coordinates.
inline constexpr double kOffsetInitGain = 10.0;

/// Uniform +-sqrt(3/fan_in) weights and zero biases; the last layer's
/// weights are scaled by `last_scale` and its biases set to `last_bias`.
/// First-layer weights of the first three inputs (a relative offset) are
/// scaled by `offset_scale`.
void init_mlp(const MlpSpec& mlp, ParamStore& params, std::uint64_t seed, double last_scale = 1.0,
              double last_bias = 0.0, double offset_scale = 1.0);

/// Initial values for a cost volume's parameters: uniform fan-in scaled
/// weights, and weight MLPs biased so each neighborhood sum starts as a mean.
void init_cost_volume(const CostVolumeSpec& spec, ParamStore& params, std::uint64_t seed);

/// Neighbor structure of one cost-volume evaluation. Parameter independent.
struct CostVolumeGeometry {
  NeighborList within;  // per current point j: k in the current frame
  NeighborList across;  // per current point k: i in the previous frame
};

CostVolumeGeometry cost_volume_geometry(const NeighborhoodSpec& within,
                                        const NeighborhoodSpec& across,
                                        const Matrix& cur_coords, const Matrix& prev_coords);

/// Per-pair matching cost for single points (1 x 3 coordinates, 1 x d
/// features). `cur_feat` must be absent iff spec.cur_dim == 0.
Var matching_cost(const CostVolumeSpec& spec, ParamBinding& params, Var prev_coord,
                  Var prev_feat, Var cur_coord, std::optional<Var> cur_feat);

/// Cost volume for every current point: N_cur x out_dim.
///
/// Sums run in neighbor-list order (distance, then index), so a row depends
/// only on geometry and never on storage order. An empty cross-frame
/// neighborhood contributes the unweighted cost of the point against a
/// coincident virtual previous point with zero features.
Var cost_volume(const CostVolumeSpec& spec, ParamBinding& params, const CostVolumeGeometry& geometry,
                Var cur_coords, std::optional<Var> cur_feats, Var prev_coords, Var prev_feats);

/// Convenience overload computing the geometry from the spec's neighborhoods.
Var cost_volume(const CostVolumeSpec& spec, ParamBinding& params, const PointCloudFrame& cur,
                const Matrix& prev_coords, const Matrix& prev_feats);

}  // namespace spcm

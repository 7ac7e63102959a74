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

// Sequence model: per-frame feature pyramid, one recurrent cost-volume cell
// per pyramid level, coarse-to-fine flow refinement and an autoregressive
// displacement decoder for forecasting.
//
// Per-level vectors are ordered coarse to fine: index 0 is the coarsest
// level, index levels-1 holds the input points.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spcm/costvol.hpp"
#include "spcm/diff.hpp"
#include "spcm/geom.hpp"
#include "spcm/rcv.hpp"

namespace spcm {

struct ArchConfig {
  std::size_t levels = 3;
  std::size_t level_divisor = 4;  // N_l = N / divisor^(levels-1-l)
  std::vector<std::size_t> feature_dims{32, 16, 8};
  std::size_t input_dim = 3;
  std::size_t hidden = 16;
  std::size_t cost_hidden = 16;
  std::size_t weight_hidden = 8;
  std::vector<NeighborhoodSpec> neighborhoods{{}, {}, {}};
  std::size_t conv_k = 8;
  std::size_t idw_k = 3;
  std::size_t refine_width = 16;
  std::size_t head_width = 16;
  bool residual_refinement = true;

  void validate() const;
  std::vector<std::size_t> level_sizes(std::size_t n) const;
  bool operator==(const ArchConfig&) const = default;
};

/// Desk-scale default for a given level count.
ArchConfig default_arch(std::size_t levels = 3);

/// Simplified point convolution: for each query point, a feature MLP over
/// (relative position, neighbor features) summed with learned scalar
/// weights of the relative position.
struct PointConvSpec {
  std::string name;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  MlpSpec feature;  // 3 + in_dim -> out_dim
  MlpSpec weight;   // 3 -> h -> 1
  void declare(ParamStore& params) const;
};

PointConvSpec make_point_conv(const std::string& name, std::size_t in_dim, std::size_t out_dim,
                              std::size_t weight_hidden);

Var point_conv(const PointConvSpec& spec, ParamBinding& params, Var query_coords,
               Var support_coords, Var support_feats, const NeighborList& neighbors);

/// Parameter-independent structure of one frame's pyramid.
struct FrameGeometry {
  std::vector<Matrix> coords;                           // per level
  std::vector<std::vector<std::uint32_t>> to_finest;    // per level, rows of the input frame
  std::vector<std::vector<std::uint32_t>> parent_index; // level l < L-1: rows of level l+1
  std::vector<NeighborList> conv_neighbors;             // support: own level (finest) or level l+1
  std::vector<NeighborList> refine_neighbors;           // same-level
  std::vector<std::vector<std::vector<std::uint32_t>>> upsample_neighbors;  // l > 0: rows of level l-1
};

FrameGeometry frame_geometry(const ArchConfig& arch, const Matrix& coords);

/// Cost-volume neighborhoods of a frame against the previous frame, per level.
std::vector<CostVolumeGeometry> pair_geometry(const ArchConfig& arch, const FrameGeometry& cur,
                                              const FrameGeometry& prev);

struct SequenceGeometry {
  std::vector<FrameGeometry> frames;
  /// pairs[t] relates frame t to frame t-1; pairs[0] relates frame 0 to itself.
  std::vector<std::vector<CostVolumeGeometry>> pairs;
};

SequenceGeometry sequence_geometry(const ArchConfig& arch, const CloudSequence& seq);

struct PyramidLevel {
  Matrix coords;
  Matrix feats;
  std::vector<std::uint32_t> fps_indices;  // rows of the next finer level (empty at the finest)
};

struct PyramidVars {
  std::vector<Var> coords;
  std::vector<Var> feats;
};

class Model {
 public:
  explicit Model(ArchConfig arch);

  const ArchConfig& arch() const { return arch_; }
  const PointConvSpec& encoder(std::size_t level) const { return encoders_.at(level); }
  const RcvSpec& cell(std::size_t level) const { return cells_.at(level); }
  const PointConvSpec& refine_conv(std::size_t level) const { return refine_convs_.at(level); }
  const MlpSpec& refine_mlp(std::size_t level) const { return refine_mlps_.at(level); }
  const MlpSpec& head() const { return head_; }

  /// Empty parameter store with every slice declared.
  ParamStore layout() const;
  ParamStore init_params(std::uint64_t seed) const;
  std::size_t param_count() const { return layout().size(); }

  /// Names of the displacement-head slices (decoder only).
  std::vector<std::string> head_slices() const;

 private:
  ArchConfig arch_;
  std::vector<PointConvSpec> encoders_;
  std::vector<RcvSpec> cells_;
  std::vector<PointConvSpec> refine_convs_;
  std::vector<MlpSpec> refine_mlps_;
  MlpSpec head_;
};

/// Hash of the architecture, embedded in checkpoints.
std::uint64_t arch_hash(const ArchConfig& arch);

/// Input features of a frame: its own features or, without any, its coordinates.
Matrix input_features(const Model& model, const PointCloudFrame& frame);

PyramidVars build_pyramid(const Model& model, ParamBinding& params, const FrameGeometry& geometry,
                          Var finest_coords, Var input_feats);

std::vector<PyramidLevel> build_pyramid(const Model& model, const ParamStore& params,
                                        const PointCloudFrame& frame);

struct RolloutOptions {
  /// Zero hidden and cell state before every timestep (no-memory ablation).
  bool reset_state = false;
};

struct FlowPyramidVars {
  /// flows[t][l]: flow of frame t+1 at level l, t = 0..T-2.
  std::vector<std::vector<Var>> flows;
  std::vector<std::vector<Var>> features;
  /// Recurrent states after the last frame, per level.
  std::vector<RcvStateVar> states;
};

struct FlowPyramid {
  std::vector<std::vector<Matrix>> flows;
  std::vector<std::vector<Matrix>> features;
  /// Finest-level flow of frame t+1.
  const Matrix& finest(std::size_t t) const { return flows.at(t).back(); }
};

FlowPyramidVars estimate_flows(const Model& model, ParamBinding& params, const CloudSequence& seq,
                               const SequenceGeometry& geometry, RolloutOptions options = {});

FlowPyramid estimate_flows(const Model& model, const ParamStore& params, const CloudSequence& seq,
                           RolloutOptions options = {});

struct ForecastVars {
  std::vector<Var> frames;  // K predicted N x 3 clouds
  std::vector<Var> inputs;  // decoder input coordinates per step (step 0 is frame T)
  /// Level points of every predicted frame, as rows of the finest level.
  std::vector<std::vector<std::uint32_t>> level_index;
};

struct Forecast {
  std::vector<Matrix> frames;
  std::vector<Matrix> inputs;
  std::vector<std::vector<std::uint32_t>> level_index;
  /// Predicted clouds per step and level, coarse to fine.
  std::vector<std::vector<Matrix>> pyramids;
};

ForecastVars forecast(const Model& model, ParamBinding& params, const CloudSequence& seq,
                      const SequenceGeometry& geometry, std::size_t horizon,
                      RolloutOptions options = {});

Forecast forecast(const Model& model, const ParamStore& params, const CloudSequence& seq,
                  std::size_t horizon, RolloutOptions options = {});

}  // namespace spcm

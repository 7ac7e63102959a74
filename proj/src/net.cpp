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

#include "spcm/net.hpp"

#include <algorithm>
#include <sstream>

#include "spcm/random.hpp"

namespace spcm {

void ArchConfig::validate() const {
  auto fail = [](const std::string& m) { throw ShapeError("architecture: " + m); };
  if (levels == 0) fail("need at least one level");
  if (level_divisor == 0) fail("level_divisor must be positive");
  if (feature_dims.size() != levels) fail("feature_dims needs one entry per level");
  if (neighborhoods.size() != levels) fail("neighborhoods needs one entry per level");
  for (std::size_t d : feature_dims)
    if (d == 0) fail("feature widths must be positive");
  for (const auto& nb : neighborhoods) {
    if (nb.k == 0) fail("neighborhood size must be positive");
    if (nb.mode == NeighborhoodSpec::Mode::kBall && !(nb.radius > 0.0)) fail("ball radius must be positive");
  }
  if (input_dim == 0 || hidden == 0 || cost_hidden == 0 || weight_hidden == 0) fail("widths must be positive");
  if (conv_k == 0 || idw_k == 0) fail("conv_k and idw_k must be positive");
  if (refine_width == 0 || head_width == 0) fail("refine_width and head_width must be positive");
}

std::vector<std::size_t> ArchConfig::level_sizes(std::size_t n) const {
  std::vector<std::size_t> sizes(levels);
  std::size_t m = n;
  for (std::size_t l = levels; l-- > 0;) {
    if (m == 0)
      throw GeometryError("insufficient points: " + std::to_string(n) + " points cannot fill " +
                          std::to_string(levels) + " pyramid levels");
    sizes[l] = m;
    m /= level_divisor;
  }
  return sizes;
}

ArchConfig default_arch(std::size_t levels) {
  ArchConfig a;
  a.levels = levels;
  a.feature_dims.clear();
  for (std::size_t l = 0; l < levels; ++l) a.feature_dims.push_back(std::size_t{8} << (levels - 1 - l));
  a.neighborhoods.assign(levels, NeighborhoodSpec{});
  return a;
}

PointConvSpec make_point_conv(const std::string& name, std::size_t in_dim, std::size_t out_dim,
                              std::size_t weight_hidden) {
  PointConvSpec s;
  s.name = name;
  s.in_dim = in_dim;
  s.out_dim = out_dim;
  s.feature = make_mlp(name + ".f", {3 + in_dim, out_dim}, Activation::kLeakyRelu, Activation::kLeakyRelu);
  s.weight = make_mlp(name + ".w", {3, weight_hidden, 1}, Activation::kLeakyRelu);
  return s;
}

void PointConvSpec::declare(ParamStore& params) const {
  feature.declare(params);
  weight.declare(params);
}

Var point_conv(const PointConvSpec& spec, ParamBinding& params, Var query_coords,
               Var support_coords, Var support_feats, const NeighborList& neighbors) {
  if (support_feats.cols() != spec.in_dim || support_feats.rows() != support_coords.rows())
    throw ShapeError("point conv " + spec.name + ": support features " +
                     shape_str(support_feats.value()) + " do not match width " +
                     std::to_string(spec.in_dim));
  if (neighbors.size() != query_coords.rows())
    throw ShapeError("point conv " + spec.name + ": one neighbor list per query point required");
  std::vector<std::uint32_t> src, dst, offsets{0};
  for (std::size_t q = 0; q < neighbors.size(); ++q) {
    if (neighbors[q].empty()) throw ShapeError("point conv " + spec.name + ": empty neighborhood");
    for (const Neighbor& nb : neighbors[q]) {
      src.push_back(nb.index);
      dst.push_back(static_cast<std::uint32_t>(q));
    }
    offsets.push_back(static_cast<std::uint32_t>(src.size()));
  }
  // First layers split into per-point projections of [support - query, features].
  auto first = [&](const MlpSpec& mlp, bool with_feats) {
    Var w = params(mlp.weight(0));
    Var wr = slice_rows(w, 0, 3);
    Var s = matmul(support_coords, wr);
    if (with_feats) s = add(s, matmul(support_feats, slice_rows(w, 3, 3 + spec.in_dim)));
    Var q = matmul(query_coords, wr);
    return add_bias(sub(gather_rows(s, src), gather_rows(q, dst)), params(mlp.bias(0)));
  };
  Var values = mlp_forward_from_first(spec.feature, params, first(spec.feature, true));
  Var weights = mlp_forward_from_first(spec.weight, params, first(spec.weight, false));
  return segment_weighted_sum(values, weights, offsets);
}

namespace {

std::vector<std::vector<std::uint32_t>> indices_of(const NeighborList& nl) {
  std::vector<std::vector<std::uint32_t>> out(nl.size());
  for (std::size_t q = 0; q < nl.size(); ++q)
    for (const Neighbor& nb : nl[q]) out[q].push_back(nb.index);
  return out;
}

std::string level_name(const char* prefix, std::size_t l) {
  return std::string(prefix) + ".l" + std::to_string(l);
}

}  // namespace

FrameGeometry frame_geometry(const ArchConfig& arch, const Matrix& coords) {
  arch.validate();
  const std::size_t L = arch.levels;
  const auto sizes = arch.level_sizes(coords.rows);
  FrameGeometry g;
  g.coords.resize(L);
  g.to_finest.resize(L);
  g.parent_index.resize(L);
  g.conv_neighbors.resize(L);
  g.refine_neighbors.resize(L);
  g.upsample_neighbors.resize(L);

  g.coords[L - 1] = coords;
  g.to_finest[L - 1].resize(coords.rows);
  for (std::size_t i = 0; i < coords.rows; ++i) g.to_finest[L - 1][i] = static_cast<std::uint32_t>(i);
  for (std::size_t l = L - 1; l-- > 0;) {
    const Matrix& finer = g.coords[l + 1];
    g.parent_index[l] = farthest_point_sample(finer, sizes[l], lexicographic_min_index(finer));
    g.coords[l] = gather_rows(finer, g.parent_index[l]);
    for (std::uint32_t p : g.parent_index[l]) g.to_finest[l].push_back(g.to_finest[l + 1][p]);
  }
  for (std::size_t l = 0; l < L; ++l) {
    const Matrix& support = l + 1 == L ? g.coords[l] : g.coords[l + 1];
    g.conv_neighbors[l] = knn(g.coords[l], support, std::min(arch.conv_k, support.rows));
    g.refine_neighbors[l] = knn(g.coords[l], g.coords[l], std::min(arch.conv_k, g.coords[l].rows));
    if (l > 0)
      g.upsample_neighbors[l] =
          indices_of(knn(g.coords[l], g.coords[l - 1], std::min(arch.idw_k, g.coords[l - 1].rows)));
  }
  return g;
}

std::vector<CostVolumeGeometry> pair_geometry(const ArchConfig& arch, const FrameGeometry& cur,
                                              const FrameGeometry& prev) {
  std::vector<CostVolumeGeometry> out;
  for (std::size_t l = 0; l < arch.levels; ++l)
    out.push_back(cost_volume_geometry(arch.neighborhoods[l], arch.neighborhoods[l], cur.coords.at(l),
                                       prev.coords.at(l)));
  return out;
}

SequenceGeometry sequence_geometry(const ArchConfig& arch, const CloudSequence& seq) {
  if (seq.frames.empty()) throw GeometryError("empty sequence");
  SequenceGeometry g;
  for (const auto& f : seq.frames) g.frames.push_back(frame_geometry(arch, f.coords()));
  for (std::size_t t = 0; t < g.frames.size(); ++t)
    g.pairs.push_back(pair_geometry(arch, g.frames[t], g.frames[t == 0 ? 0 : t - 1]));
  return g;
}

Model::Model(ArchConfig arch) : arch_(std::move(arch)) {
  arch_.validate();
  const std::size_t L = arch_.levels;
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t in = l + 1 == L ? arch_.input_dim : arch_.feature_dims[l + 1];
    const std::size_t d = arch_.feature_dims[l];
    encoders_.push_back(make_point_conv(level_name("pyr", l), in, d, arch_.weight_hidden));
    cells_.push_back(make_rcv_spec(level_name("rcv", l), d, arch_.hidden, arch_.cost_hidden,
                                   arch_.weight_hidden, arch_.neighborhoods[l], arch_.neighborhoods[l]));
    refine_convs_.push_back(make_point_conv(level_name("refine", l) + ".conv", 3 + d + arch_.hidden,
                                            arch_.refine_width, arch_.weight_hidden));
    refine_mlps_.push_back(make_mlp(level_name("refine", l) + ".mlp",
                                    {arch_.refine_width, arch_.refine_width, 3}, Activation::kLeakyRelu));
  }
  head_ = make_mlp("head", {arch_.hidden + arch_.feature_dims[L - 1], arch_.head_width, 3},
                   Activation::kLeakyRelu);
}

ParamStore Model::layout() const {
  ParamStore p;
  for (std::size_t l = 0; l < arch_.levels; ++l) {
    encoders_[l].declare(p);
    cells_[l].declare(p);
    refine_convs_[l].declare(p);
    refine_mlps_[l].declare(p);
  }
  head_.declare(p);
  return p;
}

ParamStore Model::init_params(std::uint64_t seed) const {
  ParamStore p = layout();
  const double mean = 1.0 / static_cast<double>(arch_.conv_k);
  auto init_conv = [&](const PointConvSpec& c) {
    init_mlp(c.feature, p, seed, 1.0, 0.0, kOffsetInitGain);
    init_mlp(c.weight, p, seed, 0.1, mean, kOffsetInitGain);
  };
  for (std::size_t l = 0; l < arch_.levels; ++l) {
    init_conv(encoders_[l]);
    init_rcv(cells_[l], p, seed);
    init_conv(refine_convs_[l]);
    init_mlp(refine_mlps_[l], p, seed, 0.1);
  }
  init_mlp(head_, p, seed, 0.1);
  return p;
}

std::vector<std::string> Model::head_slices() const {
  std::vector<std::string> out;
  for (std::size_t l = 0; l < head_.layers(); ++l) {
    out.push_back(head_.weight(l));
    out.push_back(head_.bias(l));
  }
  return out;
}

std::uint64_t arch_hash(const ArchConfig& a) {
  std::ostringstream os;
  os << "levels=" << a.levels << ";div=" << a.level_divisor << ";feat=";
  for (auto d : a.feature_dims) os << d << ',';
  os << ";in=" << a.input_dim << ";h=" << a.hidden << ";ch=" << a.cost_hidden << ";wh=" << a.weight_hidden;
  for (const auto& nb : a.neighborhoods)
    os << ";nb=" << static_cast<int>(nb.mode) << ',' << nb.k << ',' << nb.radius;
  os << ";conv=" << a.conv_k << ";idw=" << a.idw_k << ";rw=" << a.refine_width << ";hw=" << a.head_width
     << ";res=" << a.residual_refinement;
  return fnv1a(os.str());
}

Matrix input_features(const Model& model, const PointCloudFrame& frame) {
  const Matrix& x = frame.feats() ? *frame.feats() : frame.coords();
  if (x.cols != model.arch().input_dim)
    throw ShapeError("frame features have " + std::to_string(x.cols) + " columns, model expects " +
                     std::to_string(model.arch().input_dim));
  return x;
}

PyramidVars build_pyramid(const Model& model, ParamBinding& params, const FrameGeometry& geometry,
                          Var finest_coords, Var input_feats) {
  const std::size_t L = model.arch().levels;
  if (geometry.coords.size() != L) throw ShapeError("pyramid geometry has the wrong number of levels");
  PyramidVars p;
  p.coords.resize(L, finest_coords);
  p.feats.resize(L, input_feats);
  p.feats[L - 1] = point_conv(model.encoder(L - 1), params, finest_coords, finest_coords, input_feats,
                              geometry.conv_neighbors[L - 1]);
  for (std::size_t l = L - 1; l-- > 0;) {
    p.coords[l] = gather_rows(p.coords[l + 1], geometry.parent_index[l]);
    p.feats[l] = point_conv(model.encoder(l), params, p.coords[l], p.coords[l + 1], p.feats[l + 1],
                            geometry.conv_neighbors[l]);
  }
  return p;
}

std::vector<PyramidLevel> build_pyramid(const Model& model, const ParamStore& params,
                                        const PointCloudFrame& frame) {
  Tape tape;
  ParamBinding bound(tape, params);
  const FrameGeometry g = frame_geometry(model.arch(), frame.coords());
  const PyramidVars p = build_pyramid(model, bound, g, tape.constant(Tensor::from_matrix(frame.coords())),
                                      tape.constant(Tensor::from_matrix(input_features(model, frame))));
  std::vector<PyramidLevel> out;
  for (std::size_t l = 0; l < p.coords.size(); ++l)
    out.push_back({p.coords[l].value().to_matrix(), p.feats[l].value().to_matrix(), g.parent_index[l]});
  return out;
}

namespace {

struct Encoder {
  const Model& model;
  ParamBinding& params;
  RolloutOptions options;
  std::vector<RcvStateVar> states;

  /// Runs every level's cell on one frame's pyramid.
  void step(const PyramidVars& pyr, const std::vector<CostVolumeGeometry>& pair) {
    Tape& tape = params.tape();
    for (std::size_t l = 0; l < states.size(); ++l) {
      if (options.reset_state) states[l] = zero_state_like(tape, states[l], model.arch().hidden);
      states[l] = rcv_step(model.cell(l), params, states[l], pyr.coords[l], pyr.feats[l], pair[l]).state;
    }
  }

  std::vector<Var> flows(const PyramidVars& pyr, const FrameGeometry& g) {
    Tape& tape = params.tape();
    const std::size_t L = states.size();
    std::vector<Var> out;
    for (std::size_t l = 0; l < L; ++l) {
      Var up = l == 0 ? tape.constant(Tensor(pyr.coords[0].rows(), 3))
                      : idw_interpolate(pyr.coords[l], pyr.coords[l - 1], out[l - 1], g.upsample_neighbors[l]);
      Var x = concat_cols({up, pyr.feats[l], states[l].hidden});
      Var r = point_conv(model.refine_conv(l), params, pyr.coords[l], pyr.coords[l], x, g.refine_neighbors[l]);
      Var delta = mlp_forward(model.refine_mlp(l), params, r);
      out.push_back(model.arch().residual_refinement ? add(up, delta) : delta);
    }
    return out;
  }
};

Encoder start_encoder(const Model& model, ParamBinding& params, const PyramidVars& first,
                      RolloutOptions options) {
  Encoder e{model, params, options, {}};
  Tape& tape = params.tape();
  for (std::size_t l = 0; l < model.arch().levels; ++l) {
    const std::size_t n = first.coords[l].rows();
    e.states.push_back({first.coords[l], tape.constant(Tensor(n, model.arch().hidden)),
                        tape.constant(Tensor(n, model.arch().hidden))});
  }
  return e;
}

PyramidVars frame_pyramid(const Model& model, ParamBinding& params, const FrameGeometry& g,
                          const PointCloudFrame& frame) {
  Tape& tape = params.tape();
  return build_pyramid(model, params, g, tape.constant(Tensor::from_matrix(frame.coords())),
                       tape.constant(Tensor::from_matrix(input_features(model, frame))));
}

void check_geometry(const CloudSequence& seq, const SequenceGeometry& geometry) {
  if (geometry.frames.size() != seq.frames.size() || geometry.pairs.size() != seq.frames.size())
    throw ShapeError("sequence geometry does not match the sequence length");
}

}  // namespace

FlowPyramidVars estimate_flows(const Model& model, ParamBinding& params, const CloudSequence& seq,
                               const SequenceGeometry& geometry, RolloutOptions options) {
  check_geometry(seq, geometry);
  if (seq.frames.size() < 2) throw ShapeError("flow estimation needs at least two frames");
  PyramidVars pyr = frame_pyramid(model, params, geometry.frames[0], seq.frames[0]);
  Encoder enc = start_encoder(model, params, pyr, options);
  enc.step(pyr, geometry.pairs[0]);
  FlowPyramidVars out;
  for (std::size_t t = 1; t < seq.frames.size(); ++t) {
    pyr = frame_pyramid(model, params, geometry.frames[t], seq.frames[t]);
    enc.step(pyr, geometry.pairs[t]);
    out.flows.push_back(enc.flows(pyr, geometry.frames[t]));
    out.features.push_back(pyr.feats);
  }
  out.states = enc.states;
  return out;
}

FlowPyramid estimate_flows(const Model& model, const ParamStore& params, const CloudSequence& seq,
                           RolloutOptions options) {
  Tape tape;
  ParamBinding bound(tape, params);
  const auto g = sequence_geometry(model.arch(), seq);
  const auto v = estimate_flows(model, bound, seq, g, options);
  FlowPyramid out;
  for (std::size_t t = 0; t < v.flows.size(); ++t) {
    out.flows.emplace_back();
    out.features.emplace_back();
    for (std::size_t l = 0; l < v.flows[t].size(); ++l) {
      out.flows.back().push_back(v.flows[t][l].value().to_matrix());
      out.features.back().push_back(v.features[t][l].value().to_matrix());
    }
  }
  return out;
}

ForecastVars forecast(const Model& model, ParamBinding& params, const CloudSequence& seq,
                      const SequenceGeometry& geometry, std::size_t horizon, RolloutOptions options) {
  check_geometry(seq, geometry);
  if (horizon == 0) throw ShapeError("forecast horizon must be positive");
  if (model.arch().input_dim != 3)
    throw ShapeError("forecasting feeds predicted coordinates back as inputs and needs input_dim 3");
  const std::size_t L = model.arch().levels;

  PyramidVars pyr = frame_pyramid(model, params, geometry.frames[0], seq.frames[0]);
  Encoder enc = start_encoder(model, params, pyr, options);
  enc.step(pyr, geometry.pairs[0]);
  for (std::size_t t = 1; t < seq.frames.size(); ++t) {
    pyr = frame_pyramid(model, params, geometry.frames[t], seq.frames[t]);
    enc.step(pyr, geometry.pairs[t]);
  }

  ForecastVars out;
  out.level_index = geometry.frames.back().to_finest;
  FrameGeometry prev = geometry.frames.back();
  Var q = pyr.coords[L - 1];
  for (std::size_t k = 0; k < horizon; ++k) {
    out.inputs.push_back(q);
    Var delta = mlp_forward(model.head(), params, concat_cols({enc.states[L - 1].hidden, pyr.feats[L - 1]}));
    Var p = add(q, delta);
    out.frames.push_back(p);
    if (k + 1 == horizon) break;
    FrameGeometry g = frame_geometry(model.arch(), p.value().to_matrix());
    pyr = build_pyramid(model, params, g, p, p);
    enc.step(pyr, pair_geometry(model.arch(), g, prev));
    prev = std::move(g);
    q = p;
  }
  return out;
}

Forecast forecast(const Model& model, const ParamStore& params, const CloudSequence& seq,
                  std::size_t horizon, RolloutOptions options) {
  Tape tape;
  ParamBinding bound(tape, params);
  const auto g = sequence_geometry(model.arch(), seq);
  const auto v = forecast(model, bound, seq, g, horizon, options);
  Forecast out;
  out.level_index = v.level_index;
  for (std::size_t k = 0; k < v.frames.size(); ++k) {
    out.frames.push_back(v.frames[k].value().to_matrix());
    out.inputs.push_back(v.inputs[k].value().to_matrix());
    out.pyramids.emplace_back();
    for (const auto& idx : v.level_index) out.pyramids.back().push_back(gather_rows(out.frames.back(), idx));
  }
  return out;
}

}  // namespace spcm

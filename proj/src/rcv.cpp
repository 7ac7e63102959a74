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

#include "spcm/rcv.hpp"

#include "spcm/container.hpp"
#include "spcm/random.hpp"

namespace spcm {

RcvSpec make_rcv_spec(const std::string& name, std::size_t input_dim, std::size_t hidden,
                      std::size_t cost_hidden, std::size_t weight_hidden,
                      NeighborhoodSpec within, NeighborhoodSpec across) {
  RcvSpec s;
  s.name = name;
  s.input_dim = input_dim;
  s.hidden = hidden;
  auto gate = [&](const char* tag) {
    return make_cost_volume_spec(name + "." + tag, hidden, input_dim, hidden, cost_hidden,
                                 weight_hidden, within, across);
  };
  s.cv_input = gate("i");
  s.cv_forget = gate("f");
  s.cv_output = gate("o");
  s.cv_hidden = gate("h");
  s.cv_memory = make_cost_volume_spec(name + ".m", hidden, 0, hidden, cost_hidden, weight_hidden,
                                      within, across);
  return s;
}

void RcvSpec::validate() const {
  if (hidden == 0) throw ShapeError("RCV " + name + ": hidden width must be positive");
  for (const CostVolumeSpec* cv : {&cv_input, &cv_forget, &cv_output, &cv_hidden}) {
    cv->validate();
    if (cv->prev_dim != hidden || cv->cur_dim != input_dim || cv->out_dim() != hidden)
      throw ShapeError("RCV " + name + ": gate " + cv->name + " has inconsistent widths");
  }
  cv_memory.validate();
  if (cv_memory.prev_dim != hidden || cv_memory.cur_dim != 0 || cv_memory.out_dim() != hidden)
    throw ShapeError("RCV " + name + ": memory cost volume must read only the cell state");
}

void RcvSpec::declare(ParamStore& params) const {
  validate();
  for (const CostVolumeSpec* cv : {&cv_input, &cv_forget, &cv_output, &cv_memory, &cv_hidden})
    cv->declare(params);
}

void init_rcv(const RcvSpec& spec, ParamStore& params, std::uint64_t seed) {
  for (const CostVolumeSpec* cv :
       {&spec.cv_input, &spec.cv_forget, &spec.cv_output, &spec.cv_memory, &spec.cv_hidden})
    init_cost_volume(*cv, params, seed);
}

void RcvState::validate() const {
  if (anchor_coords.cols != 3) throw ShapeError("RCV state anchors need 3 columns");
  if (hidden.rows != anchor_coords.rows || cell.rows != anchor_coords.rows)
    throw ShapeError("RCV state rows disagree");
  if (hidden.cols != cell.cols) throw ShapeError("RCV hidden and cell widths differ");
}

RcvState rcv_init(const Matrix& first_frame_coords, std::size_t hidden) {
  if (hidden == 0) throw ShapeError("RCV hidden width must be positive");
  if (first_frame_coords.cols != 3) throw ShapeError("RCV anchors need 3 columns");
  return {first_frame_coords, Matrix(first_frame_coords.rows, hidden),
          Matrix(first_frame_coords.rows, hidden)};
}

RcvStateVar bind_state(Tape& tape, const RcvState& state) {
  state.validate();
  return {tape.constant(Tensor::from_matrix(state.anchor_coords)),
          tape.constant(Tensor::from_matrix(state.hidden)),
          tape.constant(Tensor::from_matrix(state.cell))};
}

RcvState unbind_state(const RcvStateVar& state) {
  return {state.anchor_coords.value().to_matrix(), state.hidden.value().to_matrix(),
          state.cell.value().to_matrix()};
}

RcvStateVar zero_state_like(Tape& tape, const RcvStateVar& state, std::size_t hidden) {
  const std::size_t n = state.anchor_coords.rows();
  return {state.anchor_coords, tape.constant(Tensor(n, hidden)), tape.constant(Tensor(n, hidden))};
}

RcvStepResult rcv_step(const RcvSpec& spec, ParamBinding& params, const RcvStateVar& state,
                       Var coords, Var feats, const CostVolumeGeometry& geometry) {
  if (feats.cols() != spec.input_dim)
    throw ShapeError("RCV " + spec.name + ": input width " + std::to_string(feats.cols()) +
                     " != " + std::to_string(spec.input_dim));
  if (state.hidden.cols() != spec.hidden)
    throw ShapeError("RCV " + spec.name + ": state width " + std::to_string(state.hidden.cols()) +
                     " != " + std::to_string(spec.hidden));
  auto cv = [&](const CostVolumeSpec& s, Var memory, std::optional<Var> x) {
    return cost_volume(s, params, geometry, coords, x, state.anchor_coords, memory);
  };
  RcvGates g;
  g.input = sigmoid(cv(spec.cv_input, state.hidden, feats));
  g.forget = sigmoid(cv(spec.cv_forget, state.hidden, feats));
  g.output = sigmoid(cv(spec.cv_output, state.hidden, feats));
  g.memory_candidate = cv(spec.cv_memory, state.cell, std::nullopt);
  g.hidden_candidate = tanh(cv(spec.cv_hidden, state.hidden, feats));
  Var cell = add(mul(g.forget, g.memory_candidate), mul(g.input, g.hidden_candidate));
  Var hidden = mul(g.output, cell);
  return {{coords, hidden, cell}, hidden, g};
}

std::pair<RcvState, Matrix> rcv_step(const RcvSpec& spec, const ParamStore& params,
                                     const RcvState& state, const PointCloudFrame& frame) {
  if (!frame.feats()) throw ShapeError("RCV " + spec.name + " needs frame features");
  Tape tape;
  ParamBinding bound(tape, params);
  const auto geometry =
      cost_volume_geometry(spec.cv_input.within, spec.cv_input.across, frame.coords(), state.anchor_coords);
  auto r = rcv_step(spec, bound, bind_state(tape, state),
                    tape.constant(Tensor::from_matrix(frame.coords())),
                    tape.constant(Tensor::from_matrix(*frame.feats())), geometry);
  return {unbind_state(r.state), r.output.value().to_matrix()};
}

void write_state(const RcvState& state, const std::filesystem::path& path) {
  state.validate();
  Container c;
  c.magic = kStateMagic;
  c.add("anchor_coords", state.anchor_coords);
  c.add("hidden", state.hidden);
  c.add("cell", state.cell);
  write_container(c, path);
}

RcvState read_state(const std::filesystem::path& path) {
  const Container c = read_container(path, kStateMagic);
  RcvState s{c.matrix("anchor_coords"), c.matrix("hidden"), c.matrix("cell")};
  s.validate();
  return s;
}

}  // namespace spcm

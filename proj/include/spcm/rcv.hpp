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

// Recurrent cost-volume cell: an LSTM-style update whose gate projections
// are cost volumes between the current frame and the state's anchor points.
//
//   I = sigmoid(CV_I(C_t, X_t; C_{t-1}, H_{t-1}))
//   F = sigmoid(CV_F(...)),  O = sigmoid(CV_O(...))
//   Mhat = CV_M(C_t, -; C_{t-1}, M_{t-1})          (coordinates only)
//   Hhat = tanh(CV_H(C_t, X_t; C_{t-1}, H_{t-1}))
//   M_t = F * Mhat + I * Hhat,   H_t = O * M_t,   anchors <- C_t

#pragma once

#include <array>
#include <filesystem>

#include "spcm/costvol.hpp"

namespace spcm {

struct RcvSpec {
  std::string name;
  std::size_t input_dim = 0;
  std::size_t hidden = 0;
  CostVolumeSpec cv_input;
  CostVolumeSpec cv_forget;
  CostVolumeSpec cv_output;
  CostVolumeSpec cv_memory;
  CostVolumeSpec cv_hidden;

  void declare(ParamStore& params) const;
  void validate() const;
};

RcvSpec make_rcv_spec(const std::string& name, std::size_t input_dim, std::size_t hidden,
                      std::size_t cost_hidden, std::size_t weight_hidden,
                      NeighborhoodSpec within, NeighborhoodSpec across);

void init_rcv(const RcvSpec& spec, ParamStore& params, std::uint64_t seed);

/// Plain-value recurrent state.
struct RcvState {
  Matrix anchor_coords;  // N_prev x 3
  Matrix hidden;         // N_prev x h
  Matrix cell;           // N_prev x h

  void validate() const;
  bool operator==(const RcvState&) const = default;
};

RcvState rcv_init(const Matrix& first_frame_coords, std::size_t hidden);

/// Recurrent state living on a tape, used for backpropagation through time.
struct RcvStateVar {
  Var anchor_coords;
  Var hidden;
  Var cell;
};

RcvStateVar bind_state(Tape& tape, const RcvState& state);
RcvState unbind_state(const RcvStateVar& state);
/// Same anchors, zero hidden and cell.
RcvStateVar zero_state_like(Tape& tape, const RcvStateVar& state, std::size_t hidden);

struct RcvGates {
  Var input, forget, output, memory_candidate, hidden_candidate;
};

struct RcvStepResult {
  RcvStateVar state;
  Var output;  // N_t x h, equal to the new hidden state
  RcvGates gates;
};

/// One update. `geometry` must come from (frame coords, state anchors).
RcvStepResult rcv_step(const RcvSpec& spec, ParamBinding& params, const RcvStateVar& state,
                       Var coords, Var feats, const CostVolumeGeometry& geometry);

/// Value-level convenience: computes the geometry with the spec's neighborhoods.
std::pair<RcvState, Matrix> rcv_step(const RcvSpec& spec, const ParamStore& params,
                                     const RcvState& state, const PointCloudFrame& frame);

void write_state(const RcvState& state, const std::filesystem::path& path);
RcvState read_state(const std::filesystem::path& path);

}  // namespace spcm

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

// Training loop and model evaluation over in-memory datasets.

#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "spcm/metrics.hpp"
#include "spcm/net.hpp"
#include "spcm/objectives.hpp"

namespace spcm {

struct OptimConfig {
  double lr = 1e-3;
  std::vector<std::uint64_t> milestones{100, 200, 300};  // in optimizer steps
  double gamma = 0.1;
  AdamConfig adam;  // betas, weight decay, gradient clipping
};

/// Random transform applied to each training sequence at every step: a
/// rotation about z, a translation and a constant velocity added to every
/// frame (frame t moves by t * velocity, so every flow gains the velocity).
struct AugmentConfig {
  bool enabled = false;
  bool rotate_z = true;
  double max_shift = 1.0;
  double max_velocity = 0.0;  // meters per step
};

CloudSequence augment_sequence(const CloudSequence& seq, const AugmentConfig& config, std::uint64_t seed);

struct TrainOptions {
  LossConfig loss;  // mode selects the task
  OptimConfig optim;
  std::uint64_t seed = 0;
  std::size_t epochs = 1;
  std::size_t max_steps = 0;  // 0: no limit
  std::size_t batch_size = 1;
  std::size_t threads = 1;
  /// Sum per-sequence gradients in index order; otherwise in completion order.
  bool deterministic = true;
  bool reset_state = false;
  std::size_t horizon = 0;  // forecasting steps; 0 uses every future frame
  AugmentConfig augment;
};

/// Sequences with their parameter-independent geometry.
class Dataset {
 public:
  Dataset(const ArchConfig& arch, std::vector<CloudSequence> sequences);
  std::size_t size() const { return sequences_.size(); }
  const CloudSequence& sequence(std::size_t i) const { return sequences_.at(i); }
  const SequenceGeometry& geometry(std::size_t i) const { return geometry_.at(i); }

 private:
  std::vector<CloudSequence> sequences_;
  std::vector<SequenceGeometry> geometry_;
};

std::size_t effective_horizon(const TrainOptions& options, const CloudSequence& seq);

/// Loss of one sequence on the given tape.
Var task_loss(const Model& model, ParamBinding& params, const CloudSequence& seq,
              const SequenceGeometry& geometry, const TrainOptions& options);

/// Mean task loss over a dataset.
double mean_loss(const Model& model, const ParamStore& params, const Dataset& data,
                 const TrainOptions& options);

struct CurveRow {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;  // mean over the epoch's steps
  double val_loss = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  ParamStore last;
  ParamStore best;  // lowest validation loss; equals `last` without validation data
  double best_val = std::numeric_limits<double>::infinity();
  std::uint64_t best_step = 0;
  std::uint64_t steps = 0;
  std::vector<CurveRow> curve;
};

/// Trains from `init`. Raises NumericError on a non-finite loss or gradient.
TrainResult train(const Model& model, ParamStore init, const Dataset& train_data, const Dataset* val_data,
                  const TrainOptions& options,
                  const std::function<void(const CurveRow&)>& on_epoch = {});

/// Pooled flow statistics of the model's finest-level flows.
FlowStats evaluate_flows(const Model& model, const ParamStore& params, const Dataset& data,
                         RolloutOptions options = {});

DisplacementErrors evaluate_forecast(const Model& model, const ParamStore& params, const Dataset& data,
                                     std::size_t horizon, RolloutOptions options = {});

}  // namespace spcm

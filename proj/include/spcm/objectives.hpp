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

// Training losses and the optimizer.
//
// Multi-level losses take per-step, per-level nested vectors indexed
// [step][level] with levels ordered coarse to fine, matching `alpha`.

#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "spcm/diff.hpp"
#include "spcm/net.hpp"

namespace spcm {

/// Raised on NaN or infinite values during training.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LossMode { kSupervisedSsfe, kSupervisedSpf, kSelfSupervisedSpf };

struct LossConfig {
  std::vector<double> alpha{0.02, 0.08, 0.32};
  LossMode mode = LossMode::kSupervisedSsfe;

  void validate(std::size_t levels) const;
};

using LevelMasks = std::vector<std::vector<std::vector<std::uint8_t>>>;

/// Sum over steps and levels of alpha_l * masked squared error.
Var multilevel_sq_error(const std::vector<std::vector<Var>>& pred,
                        const std::vector<std::vector<Matrix>>& gt, const LevelMasks& masks,
                        std::span<const double> alpha);

/// Ground truth of one frame restricted to every pyramid level.
std::vector<Matrix> level_targets(const Matrix& finest,
                                  const std::vector<std::vector<std::uint32_t>>& to_finest);
std::vector<std::vector<std::uint8_t>> level_masks(
    const std::vector<std::uint8_t>& finest, const std::vector<std::vector<std::uint32_t>>& to_finest);

Var ssfe_loss(const std::vector<std::vector<Var>>& pred, const std::vector<std::vector<Matrix>>& gt,
              const LevelMasks& masks, std::span<const double> alpha);

/// Gathers each frame's gt flow and mask through its pyramid indices.
Var ssfe_loss(const FlowPyramidVars& pred, const CloudSequence& seq, const SequenceGeometry& geometry,
              std::span<const double> alpha);

Var spf_supervised_loss(const std::vector<std::vector<Var>>& pred,
                        const std::vector<std::vector<Matrix>>& gt, const LevelMasks& masks,
                        std::span<const double> alpha);

/// Compares the K predictions with the first K future frames, which must
/// correspond row by row with the last input frame.
Var spf_supervised_loss(const ForecastVars& pred, const CloudSequence& seq, std::span<const double> alpha);

/// Nearest-neighbor squared distances, each direction divided by its source size.
Var chamfer(Var a, Var b);
double chamfer(const Matrix& a, const Matrix& b);
double chamfer(const PointCloudFrame& a, const PointCloudFrame& b);

Var spf_selfsup_loss(const std::vector<std::vector<Var>>& pred,
                     const std::vector<std::vector<Matrix>>& future, std::span<const double> alpha);

/// Compares predicted levels with the valid points of each future frame's own pyramid.
Var spf_selfsup_loss(const Model& model, const ForecastVars& pred, const CloudSequence& seq,
                     std::span<const double> alpha);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
};

/// Adam with decoupled weight decay after global-norm clipping. Returns the
/// gradient norm before clipping.
double optimizer_step(ParamStore& params, std::span<const double> grads, AdamState& state, double lr,
                      const AdamConfig& config = {});

/// Step learning-rate decay: base * gamma^(number of milestones <= step).
double scheduled_lr(double base, std::uint64_t step, std::span<const std::uint64_t> milestones,
                    double gamma = 0.1);

}  // namespace spcm

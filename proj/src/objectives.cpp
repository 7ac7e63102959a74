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

#include "spcm/objectives.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace spcm {

namespace {

void check_nesting(std::size_t pred_steps, std::size_t gt_steps, const char* what) {
  if (pred_steps == 0) throw ShapeError(std::string(what) + ": no predictions");
  if (pred_steps != gt_steps)
    throw ShapeError(std::string(what) + ": " + std::to_string(pred_steps) + " predicted steps but " +
                     std::to_string(gt_steps) + " ground-truth steps");
}

void check_alpha(std::span<const double> alpha) {
  for (double a : alpha)
    if (!(a > 0.0) || !std::isfinite(a)) throw ShapeError("loss: level weights must be positive");
}

}  // namespace

void LossConfig::validate(std::size_t levels) const {
  if (alpha.size() != levels)
    throw ShapeError("loss: " + std::to_string(alpha.size()) + " level weights for " +
                     std::to_string(levels) + " levels");
  check_alpha(alpha);
}

Var multilevel_sq_error(const std::vector<std::vector<Var>>& pred,
                        const std::vector<std::vector<Matrix>>& gt, const LevelMasks& masks,
                        std::span<const double> alpha) {
  check_nesting(pred.size(), gt.size(), "loss");
  check_alpha(alpha);
  if (masks.size() != gt.size()) throw ShapeError("loss: one mask set per step required");
  Tape& tape = *pred.front().front().tape;
  Var total = tape.constant(Tensor::scalar(0.0));
  for (std::size_t t = 0; t < pred.size(); ++t) {
    if (pred[t].size() != alpha.size() || gt[t].size() != alpha.size() || masks[t].size() != alpha.size())
      throw ShapeError("loss: level count differs from the number of level weights");
    for (std::size_t l = 0; l < alpha.size(); ++l) {
      const Matrix& g = gt[t][l];
      if (g.rows != pred[t][l].rows() || g.cols != pred[t][l].cols())
        throw ShapeError("loss: prediction " + shape_str(pred[t][l].value()) +
                         " does not match ground truth at step " + std::to_string(t) + ", level " +
                         std::to_string(l));
      Var e = masked_sq_error(pred[t][l], tape.constant(Tensor::from_matrix(g)), masks[t][l]);
      total = add(total, scale(e, alpha[l]));
    }
  }
  return total;
}

std::vector<Matrix> level_targets(const Matrix& finest,
                                  const std::vector<std::vector<std::uint32_t>>& to_finest) {
  std::vector<Matrix> out;
  for (const auto& idx : to_finest) out.push_back(gather_rows(finest, idx));
  return out;
}

std::vector<std::vector<std::uint8_t>> level_masks(
    const std::vector<std::uint8_t>& finest, const std::vector<std::vector<std::uint32_t>>& to_finest) {
  std::vector<std::vector<std::uint8_t>> out;
  for (const auto& idx : to_finest) {
    out.emplace_back();
    for (std::uint32_t i : idx) out.back().push_back(finest.at(i));
  }
  return out;
}

Var ssfe_loss(const std::vector<std::vector<Var>>& pred, const std::vector<std::vector<Matrix>>& gt,
              const LevelMasks& masks, std::span<const double> alpha) {
  return multilevel_sq_error(pred, gt, masks, alpha);
}

Var ssfe_loss(const FlowPyramidVars& pred, const CloudSequence& seq, const SequenceGeometry& geometry,
              std::span<const double> alpha) {
  if (!seq.has_flows()) throw ShapeError("SSFE loss: sequence has no ground-truth flows");
  check_nesting(pred.flows.size(), seq.gt_flows.size(), "SSFE loss");
  std::vector<std::vector<Matrix>> gt;
  LevelMasks masks;
  for (std::size_t t = 0; t < pred.flows.size(); ++t) {
    const auto& idx = geometry.frames.at(t + 1).to_finest;
    gt.push_back(level_targets(seq.gt_flows[t], idx));
    masks.push_back(level_masks(seq.frames[t + 1].valid_mask(), idx));
  }
  return ssfe_loss(pred.flows, gt, masks, alpha);
}

Var spf_supervised_loss(const std::vector<std::vector<Var>>& pred,
                        const std::vector<std::vector<Matrix>>& gt, const LevelMasks& masks,
                        std::span<const double> alpha) {
  return multilevel_sq_error(pred, gt, masks, alpha);
}

namespace {

void check_horizon(std::size_t predicted, std::size_t available, const char* what) {
  if (predicted == 0) throw ShapeError(std::string(what) + ": no predictions");
  if (predicted > available)
    throw ShapeError(std::string(what) + ": " + std::to_string(predicted) + " predicted steps but only " +
                     std::to_string(available) + " future frames");
}

}  // namespace

Var spf_supervised_loss(const ForecastVars& pred, const CloudSequence& seq, std::span<const double> alpha) {
  check_horizon(pred.frames.size(), seq.future_frames.size(), "SPF loss");
  std::vector<std::vector<Var>> p;
  std::vector<std::vector<Matrix>> gt;
  LevelMasks masks;
  for (std::size_t k = 0; k < pred.frames.size(); ++k) {
    const PointCloudFrame& f = seq.future_frames[k];
    if (f.size() != pred.frames[k].rows())
      throw ShapeError("SPF loss: future frame " + std::to_string(k) + " has " + std::to_string(f.size()) +
                       " points but the prediction has " + std::to_string(pred.frames[k].rows()));
    p.emplace_back();
    for (const auto& idx : pred.level_index) p.back().push_back(gather_rows(pred.frames[k], idx));
    gt.push_back(level_targets(f.coords(), pred.level_index));
    masks.push_back(level_masks(f.valid_mask(), pred.level_index));
  }
  return spf_supervised_loss(p, gt, masks, alpha);
}

namespace {

double sq_dist(const double* a, const double* b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

/// For each row of a, the first row of b at minimal squared distance.
std::vector<std::uint32_t> nearest(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t na = a.size() / 3, nb = b.size() / 3;
  std::vector<std::uint32_t> out(na);
  for (std::size_t i = 0; i < na; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < nb; ++j) {
      const double d = sq_dist(&a[3 * i], &b[3 * j]);
      if (d < best) {
        best = d;
        out[i] = static_cast<std::uint32_t>(j);
      }
    }
  }
  return out;
}

double directed(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t na = a.size() / 3, nb = b.size() / 3;
  double total = 0.0;
  for (std::size_t i = 0; i < na; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < nb; ++j) best = std::min(best, sq_dist(&a[3 * i], &b[3 * j]));
    total += best;
  }
  return total / static_cast<double>(na);
}

void check_clouds(std::size_t ra, std::size_t ca, std::size_t rb, std::size_t cb) {
  if (ra == 0 || rb == 0) throw GeometryError("chamfer: empty cloud");
  if (ca != 3 || cb != 3) throw ShapeError("chamfer: clouds need 3 columns");
}

}  // namespace

Var chamfer(Var a, Var b) {
  check_clouds(a.rows(), a.cols(), b.rows(), b.cols());
  const auto& av = a.value().values;
  const auto& bv = b.value().values;
  const auto ab = nearest(av, bv);
  const auto ba = nearest(bv, av);
  const std::vector<std::uint8_t> all_a(a.rows(), 1), all_b(b.rows(), 1);
  Var fwd = scale(masked_sq_error(a, gather_rows(b, ab), all_a), 1.0 / static_cast<double>(a.rows()));
  Var bwd = scale(masked_sq_error(b, gather_rows(a, ba), all_b), 1.0 / static_cast<double>(b.rows()));
  return add(fwd, bwd);
}

double chamfer(const Matrix& a, const Matrix& b) {
  check_clouds(a.rows, a.cols, b.rows, b.cols);
  return directed(a.data, b.data) + directed(b.data, a.data);
}

double chamfer(const PointCloudFrame& a, const PointCloudFrame& b) { return chamfer(a.coords(), b.coords()); }

Var spf_selfsup_loss(const std::vector<std::vector<Var>>& pred,
                     const std::vector<std::vector<Matrix>>& future, std::span<const double> alpha) {
  check_nesting(pred.size(), future.size(), "self-supervised SPF loss");
  check_alpha(alpha);
  Tape& tape = *pred.front().front().tape;
  Var total = tape.constant(Tensor::scalar(0.0));
  for (std::size_t k = 0; k < pred.size(); ++k) {
    if (pred[k].size() != alpha.size() || future[k].size() != alpha.size())
      throw ShapeError("self-supervised SPF loss: level count differs from the number of level weights");
    for (std::size_t l = 0; l < alpha.size(); ++l) {
      Var c = chamfer(pred[k][l], tape.constant(Tensor::from_matrix(future[k][l])));
      total = add(total, scale(c, alpha[l]));
    }
  }
  return total;
}

Var spf_selfsup_loss(const Model& model, const ForecastVars& pred, const CloudSequence& seq,
                     std::span<const double> alpha) {
  check_horizon(pred.frames.size(), seq.future_frames.size(), "self-supervised SPF loss");
  std::vector<std::vector<Var>> p;
  std::vector<std::vector<Matrix>> future;
  for (std::size_t k = 0; k < pred.frames.size(); ++k) {
    p.emplace_back();
    for (const auto& idx : pred.level_index) p.back().push_back(gather_rows(pred.frames[k], idx));
    const PointCloudFrame& f = seq.future_frames[k];
    const FrameGeometry g = frame_geometry(model.arch(), f.coords());
    future.emplace_back();
    for (std::size_t l = 0; l < g.coords.size(); ++l) {
      std::vector<std::uint32_t> valid;
      for (std::size_t i = 0; i < g.to_finest[l].size(); ++i)
        if (f.valid_mask()[g.to_finest[l][i]]) valid.push_back(static_cast<std::uint32_t>(i));
      if (valid.empty())
        throw GeometryError("self-supervised SPF loss: future frame " + std::to_string(k) +
                            " has no valid points at level " + std::to_string(l));
      future.back().push_back(gather_rows(g.coords[l], valid));
    }
  }
  return spf_selfsup_loss(p, future, alpha);
}

double optimizer_step(ParamStore& params, std::span<const double> grads, AdamState& state, double lr,
                      const AdamConfig& config) {
  auto& x = params.values();
  if (grads.size() != x.size())
    throw ShapeError("optimizer: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(x.size()) + " parameters");
  double norm2 = 0.0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      const auto& s = params.slice_at(i);
      std::ostringstream os;
      os << "non-finite gradient in parameter slice '" << s.name << "' at element " << (i - s.offset);
      throw NumericError(os.str());
    }
    norm2 += grads[i] * grads[i];
  }
  const double norm = std::sqrt(norm2);
  const double factor = config.clip_norm > 0.0 && norm > config.clip_norm ? config.clip_norm / norm : 1.0;
  if (state.m.size() != x.size()) {
    state.m.assign(x.size(), 0.0);
    state.v.assign(x.size(), 0.0);
    state.step = 0;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double g = grads[i] * factor;
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    x[i] -= lr * (mhat / (std::sqrt(vhat) + config.eps) + config.weight_decay * x[i]);
  }
  return norm;
}

double scheduled_lr(double base, std::uint64_t step, std::span<const std::uint64_t> milestones,
                    double gamma) {
  double lr = base;
  for (std::uint64_t m : milestones)
    if (step >= m) lr *= gamma;
  return lr;
}

}  // namespace spcm

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

#include "spcm/train.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>

#include "spcm/random.hpp"

namespace spcm {

Dataset::Dataset(const ArchConfig& arch, std::vector<CloudSequence> sequences)
    : sequences_(std::move(sequences)) {
  for (const auto& s : sequences_) {
    s.validate();
    geometry_.push_back(sequence_geometry(arch, s));
  }
}

CloudSequence augment_sequence(const CloudSequence& seq, const AugmentConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  const double angle = config.rotate_z ? rng.uniform(-std::numbers::pi, std::numbers::pi) : 0.0;
  const double c = std::cos(angle), s = std::sin(angle);
  const double shift_dir = rng.uniform(-std::numbers::pi, std::numbers::pi);
  const double shift_len = config.max_shift * std::sqrt(rng.uniform(0.0, 1.0));
  const Vec3 shift{shift_len * std::cos(shift_dir), shift_len * std::sin(shift_dir), 0.0};
  Vec3 velocity{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
  for (double& v : velocity) v *= config.max_velocity;

  auto rotate = [&](const Matrix& m, const Vec3& offset, bool points) {
    Matrix out(m.rows, 3);
    for (std::size_t r = 0; r < m.rows; ++r) {
      const double x = m(r, 0), y = m(r, 1), z = m(r, 2);
      out(r, 0) = c * x - s * y + offset[0] + (points ? shift[0] : 0.0);
      out(r, 1) = s * x + c * y + offset[1] + (points ? shift[1] : 0.0);
      out(r, 2) = z + offset[2] + (points ? shift[2] : 0.0);
    }
    return out;
  };
  auto frame = [&](const PointCloudFrame& f, double t) {
    const Vec3 offset{t * velocity[0], t * velocity[1], t * velocity[2]};
    std::optional<Matrix> feats;
    if (f.feats()) feats = *f.feats();
    return PointCloudFrame(rotate(f.coords(), offset, true), std::move(feats), f.valid_mask());
  };

  CloudSequence out;
  for (std::size_t t = 0; t < seq.frames.size(); ++t) out.frames.push_back(frame(seq.frames[t], double(t)));
  for (std::size_t k = 0; k < seq.future_frames.size(); ++k)
    out.future_frames.push_back(frame(seq.future_frames[k], double(seq.frames.size() + k)));
  for (const auto& f : seq.gt_flows) out.gt_flows.push_back(rotate(f, velocity, false));
  for (const auto& f : seq.future_flows) out.future_flows.push_back(rotate(f, velocity, false));
  return out;
}

std::size_t effective_horizon(const TrainOptions& options, const CloudSequence& seq) {
  const std::size_t available = seq.future_frames.size();
  if (available == 0) throw ShapeError("forecasting needs future frames");
  return options.horizon == 0 ? available : std::min(options.horizon, available);
}

Var task_loss(const Model& model, ParamBinding& params, const CloudSequence& seq,
              const SequenceGeometry& geometry, const TrainOptions& options) {
  const RolloutOptions rollout{options.reset_state};
  switch (options.loss.mode) {
    case LossMode::kSupervisedSsfe:
      return ssfe_loss(estimate_flows(model, params, seq, geometry, rollout), seq, geometry, options.loss.alpha);
    case LossMode::kSupervisedSpf:
      return spf_supervised_loss(
          forecast(model, params, seq, geometry, effective_horizon(options, seq), rollout), seq,
          options.loss.alpha);
    case LossMode::kSelfSupervisedSpf:
      return spf_selfsup_loss(model,
                              forecast(model, params, seq, geometry, effective_horizon(options, seq), rollout),
                              seq, options.loss.alpha);
  }
  throw std::logic_error("unknown loss mode");
}

double mean_loss(const Model& model, const ParamStore& params, const Dataset& data,
                 const TrainOptions& options) {
  if (data.size() == 0) throw ShapeError("empty dataset");
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Tape tape;
    ParamBinding bound(tape, params);
    total += task_loss(model, bound, data.sequence(i), data.geometry(i), options).value().item();
  }
  return total / static_cast<double>(data.size());
}

namespace {

struct MemberResult {
  double loss = 0.0;
  std::vector<double> grad;
};

MemberResult member_gradient(const Model& model, const ParamStore& params, const Dataset& data,
                             std::size_t index, std::uint64_t step, const TrainOptions& options) {
  Tape tape;
  ParamBinding bound(tape, params);
  Var loss;
  if (options.augment.enabled) {
    const std::uint64_t seed = derive_seed(options.seed, "augment/" + std::to_string(step) + "/" + std::to_string(index));
    const CloudSequence seq = augment_sequence(data.sequence(index), options.augment, seed);
    loss = task_loss(model, bound, seq, sequence_geometry(model.arch(), seq), options);
  } else {
    loss = task_loss(model, bound, data.sequence(index), data.geometry(index), options);
  }
  MemberResult r;
  r.loss = loss.value().item();
  if (!std::isfinite(r.loss)) return r;
  tape.backward(loss);
  r.grad = bound.gradient();
  return r;
}

}  // namespace

TrainResult train(const Model& model, ParamStore init, const Dataset& train_data, const Dataset* val_data,
                  const TrainOptions& options, const std::function<void(const CurveRow&)>& on_epoch) {
  options.loss.validate(model.arch().levels);
  if (!init.layout_equal(model.layout())) throw ShapeError("initial parameters do not match the model layout");
  if (train_data.size() == 0 && options.epochs > 0) throw ShapeError("empty training set");
  if (options.batch_size == 0) throw ShapeError("batch size must be positive");

  TrainResult result;
  result.last = std::move(init);
  result.best = result.last;
  const bool validate = val_data && val_data->size() > 0;
  AdamState adam;
  Rng order_rng(derive_seed(options.seed, "order"));
  const std::size_t n = train_data.size();
  std::vector<std::size_t> order(n);

  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    if (options.max_steps > 0 && result.steps >= options.max_steps) break;
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);

    double epoch_loss = 0.0;
    std::size_t epoch_members = 0;
    double lr = 0.0;
    for (std::size_t start = 0; start < n; start += options.batch_size) {
      if (options.max_steps > 0 && result.steps >= options.max_steps) break;
      const std::size_t count = std::min(options.batch_size, n - start);
      std::vector<MemberResult> members(count);
      std::vector<double> grad(result.last.size(), 0.0);
      std::mutex mu;
      auto run = [&](std::size_t m) {
        members[m] = member_gradient(model, result.last, train_data, order[start + m], result.steps, options);
        if (!options.deterministic && !members[m].grad.empty()) {
          std::lock_guard<std::mutex> lock(mu);
          for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += members[m].grad[i];
        }
      };
      const std::size_t workers = std::min<std::size_t>(std::max<std::size_t>(1, options.threads), count);
      if (workers == 1) {
        for (std::size_t m = 0; m < count; ++m) run(m);
      } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(workers);
        for (std::size_t w = 0; w < workers; ++w)
          pool.emplace_back([&, w] {
            try {
              for (std::size_t m = w; m < count; m += workers) run(m);
            } catch (...) {
              errors[w] = std::current_exception();
            }
          });
        for (auto& t : pool) t.join();
        for (auto& e : errors)
          if (e) std::rethrow_exception(e);
      }
      for (std::size_t m = 0; m < count; ++m) {
        if (!std::isfinite(members[m].loss)) {
          std::ostringstream os;
          os << "non-finite loss at epoch " << epoch << ", step " << result.steps << " (training sequence "
             << order[start + m] << ")";
          throw NumericError(os.str());
        }
        epoch_loss += members[m].loss;
        ++epoch_members;
        if (options.deterministic)
          for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += members[m].grad[i];
      }
      for (double& g : grad) g /= static_cast<double>(count);
      lr = scheduled_lr(options.optim.lr, result.steps, options.optim.milestones, options.optim.gamma);
      try {
        optimizer_step(result.last, grad, adam, lr, options.optim.adam);
      } catch (const NumericError& e) {
        std::ostringstream os;
        os << e.what() << " at epoch " << epoch << ", step " << result.steps;
        throw NumericError(os.str());
      }
      ++result.steps;
    }

    CurveRow row;
    row.epoch = epoch;
    row.step = result.steps;
    row.lr = lr;
    row.train_loss = epoch_members ? epoch_loss / static_cast<double>(epoch_members) : 0.0;
    if (validate) {
      row.val_loss = mean_loss(model, result.last, *val_data, options);
      if (!std::isfinite(row.val_loss)) {
        std::ostringstream os;
        os << "non-finite validation loss at epoch " << epoch << ", step " << result.steps;
        throw NumericError(os.str());
      }
      if (row.val_loss < result.best_val) {
        result.best_val = row.val_loss;
        result.best = result.last;
        result.best_step = result.steps;
      }
    } else {
      result.best = result.last;
      result.best_step = result.steps;
    }
    result.curve.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  return result;
}

FlowStats evaluate_flows(const Model& model, const ParamStore& params, const Dataset& data,
                         RolloutOptions options) {
  std::vector<Matrix> pred, gt;
  std::vector<std::vector<std::uint8_t>> masks;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const CloudSequence& seq = data.sequence(i);
    if (!seq.has_flows()) throw ShapeError("flow evaluation needs ground-truth flows");
    Tape tape;
    ParamBinding bound(tape, params);
    const auto flows = estimate_flows(model, bound, seq, data.geometry(i), options);
    for (std::size_t t = 0; t < flows.flows.size(); ++t) {
      pred.push_back(flows.flows[t].back().value().to_matrix());
      gt.push_back(seq.gt_flows[t]);
      masks.push_back(seq.frames[t + 1].valid_mask());
    }
  }
  return flow_stats(pred, gt, masks);
}

DisplacementErrors evaluate_forecast(const Model& model, const ParamStore& params, const Dataset& data,
                                     std::size_t horizon, RolloutOptions options) {
  double ade_sum = 0.0, fde_sum = 0.0;
  std::size_t ade_n = 0, fde_n = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const CloudSequence& seq = data.sequence(i);
    TrainOptions o;
    o.horizon = horizon;
    const std::size_t k = effective_horizon(o, seq);
    Tape tape;
    ParamBinding bound(tape, params);
    const auto f = forecast(model, bound, seq, data.geometry(i), k, options);
    for (std::size_t s = 0; s < k; ++s) {
      const Matrix p = f.frames[s].value().to_matrix();
      const PointCloudFrame& g = seq.future_frames[s];
      for (std::size_t r = 0; r < p.rows; ++r) {
        if (!g.valid_mask()[r]) continue;
        const double e = distance(p.row(r), g.coords().row(r));
        ade_sum += e;
        ++ade_n;
        if (s + 1 == k) {
          fde_sum += e;
          ++fde_n;
        }
      }
    }
  }
  if (ade_n == 0 || fde_n == 0) throw MetricError("forecast evaluation: no valid points");
  return {ade_sum / static_cast<double>(ade_n), fde_sum / static_cast<double>(fde_n)};
}

}  // namespace spcm

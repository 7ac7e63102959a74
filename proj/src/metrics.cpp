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

#include "spcm/metrics.hpp"

#include <cmath>
#include <string>

#include "spcm/objectives.hpp"

namespace spcm {

namespace {

void check_pair(const Matrix& pred, const Matrix& gt, const char* what) {
  if (pred.cols != 3 || gt.cols != 3) throw MetricError(std::string(what) + ": inputs need 3 columns");
  if (pred.rows != gt.rows)
    throw MetricError(std::string(what) + ": " + std::to_string(pred.rows) + " predicted rows but " +
                      std::to_string(gt.rows) + " ground-truth rows");
}

bool valid(const std::vector<std::uint8_t>& mask, std::size_t i) { return mask.empty() || mask[i] != 0; }

double row_dist(const Matrix& a, std::size_t i, const Matrix& b, std::size_t j) {
  return distance(a.row(i), b.row(j));
}

double norm3(const Matrix& a, std::size_t i) {
  return std::sqrt(a(i, 0) * a(i, 0) + a(i, 1) * a(i, 1) + a(i, 2) * a(i, 2));
}

}  // namespace

FlowStats flow_stats(const std::vector<Matrix>& pred, const std::vector<Matrix>& gt,
                     const std::vector<std::vector<std::uint8_t>>& masks) {
  if (pred.size() != gt.size()) throw MetricError("flow_stats: frame counts differ");
  if (!masks.empty() && masks.size() != gt.size()) throw MetricError("flow_stats: one mask per frame required");
  FlowStats s;
  double epe_sum = 0.0;
  std::size_t acc_s = 0, acc_r = 0, out = 0, rect = 0;
  for (std::size_t t = 0; t < pred.size(); ++t) {
    check_pair(pred[t], gt[t], "flow_stats");
    static const std::vector<std::uint8_t> kAll;
    const auto& mask = masks.empty() ? kAll : masks[t];
    if (!mask.empty() && mask.size() != gt[t].rows) throw MetricError("flow_stats: mask length mismatch");
    for (std::size_t i = 0; i < gt[t].rows; ++i) {
      if (!valid(mask, i)) continue;
      const double epe = row_dist(pred[t], i, gt[t], i);
      const double gn = norm3(gt[t], i);
      const double rel = gn > 0.0 ? epe / gn : (epe > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
      epe_sum += epe;
      ++s.valid_count;
      if (epe < kAccStrictMeters || rel < kAccStrictRel) ++acc_s;
      if (epe < kAccRelaxedMeters || rel < kAccRelaxedRel) ++acc_r;
      const bool outlier = epe > kOutlierMeters || rel > kOutlierRel;
      if (outlier) ++out;
      if (gn < kRectifyNorm ? epe > kOutlierMeters : outlier) ++rect;
    }
  }
  if (s.valid_count == 0) throw MetricError("flow_stats: no valid points");
  const double n = static_cast<double>(s.valid_count);
  s.epe3d = epe_sum / n;
  s.acc3ds = static_cast<double>(acc_s) / n;
  s.acc3dr = static_cast<double>(acc_r) / n;
  s.outliers3d = static_cast<double>(out) / n;
  s.rect_outliers3d = static_cast<double>(rect) / n;
  return s;
}

FlowStats flow_stats(const Matrix& pred, const Matrix& gt, const std::vector<std::uint8_t>& mask) {
  return flow_stats(std::vector<Matrix>{pred}, std::vector<Matrix>{gt},
                    std::vector<std::vector<std::uint8_t>>{mask});
}

DisplacementErrors ade_fde(const std::vector<Matrix>& pred, const std::vector<Matrix>& gt,
                           const std::vector<std::vector<std::uint8_t>>& masks) {
  if (pred.empty()) throw MetricError("ade_fde: no predicted frames");
  if (pred.size() != gt.size()) throw MetricError("ade_fde: frame counts differ");
  if (!masks.empty() && masks.size() != gt.size()) throw MetricError("ade_fde: one mask per frame required");
  double total = 0.0, last = 0.0;
  std::size_t count = 0, last_count = 0;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    check_pair(pred[k], gt[k], "ade_fde");
    static const std::vector<std::uint8_t> kAll;
    const auto& mask = masks.empty() ? kAll : masks[k];
    if (!mask.empty() && mask.size() != gt[k].rows) throw MetricError("ade_fde: mask length mismatch");
    const bool final_step = k + 1 == pred.size();
    for (std::size_t i = 0; i < gt[k].rows; ++i) {
      if (!valid(mask, i)) continue;
      const double e = row_dist(pred[k], i, gt[k], i);
      total += e;
      ++count;
      if (final_step) {
        last += e;
        ++last_count;
      }
    }
  }
  if (count == 0) throw MetricError("ade_fde: no valid points");
  if (last_count == 0) throw MetricError("ade_fde: no valid point at the final step");
  return {total / static_cast<double>(count), last / static_cast<double>(last_count)};
}

std::vector<std::size_t> solve_assignment(const std::vector<double>& cost, std::size_t n) {
  if (cost.size() != n * n) throw MetricError("assignment: cost matrix must be n x n");
  // Shortest augmenting paths with row and column potentials (1-based
  // internal indexing, column 0 is the virtual source).
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> match(n);
  for (std::size_t j = 1; j <= n; ++j) match[p[j] - 1] = j - 1;
  return match;
}

double emd(const Matrix& a, const Matrix& b) {
  if (a.cols != 3 || b.cols != 3) throw MetricError("emd: inputs need 3 columns");
  if (a.rows != b.rows)
    throw MetricError("emd: clouds differ in size (" + std::to_string(a.rows) + " vs " +
                      std::to_string(b.rows) + ")");
  if (a.rows == 0) throw MetricError("emd: empty clouds");
  const std::size_t n = a.rows;
  std::vector<double> cost(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double d = row_dist(a, i, b, j);
      cost[i * n + j] = d * d;
    }
  const auto match = solve_assignment(cost, n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += cost[i * n + match[i]];
  return total / static_cast<double>(n);
}

namespace {

double log_sum_exp(const double* x, std::size_t n, std::size_t stride) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, x[i * stride]);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(x[i * stride] - m);
  return m + std::log(s);
}

Matrix exp_of(const Matrix& m) {
  Matrix out = m;
  for (double& x : out.data) x = std::exp(x);
  return out;
}

}  // namespace

SinkhornResult sinkhorn(const Matrix& a, const Matrix& b, const SinkhornConfig& config,
                        std::vector<SinkhornPass>* trace) {
  if (a.rows == 0 || b.rows == 0) throw MetricError("sinkhorn: empty cloud");
  if (a.cols != 3 || b.cols != 3) throw MetricError("sinkhorn: inputs need 3 columns");
  const std::size_t na = a.rows, nb = b.rows, cols = nb + 1;
  // Log-domain working matrix; slack row and column hold log(1) = 0.
  Matrix L(na + 1, cols, 0.0);
  for (std::size_t i = 0; i < na; ++i)
    for (std::size_t j = 0; j < nb; ++j) L(i, j) = config.gamma / (row_dist(a, i, b, j) + config.eps);
  for (int it = 0; it < config.iterations; ++it) {
    for (std::size_t i = 0; i < na; ++i) {
      const double lse = log_sum_exp(&L(i, 0), cols, 1);
      for (std::size_t j = 0; j < cols; ++j) L(i, j) -= lse;
    }
    if (trace) trace->push_back({true, exp_of(L)});
    for (std::size_t j = 0; j < nb; ++j) {
      const double lse = log_sum_exp(&L(0, j), na + 1, cols);
      for (std::size_t i = 0; i <= na; ++i) L(i, j) -= lse;
    }
    if (trace) trace->push_back({false, exp_of(L)});
  }
  SinkhornResult r;
  r.match.assign(na, kSlack);
  double total = 0.0;
  for (std::size_t i = 0; i < na; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < cols; ++j)
      if (L(i, j) > L(i, best)) best = j;
    if (best == nb) continue;
    r.match[i] = best;
    const double d = row_dist(a, i, b, best);
    total += d * d;
    ++r.valid_count;
  }
  if (r.valid_count == 0) throw MetricError("degenerate matching: every point was assigned to slack");
  r.distance = total / static_cast<double>(r.valid_count);
  return r;
}

double sinkhorn_distance(const Matrix& a, const Matrix& b, const SinkhornConfig& config) {
  return sinkhorn(a, b, config).distance;
}

double chamfer_distance(const Matrix& a, const Matrix& b) { return chamfer(a, b); }

}  // namespace spcm

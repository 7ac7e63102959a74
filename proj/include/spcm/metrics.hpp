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

// Evaluation metrics: scene-flow accuracy, forecasting displacement errors
// and three annotation-free cloud distances (chamfer, exact EMD, Sinkhorn
// distance with a slack row and column).

#pragma once

#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "spcm/geom.hpp"

namespace spcm {

class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kAccStrictMeters = 0.05;
inline constexpr double kAccStrictRel = 0.05;
inline constexpr double kAccRelaxedMeters = 0.1;
inline constexpr double kAccRelaxedRel = 0.1;
inline constexpr double kOutlierMeters = 0.3;
inline constexpr double kOutlierRel = 0.1;
inline constexpr double kRectifyNorm = 0.1;

struct FlowStats {
  double epe3d = 0.0;
  double acc3ds = 0.0;
  double acc3dr = 0.0;
  double outliers3d = 0.0;
  double rect_outliers3d = 0.0;
  std::size_t valid_count = 0;
};

/// Pools every masked-in point of every frame. Masks may be empty (all valid).
FlowStats flow_stats(const std::vector<Matrix>& pred, const std::vector<Matrix>& gt,
                     const std::vector<std::vector<std::uint8_t>>& masks);
FlowStats flow_stats(const Matrix& pred, const Matrix& gt, const std::vector<std::uint8_t>& mask = {});

struct DisplacementErrors {
  double ade = 0.0;
  double fde = 0.0;
};

DisplacementErrors ade_fde(const std::vector<Matrix>& pred, const std::vector<Matrix>& gt,
                           const std::vector<std::vector<std::uint8_t>>& masks);

/// Minimum-cost assignment of a square cost matrix (row-major n x n).
/// Returns the column of every row.
std::vector<std::size_t> solve_assignment(const std::vector<double>& cost, std::size_t n);

/// Exact EMD: minimum over bijections of summed squared distances, divided by n.
double emd(const Matrix& a, const Matrix& b);

inline constexpr std::size_t kSlack = std::numeric_limits<std::size_t>::max();

struct SinkhornConfig {
  double gamma = 10.0;
  double eps = 1e-8;
  int iterations = 5;
};

/// One normalization pass, as an (n_a + 1) x (n_b + 1) matrix of
/// probabilities including the slack row and column.
struct SinkhornPass {
  bool rows = true;  // false for a column pass
  Matrix probs;
};

struct SinkhornResult {
  double distance = 0.0;
  std::vector<std::size_t> match;  // column of every row of a, or kSlack
  std::size_t valid_count = 0;
};

/// Sinkhorn distance from predicted cloud `a` to ground truth `b`.
/// `trace`, when given, receives the matrix after every pass.
SinkhornResult sinkhorn(const Matrix& a, const Matrix& b, const SinkhornConfig& config = {},
                        std::vector<SinkhornPass>* trace = nullptr);
double sinkhorn_distance(const Matrix& a, const Matrix& b, const SinkhornConfig& config = {});

double chamfer_distance(const Matrix& a, const Matrix& b);

}  // namespace spcm

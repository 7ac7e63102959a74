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

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace spcm {

/// Error raised when geometric preconditions (point counts, shapes) fail.
class GeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Vec3 = std::array<double, 3>;

/// Dense row-major matrix of doubles. Used for coordinates (N x 3),
/// features (N x d) and flows (N x 3) outside of the differentiable layer.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

/// One point cloud frame: coordinates, optional features and a validity mask.
class PointCloudFrame {
 public:
  PointCloudFrame() = default;
  explicit PointCloudFrame(Matrix coords, std::optional<Matrix> feats = std::nullopt,
                           std::vector<std::uint8_t> valid_mask = {});

  std::size_t size() const { return coords_.rows; }
  const Matrix& coords() const { return coords_; }
  const std::optional<Matrix>& feats() const { return feats_; }
  const std::vector<std::uint8_t>& valid_mask() const { return mask_; }
  Vec3 point(std::size_t i) const {
    return {coords_(i, 0), coords_(i, 1), coords_(i, 2)};
  }

  void set_valid_mask(std::vector<std::uint8_t> mask);

  bool operator==(const PointCloudFrame&) const = default;

 private:
  Matrix coords_;
  std::optional<Matrix> feats_;
  std::vector<std::uint8_t> mask_;
};

/// T ordered frames plus optional backward flows for frames 2..T.
/// Future frames (forecasting targets) are carried separately.
struct CloudSequence {
  std::vector<PointCloudFrame> frames;
  /// gt_flows[t-1] belongs to frames[t] for t >= 1; empty when absent.
  std::vector<Matrix> gt_flows;
  std::vector<PointCloudFrame> future_frames;
  /// Backward flows of the future frames (same convention), optional.
  std::vector<Matrix> future_flows;

  std::size_t length() const { return frames.size(); }
  bool has_flows() const { return !gt_flows.empty(); }
  void validate() const;

  bool operator==(const CloudSequence&) const = default;
};

struct Neighbor {
  std::uint32_t index;
  double distance;
  bool operator==(const Neighbor&) const = default;
};

/// Per-query neighbor lists, each sorted by (distance, index).
using NeighborList = std::vector<std::vector<Neighbor>>;

double distance(std::span<const double> a, std::span<const double> b);

NeighborList knn(const Matrix& query, const Matrix& target, std::size_t k);
inline NeighborList knn(const PointCloudFrame& query, const PointCloudFrame& target,
                        std::size_t k) {
  return knn(query.coords(), target.coords(), k);
}

NeighborList ball_query(const Matrix& query, const Matrix& target, double radius,
                        std::size_t kmax);
inline NeighborList ball_query(const PointCloudFrame& query, const PointCloudFrame& target,
                               double radius, std::size_t kmax) {
  return ball_query(query.coords(), target.coords(), radius, kmax);
}

/// Greedy max-min subset selection. Ties go to the smallest index.
std::vector<std::uint32_t> farthest_point_sample(const Matrix& cloud, std::size_t m,
                                                 std::size_t seed_index = 0);
inline std::vector<std::uint32_t> farthest_point_sample(const PointCloudFrame& cloud,
                                                        std::size_t m,
                                                        std::size_t seed_index = 0) {
  return farthest_point_sample(cloud.coords(), m, seed_index);
}

/// Index of the lexicographically smallest point; independent of point order,
/// so FPS seeded here commutes with permutations of the input.
std::size_t lexicographic_min_index(const Matrix& cloud);

inline constexpr double kIdwEpsilon = 1e-8;

/// Normalized inverse-distance weights 1/(d+eps) over given neighbors.
std::vector<double> idw_weights(std::span<const Neighbor> neighbors, double eps = kIdwEpsilon);

Matrix idw_interpolate(const Matrix& fine_coords, const Matrix& coarse_coords,
                       const Matrix& coarse_values, std::size_t k,
                       double eps = kIdwEpsilon);

Matrix gather_rows(const Matrix& m, std::span<const std::uint32_t> index);

}  // namespace spcm

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

#include "spcm/geom.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace spcm {

PointCloudFrame::PointCloudFrame(Matrix coords, std::optional<Matrix> feats,
                                 std::vector<std::uint8_t> valid_mask)
    : coords_(std::move(coords)), feats_(std::move(feats)) {
  if (coords_.cols != 3) throw GeometryError("coordinates must have 3 columns");
  if (coords_.rows == 0) throw GeometryError("a frame needs at least one point");
  for (double v : coords_.data)
    if (!std::isfinite(v)) throw GeometryError("non-finite coordinate");
  if (feats_ && feats_->rows != coords_.rows)
    throw GeometryError("feature rows do not match point count");
  set_valid_mask(std::move(valid_mask));
}

void PointCloudFrame::set_valid_mask(std::vector<std::uint8_t> mask) {
  if (mask.empty()) mask.assign(coords_.rows, 1);
  if (mask.size() != coords_.rows) throw GeometryError("mask size does not match point count");
  mask_ = std::move(mask);
}

void CloudSequence::validate() const {
  if (frames.size() < 2) throw GeometryError("a sequence needs at least two frames");
  if (!gt_flows.empty()) {
    if (gt_flows.size() != frames.size() - 1)
      throw GeometryError("expected one flow per frame after the first");
    for (std::size_t t = 1; t < frames.size(); ++t) {
      const auto& f = gt_flows[t - 1];
      if (f.rows != frames[t].size() || f.cols != 3)
        throw GeometryError("flow shape does not match frame " + std::to_string(t));
    }
  }
  if (!future_flows.empty() && future_flows.size() != future_frames.size())
    throw GeometryError("future flow count does not match future frames");
}

double distance(std::span<const double> a, std::span<const double> b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

namespace {

bool neighbor_less(const Neighbor& a, const Neighbor& b) {
  if (a.distance != b.distance) return a.distance < b.distance;
  return a.index < b.index;
}

void check_coords(const Matrix& m, const char* what) {
  if (m.cols != 3) throw GeometryError(std::string(what) + " must have 3 columns");
}

}  // namespace

NeighborList knn(const Matrix& query, const Matrix& target, std::size_t k) {
  check_coords(query, "query");
  check_coords(target, "target");
  if (k == 0) throw GeometryError("k must be positive");
  if (k > target.rows) {
    std::ostringstream os;
    os << "insufficient points: k=" << k << " but target has " << target.rows;
    throw GeometryError(os.str());
  }
  NeighborList out(query.rows);
  std::vector<Neighbor> all(target.rows);
  for (std::size_t q = 0; q < query.rows; ++q) {
    for (std::size_t i = 0; i < target.rows; ++i)
      all[i] = {static_cast<std::uint32_t>(i), distance(query.row(q), target.row(i))};
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(),
                      neighbor_less);
    out[q].assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return out;
}

NeighborList ball_query(const Matrix& query, const Matrix& target, double radius,
                        std::size_t kmax) {
  check_coords(query, "query");
  check_coords(target, "target");
  if (!(radius > 0)) throw GeometryError("radius must be positive");
  if (kmax == 0) throw GeometryError("kmax must be positive");
  NeighborList out(query.rows);
  std::vector<Neighbor> inside;
  for (std::size_t q = 0; q < query.rows; ++q) {
    inside.clear();
    for (std::size_t i = 0; i < target.rows; ++i) {
      const double d = distance(query.row(q), target.row(i));
      if (d <= radius) inside.push_back({static_cast<std::uint32_t>(i), d});
    }
    const std::size_t keep = std::min(kmax, inside.size());
    std::partial_sort(inside.begin(), inside.begin() + static_cast<std::ptrdiff_t>(keep),
                      inside.end(), neighbor_less);
    out[q].assign(inside.begin(), inside.begin() + static_cast<std::ptrdiff_t>(keep));
  }
  return out;
}

std::vector<std::uint32_t> farthest_point_sample(const Matrix& cloud, std::size_t m,
                                                 std::size_t seed_index) {
  check_coords(cloud, "cloud");
  if (m == 0) throw GeometryError("sample size must be positive");
  if (m > cloud.rows) {
    std::ostringstream os;
    os << "cannot sample " << m << " points from " << cloud.rows;
    throw GeometryError(os.str());
  }
  if (seed_index >= cloud.rows) throw GeometryError("seed index out of range");

  std::vector<std::uint32_t> picked;
  picked.reserve(m);
  std::vector<double> min_dist(cloud.rows, std::numeric_limits<double>::infinity());
  std::size_t current = seed_index;
  for (std::size_t s = 0; s < m; ++s) {
    picked.push_back(static_cast<std::uint32_t>(current));
    min_dist[current] = -1.0;
    std::size_t best = 0;
    double best_d = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < cloud.rows; ++i) {
      if (min_dist[i] < 0) continue;
      min_dist[i] = std::min(min_dist[i], distance(cloud.row(i), cloud.row(current)));
      if (min_dist[i] > best_d) {
        best_d = min_dist[i];
        best = i;
      }
    }
    current = best;
  }
  return picked;
}

std::size_t lexicographic_min_index(const Matrix& cloud) {
  check_coords(cloud, "cloud");
  std::size_t best = 0;
  for (std::size_t i = 1; i < cloud.rows; ++i) {
    const auto a = cloud.row(i);
    const auto b = cloud.row(best);
    if (std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end())) best = i;
  }
  return best;
}

std::vector<double> idw_weights(std::span<const Neighbor> neighbors, double eps) {
  std::vector<double> w(neighbors.size());
  double total = 0.0;
  for (std::size_t j = 0; j < neighbors.size(); ++j) {
    w[j] = 1.0 / (neighbors[j].distance + eps);
    total += w[j];
  }
  for (double& x : w) x /= total;
  return w;
}

Matrix idw_interpolate(const Matrix& fine_coords, const Matrix& coarse_coords,
                       const Matrix& coarse_values, std::size_t k, double eps) {
  if (coarse_values.rows != coarse_coords.rows)
    throw GeometryError("coarse values do not match coarse point count");
  const auto nbrs = knn(fine_coords, coarse_coords, k);
  Matrix out(fine_coords.rows, coarse_values.cols);
  for (std::size_t q = 0; q < fine_coords.rows; ++q) {
    // Accumulate around the nearest value so a constant field is reproduced exactly.
    const auto w = idw_weights(nbrs[q], eps);
    const auto ref = coarse_values.row(nbrs[q][0].index);
    for (std::size_t c = 0; c < out.cols; ++c) {
      double acc = 0.0;
      for (std::size_t j = 1; j < nbrs[q].size(); ++j)
        acc += w[j] * (coarse_values(nbrs[q][j].index, c) - ref[c]);
      out(q, c) = ref[c] + acc;
    }
  }
  return out;
}

Matrix gather_rows(const Matrix& m, std::span<const std::uint32_t> index) {
  Matrix out(index.size(), m.cols);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= m.rows) throw GeometryError("gather index out of range");
    std::copy_n(m.data.begin() + static_cast<std::ptrdiff_t>(index[r] * m.cols), m.cols,
                out.data.begin() + static_cast<std::ptrdiff_t>(r * m.cols));
  }
  return out;
}

}  // namespace spcm

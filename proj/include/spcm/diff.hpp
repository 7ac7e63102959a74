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

// Dense 2-D tensors with tape-based reverse-mode differentiation.
//
// Every op works on whole row blocks (one row per point or per neighbor
// edge) so that a network pass records a few thousand nodes rather than
// millions of scalars. Kernels process each output row independently with a
// fixed accumulation order: the value of a row never depends on where that
// row sits in the batch. Permutation-equivariance tests rely on this.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "spcm/geom.hpp"

namespace spcm {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Tensor {
  std::vector<std::size_t> shape{0, 0};
  std::vector<double> values;

  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : shape{rows, cols}, values(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> v);
  static Tensor scalar(double v) { return Tensor(1, 1, v); }
  static Tensor from_matrix(const Matrix& m) { return Tensor(m.rows, m.cols, m.data); }

  std::size_t rows() const { return shape[0]; }
  std::size_t cols() const { return shape[1]; }
  std::size_t size() const { return values.size(); }
  double& at(std::size_t r, std::size_t c) { return values[r * shape[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * shape[1] + c]; }
  double item() const;
  Matrix to_matrix() const {
    Matrix m;
    m.rows = rows();
    m.cols = cols();
    m.data = values;
    return m;
  }

  bool operator==(const Tensor&) const = default;
};

std::string shape_str(const Tensor& t);

class Tape;

/// Handle to a tape node.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::uint32_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);

  /// Records an op output. `inputs` decide whether the node needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward);
  Var record(Tensor value, std::span<const Var> inputs, Backward backward);

  const Tensor& value(std::uint32_t id) const { return nodes_[id].value; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer of a node (allocated on first use).
  Tensor& grad(std::uint32_t id);
  const Tensor* grad_if_any(std::uint32_t id) const;

  /// Reverse sweep from a 1x1 output. Visits nodes in exact reverse order.
  void backward(Var output);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Primitive ops

Var matmul(Var a, Var b);
Var add_bias(Var a, Var bias);  // a: n x m, bias: 1 x m
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // Hadamard
Var scale(Var a, double s);
Var neg(Var a);
Var sigmoid(Var a);
Var tanh(Var a);
Var relu(Var a);
Var leaky_relu(Var a, double slope = 0.1);
/// a: n x c, s: n x 1. Multiplies row r of a by s[r].
Var scale_rows(Var a, Var s);
/// Multiplies every entry by a 1x1 variable.
Var scale_by(Var a, Var scalar);
Var gather_rows(Var a, std::span<const std::uint32_t> index);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}
inline Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}
/// out[q] = sum over e in [offsets[q], offsets[q+1]) of w[e] * v[e], in edge order.
/// v: E x c, w: E x 1, offsets: Q+1 entries.
Var segment_weighted_sum(Var v, Var w, std::span<const std::uint32_t> offsets);
Var sum(Var a);
/// Sum of masked squared row differences: sum_r mask[r] * ||a_r - b_r||^2.
Var masked_sq_error(Var a, Var b, std::span<const std::uint8_t> mask);

/// Inverse-distance interpolation of `values` (C x c) located at `coarse`
/// (C x 3) onto `fine` (M x 3) over the given neighbor index lists.
/// Differentiable in all three inputs; the neighbor choice is not.
Var idw_interpolate(Var fine, Var coarse, Var values,
                    const std::vector<std::vector<std::uint32_t>>& neighbors,
                    double eps = kIdwEpsilon);

/// Sum over neighbor tensors of weight_i * value_i. Weights are 1x1 nodes.
Var weighted_neighbor_sum(std::span<const Var> values, std::span<const Var> weights);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Parameters

/// Named, fixed-length slices over one flat parameter vector.
class ParamStore {
 public:
  struct Slice {
    std::string name;
    std::size_t offset = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t size() const { return rows * cols; }
  };

  /// Declares a slice; redeclaring an existing name with the same shape is a no-op.
  const Slice& declare(const std::string& name, std::size_t rows, std::size_t cols);
  bool contains(const std::string& name) const { return by_name_.count(name) != 0; }
  const Slice& slice(const std::string& name) const;
  const std::vector<Slice>& slices() const { return slices_; }

  std::size_t size() const { return values_.size(); }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }
  std::span<double> values(const std::string& name);
  std::span<const double> values(const std::string& name) const;
  Tensor tensor(const std::string& name) const;

  /// Slice containing flat index i.
  const Slice& slice_at(std::size_t i) const;

  bool operator==(const ParamStore& o) const {
    return values_ == o.values_ && layout_equal(o);
  }
  bool layout_equal(const ParamStore& o) const;

 private:
  std::vector<Slice> slices_;
  std::map<std::string, std::size_t> by_name_;
  std::vector<double> values_;
};

/// Binds parameter slices to variables of one tape (once per slice).
class ParamBinding {
 public:
  ParamBinding(Tape& tape, const ParamStore& params) : tape_(tape), params_(params) {}
  Var operator()(const std::string& name);
  /// Flat gradient after tape.backward(); unused slices get zeros.
  std::vector<double> gradient() const;
  Tape& tape() { return tape_; }
  const ParamStore& params() const { return params_; }

 private:
  Tape& tape_;
  const ParamStore& params_;
  std::map<std::string, Var> bound_;
};

// ---------------------------------------------------------------------------
// MLPs

enum class Activation { kNone, kRelu, kLeakyRelu, kSigmoid, kTanh };

struct MlpSpec {
  std::string name;             // parameter prefix
  std::vector<std::size_t> widths;  // input width first
  std::vector<Activation> activations;  // one per layer

  std::size_t layers() const { return widths.empty() ? 0 : widths.size() - 1; }
  std::size_t in_width() const { return widths.front(); }
  std::size_t out_width() const { return widths.back(); }
  std::size_t param_count() const;
  std::string weight(std::size_t layer) const { return name + ".w" + std::to_string(layer); }
  std::string bias(std::size_t layer) const { return name + ".b" + std::to_string(layer); }
  void validate() const;
  /// Declares this MLP's weight and bias slices.
  void declare(ParamStore& params) const;
};

MlpSpec make_mlp(std::string name, std::vector<std::size_t> widths, Activation hidden,
                 Activation last = Activation::kNone);

Var apply_activation(Var x, Activation a);

Var mlp_forward(const MlpSpec& spec, ParamBinding& params, Var input);

/// Applies layers [1, L) of an MLP to a precomputed first-layer
/// pre-activation. Lets callers assemble the first affine map from
/// per-point projections instead of concatenated per-edge inputs.
Var mlp_forward_from_first(const MlpSpec& spec, ParamBinding& params, Var first_preact);

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool passed = true;
};

/// Central finite differences of `f` over the listed flat indices, compared
/// with `analytic`. An entry passes if abs error <= abs_floor or
/// rel error <= rel_tol.
GradCheckResult check_gradient(const std::function<double(const std::vector<double>&)>& f,
                               const std::vector<double>& x,
                               const std::vector<double>& analytic,
                               std::span<const std::size_t> indices, double h = 1e-5,
                               double rel_tol = 1e-4, double abs_floor = 1e-7);

}  // namespace spcm

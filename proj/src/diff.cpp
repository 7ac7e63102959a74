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

#include "spcm/diff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace spcm {

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> v)
    : shape{rows, cols}, values(std::move(v)) {
  if (values.size() != rows * cols)
    throw ShapeError("tensor value count does not match shape");
}

double Tensor::item() const {
  if (values.size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(*this));
  return values[0];
}

std::string shape_str(const Tensor& t) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < t.shape.size(); ++i) os << (i ? "x" : "") << t.shape[i];
  os << ']';
  return os.str();
}

const Tensor& Var::value() const { return tape->value(id); }

// ---------------------------------------------------------------------------
// Tape

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, false, {}});
  return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, true, false, {}});
  return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, Backward backward) {
  bool needs = false;
  for (const Var& v : inputs) {
    if (v.tape != this) throw std::logic_error("op mixes variables from different tapes");
    needs = needs || nodes_[v.id].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs, false, needs ? std::move(backward) : nullptr});
  return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tensor& Tape::grad(std::uint32_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
  return n.grad;
}

const Tensor* Tape::grad_if_any(std::uint32_t id) const {
  return nodes_[id].has_grad ? &nodes_[id].grad : nullptr;
}

void Tape::backward(Var output) {
  if (output.tape != this) throw std::logic_error("output belongs to another tape");
  if (value(output.id).size() != 1)
    throw ShapeError("backward needs a scalar output, got " + shape_str(value(output.id)));
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  grad(output.id).values[0] = 1.0;
  for (std::uint32_t i = output.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.has_grad || !n.backward) continue;
    n.backward(*this, i);
  }
}

// ---------------------------------------------------------------------------
// Ops

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape) {
    std::ostringstream os;
    os << op << ": shape mismatch " << shape_str(a) << " vs " << shape_str(b);
    throw ShapeError(os.str());
  }
}

// Accumulates g into input `v` if it participates in differentiation.
template <typename F>
void accumulate(Tape& tape, Var v, F&& f) {
  if (!tape.requires_grad(v.id)) return;
  f(tape.grad(v.id));
}

template <typename F>
Var unary(Var a, F&& fwd_and_deriv) {
  const Tensor& x = a.value();
  Tensor y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y.values[i] = fwd_and_deriv(x.values[i]).first;
  return a.tape->record(std::move(y), {a}, [a, fwd_and_deriv](Tape& t, std::uint32_t self) {
    const Tensor& x = t.value(a.id);
    const Tensor& g = t.grad(self);
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < x.size(); ++i)
        ga.values[i] += g.values[i] * fwd_and_deriv(x.values[i]).second;
    });
  });
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.cols() != B.rows()) {
    std::ostringstream os;
    os << "matmul: inner dimensions differ " << shape_str(A) << " * " << shape_str(B);
    throw ShapeError(os.str());
  }
  const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
  Tensor C(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    double* c = &C.values[i * m];
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A.values[i * k + p];
      const double* brow = &B.values[p * m];
      for (std::size_t j = 0; j < m; ++j) c[j] += aip * brow[j];
    }
  }
  return a.tape->record(std::move(C), {a, b}, [a, b, n, k, m](Tape& t, std::uint32_t self) {
    const Tensor& G = t.grad(self);
    const Tensor& A = t.value(a.id);
    const Tensor& B = t.value(b.id);
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          const double* g = &G.values[i * m];
          const double* brow = &B.values[p * m];
          for (std::size_t j = 0; j < m; ++j) s += g[j] * brow[j];
          ga.values[i * k + p] += s;
        }
    });
    accumulate(t, b, [&](Tensor& gb) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A.values[i * k + p];
          const double* g = &G.values[i * m];
          double* out = &gb.values[p * m];
          for (std::size_t j = 0; j < m; ++j) out[j] += aip * g[j];
        }
    });
  });
}

Var add_bias(Var a, Var bias) {
  const Tensor& A = a.value();
  const Tensor& b = bias.value();
  if (b.rows() != 1 || b.cols() != A.cols()) {
    std::ostringstream os;
    os << "add_bias: bias " << shape_str(b) << " does not fit " << shape_str(A);
    throw ShapeError(os.str());
  }
  Tensor y = A;
  const std::size_t m = A.cols();
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < m; ++j) y.values[i * m + j] += b.values[j];
  return a.tape->record(std::move(y), {a, bias}, [a, bias, m](Tape& t, std::uint32_t self) {
    const Tensor& G = t.grad(self);
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < G.size(); ++i) ga.values[i] += G.values[i];
    });
    accumulate(t, bias, [&](Tensor& gb) {
      for (std::size_t i = 0; i < G.rows(); ++i)
        for (std::size_t j = 0; j < m; ++j) gb.values[j] += G.values[i * m + j];
    });
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor y = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y.values[i] += B.values[i];
  return a.tape->record(std::move(y), {a, b}, [a, b](Tape& t, std::uint32_t self) {
    const Tensor& G = t.grad(self);
    for (Var v : {a, b})
      accumulate(t, v, [&](Tensor& gv) {
        for (std::size_t i = 0; i < G.size(); ++i) gv.values[i] += G.values[i];
      });
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor y = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y.values[i] -= B.values[i];
  return a.tape->record(std::move(y), {a, b}, [a, b](Tape& t, std::uint32_t self) {
    const Tensor& G = t.grad(self);
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < G.size(); ++i) ga.values[i] += G.values[i];
    });
    accumulate(t, b, [&](Tensor& gb) {
      for (std::size_t i = 0; i < G.size(); ++i) gb.values[i] -= G.values[i];
    });
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor y = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y.values[i] *= B.values[i];
  return a.tape->record(std::move(y), {a, b}, [a, b](Tape& t, std::uint32_t self) {
    const Tensor& G = t.grad(self);
    const Tensor& A = t.value(a.id);
    const Tensor& B = t.value(b.id);
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < G.size(); ++i) ga.values[i] += G.values[i] * B.values[i];
    });
    accumulate(t, b, [&](Tensor& gb) {
      for (std::size_t i = 0; i < G.size(); ++i) gb.values[i] += G.values[i] * A.values[i];
    });
  });
}

Var scale(Var a, double s) {
  return unary(a, [s](double x) { return std::pair{s * x, s}; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var sigmoid(Var a) {
  return unary(a, [](double x) {
    const double y = 1.0 / (1.0 + std::exp(-x));
    return std::pair{y, y * (1.0 - y)};
  });
}

Var tanh(Var a) {
  return unary(a, [](double x) {
    const double y = std::tanh(x);
    return std::pair{y, 1.0 - y * y};
  });
}

Var relu(Var a) {
  return unary(a, [](double x) { return x > 0 ? std::pair{x, 1.0} : std::pair{0.0, 0.0}; });
}

Var leaky_relu(Var a, double slope) {
  return unary(a, [slope](double x) {
    return x > 0 ? std::pair{x, 1.0} : std::pair{slope * x, slope};
  });
}

Var scale_rows(Var a, Var s) {
  const Tensor& A = a.value();
  const Tensor& S = s.value();
  if (S.cols() != 1 || S.rows() != A.rows()) {
    std::ostringstream os;
    os << "scale_rows: scale " << shape_str(S) << " does not fit " << shape_str(A);
    throw ShapeError(os.str());
  }
  Tensor y = A;
  const std::size_t m = A.cols();
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < m; ++j) y.values[i * m + j] *= S.values[i];
  return a.tape->record(std::move(y), {a, s}, [a, s, m](Tape& t, std::uint32_t self) {
    const Tensor& G = t.grad(self);
    const Tensor& A = t.value(a.id);
    const Tensor& S = t.value(s.id);
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t j = 0; j < m; ++j) ga.values[i * m + j] += G.values[i * m + j] * S.values[i];
    });
    accumulate(t, s, [&](Tensor& gs) {
      for (std::size_t i = 0; i < A.rows(); ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < m; ++j) acc += G.values[i * m + j] * A.values[i * m + j];
        gs.values[i] += acc;
      }
    });
  });
}

Var scale_by(Var a, Var scalar) {
  const Tensor& A = a.value();
  const double s = scalar.value().item();
  Tensor y = A;
  for (double& v : y.values) v *= s;
  return a.tape->record(std::move(y), {a, scalar}, [a, scalar](Tape& t, std::uint32_t self) {
    const Tensor& G = t.grad(self);
    const Tensor& A = t.value(a.id);
    const double s = t.value(scalar.id).values[0];
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < G.size(); ++i) ga.values[i] += G.values[i] * s;
    });
    accumulate(t, scalar, [&](Tensor& gs) {
      double acc = 0.0;
      for (std::size_t i = 0; i < G.size(); ++i) acc += G.values[i] * A.values[i];
      gs.values[0] += acc;
    });
  });
}

Var gather_rows(Var a, std::span<const std::uint32_t> index) {
  const Tensor& A = a.value();
  const std::size_t m = A.cols();
  Tensor y(index.size(), m);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= A.rows()) throw ShapeError("gather_rows: index out of range");
    std::copy_n(&A.values[index[r] * m], m, &y.values[r * m]);
  }
  std::vector<std::uint32_t> idx(index.begin(), index.end());
  return a.tape->record(std::move(y), {a}, [a, idx = std::move(idx), m](Tape& t, std::uint32_t self) {
    const Tensor& G = t.grad(self);
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t r = 0; r < idx.size(); ++r) {
        double* dst = &ga.values[idx[r] * m];
        const double* src = &G.values[r * m];
        for (std::size_t j = 0; j < m; ++j) dst[j] += src[j];
      }
    });
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Tensor& A = a.value();
  if (begin > end || end > A.rows()) throw ShapeError("slice_rows: range out of bounds for " + shape_str(A));
  const std::size_t m = A.cols();
  Tensor y(end - begin, m,
           std::vector<double>(A.values.begin() + static_cast<std::ptrdiff_t>(begin * m),
                               A.values.begin() + static_cast<std::ptrdiff_t>(end * m)));
  return a.tape->record(std::move(y), {a}, [a, begin, m](Tape& t, std::uint32_t self) {
    const Tensor& G = t.grad(self);
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < G.size(); ++i) ga.values[begin * m + i] += G.values[i];
    });
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t n = parts[0].rows();
  std::vector<std::size_t> offs;
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.rows() != n) throw ShapeError("concat_cols: row counts differ");
    offs.push_back(total);
    total += p.cols();
  }
  Tensor y(n, total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = parts[k].value();
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(&P.values[i * P.cols()], P.cols(), &y.values[i * total + offs[k]]);
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].tape->record(std::move(y), parts, [inputs, offs, n, total](Tape& t, std::uint32_t self) {
    const Tensor& G = t.grad(self);
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      accumulate(t, inputs[k], [&](Tensor& gp) {
        const std::size_t c = gp.cols();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) gp.values[i * c + j] += G.values[i * total + offs[k] + j];
      });
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t m = parts[0].cols();
  std::size_t total = 0;
  std::vector<std::size_t> offs;
  for (const Var& p : parts) {
    if (p.cols() != m) throw ShapeError("concat_rows: column counts differ");
    offs.push_back(total);
    total += p.rows();
  }
  Tensor y(total, m);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = parts[k].value();
    std::copy(P.values.begin(), P.values.end(), y.values.begin() + static_cast<std::ptrdiff_t>(offs[k] * m));
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].tape->record(std::move(y), parts, [inputs, offs, m](Tape& t, std::uint32_t self) {
    const Tensor& G = t.grad(self);
    for (std::size_t k = 0; k < inputs.size(); ++k)
      accumulate(t, inputs[k], [&](Tensor& gp) {
        for (std::size_t i = 0; i < gp.size(); ++i) gp.values[i] += G.values[offs[k] * m + i];
      });
  });
}

Var segment_weighted_sum(Var v, Var w, std::span<const std::uint32_t> offsets) {
  const Tensor& V = v.value();
  const Tensor& W = w.value();
  if (W.cols() != 1 || W.rows() != V.rows())
    throw ShapeError("segment_weighted_sum: one weight per value row required, got " +
                     shape_str(W) + " for " + shape_str(V));
  if (offsets.empty() || offsets.back() != V.rows())
    throw ShapeError("segment_weighted_sum: offsets do not cover the edges");
  const std::size_t q = offsets.size() - 1, c = V.cols();
  Tensor y(q, c);
  for (std::size_t s = 0; s < q; ++s) {
    double* out = &y.values[s * c];
    for (std::uint32_t e = offsets[s]; e < offsets[s + 1]; ++e) {
      const double we = W.values[e];
      const double* src = &V.values[e * c];
      for (std::size_t j = 0; j < c; ++j) out[j] += we * src[j];
    }
  }
  std::vector<std::uint32_t> offs(offsets.begin(), offsets.end());
  return v.tape->record(std::move(y), {v, w}, [v, w, offs = std::move(offs), c](Tape& t, std::uint32_t self) {
    const Tensor& G = t.grad(self);
    const Tensor& V = t.value(v.id);
    const Tensor& W = t.value(w.id);
    const std::size_t q = offs.size() - 1;
    accumulate(t, v, [&](Tensor& gv) {
      for (std::size_t s = 0; s < q; ++s)
        for (std::uint32_t e = offs[s]; e < offs[s + 1]; ++e)
          for (std::size_t j = 0; j < c; ++j) gv.values[e * c + j] += W.values[e] * G.values[s * c + j];
    });
    accumulate(t, w, [&](Tensor& gw) {
      for (std::size_t s = 0; s < q; ++s)
        for (std::uint32_t e = offs[s]; e < offs[s + 1]; ++e) {
          double acc = 0.0;
          for (std::size_t j = 0; j < c; ++j) acc += V.values[e * c + j] * G.values[s * c + j];
          gw.values[e] += acc;
        }
    });
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double x : a.value().values) s += x;
  return a.tape->record(Tensor::scalar(s), {a}, [a](Tape& t, std::uint32_t self) {
    const double g = t.grad(self).values[0];
    accumulate(t, a, [&](Tensor& ga) {
      for (double& x : ga.values) x += g;
    });
  });
}

Var masked_sq_error(Var a, Var b, std::span<const std::uint8_t> mask) {
  require_same_shape(a.value(), b.value(), "masked_sq_error");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (mask.size() != A.rows()) throw ShapeError("masked_sq_error: mask size does not match rows");
  const std::size_t c = A.cols();
  double s = 0.0;
  for (std::size_t i = 0; i < A.rows(); ++i) {
    if (!mask[i]) continue;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = A.values[i * c + j] - B.values[i * c + j];
      s += d * d;
    }
  }
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return a.tape->record(Tensor::scalar(s), {a, b}, [a, b, m = std::move(m), c](Tape& t, std::uint32_t self) {
    const double g = t.grad(self).values[0];
    const Tensor& A = t.value(a.id);
    const Tensor& B = t.value(b.id);
    auto apply = [&](Tensor& gv, double sign) {
      for (std::size_t i = 0; i < m.size(); ++i) {
        if (!m[i]) continue;
        for (std::size_t j = 0; j < c; ++j)
          gv.values[i * c + j] += sign * 2.0 * g * (A.values[i * c + j] - B.values[i * c + j]);
      }
    };
    accumulate(t, a, [&](Tensor& ga) { apply(ga, 1.0); });
    accumulate(t, b, [&](Tensor& gb) { apply(gb, -1.0); });
  });
}

Var idw_interpolate(Var fine, Var coarse, Var values,
                    const std::vector<std::vector<std::uint32_t>>& neighbors, double eps) {
  const Tensor& F = fine.value();
  const Tensor& C = coarse.value();
  const Tensor& V = values.value();
  if (F.cols() != 3 || C.cols() != 3) throw ShapeError("idw_interpolate: coordinates need 3 columns");
  if (V.rows() != C.rows()) throw ShapeError("idw_interpolate: values do not match coarse points");
  if (neighbors.size() != F.rows()) throw ShapeError("idw_interpolate: one neighbor list per fine point");
  const std::size_t c = V.cols();

  auto dist = [](const double* a, const double* b) {
    const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return std::sqrt(dx * dx + dy * dy + dz * dz);
  };

  Tensor y(F.rows(), c);
  for (std::size_t q = 0; q < F.rows(); ++q) {
    const auto& nb = neighbors[q];
    if (nb.empty()) throw ShapeError("idw_interpolate: empty neighbor list");
    double total = 0.0;
    std::vector<double> w(nb.size());
    for (std::size_t j = 0; j < nb.size(); ++j) {
      w[j] = 1.0 / (dist(&F.values[q * 3], &C.values[nb[j] * 3]) + eps);
      total += w[j];
    }
    const double* ref = &V.values[nb[0] * c];
    for (std::size_t k = 0; k < c; ++k) {
      double acc = 0.0;
      for (std::size_t j = 1; j < nb.size(); ++j) acc += (w[j] / total) * (V.values[nb[j] * c + k] - ref[k]);
      y.values[q * c + k] = ref[k] + acc;
    }
  }

  return fine.tape->record(std::move(y), {fine, coarse, values},
      [fine, coarse, values, neighbors, eps, c, dist](Tape& t, std::uint32_t self) {
    const Tensor& G = t.grad(self);
    const Tensor& F = t.value(fine.id);
    const Tensor& C = t.value(coarse.id);
    const Tensor& V = t.value(values.id);
    const Tensor& Y = t.value(self);
    const bool need_geom = t.requires_grad(fine.id) || t.requires_grad(coarse.id);
    for (std::size_t q = 0; q < F.rows(); ++q) {
      const auto& nb = neighbors[q];
      std::vector<double> w(nb.size()), d(nb.size());
      double total = 0.0;
      for (std::size_t j = 0; j < nb.size(); ++j) {
        d[j] = dist(&F.values[q * 3], &C.values[nb[j] * 3]);
        w[j] = 1.0 / (d[j] + eps);
        total += w[j];
      }
      accumulate(t, values, [&](Tensor& gv) {
        for (std::size_t j = 0; j < nb.size(); ++j)
          for (std::size_t k = 0; k < c; ++k) gv.values[nb[j] * c + k] += (w[j] / total) * G.values[q * c + k];
      });
      if (!need_geom) continue;
      for (std::size_t j = 0; j < nb.size(); ++j) {
        if (d[j] == 0.0) continue;
        // d out / d w_j = (v_j - out) / total ; d w_j / d d_j = -w_j^2
        double dot = 0.0;
        for (std::size_t k = 0; k < c; ++k)
          dot += G.values[q * c + k] * (V.values[nb[j] * c + k] - Y.values[q * c + k]);
        const double gd = dot / total * (-w[j] * w[j]);
        for (std::size_t a = 0; a < 3; ++a) {
          const double unit = (F.values[q * 3 + a] - C.values[nb[j] * 3 + a]) / d[j];
          accumulate(t, fine, [&](Tensor& gf) { gf.values[q * 3 + a] += gd * unit; });
          accumulate(t, coarse, [&](Tensor& gc) { gc.values[nb[j] * 3 + a] -= gd * unit; });
        }
      }
    }
  });
}

Var weighted_neighbor_sum(std::span<const Var> values, std::span<const Var> weights) {
  if (values.empty()) throw ShapeError("weighted_neighbor_sum: empty neighbor list");
  if (values.size() != weights.size())
    throw ShapeError("weighted_neighbor_sum: one weight per value required");
  Var acc = scale_by(values[0], weights[0]);
  for (std::size_t i = 1; i < values.size(); ++i) acc = add(acc, scale_by(values[i], weights[i]));
  return acc;
}

// ---------------------------------------------------------------------------
// Parameters

const ParamStore::Slice& ParamStore::declare(const std::string& name, std::size_t rows,
                                             std::size_t cols) {
  if (auto it = by_name_.find(name); it != by_name_.end()) {
    const Slice& s = slices_[it->second];
    if (s.rows != rows || s.cols != cols) throw ShapeError("parameter redeclared with another shape: " + name);
    return s;
  }
  slices_.push_back(Slice{name, values_.size(), rows, cols});
  by_name_[name] = slices_.size() - 1;
  values_.resize(values_.size() + rows * cols, 0.0);
  return slices_.back();
}

const ParamStore::Slice& ParamStore::slice(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw std::out_of_range("unknown parameter slice: " + name);
  return slices_[it->second];
}

std::span<double> ParamStore::values(const std::string& name) {
  const Slice& s = slice(name);
  return {values_.data() + s.offset, s.size()};
}

std::span<const double> ParamStore::values(const std::string& name) const {
  const Slice& s = slice(name);
  return {values_.data() + s.offset, s.size()};
}

Tensor ParamStore::tensor(const std::string& name) const {
  const Slice& s = slice(name);
  return Tensor(s.rows, s.cols,
                std::vector<double>(values_.begin() + static_cast<std::ptrdiff_t>(s.offset),
                                    values_.begin() + static_cast<std::ptrdiff_t>(s.offset + s.size())));
}

const ParamStore::Slice& ParamStore::slice_at(std::size_t i) const {
  auto it = std::upper_bound(slices_.begin(), slices_.end(), i,
                             [](std::size_t v, const Slice& s) { return v < s.offset; });
  if (it == slices_.begin() || i >= values_.size()) throw std::out_of_range("flat index out of range");
  return *std::prev(it);
}

bool ParamStore::layout_equal(const ParamStore& o) const {
  if (slices_.size() != o.slices_.size()) return false;
  for (std::size_t i = 0; i < slices_.size(); ++i) {
    const Slice& a = slices_[i];
    const Slice& b = o.slices_[i];
    if (a.name != b.name || a.offset != b.offset || a.rows != b.rows || a.cols != b.cols) return false;
  }
  return true;
}

Var ParamBinding::operator()(const std::string& name) {
  if (auto it = bound_.find(name); it != bound_.end()) return it->second;
  Var v = tape_.variable(params_.tensor(name));
  bound_.emplace(name, v);
  return v;
}

std::vector<double> ParamBinding::gradient() const {
  std::vector<double> g(params_.size(), 0.0);
  for (const auto& [name, var] : bound_) {
    const Tensor* gt = tape_.grad_if_any(var.id);
    if (!gt) continue;
    const auto& s = params_.slice(name);
    std::copy(gt->values.begin(), gt->values.end(), g.begin() + static_cast<std::ptrdiff_t>(s.offset));
  }
  return g;
}

// ---------------------------------------------------------------------------
// MLPs

std::size_t MlpSpec::param_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < layers(); ++l) n += widths[l] * widths[l + 1] + widths[l + 1];
  return n;
}

void MlpSpec::validate() const {
  if (widths.size() < 2) throw ShapeError("MLP " + name + " needs at least two widths");
  if (activations.size() != layers())
    throw ShapeError("MLP " + name + " needs one activation per layer");
  for (std::size_t w : widths)
    if (w == 0) throw ShapeError("MLP " + name + " has a zero width");
}

void MlpSpec::declare(ParamStore& params) const {
  validate();
  for (std::size_t l = 0; l < layers(); ++l) {
    params.declare(weight(l), widths[l], widths[l + 1]);
    params.declare(bias(l), 1, widths[l + 1]);
  }
}

MlpSpec make_mlp(std::string name, std::vector<std::size_t> widths, Activation hidden,
                 Activation last) {
  MlpSpec spec{std::move(name), std::move(widths), {}};
  for (std::size_t l = 0; l + 1 < spec.widths.size(); ++l)
    spec.activations.push_back(l + 2 == spec.widths.size() ? last : hidden);
  return spec;
}

Var apply_activation(Var x, Activation a) {
  switch (a) {
    case Activation::kNone: return x;
    case Activation::kRelu: return relu(x);
    case Activation::kLeakyRelu: return leaky_relu(x);
    case Activation::kSigmoid: return sigmoid(x);
    case Activation::kTanh: return tanh(x);
  }
  return x;
}

Var mlp_forward(const MlpSpec& spec, ParamBinding& params, Var input) {
  spec.validate();
  if (input.cols() != spec.in_width()) {
    std::ostringstream os;
    os << "MLP " << spec.name << ": input has " << input.cols() << " columns, expected "
       << spec.in_width();
    throw ShapeError(os.str());
  }
  Var pre = add_bias(matmul(input, params(spec.weight(0))), params(spec.bias(0)));
  return mlp_forward_from_first(spec, params, pre);
}

Var mlp_forward_from_first(const MlpSpec& spec, ParamBinding& params, Var first_preact) {
  if (first_preact.cols() != spec.widths[1]) {
    std::ostringstream os;
    os << "MLP " << spec.name << ": first layer has " << first_preact.cols()
       << " columns, expected " << spec.widths[1];
    throw ShapeError(os.str());
  }
  Var x = apply_activation(first_preact, spec.activations[0]);
  for (std::size_t l = 1; l < spec.layers(); ++l) {
    x = add_bias(matmul(x, params(spec.weight(l))), params(spec.bias(l)));
    x = apply_activation(x, spec.activations[l]);
  }
  return x;
}

// ---------------------------------------------------------------------------

GradCheckResult check_gradient(const std::function<double(const std::vector<double>&)>& f,
                               const std::vector<double>& x,
                               const std::vector<double>& analytic,
                               std::span<const std::size_t> indices, double h, double rel_tol,
                               double abs_floor) {
  GradCheckResult r;
  std::vector<double> probe = x;
  for (std::size_t i : indices) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double abs_err = std::abs(numeric - analytic[i]);
    const double denom = std::max(std::abs(numeric), std::abs(analytic[i]));
    const double rel_err = denom > 0 ? abs_err / denom : 0.0;
    ++r.checked;
    const bool ok = abs_err <= abs_floor || rel_err <= rel_tol;
    if (!ok) r.passed = false;
    if (abs_err > abs_floor && rel_err > r.max_rel_error) {
      r.max_rel_error = rel_err;
      r.worst_index = i;
    }
    r.max_abs_error = std::max(r.max_abs_error, abs_err);
  }
  return r;
}

}  // namespace spcm

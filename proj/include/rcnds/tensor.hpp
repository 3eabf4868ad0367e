#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "rcnds/error.hpp"
#include "rcnds/rng.hpp"

namespace rcnds {

// Dense N-dimensional array of doubles in row-major order. This is the
// carrier for every activation, weight and gradient in the framework.
// Tensors returned from the public operations are treated as immutable
// values; sharing them across threads is safe.
//
// Everything is 64-bit: the finite-difference tolerances used by the
// gradient checks (1e-4 relative at eps = 1e-5) are not reachable in
// single precision.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;

  Tensor() = default;

  Tensor(std::vector<std::size_t> shape_, std::vector<double> values_)
      : shape(std::move(shape_)), values(std::move(values_)) {
    if (values.size() != checked_numel(shape)) {
      throw ShapeError("Tensor: value count " + std::to_string(values.size()) +
                       " does not match shape product " +
                       std::to_string(checked_numel(shape)));
    }
  }

  std::size_t size() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }

  // 2-D access (row, col).
  double& at(std::size_t r, std::size_t c) { return values[r * shape[1] + c]; }
  double at(std::size_t r, std::size_t c) const {
    return values[r * shape[1] + c];
  }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  static std::string shape_str(const std::vector<std::size_t>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i) out += ",";
      out += std::to_string(s[i]);
    }
    return out + "]";
  }

  static std::size_t checked_numel(const std::vector<std::size_t>& shape) {
    if (shape.empty()) {
      throw ShapeError("Tensor: shape must have at least one extent");
    }
    std::size_t n = 1;
    for (std::size_t e : shape) {
      if (e == 0) {
        throw ShapeError("Tensor: zero extent in shape " + shape_str(shape));
      }
      n *= e;
    }
    return n;
  }
};

inline Tensor zeros(std::vector<std::size_t> shape) {
  const std::size_t n = Tensor::checked_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

// I.i.d. N(0, std^2) entries from a dedicated seeded stream. Equal
// (shape, std, seed) triples give bit-identical tensors.
inline Tensor gaussian_init(std::vector<std::size_t> shape, double stddev,
                            std::uint64_t seed) {
  if (!(stddev > 0.0)) {
    throw ValueError("gaussian_init: std must be positive");
  }
  Tensor t = zeros(std::move(shape));
  Rng rng(seed);
  for (double& v : t.values) {
    v = rng.normal(0.0, stddev);
  }
  return t;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: operands must be rank 2");
  }
  if (a.shape[1] != b.shape[0]) {
    throw ShapeError("matmul: inner extents differ, " +
                     Tensor::shape_str(a.shape) + " x " +
                     Tensor::shape_str(b.shape));
  }
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor c = zeros({m, n});
  const double* pa = a.values.data();
  const double* pb = b.values.data();
  double* pc = c.values.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = pa[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = pb + p * n;
      double* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += aip * brow[j];
      }
    }
  }
  return c;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) {
    throw ShapeError("transpose: operand must be rank 2");
  }
  const std::size_t m = a.shape[0], n = a.shape[1];
  Tensor t = zeros({n, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      t.values[j * m + i] = a.values[i * n + j];
    }
  }
  return t;
}

// Strict elementwise sum; this is the residual merge primitive. A channel
// mismatch here is exactly the failure a missing projection convolution
// produces, so the error message carries both shapes.
inline Tensor elementwise_add(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("elementwise_add: shape mismatch " +
                     Tensor::shape_str(a.shape) + " vs " +
                     Tensor::shape_str(b.shape));
  }
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) {
    c.values[i] += b.values[i];
  }
  return c;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor c = a;
  for (double& v : c.values) {
    v *= s;
  }
  return c;
}

// Mean of absolute values; the statistic monitored by the gradient probe.
inline double mean_abs(const Tensor& t) {
  if (t.size() == 0) {
    throw ShapeError("mean_abs: empty tensor");
  }
  double acc = 0.0;
  for (double v : t.values) {
    acc += std::abs(v);
  }
  return acc / static_cast<double>(t.size());
}

inline Tensor reshape(const Tensor& t, std::vector<std::size_t> shape) {
  if (Tensor::checked_numel(shape) != t.size()) {
    throw ShapeError("reshape: element count mismatch, " +
                     Tensor::shape_str(t.shape) + " -> " +
                     Tensor::shape_str(shape));
  }
  return Tensor(std::move(shape), t.values);
}

inline bool all_finite(const Tensor& t) {
  for (double v : t.values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

} // namespace rcnds

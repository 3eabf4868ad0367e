#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <vector>

#include "rcnds/error.hpp"
#include "rcnds/rng.hpp"
#include "rcnds/tensor.hpp"

namespace rcnds {

enum class Mode { train, test };

// Trainable state of one conv or fully connected layer.
//   conv: weights [out_ch, in_ch, k, k], bias [out_ch]
//   fc:   weights [out, in],            bias [out]
struct LayerParams {
  Tensor weights;
  Tensor bias;
};

// Forward-pass stash consumed by the matching backward pass. One cache
// belongs to one forward/backward pair; the pair is strictly sequential.
struct LayerCache {
  Tensor input;
  std::vector<std::size_t> argmax; // maxpool winner per output element
  Tensor mask;                     // dropout keep/scale mask
  std::vector<std::size_t> out_shape;
  bool has_forward = false;

  void begin_forward(const Tensor& in, std::vector<std::size_t> out) {
    input = in;
    out_shape = std::move(out);
    has_forward = true;
  }

  void consume_backward(const Tensor& grad_out, const char* op) {
    if (!has_forward) {
      throw StateError(std::string(op) + "_backward: no matching forward");
    }
    if (grad_out.shape != out_shape) {
      throw StateError(std::string(op) +
                       "_backward: grad shape " +
                       Tensor::shape_str(grad_out.shape) +
                       " does not match forward output " +
                       Tensor::shape_str(out_shape));
    }
    has_forward = false;
  }
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k,
                                   std::size_t stride, std::size_t pad,
                                   const char* op) {
  if (stride < 1) {
    throw ValueError(std::string(op) + ": stride must be >= 1");
  }
  if (in + 2 * pad < k) {
    throw ShapeError(std::string(op) + ": window " + std::to_string(k) +
                     " does not fit input extent " + std::to_string(in) +
                     " with pad " + std::to_string(pad));
  }
  return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

// Unrolls the receptive fields of one sample into columns:
// cols[c*k*k + kh*k + kw][y*W' + x] = padded input at that tap.
inline void im2col(const double* img, std::size_t channels, std::size_t h,
                   std::size_t w, std::size_t k, std::size_t stride,
                   std::size_t pad, std::size_t oh, std::size_t ow,
                   double* cols) {
  const std::size_t patch = channels * k * k;
  std::fill(cols, cols + patch * oh * ow, 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t kh = 0; kh < k; ++kh) {
      for (std::size_t kw = 0; kw < k; ++kw) {
        double* row = cols + ((c * k + kh) * k + kw) * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(y * stride + kh) -
              static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t x = 0; x < ow; ++x) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(x * stride + kw) -
                static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            row[y * ow + x] = img[(c * h + iy) * w + ix];
          }
        }
      }
    }
  }
}

// Scatter-add of column gradients back onto the (unpadded) input image.
inline void col2im(const double* cols, std::size_t channels, std::size_t h,
                   std::size_t w, std::size_t k, std::size_t stride,
                   std::size_t pad, std::size_t oh, std::size_t ow,
                   double* img) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t kh = 0; kh < k; ++kh) {
      for (std::size_t kw = 0; kw < k; ++kw) {
        const double* row = cols + ((c * k + kh) * k + kw) * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(y * stride + kh) -
              static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t x = 0; x < ow; ++x) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(x * stride + kw) -
                static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            img[(c * h + iy) * w + ix] += row[y * ow + x];
          }
        }
      }
    }
  }
}

// c[m x n] (+)= a[m x k] * b[k x n]
inline void matmul_into(const double* a, const double* b, double* c,
                        std::size_t m, std::size_t k, std::size_t n,
                        bool accumulate) {
  if (!accumulate) {
    std::fill(c, c + m * n, 0.0);
  }
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = b + p * n;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += aip * brow[j];
      }
    }
  }
}

} // namespace detail

// Batched 2-D cross-correlation with per-channel bias, computed as
// im2col + matmul per sample. A naive nested-loop reference lives in the
// test suite as the independent oracle for this path.
inline Tensor conv2d_forward(const Tensor& input, const LayerParams& params,
                             std::size_t stride, std::size_t pad,
                             LayerCache& cache) {
  if (input.rank() != 4) {
    throw ShapeError("conv2d: input must be [N,C,H,W]");
  }
  if (params.weights.rank() != 4) {
    throw ShapeError("conv2d: weights must be [O,C,k,k]");
  }
  const std::size_t n = input.shape[0], c = input.shape[1],
                    h = input.shape[2], w = input.shape[3];
  const std::size_t out_ch = params.weights.shape[0];
  const std::size_t k = params.weights.shape[2];
  if (params.weights.shape[1] != c) {
    throw ShapeError("conv2d: input has " + std::to_string(c) +
                     " channels, weights expect " +
                     std::to_string(params.weights.shape[1]));
  }
  const std::size_t oh = conv_out_extent(h, k, stride, pad, "conv2d");
  const std::size_t ow = conv_out_extent(w, k, stride, pad, "conv2d");

  Tensor out = zeros({n, out_ch, oh, ow});
  const std::size_t patch = c * k * k;
  std::vector<double> cols(patch * oh * ow);
  for (std::size_t s = 0; s < n; ++s) {
    detail::im2col(input.values.data() + s * c * h * w, c, h, w, k, stride,
                   pad, oh, ow, cols.data());
    detail::matmul_into(params.weights.values.data(), cols.data(),
                        out.values.data() + s * out_ch * oh * ow, out_ch,
                        patch, oh * ow, false);
  }
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t o = 0; o < out_ch; ++o) {
      double* plane = out.values.data() + (s * out_ch + o) * oh * ow;
      const double b = params.bias.values[o];
      for (std::size_t i = 0; i < oh * ow; ++i) {
        plane[i] += b;
      }
    }
  }
  cache.begin_forward(input, out.shape);
  return out;
}

struct ConvGrads {
  Tensor grad_input;
  Tensor grad_weights;
  Tensor grad_bias;
};

inline ConvGrads conv2d_backward(const Tensor& grad_out,
                                 const LayerParams& params, LayerCache& cache,
                                 std::size_t stride, std::size_t pad) {
  cache.consume_backward(grad_out, "conv2d");
  const Tensor& input = cache.input;
  const std::size_t n = input.shape[0], c = input.shape[1],
                    h = input.shape[2], w = input.shape[3];
  const std::size_t out_ch = params.weights.shape[0];
  const std::size_t k = params.weights.shape[2];
  const std::size_t oh = grad_out.shape[2], ow = grad_out.shape[3];
  const std::size_t patch = c * k * k;

  ConvGrads g;
  g.grad_input = zeros(input.shape);
  g.grad_weights = zeros(params.weights.shape);
  g.grad_bias = zeros(params.bias.shape);

  std::vector<double> cols(patch * oh * ow);
  std::vector<double> dcols(patch * oh * ow);
  Tensor w_t = transpose(reshape(params.weights, {out_ch, patch}));
  for (std::size_t s = 0; s < n; ++s) {
    const double* dout = grad_out.values.data() + s * out_ch * oh * ow;
    detail::im2col(input.values.data() + s * c * h * w, c, h, w, k, stride,
                   pad, oh, ow, cols.data());
    // dW += dout * cols^T; accumulate via explicit loops over the small
    // output-channel dimension to avoid materializing cols^T.
    for (std::size_t o = 0; o < out_ch; ++o) {
      const double* drow = dout + o * oh * ow;
      double* wrow = g.grad_weights.values.data() + o * patch;
      double bacc = 0.0;
      for (std::size_t i = 0; i < oh * ow; ++i) {
        bacc += drow[i];
      }
      g.grad_bias.values[o] += bacc;
      for (std::size_t p = 0; p < patch; ++p) {
        const double* crow = cols.data() + p * oh * ow;
        double acc = 0.0;
        for (std::size_t i = 0; i < oh * ow; ++i) {
          acc += drow[i] * crow[i];
        }
        wrow[p] += acc;
      }
    }
    // dcols = W^T * dout, then scatter back to the input image.
    detail::matmul_into(w_t.values.data(), dout, dcols.data(), patch, out_ch,
                        oh * ow, false);
    detail::col2im(dcols.data(), c, h, w, k, stride, pad, oh, ow,
                   g.grad_input.values.data() + s * c * h * w);
  }
  return g;
}

// Max pooling, no padding. Ties go to the first (row-major) index so the
// backward routing is deterministic.
inline Tensor maxpool_forward(const Tensor& input, std::size_t k,
                              std::size_t stride, LayerCache& cache) {
  if (input.rank() != 4) {
    throw ShapeError("maxpool: input must be [N,C,H,W]");
  }
  const std::size_t n = input.shape[0], c = input.shape[1],
                    h = input.shape[2], w = input.shape[3];
  const std::size_t oh = conv_out_extent(h, k, stride, 0, "maxpool");
  const std::size_t ow = conv_out_extent(w, k, stride, 0, "maxpool");
  Tensor out = zeros({n, c, oh, ow});
  cache.argmax.assign(out.size(), 0);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* plane = input.values.data() + (s * c + ch) * h * w;
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_idx = 0;
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::size_t idx =
                  (y * stride + ky) * w + (x * stride + kx);
              if (plane[idx] > best) {
                best = plane[idx];
                best_idx = idx;
              }
            }
          }
          const std::size_t oidx = ((s * c + ch) * oh + y) * ow + x;
          out.values[oidx] = best;
          cache.argmax[oidx] = (s * c + ch) * h * w + best_idx;
        }
      }
    }
  }
  cache.begin_forward(input, out.shape);
  return out;
}

inline Tensor maxpool_backward(const Tensor& grad_out, LayerCache& cache) {
  cache.consume_backward(grad_out, "maxpool");
  Tensor grad_in = zeros(cache.input.shape);
  for (std::size_t i = 0; i < grad_out.size(); ++i) {
    grad_in.values[cache.argmax[i]] += grad_out.values[i];
  }
  return grad_in;
}

// Average pooling; the auxiliary-branch head uses k=5, stride 2.
inline Tensor avgpool_forward(const Tensor& input, std::size_t k,
                              std::size_t stride, LayerCache& cache) {
  if (input.rank() != 4) {
    throw ShapeError("avgpool: input must be [N,C,H,W]");
  }
  const std::size_t n = input.shape[0], c = input.shape[1],
                    h = input.shape[2], w = input.shape[3];
  const std::size_t oh = conv_out_extent(h, k, stride, 0, "avgpool");
  const std::size_t ow = conv_out_extent(w, k, stride, 0, "avgpool");
  Tensor out = zeros({n, c, oh, ow});
  const double inv = 1.0 / static_cast<double>(k * k);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* plane = input.values.data() + (s * c + ch) * h * w;
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
          double acc = 0.0;
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              acc += plane[(y * stride + ky) * w + (x * stride + kx)];
            }
          }
          out.values[((s * c + ch) * oh + y) * ow + x] = acc * inv;
        }
      }
    }
  }
  cache.begin_forward(input, out.shape);
  // The backward pass only needs geometry, but keeping the input makes the
  // cache uniform across layer kinds.
  cache.argmax.assign({k, stride});
  return out;
}

inline Tensor avgpool_backward(const Tensor& grad_out, LayerCache& cache) {
  cache.consume_backward(grad_out, "avgpool");
  const std::size_t k = cache.argmax[0], stride = cache.argmax[1];
  const std::size_t n = cache.input.shape[0], c = cache.input.shape[1],
                    h = cache.input.shape[2], w = cache.input.shape[3];
  const std::size_t oh = grad_out.shape[2], ow = grad_out.shape[3];
  Tensor grad_in = zeros(cache.input.shape);
  const double inv = 1.0 / static_cast<double>(k * k);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* plane = grad_in.values.data() + (s * c + ch) * h * w;
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
          const double share =
              grad_out.values[((s * c + ch) * oh + y) * ow + x] * inv;
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              plane[(y * stride + ky) * w + (x * stride + kx)] += share;
            }
          }
        }
      }
    }
  }
  return grad_in;
}

inline Tensor relu_forward(const Tensor& input, LayerCache& cache) {
  Tensor out = input;
  for (double& v : out.values) {
    if (v < 0.0) v = 0.0;
  }
  cache.begin_forward(input, out.shape);
  return out;
}

// Gradient is zero at exactly x = 0.
inline Tensor relu_backward(const Tensor& grad_out, LayerCache& cache) {
  cache.consume_backward(grad_out, "relu");
  Tensor grad_in = grad_out;
  for (std::size_t i = 0; i < grad_in.size(); ++i) {
    if (!(cache.input.values[i] > 0.0)) {
      grad_in.values[i] = 0.0;
    }
  }
  return grad_in;
}

// Inverted dropout: train mode zeroes units with probability `rate` and
// scales survivors by 1/(1-rate); test mode is the exact identity.
inline Tensor dropout_forward(const Tensor& input, double rate, Mode mode,
                              std::uint64_t seed, LayerCache& cache) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ValueError("dropout: rate must be in [0,1)");
  }
  if (mode == Mode::test || rate == 0.0) {
    cache.begin_forward(input, input.shape);
    cache.mask = Tensor();
    return input;
  }
  Rng rng(seed);
  const double keep_scale = 1.0 / (1.0 - rate);
  Tensor out = input;
  cache.mask = zeros(input.shape);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (rng.uniform() < rate) {
      out.values[i] = 0.0;
    } else {
      cache.mask.values[i] = keep_scale;
      out.values[i] *= keep_scale;
    }
  }
  cache.begin_forward(input, out.shape);
  return out;
}

inline Tensor dropout_backward(const Tensor& grad_out, LayerCache& cache) {
  cache.consume_backward(grad_out, "dropout");
  if (cache.mask.size() == 0) {
    return grad_out; // identity pass (test mode or rate 0)
  }
  Tensor grad_in = grad_out;
  for (std::size_t i = 0; i < grad_in.size(); ++i) {
    grad_in.values[i] *= cache.mask.values[i];
  }
  return grad_in;
}

// Fully connected: out = input * W^T + bias, W stored [out, in].
inline Tensor fc_forward(const Tensor& input, const LayerParams& params,
                         LayerCache& cache) {
  if (input.rank() != 2) {
    throw ShapeError("fc: input must be [N,D]");
  }
  const std::size_t n = input.shape[0], d = input.shape[1];
  const std::size_t out_dim = params.weights.shape[0];
  if (params.weights.shape[1] != d) {
    throw ShapeError("fc: input dimension " + std::to_string(d) +
                     " does not match weights [" + std::to_string(out_dim) +
                     "," + std::to_string(params.weights.shape[1]) + "]");
  }
  Tensor out = zeros({n, out_dim});
  for (std::size_t s = 0; s < n; ++s) {
    const double* x = input.values.data() + s * d;
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double* wrow = params.weights.values.data() + o * d;
      double acc = params.bias.values[o];
      for (std::size_t i = 0; i < d; ++i) {
        acc += x[i] * wrow[i];
      }
      out.values[s * out_dim + o] = acc;
    }
  }
  cache.begin_forward(input, out.shape);
  return out;
}

struct FcGrads {
  Tensor grad_input;
  Tensor grad_weights;
  Tensor grad_bias;
};

inline FcGrads fc_backward(const Tensor& grad_out, const LayerParams& params,
                           LayerCache& cache) {
  cache.consume_backward(grad_out, "fc");
  const Tensor& input = cache.input;
  const std::size_t n = input.shape[0], d = input.shape[1];
  const std::size_t out_dim = params.weights.shape[0];
  FcGrads g;
  g.grad_input = zeros(input.shape);
  g.grad_weights = zeros(params.weights.shape);
  g.grad_bias = zeros(params.bias.shape);
  for (std::size_t s = 0; s < n; ++s) {
    const double* x = input.values.data() + s * d;
    const double* dout = grad_out.values.data() + s * out_dim;
    double* dx = g.grad_input.values.data() + s * d;
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double go = dout[o];
      g.grad_bias.values[o] += go;
      if (go == 0.0) continue;
      const double* wrow = params.weights.values.data() + o * d;
      double* dwrow = g.grad_weights.values.data() + o * d;
      for (std::size_t i = 0; i < d; ++i) {
        dx[i] += go * wrow[i];
        dwrow[i] += go * x[i];
      }
    }
  }
  return g;
}

} // namespace rcnds

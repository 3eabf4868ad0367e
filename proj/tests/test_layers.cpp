#include <gtest/gtest.h>

#include <cmath>

#include "rcnds/gradcheck.hpp"
#include "rcnds/layers.hpp"
#include "rcnds/tensor.hpp"

#include "helpers.hpp"

using namespace rcnds;

namespace {

// Six-nested-loop convolution, the independent oracle for the
// im2col-backed fast path.
Tensor naive_conv2d(const Tensor& input, const LayerParams& p,
                    std::size_t stride, std::size_t pad) {
  const std::size_t n = input.shape[0], c = input.shape[1],
                    h = input.shape[2], w = input.shape[3];
  const std::size_t o = p.weights.shape[0], k = p.weights.shape[2];
  const std::size_t oh = (h + 2 * pad - k) / stride + 1;
  const std::size_t ow = (w + 2 * pad - k) / stride + 1;
  Tensor out = zeros({n, o, oh, ow});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t oc = 0; oc < o; ++oc) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
          double acc = p.bias.values[oc];
          for (std::size_t ic = 0; ic < c; ++ic) {
            for (std::size_t ky = 0; ky < k; ++ky) {
              for (std::size_t kx = 0; kx < k; ++kx) {
                const std::ptrdiff_t iy =
                    static_cast<std::ptrdiff_t>(y * stride + ky) -
                    static_cast<std::ptrdiff_t>(pad);
                const std::ptrdiff_t ix =
                    static_cast<std::ptrdiff_t>(x * stride + kx) -
                    static_cast<std::ptrdiff_t>(pad);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h) ||
                    ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) {
                  continue;
                }
                acc += input.values[((s * c + ic) * h + iy) * w + ix] *
                       p.weights.values[((oc * c + ic) * k + ky) * k + kx];
              }
            }
          }
          out.values[((s * o + oc) * oh + y) * ow + x] = acc;
        }
      }
    }
  }
  return out;
}

// Brute-force window reductions for the pooling oracles.
Tensor window_scan(const Tensor& input, std::size_t k, std::size_t stride,
                   bool take_max) {
  const std::size_t n = input.shape[0], c = input.shape[1],
                    h = input.shape[2], w = input.shape[3];
  const std::size_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
  Tensor out = zeros({n, c, oh, ow});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
          double best = -1e300, acc = 0.0;
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              const double v =
                  input.values[((s * c + ch) * h + y * stride + ky) * w +
                               x * stride + kx];
              best = std::max(best, v);
              acc += v;
            }
          }
          out.values[((s * c + ch) * oh + y) * ow + x] =
              take_max ? best : acc / static_cast<double>(k * k);
        }
      }
    }
  }
  return out;
}

LayerParams identity_1x1(std::size_t channels) {
  LayerParams p;
  p.weights = zeros({channels, channels, 1, 1});
  for (std::size_t i = 0; i < channels; ++i) {
    p.weights.values[i * channels + i] = 1.0;
  }
  p.bias = zeros({channels});
  return p;
}

} // namespace

TEST(Conv2d, IdentityKernelPassesInputThrough) {
  Tensor input = testutil::random_tensor({2, 3, 5, 5}, 1);
  LayerCache cache;
  Tensor out = conv2d_forward(input, identity_1x1(3), 1, 0, cache);
  EXPECT_EQ(out.values, input.values);
}

TEST(Conv2d, MatchesNaiveLoopOracle) {
  Tensor input = testutil::random_tensor({1, 1, 5, 5}, 2);
  LayerParams p{testutil::random_tensor({1, 1, 3, 3}, 3),
                testutil::random_tensor({1}, 4)};
  LayerCache cache;
  Tensor fast = conv2d_forward(input, p, 1, 1, cache);
  Tensor slow = naive_conv2d(input, p, 1, 1);
  ASSERT_EQ(fast.shape, slow.shape);
  for (std::size_t i = 0; i < fast.size(); ++i) {
    EXPECT_NEAR(fast.values[i], slow.values[i], 1e-12);
  }
}

TEST(Conv2d, MatchesNaiveOracleOnStridedMultiChannel) {
  Tensor input = testutil::random_tensor({2, 3, 9, 9}, 5);
  LayerParams p{testutil::random_tensor({4, 3, 3, 3}, 6),
                testutil::random_tensor({4}, 7)};
  LayerCache cache;
  Tensor fast = conv2d_forward(input, p, 2, 1, cache);
  Tensor slow = naive_conv2d(input, p, 2, 1);
  ASSERT_EQ(fast.shape, slow.shape);
  for (std::size_t i = 0; i < fast.size(); ++i) {
    EXPECT_NEAR(fast.values[i], slow.values[i], 1e-12);
  }
}

TEST(Conv2d, StemGeometryGives114) {
  // 227x227 through a 7x7 stride-2 pad-3 stem.
  Tensor input = zeros({1, 3, 227, 227});
  LayerParams p{zeros({2, 3, 7, 7}), zeros({2})};
  LayerCache cache;
  Tensor out = conv2d_forward(input, p, 2, 3, cache);
  EXPECT_EQ(out.shape, (std::vector<std::size_t>{1, 2, 114, 114}));
}

TEST(Conv2d, ChannelMismatchIsShapeError) {
  Tensor input = zeros({1, 2, 5, 5});
  LayerParams p{zeros({1, 3, 3, 3}), zeros({1})};
  LayerCache cache;
  EXPECT_THROW(conv2d_forward(input, p, 1, 1, cache), ShapeError);
}

TEST(Conv2d, ZeroUpstreamGradientGivesZeroGradients) {
  Tensor input = testutil::random_tensor({1, 2, 4, 4}, 8);
  LayerParams p{testutil::random_tensor({3, 2, 3, 3}, 9), zeros({3})};
  LayerCache cache;
  Tensor out = conv2d_forward(input, p, 1, 1, cache);
  ConvGrads g = conv2d_backward(zeros(out.shape), p, cache, 1, 1);
  EXPECT_EQ(mean_abs(g.grad_input), 0.0);
  EXPECT_EQ(mean_abs(g.grad_weights), 0.0);
  EXPECT_EQ(mean_abs(g.grad_bias), 0.0);
}

TEST(Conv2d, BackwardWithoutForwardIsStateError) {
  LayerParams p{zeros({1, 1, 3, 3}), zeros({1})};
  LayerCache cache;
  EXPECT_THROW(conv2d_backward(zeros({1, 1, 3, 3}), p, cache, 1, 1),
               StateError);
}

TEST(Conv2d, GradShapeMismatchIsStateError) {
  Tensor input = zeros({1, 1, 4, 4});
  LayerParams p{zeros({1, 1, 3, 3}), zeros({1})};
  LayerCache cache;
  conv2d_forward(input, p, 1, 1, cache);
  EXPECT_THROW(conv2d_backward(zeros({1, 1, 2, 2}), p, cache, 1, 1),
               StateError);
}

TEST(Conv2d, LinearInItsInputWithZeroBias) {
  LayerParams p{testutil::random_tensor({2, 2, 3, 3}, 10), zeros({2})};
  Tensor x = testutil::random_tensor({1, 2, 5, 5}, 11);
  Tensor y = testutil::random_tensor({1, 2, 5, 5}, 12);
  const double a = 0.7, b = -1.3;
  Tensor combo = elementwise_add(scale(x, a), scale(y, b));
  LayerCache c1, c2, c3;
  Tensor lhs = conv2d_forward(combo, p, 1, 1, c1);
  Tensor rhs = elementwise_add(scale(conv2d_forward(x, p, 1, 1, c2), a),
                               scale(conv2d_forward(y, p, 1, 1, c3), b));
  for (std::size_t i = 0; i < lhs.size(); ++i) {
    EXPECT_NEAR(lhs.values[i], rhs.values[i], 1e-10);
  }
}

TEST(Maxpool, ConstantInputRoutesToFirstIndex) {
  Tensor input({1, 1, 4, 4}, std::vector<double>(16, 3.5));
  LayerCache cache;
  Tensor out = maxpool_forward(input, 2, 2, cache);
  for (double v : out.values) {
    EXPECT_EQ(v, 3.5);
  }
  Tensor grad({1, 1, 2, 2}, {1, 1, 1, 1});
  Tensor gin = maxpool_backward(grad, cache);
  // Ties break to the first (row-major) element of every window.
  std::vector<double> want = {1, 0, 1, 0, 0, 0, 0, 0,
                              1, 0, 1, 0, 0, 0, 0, 0};
  EXPECT_EQ(gin.values, want);
}

TEST(Maxpool, RampMatchesWindowScan) {
  std::vector<double> ramp(16);
  for (std::size_t i = 0; i < 16; ++i) ramp[i] = static_cast<double>(i);
  Tensor input({1, 1, 4, 4}, ramp);
  LayerCache cache;
  Tensor out = maxpool_forward(input, 2, 2, cache);
  Tensor want = window_scan(input, 2, 2, true);
  EXPECT_EQ(out.values, want.values);
}

TEST(Maxpool, RandomInputMatchesWindowScan) {
  Tensor input = testutil::random_tensor({2, 3, 7, 7}, 13);
  LayerCache cache;
  Tensor out = maxpool_forward(input, 3, 2, cache);
  Tensor want = window_scan(input, 3, 2, true);
  EXPECT_EQ(out.values, want.values);
}

TEST(Maxpool, WindowLargerThanInputIsShapeError) {
  Tensor input = zeros({1, 1, 3, 3});
  LayerCache cache;
  EXPECT_THROW(maxpool_forward(input, 4, 1, cache), ShapeError);
}

TEST(Avgpool, ConstantInputStaysConstant) {
  Tensor input({1, 2, 6, 6}, std::vector<double>(72, -1.25));
  LayerCache cache;
  Tensor out = avgpool_forward(input, 5, 2, cache);
  for (double v : out.values) {
    EXPECT_DOUBLE_EQ(v, -1.25);
  }
}

TEST(Avgpool, MatchesWindowScanWithHeadGeometry) {
  Tensor input = testutil::random_tensor({1, 2, 13, 13}, 14);
  LayerCache cache;
  Tensor out = avgpool_forward(input, 5, 2, cache);
  EXPECT_EQ(out.shape, (std::vector<std::size_t>{1, 2, 5, 5}));
  Tensor want = window_scan(input, 5, 2, false);
  for (std::size_t i = 0; i < out.size(); ++i) {
    EXPECT_NEAR(out.values[i], want.values[i], 1e-12);
  }
}

TEST(Relu, ClampsAndPasses) {
  Tensor neg({3}, {-1.0, -0.5, -2.0});
  LayerCache c1;
  EXPECT_EQ(relu_forward(neg, c1).values, (std::vector<double>{0, 0, 0}));

  Tensor pos({3}, {1.0, 0.5, 2.0});
  LayerCache c2;
  EXPECT_EQ(relu_forward(pos, c2).values, pos.values);
  Tensor grad({3}, {0.3, -0.7, 1.1});
  EXPECT_EQ(relu_backward(grad, c2).values, grad.values);
}

TEST(Dropout, TestModeIsExactIdentity) {
  Tensor input = testutil::random_tensor({5, 7}, 15);
  LayerCache cache;
  Tensor out = dropout_forward(input, 0.5, Mode::test, 1, cache);
  EXPECT_EQ(out.values, input.values);
  // Rate zero in train mode is also the identity.
  LayerCache cache2;
  Tensor out2 = dropout_forward(input, 0.0, Mode::train, 1, cache2);
  EXPECT_EQ(out2.values, input.values);
}

TEST(Dropout, RejectsBadRate) {
  Tensor input = zeros({2});
  LayerCache cache;
  EXPECT_THROW(dropout_forward(input, 1.0, Mode::train, 1, cache),
               ValueError);
  EXPECT_THROW(dropout_forward(input, -0.1, Mode::train, 1, cache),
               ValueError);
}

TEST(Dropout, SurvivorStatistics) {
  const std::size_t n = 100000;
  Tensor input({n}, std::vector<double>(n, 1.0));
  LayerCache cache;
  Tensor out = dropout_forward(input, 0.5, Mode::train, 77, cache);
  std::size_t survivors = 0;
  double sum = 0.0;
  for (double v : out.values) {
    survivors += v != 0.0;
    sum += v;
  }
  const double survivor_frac =
      static_cast<double>(survivors) / static_cast<double>(n);
  EXPECT_NEAR(survivor_frac, 0.5, 0.01);
  // Inverted scaling keeps the expectation near the input mean.
  EXPECT_NEAR(sum / static_cast<double>(n), 1.0, 0.02);
}

TEST(Fc, IdentityWeights) {
  Tensor input = testutil::random_tensor({2, 4}, 16);
  LayerParams p{zeros({4, 4}), zeros({4})};
  for (std::size_t i = 0; i < 4; ++i) p.weights.values[i * 4 + i] = 1.0;
  LayerCache cache;
  EXPECT_EQ(fc_forward(input, p, cache).values, input.values);
}

TEST(Fc, MatchesMatmulOracle) {
  Tensor input = testutil::random_tensor({2, 3}, 17);
  LayerParams p{testutil::random_tensor({4, 3}, 18),
                testutil::random_tensor({4}, 19)};
  LayerCache cache;
  Tensor out = fc_forward(input, p, cache);
  Tensor want = matmul(input, transpose(p.weights));
  for (std::size_t s = 0; s < 2; ++s) {
    for (std::size_t o = 0; o < 4; ++o) {
      EXPECT_NEAR(out.at(s, o), want.at(s, o) + p.bias.values[o], 1e-12);
    }
  }
}

TEST(Fc, DimensionMismatchIsShapeError) {
  Tensor input = zeros({2, 5});
  LayerParams p{zeros({4, 3}), zeros({4})};
  LayerCache cache;
  EXPECT_THROW(fc_forward(input, p, cache), ShapeError);
}

// The layer-kind finite-difference suite doubles as the unit-level check
// that every backward pass matches its forward map.
TEST(FiniteDifferences, EveryLayerKindPasses) {
  for (const auto& row : run_layer_gradchecks(2024)) {
    EXPECT_TRUE(row.pass) << row.name << " rel err " << row.max_rel_err;
    EXPECT_LT(row.max_rel_err, 1e-4) << row.name;
  }
}

TEST(PoolGeometry, OutputExtentFormulaHolds) {
  for (std::size_t h = 4; h <= 13; ++h) {
    for (std::size_t k = 2; k <= 4; ++k) {
      for (std::size_t s = 1; s <= 3; ++s) {
        if (k > h) continue;
        Tensor input = testutil::random_tensor({1, 1, h, h}, h * 100 + k);
        LayerCache cache;
        Tensor out = maxpool_forward(input, k, s, cache);
        EXPECT_EQ(out.shape[2], (h - k) / s + 1);
        EXPECT_EQ(out.shape[3], (h - k) / s + 1);
      }
    }
  }
}

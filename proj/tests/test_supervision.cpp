#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "rcnds/supervision.hpp"
#include "rcnds/tensor.hpp"

#include "helpers.hpp"

using namespace rcnds;

namespace {

// Direct exp / sum-exp evaluation, no max shift: the softmax oracle.
Tensor direct_softmax(const Tensor& logits) {
  const std::size_t n = logits.shape[0], k = logits.shape[1];
  Tensor out = zeros({n, k});
  for (std::size_t r = 0; r < n; ++r) {
    double denom = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      denom += std::exp(logits.values[r * k + c]);
    }
    for (std::size_t c = 0; c < k; ++c) {
      out.values[r * k + c] = std::exp(logits.values[r * k + c]) / denom;
    }
  }
  return out;
}

// Direct per-example summation of -ln p[true].
double direct_xent(const Tensor& probs, const LabelBatch& y) {
  double acc = 0.0;
  for (std::size_t r = 0; r < probs.shape[0]; ++r) {
    acc -= std::log(
        std::max(probs.values[r * probs.shape[1] +
                              static_cast<std::size_t>(y.labels[r])],
                 1e-12));
  }
  return acc / static_cast<double>(probs.shape[0]);
}

} // namespace

TEST(Softmax, UniformOnZeroLogits) {
  Tensor probs = softmax_prob(zeros({2, 5}));
  for (double v : probs.values) {
    EXPECT_DOUBLE_EQ(v, 0.2);
  }
}

TEST(Softmax, ShiftInvariant) {
  Tensor logits = testutil::random_tensor({3, 4}, 1, -2.0, 2.0);
  Tensor shifted = logits;
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 4; ++c) {
      shifted.values[r * 4 + c] += 17.5;
    }
  }
  Tensor a = softmax_prob(logits);
  Tensor b = softmax_prob(shifted);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NEAR(a.values[i], b.values[i], 1e-14);
  }
}

TEST(Softmax, MatchesDirectFormula) {
  Tensor logits = testutil::random_tensor({2, 4}, 2, -3.0, 3.0);
  Tensor fast = softmax_prob(logits);
  Tensor slow = direct_softmax(logits);
  for (std::size_t i = 0; i < fast.size(); ++i) {
    EXPECT_NEAR(fast.values[i], slow.values[i], 1e-14);
  }
}

TEST(Softmax, RowsAreStochasticAndPositive) {
  Tensor logits = testutil::random_tensor({6, 9}, 3, -30.0, 30.0);
  Tensor probs = softmax_prob(logits);
  for (std::size_t r = 0; r < 6; ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 9; ++c) {
      EXPECT_GT(probs.values[r * 9 + c], 0.0);
      sum += probs.values[r * 9 + c];
    }
    EXPECT_NEAR(sum, 1.0, 1e-10);
  }
}

TEST(Softmax, PreservesArgmax) {
  Tensor logits = testutil::random_tensor({5, 7}, 4, -5.0, 5.0);
  Tensor probs = softmax_prob(logits);
  for (std::size_t r = 0; r < 5; ++r) {
    std::size_t arg_l = 0, arg_p = 0;
    for (std::size_t c = 1; c < 7; ++c) {
      if (logits.values[r * 7 + c] > logits.values[r * 7 + arg_l]) arg_l = c;
      if (probs.values[r * 7 + c] > probs.values[r * 7 + arg_p]) arg_p = c;
    }
    EXPECT_EQ(arg_l, arg_p);
  }
}

TEST(Softmax, NonFiniteLogitsAreNumericError) {
  Tensor logits = zeros({1, 3});
  logits.values[1] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(softmax_prob(logits), NumericError);
}

TEST(CrossEntropy, PerfectPredictionIsZero) {
  Tensor probs({2, 3}, {1, 0, 0, 0, 0, 1});
  LabelBatch y{{0, 2}, 3};
  EXPECT_DOUBLE_EQ(cross_entropy(probs, y), 0.0);
}

TEST(CrossEntropy, UniformProbsGiveLogK) {
  const std::size_t k = 205;
  Tensor probs({1, k}, std::vector<double>(k, 1.0 / 205.0));
  LabelBatch y{{17}, 205};
  EXPECT_NEAR(cross_entropy(probs, y), std::log(205.0), 1e-12);
  EXPECT_NEAR(cross_entropy(probs, y), 5.3230, 1e-4);
}

TEST(CrossEntropy, MatchesDirectSummation) {
  Tensor probs = softmax_prob(testutil::random_tensor({4, 6}, 5, -2.0, 2.0));
  LabelBatch y{{0, 5, 2, 3}, 6};
  EXPECT_NEAR(cross_entropy(probs, y), direct_xent(probs, y), 1e-12);
}

TEST(CrossEntropy, OutOfRangeLabelIsError) {
  Tensor probs({1, 3}, {0.2, 0.3, 0.5});
  EXPECT_THROW(cross_entropy(probs, LabelBatch{{3}, 3}), ValueError);
  EXPECT_THROW(cross_entropy(probs, LabelBatch{{-1}, 3}), ValueError);
}

TEST(CrossEntropy, NonNegativeAndClampedAtFloor) {
  Tensor probs = softmax_prob(testutil::random_tensor({8, 5}, 6, -40.0, 40.0));
  for (int r = 0; r < 8; ++r) {
    LabelBatch y{{r % 5}, 5};
    Tensor row({1, 5}, std::vector<double>(probs.values.begin() + r * 5,
                                           probs.values.begin() + r * 5 + 5));
    EXPECT_GE(cross_entropy(row, y), 0.0);
  }
}

TEST(SoftmaxXentBackward, RowsSumToZero) {
  Tensor logits = testutil::random_tensor({3, 5}, 7, -2.0, 2.0);
  LabelBatch y{{1, 0, 4}, 5};
  Tensor grad = softmax_xent_backward(logits, y);
  for (std::size_t r = 0; r < 3; ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 5; ++c) {
      sum += grad.values[r * 5 + c];
    }
    EXPECT_NEAR(sum, 0.0, 1e-15);
  }
}

TEST(SoftmaxXentBackward, MatchesFiniteDifferences) {
  Tensor logits = testutil::random_tensor({2, 4}, 8, -1.0, 1.0);
  LabelBatch y{{2, 1}, 4};
  Tensor analytic = softmax_xent_backward(logits, y);
  const double eps = 1e-6;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double orig = logits.values[i];
    logits.values[i] = orig + eps;
    const double up = cross_entropy(softmax_prob(logits), y);
    logits.values[i] = orig - eps;
    const double down = cross_entropy(softmax_prob(logits), y);
    logits.values[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double denom = std::max(
        {std::abs(analytic.values[i]), std::abs(numeric), 1e-8});
    EXPECT_LT(std::abs(analytic.values[i] - numeric) / denom, 1e-6);
  }
}

TEST(SoftmaxXentBackward, SaturatesToZeroWhenConfidentAndCorrect) {
  Tensor logits({1, 3}, {60.0, 0.0, 0.0});
  LabelBatch y{{0}, 3};
  Tensor grad = softmax_xent_backward(logits, y);
  for (double v : grad.values) {
    EXPECT_NEAR(v, 0.0, 1e-20);
  }
}

TEST(AlphaSchedule, EndpointsAndMidpoint) {
  SupervisionSchedule sched{0.3, 50, AlphaForm::closed};
  EXPECT_DOUBLE_EQ(alpha_at(sched, 0), 0.3);
  EXPECT_DOUBLE_EQ(alpha_at(sched, 50), 0.0);
  EXPECT_DOUBLE_EQ(alpha_at(sched, 25), 0.15);
}

TEST(AlphaSchedule, OutOfRangeEpochIsError) {
  SupervisionSchedule sched{0.3, 50, AlphaForm::closed};
  EXPECT_THROW(alpha_at(sched, 51), ValueError);
  EXPECT_THROW(alpha_at(sched, -1), ValueError);
}

TEST(AlphaSchedule, BothFormsAreNonIncreasingAndHitZero) {
  for (AlphaForm form : {AlphaForm::closed, AlphaForm::recursive}) {
    SupervisionSchedule sched{0.5, 20, form};
    double prev = alpha_at(sched, 0);
    EXPECT_DOUBLE_EQ(prev, 0.5);
    for (int t = 1; t <= 20; ++t) {
      const double cur = alpha_at(sched, t);
      EXPECT_LE(cur, prev);
      prev = cur;
    }
    EXPECT_DOUBLE_EQ(alpha_at(sched, 20), 0.0);
  }
}

TEST(AlphaSchedule, RecursiveDecaysFasterThanClosed) {
  SupervisionSchedule closed{0.3, 50, AlphaForm::closed};
  SupervisionSchedule rec{0.3, 50, AlphaForm::recursive};
  EXPECT_LT(alpha_at(rec, 25), alpha_at(closed, 25));
}

TEST(CombinedLoss, Arithmetic) {
  EXPECT_DOUBLE_EQ(combined_loss(2.0, 1.0, 0.3), 2.3);
  EXPECT_DOUBLE_EQ(combined_loss(1.7, 99.0, 0.0), 1.7);
  EXPECT_THROW(combined_loss(1.0, 1.0, -0.1), ValueError);
}

TEST(CombinedLoss, LinearInAlpha) {
  // d(combined)/d(alpha) == loss_aux, checked by two evaluations.
  const double lo = 1.3, ls = 0.9;
  const double a1 = 0.2, a2 = 0.5;
  const double slope =
      (combined_loss(lo, ls, a2) - combined_loss(lo, ls, a1)) / (a2 - a1);
  EXPECT_NEAR(slope, ls, 1e-12);
}

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "rcnds/error.hpp"
#include "rcnds/tensor.hpp"

namespace rcnds {

// Integer class targets for one batch.
struct LabelBatch {
  std::vector<int> labels;
  int num_classes = 0;

  void validate() const {
    if (num_classes < 2) {
      throw ValueError("LabelBatch: need at least 2 classes");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || labels[i] >= num_classes) {
        throw ValueError("LabelBatch: label " + std::to_string(labels[i]) +
                         " at index " + std::to_string(i) +
                         " outside [0," + std::to_string(num_classes) + ")");
      }
    }
  }
};

// Row-wise softmax, max-shifted for stability. Rows come out strictly
// positive and summing to 1.
inline Tensor softmax_prob(const Tensor& logits) {
  if (logits.rank() != 2 || logits.shape[1] < 2) {
    throw ShapeError("softmax_prob: logits must be [N,K] with K >= 2");
  }
  if (!all_finite(logits)) {
    throw NumericError("softmax_prob: non-finite logits");
  }
  const std::size_t n = logits.shape[0], k = logits.shape[1];
  Tensor probs = zeros({n, k});
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = logits.values.data() + r * k;
    double* out = probs.values.data() + r * k;
    const double m = *std::max_element(row, row + k);
    double denom = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      out[c] = std::exp(row[c] - m);
      denom += out[c];
    }
    for (std::size_t c = 0; c < k; ++c) {
      out[c] /= denom;
    }
  }
  return probs;
}

inline constexpr double kProbFloor = 1e-12;

// Mean over the batch of -ln p[true class]. Probabilities are clamped at
// 1e-12 before the log so a confidently wrong row costs a large finite
// penalty instead of -inf.
inline double cross_entropy(const Tensor& probs, const LabelBatch& y) {
  if (probs.rank() != 2) {
    throw ShapeError("cross_entropy: probs must be [N,K]");
  }
  const std::size_t n = probs.shape[0], k = probs.shape[1];
  if (y.labels.size() != n || static_cast<std::size_t>(y.num_classes) != k) {
    throw ShapeError("cross_entropy: labels do not match probs [" +
                     std::to_string(n) + "," + std::to_string(k) + "]");
  }
  y.validate();
  double acc = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = probs.values.data() + r * k;
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      sum += row[c];
    }
    if (std::abs(sum - 1.0) > 1e-8) {
      throw ValueError("cross_entropy: row " + std::to_string(r) +
                       " not normalized (sum " + std::to_string(sum) + ")");
    }
    acc -= std::log(std::max(row[y.labels[r]], kProbFloor));
  }
  return acc / static_cast<double>(n);
}

// Fused gradient of mean cross-entropy w.r.t. the logits:
// (softmax(logits) - onehot(y)) / N.
inline Tensor softmax_xent_backward(const Tensor& logits,
                                    const LabelBatch& y) {
  Tensor grad = softmax_prob(logits);
  const std::size_t n = grad.shape[0], k = grad.shape[1];
  if (y.labels.size() != n || static_cast<std::size_t>(y.num_classes) != k) {
    throw ShapeError("softmax_xent_backward: labels do not match logits");
  }
  y.validate();
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r) {
    grad.values[r * k + static_cast<std::size_t>(y.labels[r])] -= 1.0;
    for (std::size_t c = 0; c < k; ++c) {
      grad.values[r * k + c] *= inv_n;
    }
  }
  return grad;
}

// How the auxiliary-loss weight shrinks over training. The closed form
// decays a fixed alpha0 linearly to zero at epoch N. The recursive form
// applies the per-epoch factor to the running value instead, which decays
// much faster; it is kept selectable because the published rule can be
// read either way.
enum class AlphaForm { closed, recursive };

struct SupervisionSchedule {
  double alpha0 = 0.3;
  int total_epochs = 50;
  AlphaForm form = AlphaForm::closed;
};

inline double alpha_at(const SupervisionSchedule& sched, int t) {
  if (sched.alpha0 < 0.0) {
    throw ValueError("alpha_at: alpha0 must be non-negative");
  }
  if (sched.total_epochs < 1) {
    throw ValueError("alpha_at: total_epochs must be positive");
  }
  if (t < 0 || t > sched.total_epochs) {
    throw ValueError("alpha_at: epoch " + std::to_string(t) +
                     " outside [0," + std::to_string(sched.total_epochs) +
                     "]");
  }
  const double n = static_cast<double>(sched.total_epochs);
  if (sched.form == AlphaForm::closed) {
    return sched.alpha0 * (1.0 - static_cast<double>(t) / n);
  }
  double alpha = sched.alpha0;
  for (int s = 1; s <= t; ++s) {
    alpha *= 1.0 - static_cast<double>(s) / n;
  }
  return alpha;
}

// Weighted total objective: main loss plus alpha_t times the auxiliary
// loss.
inline double combined_loss(double loss_main, double loss_aux,
                            double alpha_t) {
  if (alpha_t < 0.0) {
    throw ValueError("combined_loss: alpha must be non-negative");
  }
  return loss_main + alpha_t * loss_aux;
}

} // namespace rcnds

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "rcnds/graph.hpp"
#include "rcnds/layers.hpp"
#include "rcnds/rng.hpp"
#include "rcnds/supervision.hpp"
#include "rcnds/tensor.hpp"

namespace rcnds {

// Central finite differences at eps = 1e-5 against the hand-written
// backward passes, in 64-bit. The pass gate is relative error < 1e-4.
inline constexpr double kGradCheckEps = 1e-5;
inline constexpr double kGradCheckTol = 1e-4;

struct GradCheckRow {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = false;
};

namespace gradcheck_detail {

inline double rel_err(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-6});
  return std::abs(a - b) / denom;
}

// f evaluates the scalar loss from scratch; the tensor coordinate is
// perturbed in place around its original value.
inline double central_diff(const std::function<double()>& f, double& coord) {
  const double orig = coord;
  coord = orig + kGradCheckEps;
  const double up = f();
  coord = orig - kGradCheckEps;
  const double down = f();
  coord = orig;
  return (up - down) / (2.0 * kGradCheckEps);
}

inline Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng,
                            double lo, double hi) {
  Tensor t = zeros(std::move(shape));
  for (double& v : t.values) {
    v = lo + (hi - lo) * rng.uniform();
  }
  return t;
}

// Distinct, well-separated values so pooling argmaxes sit away from ties.
inline Tensor shuffled_ramp(std::vector<std::size_t> shape, Rng& rng) {
  Tensor t = zeros(std::move(shape));
  std::vector<double> vals(t.size());
  for (std::size_t i = 0; i < vals.size(); ++i) {
    vals[i] = 0.01 * static_cast<double>(i);
  }
  rng.shuffle(vals);
  t.values = vals;
  return t;
}

struct Check {
  GradCheckRow row;

  void compare(double analytic, double numeric) {
    row.max_rel_err = std::max(row.max_rel_err, rel_err(analytic, numeric));
  }

  // Sweeps every coordinate of `target`, comparing the analytic gradient
  // tensor against finite differences of `loss`.
  void sweep(Tensor& target, const Tensor& analytic,
             const std::function<double()>& loss) {
    for (std::size_t i = 0; i < target.size(); ++i) {
      compare(analytic.values[i], central_diff(loss, target.values[i]));
    }
  }

  GradCheckRow finish() {
    row.pass = row.max_rel_err < kGradCheckTol;
    return row;
  }
};

} // namespace gradcheck_detail

// One instance per layer kind. Each check projects the layer output onto
// a fixed random tensor R (loss = sum(out * R)), which makes the analytic
// input/weight gradients a single backward call with R as the incoming
// gradient.
inline std::vector<GradCheckRow> run_layer_gradchecks(std::uint64_t seed) {
  using namespace gradcheck_detail;
  std::vector<GradCheckRow> rows;
  Rng rng(seed);

  auto projected = [](const Tensor& out, const Tensor& r) {
    double acc = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      acc += out.values[i] * r.values[i];
    }
    return acc;
  };

  { // conv2d, the 3x3 stride-1 workhorse
    Check c{{"conv2d_3x3_s1_p1"}};
    Tensor input = random_tensor({2, 3, 6, 6}, rng, -1.0, 1.0);
    LayerParams p{random_tensor({4, 3, 3, 3}, rng, -0.5, 0.5),
                  random_tensor({4}, rng, -0.5, 0.5)};
    LayerCache probe;
    Tensor r = random_tensor(
        conv2d_forward(input, p, 1, 1, probe).shape, rng, -1.0, 1.0);
    auto loss = [&]() {
      LayerCache cache;
      return projected(conv2d_forward(input, p, 1, 1, cache), r);
    };
    LayerCache cache;
    conv2d_forward(input, p, 1, 1, cache);
    ConvGrads g = conv2d_backward(r, p, cache, 1, 1);
    c.sweep(input, g.grad_input, loss);
    c.sweep(p.weights, g.grad_weights, loss);
    c.sweep(p.bias, g.grad_bias, loss);
    rows.push_back(c.finish());
  }

  { // conv2d, the 7x7 stride-2 stem geometry
    Check c{{"conv2d_7x7_s2_p3"}};
    Tensor input = random_tensor({1, 3, 15, 15}, rng, -1.0, 1.0);
    LayerParams p{random_tensor({2, 3, 7, 7}, rng, -0.2, 0.2),
                  random_tensor({2}, rng, -0.2, 0.2)};
    LayerCache probe;
    Tensor r = random_tensor(
        conv2d_forward(input, p, 2, 3, probe).shape, rng, -1.0, 1.0);
    auto loss = [&]() {
      LayerCache cache;
      return projected(conv2d_forward(input, p, 2, 3, cache), r);
    };
    LayerCache cache;
    conv2d_forward(input, p, 2, 3, cache);
    ConvGrads g = conv2d_backward(r, p, cache, 2, 3);
    c.sweep(p.weights, g.grad_weights, loss);
    c.sweep(input, g.grad_input, loss);
    rows.push_back(c.finish());
  }

  { // maxpool (tie-free input)
    Check c{{"maxpool_2x2_s2"}};
    Tensor input = shuffled_ramp({2, 2, 6, 6}, rng);
    LayerCache probe;
    Tensor r = random_tensor(maxpool_forward(input, 2, 2, probe).shape, rng,
                             -1.0, 1.0);
    auto loss = [&]() {
      LayerCache cache;
      return projected(maxpool_forward(input, 2, 2, cache), r);
    };
    LayerCache cache;
    maxpool_forward(input, 2, 2, cache);
    Tensor g = maxpool_backward(r, cache);
    c.sweep(input, g, loss);
    rows.push_back(c.finish());
  }

  { // avgpool with the auxiliary-branch geometry
    Check c{{"avgpool_5x5_s2"}};
    Tensor input = random_tensor({1, 2, 13, 13}, rng, -1.0, 1.0);
    LayerCache probe;
    Tensor r = random_tensor(avgpool_forward(input, 5, 2, probe).shape, rng,
                             -1.0, 1.0);
    auto loss = [&]() {
      LayerCache cache;
      return projected(avgpool_forward(input, 5, 2, cache), r);
    };
    LayerCache cache;
    avgpool_forward(input, 5, 2, cache);
    Tensor g = avgpool_backward(r, cache);
    c.sweep(input, g, loss);
    rows.push_back(c.finish());
  }

  { // relu, inputs kept away from the kink at 0
    Check c{{"relu"}};
    Tensor input = random_tensor({3, 17}, rng, 0.1, 1.0);
    for (std::size_t i = 0; i < input.size(); ++i) {
      if (rng.uniform() < 0.5) input.values[i] = -input.values[i];
    }
    Tensor r = random_tensor(input.shape, rng, -1.0, 1.0);
    auto loss = [&]() {
      LayerCache cache;
      return projected(relu_forward(input, cache), r);
    };
    LayerCache cache;
    relu_forward(input, cache);
    Tensor g = relu_backward(r, cache);
    c.sweep(input, g, loss);
    rows.push_back(c.finish());
  }

  { // dropout through a fixed mask
    Check c{{"dropout_0.5"}};
    Tensor input = random_tensor({4, 9}, rng, -1.0, 1.0);
    Tensor r = random_tensor(input.shape, rng, -1.0, 1.0);
    const std::uint64_t mask_seed = rng.next_u64();
    auto loss = [&]() {
      LayerCache cache;
      return projected(
          dropout_forward(input, 0.5, Mode::train, mask_seed, cache), r);
    };
    LayerCache cache;
    dropout_forward(input, 0.5, Mode::train, mask_seed, cache);
    Tensor g = dropout_backward(r, cache);
    c.sweep(input, g, loss);
    rows.push_back(c.finish());
  }

  { // fully connected
    Check c{{"fc"}};
    Tensor input = random_tensor({2, 3}, rng, -1.0, 1.0);
    LayerParams p{random_tensor({4, 3}, rng, -0.5, 0.5),
                  random_tensor({4}, rng, -0.5, 0.5)};
    Tensor r = random_tensor({2, 4}, rng, -1.0, 1.0);
    auto loss = [&]() {
      LayerCache cache;
      return projected(fc_forward(input, p, cache), r);
    };
    LayerCache cache;
    fc_forward(input, p, cache);
    FcGrads g = fc_backward(r, p, cache);
    c.sweep(input, g.grad_input, loss);
    c.sweep(p.weights, g.grad_weights, loss);
    c.sweep(p.bias, g.grad_bias, loss);
    rows.push_back(c.finish());
  }

  { // fused softmax + cross-entropy
    Check c{{"softmax_xent"}};
    Tensor logits = random_tensor({2, 4}, rng, -2.0, 2.0);
    LabelBatch y{{1, 3}, 4};
    auto loss = [&]() {
      return cross_entropy(softmax_prob(logits), y);
    };
    Tensor g = softmax_xent_backward(logits, y);
    c.sweep(logits, g, loss);
    rows.push_back(c.finish());
  }

  return rows;
}

// End-to-end check of the weighted two-head objective on a small residual
// network: for each trainable node, one sampled weight coordinate is
// compared against finite differences of L_main + alpha * L_aux. The
// dropout masks are pinned by a fixed seed so the loss is deterministic
// and differentiable around the operating point.
inline std::vector<GradCheckRow> run_graph_gradcheck(std::uint64_t seed) {
  using namespace gradcheck_detail;

  ArchConfig cfg;
  cfg.input = {3, 32, 32};
  cfg.classes = 3;
  cfg.width = 0.125;
  cfg.aux_attach = "conv4_2";
  NetworkGraph g = insert_residual_connections(build_cnds(cfg));
  init_params(g, InitScheme::he(), derive_seed(seed, "gradcheck-init"));

  Rng rng(derive_seed(seed, "gradcheck-data"));
  Tensor batch = random_tensor({2, 3, 32, 32}, rng, -1.0, 1.0);
  LabelBatch labels{{0, 2}, 3};
  const double alpha = 0.3;
  const std::uint64_t drop_seed = derive_seed(seed, "gradcheck-dropout");

  const std::string head_main = g.main_head()->node;
  std::string head_aux;
  for (const auto& h : g.heads) {
    if (h.branch != "main") head_aux = h.node;
  }

  auto loss = [&]() {
    ForwardResult run = forward(g, batch, Mode::train, drop_seed);
    const double lo =
        cross_entropy(softmax_prob(run.head_logits.at(head_main)), labels);
    const double ls =
        cross_entropy(softmax_prob(run.head_logits.at(head_aux)), labels);
    return combined_loss(lo, ls, alpha);
  };

  ForwardResult run = forward(g, batch, Mode::train, drop_seed);
  std::map<std::string, Tensor> head_grads;
  head_grads[head_main] =
      softmax_xent_backward(run.head_logits.at(head_main), labels);
  head_grads[head_aux] = scale(
      softmax_xent_backward(run.head_logits.at(head_aux), labels), alpha);
  auto grads = backward(g, run, head_grads);

  std::vector<GradCheckRow> rows;
  for (const auto& node : g.nodes) {
    if (!node.trainable()) continue;
    Check c{{"graph:" + node.id}};
    Tensor& w = g.params.at(node.id).weights;
    const std::size_t idx = rng.uniform_index(w.size());
    c.compare(grads.at(node.id).weights.values[idx],
              central_diff(loss, w.values[idx]));
    rows.push_back(c.finish());
  }
  return rows;
}

} // namespace rcnds

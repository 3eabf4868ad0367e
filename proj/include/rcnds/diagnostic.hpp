#pragma once

#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "rcnds/error.hpp"
#include "rcnds/graph.hpp"
#include "rcnds/supervision.hpp"
#include "rcnds/trainer_ops.hpp"

namespace rcnds {

// One mini-batch handed to the probe or the trainer.
struct Batch {
  Tensor images; // [N,C,H,W]
  LabelBatch labels;
};

// Per-layer record of how large the weight gradients are across the probe
// iterations. The monitored statistic is the mean of |dL/dW| over a
// convolution's weight tensor, averaged over iterations; it is scale-free
// in the layer size and insensitive to sign.
struct GradientReport {
  std::vector<std::string> layer_ids;       // main-branch convs, topo order
  std::vector<std::vector<double>> series;  // [layer][iteration]
  std::vector<double> series_mean;          // [layer]
};

struct ProbeOptions {
  int iterations = 20; // probe units; the placement rule uses 10..50
  // Backward passes per unit: 1 when the unit is a mini-batch iteration,
  // the split's batch count when the unit is an epoch.
  int passes_per_iteration = 1;
  std::uint64_t seed = 0;
  bool sgd_updates = false; // probe is read-only unless enabled
  double lr = 0.01;
  double init_std = 0.01;
};

// Runs the vanishing-gradient probe on a branchless trunk: fresh
// Gaussian(0, init_std) weights, zero biases, then `iterations` main-head
// backward passes over the supplied batch stream (cycled), recording each
// convolution's gradient statistic. No weights move unless sgd_updates is
// set. The graph must not carry an auxiliary branch; the whole point of
// the probe is to decide where that branch should go.
inline GradientReport run_probe(NetworkGraph g,
                                const std::vector<Batch>& stream,
                                const ProbeOptions& opt) {
  if (g.has_aux()) {
    throw StateError("run_probe: graph already has an auxiliary branch");
  }
  if (opt.iterations < 10 || opt.iterations > 50) {
    throw ValueError("run_probe: iterations must be in [10,50]");
  }
  if (opt.passes_per_iteration < 1) {
    throw ValueError("run_probe: passes per iteration must be >= 1");
  }
  if (stream.empty()) {
    throw ValueError("run_probe: empty batch stream");
  }

  init_params(g, InitScheme::fixed(opt.init_std),
              derive_seed(opt.seed, "probe-init"));

  GradientReport report;
  for (const auto& n : g.nodes) {
    if (n.kind == NodeKind::conv && n.branch == "main") {
      report.layer_ids.push_back(n.id);
    }
  }
  report.series.assign(report.layer_ids.size(), {});

  const std::string head = g.main_head()->node;
  std::map<std::string, Tensor> velocity;
  for (int it = 0; it < opt.iterations; ++it) {
    std::vector<double> unit_acc(report.layer_ids.size(), 0.0);
    for (int p = 0; p < opt.passes_per_iteration; ++p) {
      const std::uint64_t pass =
          static_cast<std::uint64_t>(it) *
              static_cast<std::uint64_t>(opt.passes_per_iteration) +
          static_cast<std::uint64_t>(p);
      const Batch& batch = stream[pass % stream.size()];
      ForwardResult run = forward(g, batch.images, Mode::train,
                                  derive_seed(opt.seed, "probe-iter", pass));
      std::map<std::string, Tensor> head_grads;
      head_grads[head] =
          softmax_xent_backward(run.head_logits.at(head), batch.labels);
      auto grads = backward(g, run, head_grads);
      for (std::size_t li = 0; li < report.layer_ids.size(); ++li) {
        unit_acc[li] += mean_abs(grads.at(report.layer_ids[li]).weights);
      }
      if (opt.sgd_updates) {
        for (auto& [id, params] : g.params) {
          auto& vel = velocity[id];
          if (vel.size() == 0) {
            vel = zeros(params.weights.shape);
          }
          sgd_step(params.weights, grads.at(id).weights, vel, opt.lr, 0.0,
                   0.0);
          Tensor bias_vel = zeros(params.bias.shape);
          sgd_step(params.bias, grads.at(id).bias, bias_vel, opt.lr, 0.0,
                   0.0);
        }
      }
    }
    for (std::size_t li = 0; li < report.layer_ids.size(); ++li) {
      report.series[li].push_back(
          unit_acc[li] / static_cast<double>(opt.passes_per_iteration));
    }
  }
  report.series_mean.resize(report.layer_ids.size());
  for (std::size_t li = 0; li < report.layer_ids.size(); ++li) {
    double acc = 0.0;
    for (double v : report.series[li]) acc += v;
    report.series_mean[li] = acc / static_cast<double>(opt.iterations);
  }
  return report;
}

// The placement rule: the shallowest main-branch convolution whose mean
// statistic fell below the threshold, or nothing when all layers stay
// healthy. The default threshold of 1e-7 is the published cut-off; toy
// networks may need a different one.
inline std::optional<std::string> select_branch_point(
    const GradientReport& report, double threshold = 1e-7) {
  if (report.layer_ids.empty()) {
    throw ValueError("select_branch_point: empty report");
  }
  for (std::size_t li = 0; li < report.layer_ids.size(); ++li) {
    if (report.series_mean[li] < threshold) {
      return report.layer_ids[li];
    }
  }
  return std::nullopt;
}

// CSV body: iter,layer_id,mean_abs_grad, one row per (iteration, layer),
// then a comment footer naming the selected attach point.
inline void write_report_csv(const GradientReport& report, double threshold,
                             std::ostream& os) {
  os << "iter,layer_id,mean_abs_grad\n";
  char buf[64];
  const std::size_t iters =
      report.series.empty() ? 0 : report.series[0].size();
  for (std::size_t it = 0; it < iters; ++it) {
    for (std::size_t li = 0; li < report.layer_ids.size(); ++li) {
      std::snprintf(buf, sizeof(buf), "%.17g", report.series[li][it]);
      os << it << "," << report.layer_ids[li] << "," << buf << "\n";
    }
  }
  const auto pick = select_branch_point(report, threshold);
  os << "# selected: " << (pick ? *pick : std::string("none")) << "\n";
}

} // namespace rcnds

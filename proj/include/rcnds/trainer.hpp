#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rcnds/checkpoint.hpp"
#include "rcnds/data.hpp"
#include "rcnds/error.hpp"
#include "rcnds/graph.hpp"
#include "rcnds/rng.hpp"
#include "rcnds/supervision.hpp"
#include "rcnds/tensor.hpp"
#include "rcnds/trainer_ops.hpp"

namespace rcnds {

// The training protocol: SGD with momentum, the learning rate halving
// every `lr_period` epochs from lr0 = 0.01, the auxiliary weight decaying
// per epoch, validation after every epoch and the best epoch kept.
struct TrainConfig {
  int epochs = 50;
  std::size_t batch = 256; // desk-scale runs use 64
  double lr0 = 0.01;
  int lr_period = 10;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double alpha0 = 0.3;
  AlphaForm alpha_form = AlphaForm::closed;
  std::uint64_t seed = 0;
  std::size_t crop = 227;
  InitScheme init = InitScheme::he();

  void validate() const {
    if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
    if (batch < 1) throw ConfigError("TrainConfig: batch must be >= 1");
    if (!(lr0 > 0.0)) throw ConfigError("TrainConfig: lr must be positive");
    if (lr_period < 1) throw ConfigError("TrainConfig: lr period must be >= 1");
    if (alpha0 < 0.0) throw ConfigError("TrainConfig: alpha0 must be >= 0");
  }

  // Stable digest of every field that shapes the trajectory; stored in
  // checkpoints so resume rejects mismatched configs.
  std::string hash() const {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "e%d b%zu lr%.17g p%d m%.17g wd%.17g a%.17g f%d s%llu c%zu "
                  "i%d std%.17g",
                  epochs, batch, lr0, lr_period, momentum, weight_decay,
                  alpha0, static_cast<int>(alpha_form),
                  static_cast<unsigned long long>(seed), crop,
                  static_cast<int>(init.kind), init.stddev);
    char out[32];
    std::snprintf(out, sizeof(out), "%016llx",
                  static_cast<unsigned long long>(detail::fnv1a(buf)));
    return out;
  }
};

// Step schedule: lr0 halved once per completed period. ldexp keeps the
// halving exact in floating point.
inline double lr_at(const TrainConfig& cfg, int epoch) {
  if (epoch < 0 || epoch >= cfg.epochs) {
    throw ValueError("lr_at: epoch " + std::to_string(epoch) +
                     " outside [0," + std::to_string(cfg.epochs) + ")");
  }
  return std::ldexp(cfg.lr0, -(epoch / cfg.lr_period));
}

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double alpha = 0.0;
  double loss_main = 0.0;
  double loss_aux = 0.0;
  double val_top1 = 0.0;
  double val_top5 = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  int best_epoch = -1;
  double best_val_top1 = -1.0;
};

enum class EvalMode { center, ten_crop };

struct EvalResult {
  double top1 = 0.0;
  double top5 = 0.0;
  std::size_t count = 0;
};

namespace detail {

// Rank of the true class under "higher probability first, lower index
// breaks ties"; a top-k hit means fewer than k classes rank ahead.
inline bool topk_hit(const double* probs, std::size_t k_classes, int label,
                     std::size_t k) {
  const double p = probs[label];
  std::size_t ahead = 0;
  for (std::size_t c = 0; c < k_classes; ++c) {
    if (probs[c] > p ||
        (probs[c] == p && c < static_cast<std::size_t>(label))) {
      ++ahead;
    }
  }
  return ahead < k;
}

inline EvalResult evaluate_images(const NetworkGraph& g,
                                  const std::vector<Tensor>& images,
                                  const std::vector<int>& labels,
                                  EvalMode mode, std::size_t crop_size) {
  const std::size_t k = g.classes;
  const std::size_t top5_k = std::min<std::size_t>(5, k);
  const std::string head = g.main_head()->node;
  std::size_t hit1 = 0, hit5 = 0;

  if (mode == EvalMode::center) {
    constexpr std::size_t chunk = 64;
    for (std::size_t start = 0; start < images.size(); start += chunk) {
      const std::size_t n = std::min(chunk, images.size() - start);
      Tensor batch = zeros({n, 3, crop_size, crop_size});
      for (std::size_t i = 0; i < n; ++i) {
        Tensor c = center_crop(images[start + i], crop_size);
        std::copy(c.values.begin(), c.values.end(),
                  batch.values.begin() +
                      static_cast<std::ptrdiff_t>(i * c.size()));
      }
      ForwardResult run = forward(g, batch, Mode::test, 0);
      Tensor probs = softmax_prob(run.head_logits.at(head));
      for (std::size_t i = 0; i < n; ++i) {
        const double* row = probs.values.data() + i * k;
        const int label = labels[start + i];
        hit1 += topk_hit(row, k, label, 1);
        hit5 += topk_hit(row, k, label, top5_k);
      }
    }
  } else {
    for (std::size_t i = 0; i < images.size(); ++i) {
      std::vector<Tensor> crops = ten_crop(images[i], crop_size);
      Tensor batch = zeros({crops.size(), 3, crop_size, crop_size});
      for (std::size_t ci = 0; ci < crops.size(); ++ci) {
        std::copy(crops[ci].values.begin(), crops[ci].values.end(),
                  batch.values.begin() +
                      static_cast<std::ptrdiff_t>(ci * crops[ci].size()));
      }
      ForwardResult run = forward(g, batch, Mode::test, 0);
      Tensor probs = softmax_prob(run.head_logits.at(head));
      std::vector<double> avg(k, 0.0);
      for (std::size_t ci = 0; ci < crops.size(); ++ci) {
        for (std::size_t c = 0; c < k; ++c) {
          avg[c] += probs.values[ci * k + c];
        }
      }
      for (double& v : avg) v /= static_cast<double>(crops.size());
      const int label = labels[i];
      hit1 += topk_hit(avg.data(), k, label, 1);
      hit5 += topk_hit(avg.data(), k, label, top5_k);
    }
  }
  EvalResult r;
  r.count = images.size();
  r.top1 = static_cast<double>(hit1) / static_cast<double>(images.size());
  r.top5 = static_cast<double>(hit5) / static_cast<double>(images.size());
  return r;
}

inline void preload(const DatasetManifest& m, std::vector<Tensor>& images,
                    std::vector<int>& labels) {
  images.reserve(m.records.size());
  labels.reserve(m.records.size());
  for (const auto& rec : m.records) {
    images.push_back(preprocess(load_image(m, rec), m));
    labels.push_back(rec.label);
  }
}

} // namespace detail

// Deterministic test-time scoring. Ten-crop mode averages the softmax
// probabilities over the fixed crop enumeration before ranking;
// auxiliary branches never run (test-mode forward skips them).
inline EvalResult evaluate(const NetworkGraph& g, const DatasetManifest& m,
                           EvalMode mode, std::size_t crop_size) {
  if (static_cast<std::size_t>(m.num_classes()) != g.classes) {
    throw ConfigError("evaluate: dataset has " +
                      std::to_string(m.num_classes()) +
                      " classes, graph expects " +
                      std::to_string(g.classes));
  }
  if (m.records.empty()) {
    throw ConfigError("evaluate: empty dataset");
  }
  std::vector<Tensor> images;
  std::vector<int> labels;
  detail::preload(m, images, labels);
  return detail::evaluate_images(g, images, labels, mode, crop_size);
}

inline void write_train_csv(const std::vector<EpochLog>& log,
                            const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) {
    throw IoError("write_train_csv: cannot open " + path.string());
  }
  os << "epoch,lr,alpha,train_loss_main,train_loss_aux,val_top1,val_top5,"
        "seconds\n";
  char buf[256];
  for (const auto& row : log) {
    std::snprintf(buf, sizeof(buf),
                  "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.3f\n", row.epoch,
                  row.lr, row.alpha, row.loss_main, row.loss_aux,
                  row.val_top1, row.val_top5, row.seconds);
    os << buf;
  }
}

// The full training loop. Per epoch: fix alpha_t and the learning rate,
// shuffle, then for every batch run a train-mode forward, take both head
// losses, weight the auxiliary head's logit gradient by alpha_t, backprop
// once and step every parameter. Validation (center crop) closes the
// epoch; the log row, the rolling checkpoint and the best checkpoint are
// written if an output directory was given.
//
// Every random stream is derived from (seed, purpose, epoch, index), so a
// resumed run consumes exactly the draws the uninterrupted run would
// have, and the two trajectories match bit for bit.
inline TrainResult train(NetworkGraph& g, const DatasetManifest& train_set,
                         const DatasetManifest& val_set,
                         const TrainConfig& cfg,
                         const std::filesystem::path& out_dir = {},
                         const std::optional<std::filesystem::path>& resume =
                             std::nullopt) {
  cfg.validate();
  if (train_set.records.empty()) {
    throw ConfigError("train: empty training set");
  }
  if (static_cast<std::size_t>(train_set.num_classes()) != g.classes) {
    throw ConfigError("train: dataset has " +
                      std::to_string(train_set.num_classes()) +
                      " classes, graph expects " + std::to_string(g.classes));
  }
  if (g.input_shape[1] != cfg.crop || g.input_shape[2] != cfg.crop) {
    throw ConfigError("train: graph input " +
                      std::to_string(g.input_shape[1]) + "x" +
                      std::to_string(g.input_shape[2]) +
                      " does not match crop " + std::to_string(cfg.crop));
  }

  std::vector<Tensor> train_images, val_images;
  std::vector<int> train_labels, val_labels;
  detail::preload(train_set, train_images, train_labels);
  detail::preload(val_set, val_images, val_labels);

  const std::string head_main = g.main_head()->node;
  std::string head_aux;
  for (const auto& h : g.heads) {
    if (h.branch != "main") head_aux = h.node;
  }

  std::map<std::string, LayerParams> velocity;
  int start_epoch = 0;
  double alpha_state = cfg.alpha0;
  int best_epoch = -1;
  double best_val_top1 = -1.0;

  if (resume) {
    Checkpoint ck = load_checkpoint(*resume);
    if (ck.config_hash != cfg.hash()) {
      throw ConfigError("train: checkpoint config hash mismatch");
    }
    g.params = ck.params;
    velocity = ck.velocity;
    start_epoch = ck.epoch;
    alpha_state = ck.alpha;
    best_epoch = ck.best_epoch;
    best_val_top1 = ck.best_val_top1;
  } else {
    init_params(g, cfg.init, cfg.seed);
  }
  for (const auto& n : g.nodes) {
    if (n.trainable() && !velocity.count(n.id)) {
      velocity[n.id] = {zeros(g.params.at(n.id).weights.shape),
                        zeros(g.params.at(n.id).bias.shape)};
    }
  }

  SupervisionSchedule sched{cfg.alpha0, cfg.epochs, cfg.alpha_form};
  const std::size_t n_train = train_images.size();

  TrainResult result;
  for (int t = start_epoch; t < cfg.epochs; ++t) {
    const auto epoch_start = std::chrono::steady_clock::now();
    const double alpha =
        cfg.alpha_form == AlphaForm::closed ? alpha_at(sched, t) : alpha_state;
    const double lr = lr_at(cfg, t);

    std::vector<std::size_t> order(n_train);
    for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle",
                                static_cast<std::uint64_t>(t)));
    shuffle_rng.shuffle(order);

    double sum_main = 0.0, sum_aux = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < n_train;
         start += cfg.batch, ++batch_index) {
      const std::size_t n = std::min(cfg.batch, n_train - start);
      Tensor batch = zeros({n, 3, cfg.crop, cfg.crop});
      LabelBatch labels;
      labels.num_classes = static_cast<int>(g.classes);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t idx = order[start + i];
        Tensor view = augment_train(
            train_images[idx], cfg.crop,
            derive_seed(cfg.seed, "augment", static_cast<std::uint64_t>(t),
                        static_cast<std::uint64_t>(start + i)));
        std::copy(view.values.begin(), view.values.end(),
                  batch.values.begin() +
                      static_cast<std::ptrdiff_t>(i * view.size()));
        labels.labels.push_back(train_labels[idx]);
      }

      ForwardResult run =
          forward(g, batch, Mode::train,
                  derive_seed(cfg.seed, "dropout",
                              static_cast<std::uint64_t>(t), batch_index));
      Tensor probs_main = softmax_prob(run.head_logits.at(head_main));
      const double loss_main = cross_entropy(probs_main, labels);
      double loss_aux = 0.0;
      if (!head_aux.empty()) {
        loss_aux = cross_entropy(softmax_prob(run.head_logits.at(head_aux)),
                                 labels);
      }
      const double total = combined_loss(loss_main, loss_aux, alpha);
      if (!std::isfinite(total)) {
        throw NumericError("train: non-finite loss at epoch " +
                           std::to_string(t) + ", batch " +
                           std::to_string(batch_index));
      }
      sum_main += loss_main * static_cast<double>(n);
      sum_aux += loss_aux * static_cast<double>(n);

      std::map<std::string, Tensor> head_grads;
      head_grads[head_main] =
          softmax_xent_backward(run.head_logits.at(head_main), labels);
      if (!head_aux.empty() && alpha > 0.0) {
        head_grads[head_aux] = scale(
            softmax_xent_backward(run.head_logits.at(head_aux), labels),
            alpha);
      }
      auto grads = backward(g, run, head_grads);
      for (const auto& n_node : g.nodes) {
        if (!n_node.trainable()) continue;
        auto& p = g.params.at(n_node.id);
        auto& v = velocity.at(n_node.id);
        const auto& gr = grads.at(n_node.id);
        sgd_step(p.weights, gr.weights, v.weights, lr, cfg.momentum,
                 cfg.weight_decay);
        sgd_step(p.bias, gr.bias, v.bias, lr, cfg.momentum, 0.0);
      }
    }

    if (cfg.alpha_form == AlphaForm::recursive) {
      alpha_state *= 1.0 - static_cast<double>(t + 1) /
                               static_cast<double>(cfg.epochs);
    }

    EvalResult val = detail::evaluate_images(g, val_images, val_labels,
                                             EvalMode::center, cfg.crop);
    EpochLog row;
    row.epoch = t;
    row.lr = lr;
    row.alpha = alpha;
    row.loss_main = sum_main / static_cast<double>(n_train);
    row.loss_aux = sum_aux / static_cast<double>(n_train);
    row.val_top1 = val.top1;
    row.val_top5 = val.top5;
    row.seconds = std::chrono::duration<double>(
                      std::chrono::steady_clock::now() - epoch_start)
                      .count();
    result.log.push_back(row);

    const bool improved = val.top1 > best_val_top1;
    if (improved) {
      best_val_top1 = val.top1;
      best_epoch = t;
    }

    if (!out_dir.empty()) {
      std::filesystem::create_directories(out_dir);
      Checkpoint ck;
      ck.epoch = t + 1;
      ck.alpha = alpha_state;
      ck.config_hash = cfg.hash();
      ck.seed = cfg.seed;
      ck.best_epoch = best_epoch;
      ck.best_val_top1 = best_val_top1;
      ck.params = g.params;
      ck.velocity = velocity;
      save_checkpoint(out_dir / "checkpoint_last.ckpt", ck);
      if (improved) {
        save_checkpoint(out_dir / "checkpoint_best.ckpt", ck);
      }
      write_train_csv(result.log, out_dir / "train_log.csv");
    }
  }
  result.best_epoch = best_epoch;
  result.best_val_top1 = best_val_top1;
  return result;
}

} // namespace rcnds

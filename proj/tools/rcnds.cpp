// Command-line front end: build / diagnose / train / eval / gradcheck /
// synth. Exit codes: 0 success, 2 configuration or input error, 3 numeric
// failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "rcnds/arch_io.hpp"
#include "rcnds/config.hpp"
#include "rcnds/data.hpp"
#include "rcnds/diagnostic.hpp"
#include "rcnds/error.hpp"
#include "rcnds/gradcheck.hpp"
#include "rcnds/graph.hpp"
#include "rcnds/synth.hpp"
#include "rcnds/trainer.hpp"

namespace fs = std::filesystem;
using namespace rcnds;

namespace {

ArchConfig arch_config_from(const RunConfig& rc) {
  ArchConfig cfg;
  cfg.input = {rc.input_channels, rc.input_size, rc.input_size};
  cfg.classes = rc.classes;
  cfg.width = rc.width;
  cfg.post_add_relu = rc.post_add_relu;
  if (!rc.aux_attach.empty()) {
    cfg.aux_attach = rc.aux_attach;
  } else if (rc.residual) {
    // The residual variant reads its branch off the pool3/conv4_2 merge;
    // attaching at conv4_2 here makes the rewrite re-anchor it there.
    cfg.aux_attach = "conv4_2";
  }
  return cfg;
}

InitScheme init_scheme_from(const RunConfig& rc) {
  if (rc.init == "he") {
    return InitScheme::he();
  }
  try {
    const double sd = std::stod(rc.init);
    if (!(sd > 0.0)) {
      throw ConfigError("init stddev must be positive");
    }
    return InitScheme::fixed(sd);
  } catch (const std::invalid_argument&) {
    throw ConfigError("init must be 'he' or a positive stddev, got '" +
                      rc.init + "'");
  }
}

TrainConfig train_config_from(const RunConfig& rc, std::size_t crop) {
  TrainConfig cfg;
  cfg.epochs = rc.epochs;
  cfg.batch = rc.batch;
  cfg.lr0 = rc.lr;
  cfg.lr_period = rc.lr_period;
  cfg.momentum = rc.momentum;
  cfg.weight_decay = rc.weight_decay;
  cfg.alpha0 = rc.alpha0;
  if (rc.alpha_form == "closed") {
    cfg.alpha_form = AlphaForm::closed;
  } else if (rc.alpha_form == "recursive") {
    cfg.alpha_form = AlphaForm::recursive;
  } else {
    throw ConfigError("alpha_form must be 'closed' or 'recursive'");
  }
  cfg.seed = rc.seed;
  cfg.crop = crop;
  cfg.init = init_scheme_from(rc);
  return cfg;
}

fs::path arch_path(const RunConfig& rc) {
  return rc.arch.empty() ? fs::path(rc.out) / "arch.json" : fs::path(rc.arch);
}

int cmd_build(const RunConfig& rc) {
  NetworkGraph g = build_cnds(arch_config_from(rc));
  if (rc.residual) {
    g = insert_residual_connections(g);
  }
  fs::create_directories(rc.out);
  echo_config(rc, rc.out);
  const fs::path path = arch_path(rc);
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
  save_arch_file(g, path);

  const auto shapes = infer_shapes(g, g.input_shape);
  std::printf("%-14s %-9s %s\n", "node", "kind", "output");
  for (const auto& n : g.nodes) {
    std::printf("%-14s %-9s %s\n", n.id.c_str(), kind_name(n.kind),
                Tensor::shape_str(shapes.at(n.id)).c_str());
  }
  std::printf("architecture written to %s\n", path.string().c_str());
  return 0;
}

std::vector<Batch> probe_batches(const NetworkGraph& g, const RunConfig& rc,
                                 std::size_t max_batches) {
  const DatasetManifest m =
      load_manifest(fs::path(rc.dataset) / "train" / "manifest.json");
  if (static_cast<std::size_t>(m.num_classes()) != g.classes) {
    throw ConfigError("dataset has " + std::to_string(m.num_classes()) +
                      " classes, architecture expects " +
                      std::to_string(g.classes));
  }
  const std::size_t crop = g.input_shape[1];
  std::vector<Batch> batches;
  for (std::size_t start = 0;
       start < m.records.size() && batches.size() < max_batches;
       start += rc.batch) {
    const std::size_t n = std::min(rc.batch, m.records.size() - start);
    Batch b;
    b.images = zeros({n, 3, crop, crop});
    b.labels.num_classes = m.num_classes();
    for (std::size_t i = 0; i < n; ++i) {
      Tensor img =
          center_crop(preprocess(load_image(m, m.records[start + i]), m),
                      crop);
      std::copy(img.values.begin(), img.values.end(),
                b.images.values.begin() +
                    static_cast<std::ptrdiff_t>(i * img.size()));
      b.labels.labels.push_back(m.records[start + i].label);
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

int cmd_diagnose(const RunConfig& rc) {
  NetworkGraph g = load_arch_file(arch_path(rc));
  if (g.has_aux()) {
    throw ConfigError(
        "diagnose: architecture already has an auxiliary branch; probe a "
        "branchless trunk");
  }
  const std::size_t num_batches =
      (load_manifest(fs::path(rc.dataset) / "train" / "manifest.json")
           .records.size() +
       rc.batch - 1) /
      rc.batch;

  ProbeOptions opt;
  opt.iterations = rc.iters;
  if (rc.probe_unit == "epoch") {
    opt.passes_per_iteration = static_cast<int>(num_batches);
  } else if (rc.probe_unit != "iter") {
    throw ConfigError("probe_unit must be 'iter' or 'epoch'");
  }
  opt.seed = rc.seed;
  opt.sgd_updates = rc.probe_sgd;
  opt.lr = rc.lr;

  GradientReport report = run_probe(g, probe_batches(g, rc, 64), opt);

  fs::create_directories(rc.out);
  echo_config(rc, rc.out);
  std::ofstream csv(fs::path(rc.out) / "gradient_report.csv");
  if (!csv) {
    throw IoError("cannot write gradient report");
  }
  write_report_csv(report, rc.threshold, csv);

  const auto pick = select_branch_point(report, rc.threshold);
  for (std::size_t li = 0; li < report.layer_ids.size(); ++li) {
    std::printf("%-12s %.6e\n", report.layer_ids[li].c_str(),
                report.series_mean[li]);
  }
  if (pick) {
    std::printf("selected: %s\n", pick->c_str());
  } else {
    std::printf("selected: none below threshold\n");
  }
  return 0;
}

int cmd_train(const RunConfig& rc) {
  NetworkGraph g = load_arch_file(arch_path(rc));
  const std::size_t crop = rc.crop ? rc.crop : g.input_shape[1];
  const TrainConfig cfg = train_config_from(rc, crop);
  const DatasetManifest train_set =
      load_manifest(fs::path(rc.dataset) / "train" / "manifest.json");
  const DatasetManifest test_set =
      load_manifest(fs::path(rc.dataset) / "test" / "manifest.json");

  fs::create_directories(rc.out);
  echo_config(rc, rc.out);
  std::optional<fs::path> resume;
  if (!rc.resume.empty()) {
    resume = fs::path(rc.resume);
  }
  TrainResult result = train(g, train_set, test_set, cfg, rc.out, resume);
  if (!result.log.empty()) {
    const auto& last = result.log.back();
    std::printf("final epoch %d: loss_main %.6f loss_aux %.6f top1 %.4f "
                "top5 %.4f\n",
                last.epoch, last.loss_main, last.loss_aux, last.val_top1,
                last.val_top5);
  }
  std::printf("best epoch %d (top1 %.4f); log and checkpoints in %s\n",
              result.best_epoch, result.best_val_top1, rc.out.c_str());
  return 0;
}

int cmd_eval(const RunConfig& rc) {
  NetworkGraph g = load_arch_file(arch_path(rc));
  const fs::path ckpt = rc.checkpoint.empty()
                            ? fs::path(rc.out) / "checkpoint_best.ckpt"
                            : fs::path(rc.checkpoint);
  Checkpoint ck = load_checkpoint(ckpt);
  g.params = ck.params;
  const DatasetManifest test_set =
      load_manifest(fs::path(rc.dataset) / "test" / "manifest.json");
  const std::size_t crop = rc.crop ? rc.crop : g.input_shape[1];
  const EvalMode mode = rc.ten_crop ? EvalMode::ten_crop : EvalMode::center;
  EvalResult r = evaluate(g, test_set, mode, crop);

  fs::create_directories(rc.out);
  echo_config(rc, rc.out);
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "mode,%s\ncount,%zu\ntop1,%.17g\ntop5,%.17g\n",
                rc.ten_crop ? "ten_crop" : "center", r.count, r.top1, r.top5);
  std::ofstream report(fs::path(rc.out) / "accuracy_report.txt");
  report << buf;
  std::fputs(buf, stdout);
  return 0;
}

int cmd_gradcheck(const RunConfig& rc) {
  auto rows = run_layer_gradchecks(rc.seed);
  auto graph_rows = run_graph_gradcheck(rc.seed);
  rows.insert(rows.end(), graph_rows.begin(), graph_rows.end());
  bool ok = true;
  for (const auto& row : rows) {
    std::printf("%-22s %-5s max_rel_err %.3e\n", row.name.c_str(),
                row.pass ? "PASS" : "FAIL", row.max_rel_err);
    ok = ok && row.pass;
  }
  if (!ok) {
    throw NumericError("gradcheck: at least one layer failed");
  }
  return 0;
}

int cmd_synth(const RunConfig& rc) {
  SynthOptions opt;
  opt.train_count = rc.synth_train;
  opt.test_count = rc.synth_test;
  opt.height = rc.synth_size;
  opt.width = rc.synth_size;
  opt.seed = rc.seed;
  generate_synthetic_dataset(rc.dataset.empty() ? rc.out : rc.dataset, opt);
  std::printf("synthetic dataset written to %s\n",
              (rc.dataset.empty() ? rc.out : rc.dataset).c_str());
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deeply supervised residual CNN workbench"};
  app.require_subcommand(1);

  RunConfig rc;
  std::string config_file;

  auto add_shared = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_file, "flat JSON config file");
    cmd->add_option("--seed", rc.seed, "root seed for all randomness");
    cmd->add_option("--out", rc.out, "output directory");
    cmd->add_option("--arch", rc.arch, "architecture file");
    cmd->add_option("--dataset", rc.dataset, "dataset root");
    return cmd;
  };

  CLI::App* build = add_shared(app.add_subcommand(
      "build", "emit an architecture file and its shape table"));
  build->add_flag("--residual", rc.residual, "add the shortcut connections");
  build->add_option("--width", rc.width, "channel/FC width factor");
  build->add_option("--classes", rc.classes, "output class count");
  build->add_option("--input-size", rc.input_size, "input H and W");
  build->add_option("--input-channels", rc.input_channels, "input channels");
  build->add_option("--aux-attach", rc.aux_attach,
                    "conv to attach the branch after, or 'none'");
  build->add_flag("--post-add-relu", rc.post_add_relu,
                  "activation after each merge");

  CLI::App* diagnose = add_shared(app.add_subcommand(
      "diagnose", "run the vanishing-gradient probe on a branchless trunk"));
  diagnose->add_option("--threshold", rc.threshold,
                       "selection threshold on the gradient statistic");
  diagnose->add_option("--iters", rc.iters, "probe length in probe units");
  diagnose->add_option("--probe-unit", rc.probe_unit, "iter or epoch");
  diagnose->add_flag("--probe-sgd", rc.probe_sgd,
                     "apply SGD updates during the probe");
  diagnose->add_option("--batch", rc.batch, "probe batch size");

  CLI::App* train_cmd =
      add_shared(app.add_subcommand("train", "train per the protocol"));
  train_cmd->add_option("--alpha0", rc.alpha0, "initial auxiliary weight");
  train_cmd->add_option("--epochs", rc.epochs, "total epochs");
  train_cmd->add_option("--lr", rc.lr, "initial learning rate");
  train_cmd->add_option("--batch", rc.batch, "batch size");
  train_cmd->add_option("--lr-period", rc.lr_period,
                        "epochs between halvings");
  train_cmd->add_option("--momentum", rc.momentum, "SGD momentum");
  train_cmd->add_option("--weight-decay", rc.weight_decay, "L2 coefficient");
  train_cmd->add_option("--alpha-form", rc.alpha_form,
                        "closed or recursive decay");
  train_cmd->add_option("--init", rc.init, "'he' or a fixed stddev");
  train_cmd->add_option("--crop", rc.crop, "training crop size");
  train_cmd->add_option("--resume", rc.resume, "checkpoint to resume from");

  CLI::App* eval_cmd =
      add_shared(app.add_subcommand("eval", "score a checkpoint"));
  eval_cmd->add_flag("--ten-crop", rc.ten_crop,
                     "average probabilities over the 10-crop set");
  eval_cmd->add_option("--checkpoint", rc.checkpoint, "checkpoint file");
  eval_cmd->add_option("--crop", rc.crop, "evaluation crop size");

  CLI::App* gradcheck_cmd = add_shared(app.add_subcommand(
      "gradcheck", "finite-difference check of every layer and the full "
                   "two-head objective"));
  (void)gradcheck_cmd;

  CLI::App* synth = add_shared(app.add_subcommand(
      "synth", "generate the bundled synthetic 3-class dataset"));
  synth->add_option("--synth-train", rc.synth_train, "training images");
  synth->add_option("--synth-test", rc.synth_test, "test images");
  synth->add_option("--synth-size", rc.synth_size, "stored image H and W");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    CLI::App* cmd = app.get_subcommands().front();
    if (!config_file.empty()) {
      apply_config_file(rc, config_file, [&](const char* key) {
        std::string flag = "--" + std::string(key);
        for (auto& c : flag) {
          if (c == '_') c = '-';
        }
        for (const auto* opt : cmd->get_options()) {
          if (opt->get_name() == flag) {
            return opt->count() > 0;
          }
        }
        return false;
      });
    }
    if (cmd == build) return cmd_build(rc);
    if (cmd == diagnose) return cmd_diagnose(rc);
    if (cmd == train_cmd) return cmd_train(rc);
    if (cmd == eval_cmd) return cmd_eval(rc);
    if (cmd == gradcheck_cmd) return cmd_gradcheck(rc);
    if (cmd == synth) return cmd_synth(rc);
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

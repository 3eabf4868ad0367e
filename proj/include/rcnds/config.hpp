#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"

#include "rcnds/error.hpp"

namespace rcnds {

// Flat key-value run configuration: one document drives build, diagnose,
// train and eval. Command-line flags override file values, and the fully
// resolved document is echoed into the output directory so a run can be
// reproduced from its artifacts alone.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string out = "out";
  std::string arch;
  std::string dataset;

  // architecture
  bool residual = false;
  double width = 1.0;
  std::size_t classes = 205;
  std::size_t input_channels = 3;
  std::size_t input_size = 227;
  std::string aux_attach; // empty = variant default; "none" = no branch
  bool post_add_relu = false;

  // training protocol
  int epochs = 50;
  std::size_t batch = 64; // desk default; the full-scale protocol uses 256
  double lr = 0.01;
  int lr_period = 10;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double alpha0 = 0.3;
  std::string alpha_form = "closed"; // or "recursive"
  std::string init = "he";           // "he" or a fixed stddev, e.g. "0.01"
  std::size_t crop = 0;              // 0 = graph input size
  std::string resume;

  // evaluation
  bool ten_crop = false;
  std::string checkpoint;

  // placement diagnostic
  double threshold = 1e-7;
  int iters = 20;
  std::string probe_unit = "iter"; // or "epoch"
  bool probe_sgd = false;

  // synthetic dataset generator
  std::size_t synth_train = 600;
  std::size_t synth_test = 300;
  std::size_t synth_size = 40;
};

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["out"] = c.out;
  j["arch"] = c.arch;
  j["dataset"] = c.dataset;
  j["residual"] = c.residual;
  j["width"] = c.width;
  j["classes"] = c.classes;
  j["input_channels"] = c.input_channels;
  j["input_size"] = c.input_size;
  j["aux_attach"] = c.aux_attach;
  j["post_add_relu"] = c.post_add_relu;
  j["epochs"] = c.epochs;
  j["batch"] = c.batch;
  j["lr"] = c.lr;
  j["lr_period"] = c.lr_period;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["alpha0"] = c.alpha0;
  j["alpha_form"] = c.alpha_form;
  j["init"] = c.init;
  j["crop"] = c.crop;
  j["resume"] = c.resume;
  j["ten_crop"] = c.ten_crop;
  j["checkpoint"] = c.checkpoint;
  j["threshold"] = c.threshold;
  j["iters"] = c.iters;
  j["probe_unit"] = c.probe_unit;
  j["probe_sgd"] = c.probe_sgd;
  j["synth_train"] = c.synth_train;
  j["synth_test"] = c.synth_test;
  j["synth_size"] = c.synth_size;
  return j;
}

// Applies values from a flat JSON document for every key the command line
// did not set; `supplied` answers whether a flag was given explicitly.
template <typename SuppliedFn>
inline void apply_config_file(RunConfig& c, const std::filesystem::path& path,
                              SuppliedFn&& supplied) {
  std::ifstream is(path);
  if (!is) {
    throw ConfigError("config file not found: " + path.string());
  }
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  if (!j.is_object()) {
    throw ConfigError("config must be a flat JSON object");
  }
  auto set = [&](const char* key, auto& field) {
    if (j.contains(key) && !supplied(key)) {
      try {
        field = j[key].template get<std::decay_t<decltype(field)>>();
      } catch (const nlohmann::json::exception&) {
        throw ConfigError(std::string("config key '") + key +
                          "' has the wrong type");
      }
    }
  };
  set("seed", c.seed);
  set("out", c.out);
  set("arch", c.arch);
  set("dataset", c.dataset);
  set("residual", c.residual);
  set("width", c.width);
  set("classes", c.classes);
  set("input_channels", c.input_channels);
  set("input_size", c.input_size);
  set("aux_attach", c.aux_attach);
  set("post_add_relu", c.post_add_relu);
  set("epochs", c.epochs);
  set("batch", c.batch);
  set("lr", c.lr);
  set("lr_period", c.lr_period);
  set("momentum", c.momentum);
  set("weight_decay", c.weight_decay);
  set("alpha0", c.alpha0);
  set("alpha_form", c.alpha_form);
  set("init", c.init);
  set("crop", c.crop);
  set("resume", c.resume);
  set("ten_crop", c.ten_crop);
  set("checkpoint", c.checkpoint);
  set("threshold", c.threshold);
  set("iters", c.iters);
  set("probe_unit", c.probe_unit);
  set("probe_sgd", c.probe_sgd);
  set("synth_train", c.synth_train);
  set("synth_test", c.synth_test);
  set("synth_size", c.synth_size);
  for (auto it = j.begin(); it != j.end(); ++it) {
    static const char* known[] = {
        "seed",          "out",        "arch",        "dataset",
        "residual",      "width",      "classes",     "input_channels",
        "input_size",    "aux_attach", "post_add_relu", "epochs",
        "batch",         "lr",         "lr_period",   "momentum",
        "weight_decay",  "alpha0",     "alpha_form",  "init",
        "crop",          "resume",     "ten_crop",    "checkpoint",
        "threshold",     "iters",      "probe_unit",  "probe_sgd",
        "synth_train",   "synth_test", "synth_size"};
    bool ok = false;
    for (const char* k : known) {
      if (it.key() == k) ok = true;
    }
    if (!ok) {
      throw ConfigError("unknown config key '" + it.key() + "'");
    }
  }
}

inline void echo_config(const RunConfig& c,
                        const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::ofstream os(out_dir / "config.json");
  if (!os) {
    throw IoError("cannot write resolved config under " + out_dir.string());
  }
  os << run_config_to_json(c).dump(2) << "\n";
}

} // namespace rcnds

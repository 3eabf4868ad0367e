#pragma once

#include <unistd.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "rcnds/diagnostic.hpp"
#include "rcnds/graph.hpp"
#include "rcnds/rng.hpp"
#include "rcnds/tensor.hpp"

namespace testutil {

inline rcnds::Tensor random_tensor(std::vector<std::size_t> shape,
                                   std::uint64_t seed, double lo = -1.0,
                                   double hi = 1.0) {
  rcnds::Tensor t = rcnds::zeros(std::move(shape));
  rcnds::Rng rng(seed);
  for (double& v : t.values) {
    v = lo + (hi - lo) * rng.uniform();
  }
  return t;
}

// Unique scratch directory per test invocation, removed on destruction.
class TempDir {
public:
  explicit TempDir(const std::string& stem) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            (stem + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

private:
  std::filesystem::path path_;
};

struct CliResult {
  int exit_code = -1;
  std::string output;
};

// Runs the CLI binary with stderr folded into stdout.
inline CliResult run_cli(const std::string& args) {
  const std::string cmd = std::string(RCNDS_CLI_PATH) + " " + args + " 2>&1";
  CliResult r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) {
    r.output = "popen failed";
    return r;
  }
  char buf[512];
  while (std::fgets(buf, sizeof(buf), pipe)) {
    r.output += buf;
  }
  const int status = ::pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

// A deliberately deep, narrow stack for exercising the vanishing-gradient
// probe: `depth` 3x3 convolutions with widths growing toward the head and
// a pool every four stages, closed by a small classifier. With tiny
// fixed-std initialization the gradient statistic decays markedly from
// the first layer to the last.
inline rcnds::NetworkGraph build_deep_toy_stack(std::size_t depth = 12,
                                                std::size_t input_hw = 32,
                                                std::size_t classes = 3) {
  using namespace rcnds;
  NetworkGraph g;
  g.input_shape = {3, input_hw, input_hw};
  g.classes = classes;

  LayerNode data;
  data.id = "data";
  data.kind = NodeKind::input;
  g.nodes.push_back(data);

  std::string tail = "data";
  std::size_t channels = 3;
  std::size_t hw = input_hw;
  std::size_t width = 4;
  for (std::size_t i = 0; i < depth; ++i) {
    LayerNode conv;
    conv.id = "tconv" + std::to_string(i + 1);
    conv.kind = NodeKind::conv;
    conv.geom.kernel = 3;
    conv.geom.stride = 1;
    conv.geom.pad = 1;
    conv.geom.in_channels = channels;
    conv.geom.out_channels = width;
    conv.inputs = {tail};
    g.nodes.push_back(conv);
    tail = conv.id;
    channels = width;

    LayerNode relu;
    relu.id = "trelu" + std::to_string(i + 1);
    relu.kind = NodeKind::relu;
    relu.inputs = {tail};
    g.nodes.push_back(relu);
    tail = relu.id;

    if ((i + 1) % 4 == 0 && hw >= 4) {
      LayerNode pool;
      pool.id = "tpool" + std::to_string(i + 1);
      pool.kind = NodeKind::maxpool;
      pool.geom.kernel = 2;
      pool.geom.stride = 2;
      pool.inputs = {tail};
      g.nodes.push_back(pool);
      tail = pool.id;
      hw /= 2;
    }
    width = width * 3 / 2 + 1; // widen toward the head
  }

  LayerNode flat;
  flat.id = "tflatten";
  flat.kind = NodeKind::flatten;
  flat.inputs = {tail};
  g.nodes.push_back(flat);

  LayerNode fc;
  fc.id = "tfc";
  fc.kind = NodeKind::fc;
  fc.geom.in_dim = channels * hw * hw;
  fc.geom.out_dim = classes;
  fc.inputs = {"tflatten"};
  g.nodes.push_back(fc);

  LayerNode soft;
  soft.id = "tsoftmax";
  soft.kind = NodeKind::softmax;
  soft.inputs = {"tfc"};
  g.nodes.push_back(soft);
  g.heads.push_back({"tsoftmax", "main"});

  g.validate_structure();
  return g;
}

// Random image/label batches for feeding the probe.
inline std::vector<rcnds::Batch> random_batches(
    std::size_t count, std::size_t batch, std::size_t input_hw,
    int classes, std::uint64_t seed) {
  std::vector<rcnds::Batch> out;
  rcnds::Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    rcnds::Batch b;
    b.images = rcnds::zeros({batch, 3, input_hw, input_hw});
    for (double& v : b.images.values) {
      v = rng.uniform() * 2.0 - 1.0;
    }
    b.labels.num_classes = classes;
    for (std::size_t s = 0; s < batch; ++s) {
      b.labels.labels.push_back(
          static_cast<int>(rng.uniform_index(static_cast<std::size_t>(
              classes))));
    }
    out.push_back(std::move(b));
  }
  return out;
}

} // namespace testutil

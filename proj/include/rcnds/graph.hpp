#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "rcnds/error.hpp"
#include "rcnds/layers.hpp"
#include "rcnds/rng.hpp"
#include "rcnds/supervision.hpp"
#include "rcnds/tensor.hpp"

namespace rcnds {

enum class NodeKind {
  input,
  conv,
  relu,
  maxpool,
  avgpool,
  dropout,
  flatten,
  fc,
  add,
  softmax
};

inline const char* kind_name(NodeKind k) {
  switch (k) {
    case NodeKind::input: return "input";
    case NodeKind::conv: return "conv";
    case NodeKind::relu: return "relu";
    case NodeKind::maxpool: return "maxpool";
    case NodeKind::avgpool: return "avgpool";
    case NodeKind::dropout: return "dropout";
    case NodeKind::flatten: return "flatten";
    case NodeKind::fc: return "fc";
    case NodeKind::add: return "add";
    case NodeKind::softmax: return "softmax";
  }
  return "?";
}

inline NodeKind kind_from_name(const std::string& s) {
  static const std::map<std::string, NodeKind> table = {
      {"input", NodeKind::input},     {"conv", NodeKind::conv},
      {"relu", NodeKind::relu},       {"maxpool", NodeKind::maxpool},
      {"avgpool", NodeKind::avgpool}, {"dropout", NodeKind::dropout},
      {"flatten", NodeKind::flatten}, {"fc", NodeKind::fc},
      {"add", NodeKind::add},         {"softmax", NodeKind::softmax}};
  auto it = table.find(s);
  if (it == table.end()) {
    throw ConfigError("unknown node kind '" + s + "'");
  }
  return it->second;
}

// Per-node geometry; only the fields relevant to the kind are meaningful.
struct Geometry {
  std::size_t kernel = 0;
  std::size_t stride = 0;
  std::size_t pad = 0;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t in_dim = 0;  // fc
  std::size_t out_dim = 0; // fc
  double rate = 0.0;       // dropout
};

struct LayerNode {
  std::string id;
  NodeKind kind = NodeKind::input;
  Geometry geom;
  std::vector<std::string> inputs;
  std::string branch = "main"; // "main" or "aux1"

  bool trainable() const {
    return kind == NodeKind::conv || kind == NodeKind::fc;
  }
};

struct Head {
  std::string node;   // softmax node id
  std::string branch; // matches the nodes feeding it
};

// Architecture knobs. The channel plan covers the five conv stages; stage
// three onward has two convolutions each. Width scales every channel and
// fully connected extent, so a 1/8 network keeps the topology while
// shrinking to desk size.
struct ArchConfig {
  std::array<std::size_t, 3> input{3, 227, 227}; // C,H,W
  std::size_t classes = 205;
  std::array<std::size_t, 5> stage_channels{64, 128, 256, 512, 512};
  double width = 1.0;
  std::size_t fc_main = 4096;
  std::size_t fc_aux = 1024;
  std::size_t aux_conv_channels = 128;
  std::string aux_attach = "conv3_2"; // conv node id, or "none"
  bool post_add_relu = false;
  double dropout_rate = 0.5;
  std::size_t aux_pool_kernel = 5;
  std::size_t aux_pool_stride = 2;

  std::size_t scaled(std::size_t base) const {
    const auto v = static_cast<std::size_t>(
        std::llround(static_cast<double>(base) * width));
    return std::max<std::size_t>(1, v);
  }

  void validate() const {
    if (!(width > 0.0)) {
      throw ConfigError("ArchConfig: width factor must be positive");
    }
    if (classes < 2) {
      throw ConfigError("ArchConfig: need at least 2 classes");
    }
    for (std::size_t e : input) {
      if (e == 0) {
        throw ConfigError("ArchConfig: zero input extent");
      }
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
      throw ConfigError("ArchConfig: dropout rate must be in [0,1)");
    }
  }
};

struct NetworkGraph {
  std::vector<LayerNode> nodes; // topologically ordered
  std::vector<Head> heads;
  std::map<std::string, LayerParams> params;
  std::array<std::size_t, 3> input_shape{0, 0, 0};
  std::size_t classes = 0;
  bool post_add_relu = false;

  bool has_node(const std::string& id) const {
    for (const auto& n : nodes) {
      if (n.id == id) return true;
    }
    return false;
  }

  const LayerNode& node(const std::string& id) const {
    for (const auto& n : nodes) {
      if (n.id == id) return n;
    }
    throw ConfigError("no node named '" + id + "'");
  }

  LayerNode& node(const std::string& id) {
    for (auto& n : nodes) {
      if (n.id == id) return n;
    }
    throw ConfigError("no node named '" + id + "'");
  }

  bool has_aux() const {
    for (const auto& h : heads) {
      if (h.branch != "main") return true;
    }
    return false;
  }

  std::optional<Head> main_head() const {
    for (const auto& h : heads) {
      if (h.branch == "main") return h;
    }
    return std::nullopt;
  }

  // Structural invariants: unique ids, inputs resolve to earlier nodes
  // (which also proves acyclicity of the stored order), correct arity,
  // exactly one main head, one head per auxiliary branch.
  void validate_structure() const {
    std::set<std::string> seen;
    for (const auto& n : nodes) {
      if (!seen.insert(n.id).second) {
        throw StateError("duplicate node id '" + n.id + "'");
      }
      const std::size_t want =
          n.kind == NodeKind::input ? 0 : (n.kind == NodeKind::add ? 2 : 1);
      if (n.inputs.size() != want) {
        throw StateError("node '" + n.id + "' must have " +
                         std::to_string(want) + " inputs, has " +
                         std::to_string(n.inputs.size()));
      }
      for (const auto& in : n.inputs) {
        if (!seen.count(in)) {
          throw StateError("node '" + n.id + "' input '" + in +
                           "' missing or out of order");
        }
      }
    }
    std::size_t main_heads = 0;
    std::set<std::string> aux_branches, aux_heads;
    for (const auto& n : nodes) {
      if (n.branch != "main") aux_branches.insert(n.branch);
    }
    for (const auto& h : heads) {
      const auto& n = node(h.node);
      if (n.kind != NodeKind::softmax) {
        throw StateError("head '" + h.node + "' is not a softmax node");
      }
      if (h.branch == "main") {
        ++main_heads;
      } else {
        if (!aux_heads.insert(h.branch).second) {
          throw StateError("branch '" + h.branch + "' has two heads");
        }
      }
    }
    if (main_heads != 1) {
      throw StateError("graph must have exactly one main head");
    }
    for (const auto& b : aux_branches) {
      if (!aux_heads.count(b)) {
        throw StateError("auxiliary branch '" + b + "' has no head");
      }
    }
  }
};

namespace detail {

inline std::size_t channels_of(const NetworkGraph& g, const std::string& id) {
  const LayerNode& n = g.node(id);
  switch (n.kind) {
    case NodeKind::input: return g.input_shape[0];
    case NodeKind::conv: return n.geom.out_channels;
    case NodeKind::relu:
    case NodeKind::maxpool:
    case NodeKind::avgpool:
    case NodeKind::dropout:
      return channels_of(g, n.inputs[0]);
    case NodeKind::add: return channels_of(g, n.inputs[0]);
    default:
      throw StateError("channels_of: node '" + id + "' is not spatial");
  }
}

} // namespace detail

// Maps every node to its per-sample output shape ([C,H,W] for spatial
// nodes, [D] after flatten). Throws ShapeError, naming the node, on the
// first inconsistency; in particular a merge whose two inputs disagree.
inline std::map<std::string, std::vector<std::size_t>> infer_shapes(
    const NetworkGraph& g, const std::array<std::size_t, 3>& input) {
  g.validate_structure();
  std::map<std::string, std::vector<std::size_t>> shapes;
  for (const auto& n : g.nodes) {
    switch (n.kind) {
      case NodeKind::input:
        shapes[n.id] = {input[0], input[1], input[2]};
        break;
      case NodeKind::conv: {
        const auto& in = shapes.at(n.inputs[0]);
        if (in.size() != 3) {
          throw ShapeError("conv '" + n.id + "': input is not spatial");
        }
        if (in[0] != n.geom.in_channels) {
          throw ShapeError("conv '" + n.id + "': expects " +
                           std::to_string(n.geom.in_channels) +
                           " channels, gets " + std::to_string(in[0]));
        }
        const std::size_t oh = conv_out_extent(in[1], n.geom.kernel,
                                               n.geom.stride, n.geom.pad,
                                               n.id.c_str());
        const std::size_t ow = conv_out_extent(in[2], n.geom.kernel,
                                               n.geom.stride, n.geom.pad,
                                               n.id.c_str());
        shapes[n.id] = {n.geom.out_channels, oh, ow};
        break;
      }
      case NodeKind::maxpool:
      case NodeKind::avgpool: {
        const auto& in = shapes.at(n.inputs[0]);
        if (in.size() != 3) {
          throw ShapeError("pool '" + n.id + "': input is not spatial");
        }
        const std::size_t oh = conv_out_extent(in[1], n.geom.kernel,
                                               n.geom.stride, 0, n.id.c_str());
        const std::size_t ow = conv_out_extent(in[2], n.geom.kernel,
                                               n.geom.stride, 0, n.id.c_str());
        shapes[n.id] = {in[0], oh, ow};
        break;
      }
      case NodeKind::relu:
      case NodeKind::dropout:
      case NodeKind::softmax:
        shapes[n.id] = shapes.at(n.inputs[0]);
        break;
      case NodeKind::flatten: {
        const auto& in = shapes.at(n.inputs[0]);
        std::size_t d = 1;
        for (std::size_t e : in) d *= e;
        shapes[n.id] = {d};
        break;
      }
      case NodeKind::fc: {
        const auto& in = shapes.at(n.inputs[0]);
        if (in.size() != 1) {
          throw ShapeError("fc '" + n.id + "': input must be flat");
        }
        if (in[0] != n.geom.in_dim) {
          throw ShapeError("fc '" + n.id + "': expects " +
                           std::to_string(n.geom.in_dim) + " inputs, gets " +
                           std::to_string(in[0]));
        }
        shapes[n.id] = {n.geom.out_dim};
        break;
      }
      case NodeKind::add: {
        const auto& a = shapes.at(n.inputs[0]);
        const auto& b = shapes.at(n.inputs[1]);
        if (a != b) {
          throw ShapeError("merge '" + n.id + "': input shapes differ, " +
                           Tensor::shape_str(a) + " from '" + n.inputs[0] +
                           "' vs " + Tensor::shape_str(b) + " from '" +
                           n.inputs[1] + "'");
        }
        shapes[n.id] = a;
        break;
      }
    }
  }
  return shapes;
}

namespace detail {

struct TrunkBuilder {
  NetworkGraph& g;
  std::string tail;
  std::vector<std::size_t> shape; // per-sample shape at tail

  void push(LayerNode n) {
    g.nodes.push_back(std::move(n));
    tail = g.nodes.back().id;
  }

  void conv(const std::string& id, std::size_t out_ch, std::size_t k,
            std::size_t stride, std::size_t pad, const std::string& branch,
            bool with_relu, const std::string& relu_id) {
    LayerNode n;
    n.id = id;
    n.kind = NodeKind::conv;
    n.geom.kernel = k;
    n.geom.stride = stride;
    n.geom.pad = pad;
    n.geom.in_channels = shape[0];
    n.geom.out_channels = out_ch;
    n.inputs = {tail};
    n.branch = branch;
    push(std::move(n));
    shape = {out_ch,
             conv_out_extent(shape[1], k, stride, pad, id.c_str()),
             conv_out_extent(shape[2], k, stride, pad, id.c_str())};
    if (with_relu) {
      LayerNode r;
      r.id = relu_id;
      r.kind = NodeKind::relu;
      r.inputs = {tail};
      r.branch = branch;
      push(std::move(r));
    }
  }

  void pool(const std::string& id, NodeKind kind, std::size_t k,
            std::size_t stride, const std::string& branch) {
    LayerNode n;
    n.id = id;
    n.kind = kind;
    n.geom.kernel = k;
    n.geom.stride = stride;
    n.inputs = {tail};
    n.branch = branch;
    push(std::move(n));
    shape = {shape[0],
             conv_out_extent(shape[1], k, stride, 0, id.c_str()),
             conv_out_extent(shape[2], k, stride, 0, id.c_str())};
  }

  void flatten(const std::string& id, const std::string& branch) {
    LayerNode n;
    n.id = id;
    n.kind = NodeKind::flatten;
    n.inputs = {tail};
    n.branch = branch;
    push(std::move(n));
    std::size_t d = 1;
    for (std::size_t e : shape) d *= e;
    shape = {d};
  }

  void fc(const std::string& id, std::size_t out_dim,
          const std::string& branch, bool with_relu,
          const std::string& relu_id) {
    LayerNode n;
    n.id = id;
    n.kind = NodeKind::fc;
    n.geom.in_dim = shape[0];
    n.geom.out_dim = out_dim;
    n.inputs = {tail};
    n.branch = branch;
    push(std::move(n));
    shape = {out_dim};
    if (with_relu) {
      LayerNode r;
      r.id = relu_id;
      r.kind = NodeKind::relu;
      r.inputs = {tail};
      r.branch = branch;
      push(std::move(r));
    }
  }

  void dropout(const std::string& id, double rate,
               const std::string& branch) {
    LayerNode n;
    n.id = id;
    n.kind = NodeKind::dropout;
    n.geom.rate = rate;
    n.inputs = {tail};
    n.branch = branch;
    push(std::move(n));
  }

  void softmax(const std::string& id, const std::string& branch) {
    LayerNode n;
    n.id = id;
    n.kind = NodeKind::softmax;
    n.inputs = {tail};
    n.branch = branch;
    push(std::move(n));
    g.heads.push_back({id, branch});
  }
};

} // namespace detail

// Builds the deeply supervised trunk: eight convolutions (7x7 stride 2
// first, 3x3 stride 1 after), max pools closing the first four stages,
// two 4096-wide fully connected layers with dropout, and a K-way output.
// One small classifier branch (avgpool -> 1x1 conv -> two 1024-wide FC
// layers with dropout -> output) hangs off the configured attach point.
//
// Every convolution uses pad = floor(k/2) so spatial extent changes only
// through stride and pooling; that is what lets the residual rewrite add
// element-wise merges without extra resampling. The fifth conv stage
// feeds the flatten directly: a further 2x2 pool would not fit the 1x1
// maps that desk-scale inputs produce there.
//
// The branch's average pool wants kernel 5, but is clamped to the attach
// point's spatial extent so small-input builds stay executable; at the
// full 227x227 scale the kernel is 5 as designed.
inline NetworkGraph build_cnds(const ArchConfig& cfg) {
  cfg.validate();

  NetworkGraph g;
  g.input_shape = cfg.input;
  g.classes = cfg.classes;
  g.post_add_relu = cfg.post_add_relu;

  const std::size_t s1 = cfg.scaled(cfg.stage_channels[0]);
  const std::size_t s2 = cfg.scaled(cfg.stage_channels[1]);
  const std::size_t s3 = cfg.scaled(cfg.stage_channels[2]);
  const std::size_t s4 = cfg.scaled(cfg.stage_channels[3]);
  const std::size_t s5 = cfg.scaled(cfg.stage_channels[4]);

  detail::TrunkBuilder b{g, "", {cfg.input[0], cfg.input[1], cfg.input[2]}};
  LayerNode data;
  data.id = "data";
  data.kind = NodeKind::input;
  b.push(std::move(data));

  b.conv("conv1", s1, 7, 2, 3, "main", true, "relu1");
  b.pool("pool1", NodeKind::maxpool, 2, 2, "main");
  b.conv("conv2", s2, 3, 1, 1, "main", true, "relu2");
  b.pool("pool2", NodeKind::maxpool, 2, 2, "main");
  b.conv("conv3_1", s3, 3, 1, 1, "main", true, "relu3_1");
  b.conv("conv3_2", s3, 3, 1, 1, "main", true, "relu3_2");
  b.pool("pool3", NodeKind::maxpool, 2, 2, "main");
  b.conv("conv4_1", s4, 3, 1, 1, "main", true, "relu4_1");
  b.conv("conv4_2", s4, 3, 1, 1, "main", true, "relu4_2");
  b.pool("pool4", NodeKind::maxpool, 2, 2, "main");
  b.conv("conv5_1", s5, 3, 1, 1, "main", true, "relu5_1");
  b.conv("conv5_2", s5, 3, 1, 1, "main", true, "relu5_2");
  b.flatten("flatten", "main");
  b.fc("fc6", cfg.scaled(cfg.fc_main), "main", true, "relu6");
  b.dropout("drop6", cfg.dropout_rate, "main");
  b.fc("fc7", cfg.scaled(cfg.fc_main), "main", true, "relu7");
  b.dropout("drop7", cfg.dropout_rate, "main");
  b.fc("output", cfg.classes, "main", false, "");
  b.softmax("softmax", "main");

  if (cfg.aux_attach != "none") {
    static const std::set<std::string> conv_ids = {
        "conv1",   "conv2",   "conv3_1", "conv3_2",
        "conv4_1", "conv4_2", "conv5_1", "conv5_2"};
    if (!conv_ids.count(cfg.aux_attach)) {
      throw ConfigError("aux attach point '" + cfg.aux_attach +
                        "' is not a main-branch convolution");
    }
    const std::string attach = "relu" + cfg.aux_attach.substr(4);
    const auto shapes = infer_shapes(g, cfg.input);
    const auto& at = shapes.at(attach);

    detail::TrunkBuilder aux{g, attach, {at[0], at[1], at[2]}};
    const std::size_t pk =
        std::min(cfg.aux_pool_kernel, std::min(at[1], at[2]));
    aux.pool("s_avgpool", NodeKind::avgpool, pk, cfg.aux_pool_stride, "aux1");
    aux.conv("s_conv", cfg.scaled(cfg.aux_conv_channels), 1, 1, 0, "aux1",
             true, "s_relu0");
    aux.flatten("s_flatten", "aux1");
    aux.fc("s_fc1", cfg.scaled(cfg.fc_aux), "aux1", true, "s_relu1");
    aux.dropout("s_drop1", cfg.dropout_rate, "aux1");
    aux.fc("s_fc2", cfg.scaled(cfg.fc_aux), "aux1", true, "s_relu2");
    aux.dropout("s_drop2", cfg.dropout_rate, "aux1");
    aux.fc("s_output", cfg.classes, "aux1", false, "");
    aux.softmax("s_softmax", "aux1");
  }

  g.validate_structure();
  return g;
}

// Adds the three main-branch shortcut connections:
//   pool2 -> merge3 with the conv3_2 stage output (projection res3_branch,
//            1x1, needed when stage-2 and stage-3 widths differ),
//   pool3 -> merge4 with the conv4_2 stage output (projection res4_branch),
//   pool4 -> merge5 with the conv5_2 stage output (no projection; the two
//            stages share a width).
// When the auxiliary branch is attached at conv4_2, it is re-anchored to
// the new merge so it reads the merged feature map. The auxiliary branch
// itself never receives a shortcut: with a single convolution there is no
// layer stack to skip. Applying the rewrite twice is an error.
inline NetworkGraph insert_residual_connections(const NetworkGraph& g) {
  for (const char* id :
       {"merge3", "merge4", "merge5", "res3_branch", "res4_branch"}) {
    if (g.has_node(id)) {
      throw StateError("insert_residual_connections: graph already has '" +
                       std::string(id) + "'");
    }
  }
  for (const char* id : {"pool2", "relu3_2", "pool3", "relu4_2", "pool4",
                         "relu5_2", "flatten"}) {
    if (!g.has_node(id)) {
      throw StateError(
          "insert_residual_connections: input is not a CNDS trunk (missing "
          "'" +
          std::string(id) + "')");
    }
  }

  struct Site {
    const char* src;      // shortcut source (stage pool)
    const char* end;      // stage output the shortcut merges with
    const char* next;     // consumer to rewire onto the merge
    const char* merge_id;
    const char* proj_id;
  };
  const Site sites[] = {
      {"pool2", "relu3_2", "pool3", "merge3", "res3_branch"},
      {"pool3", "relu4_2", "pool4", "merge4", "res4_branch"},
      {"pool4", "relu5_2", "flatten", "merge5", "res5_branch"},
  };

  NetworkGraph out = g;
  for (const Site& site : sites) {
    const std::size_t in_ch = detail::channels_of(out, site.src);
    const std::size_t out_ch = detail::channels_of(out, site.end);

    std::string shortcut = site.src;
    std::vector<LayerNode> inserted;
    if (in_ch != out_ch) {
      LayerNode proj;
      proj.id = site.proj_id;
      proj.kind = NodeKind::conv;
      proj.geom.kernel = 1;
      proj.geom.stride = 1;
      proj.geom.pad = 0;
      proj.geom.in_channels = in_ch;
      proj.geom.out_channels = out_ch;
      proj.inputs = {site.src};
      proj.branch = "main";
      inserted.push_back(std::move(proj));
      shortcut = site.proj_id;
    }
    LayerNode merge;
    merge.id = site.merge_id;
    merge.kind = NodeKind::add;
    merge.inputs = {site.end, shortcut};
    merge.branch = "main";
    inserted.push_back(std::move(merge));

    std::string stage_out = site.merge_id;
    if (out.post_add_relu) {
      LayerNode r;
      r.id = std::string(site.merge_id) + "_relu";
      r.kind = NodeKind::relu;
      r.inputs = {site.merge_id};
      r.branch = "main";
      stage_out = r.id;
      inserted.push_back(std::move(r));
    }

    // Keep topological order: the new nodes go right after the stage
    // output they consume.
    auto pos = std::find_if(out.nodes.begin(), out.nodes.end(),
                            [&](const LayerNode& n) {
                              return n.id == site.end;
                            });
    out.nodes.insert(std::next(pos),
                     std::make_move_iterator(inserted.begin()),
                     std::make_move_iterator(inserted.end()));

    for (auto& in : out.node(site.next).inputs) {
      if (in == site.end) in = stage_out;
    }
    if (std::string(site.end) == "relu4_2" && out.has_node("s_avgpool")) {
      for (auto& in : out.node("s_avgpool").inputs) {
        if (in == "relu4_2") in = stage_out;
      }
    }
  }
  out.validate_structure();
  return out;
}

// Weight initialization: zero-mean Gaussians, either a fixed standard
// deviation or one scaled by fan-in (sqrt(2/fan_in)). Biases start at
// zero. Each node draws from its own derived stream, so adding or
// removing a branch never changes the weights another node receives.
struct InitScheme {
  enum class Kind { fixed, fan_in };
  Kind kind = Kind::fan_in;
  double stddev = 0.01;

  static InitScheme fixed(double s) { return {Kind::fixed, s}; }
  static InitScheme he() { return {Kind::fan_in, 0.0}; }
};

inline void init_params(NetworkGraph& g, const InitScheme& scheme,
                        std::uint64_t seed) {
  g.params.clear();
  for (const auto& n : g.nodes) {
    if (!n.trainable()) continue;
    std::vector<std::size_t> wshape;
    std::size_t fan_in = 0;
    std::size_t out = 0;
    if (n.kind == NodeKind::conv) {
      wshape = {n.geom.out_channels, n.geom.in_channels, n.geom.kernel,
                n.geom.kernel};
      fan_in = n.geom.in_channels * n.geom.kernel * n.geom.kernel;
      out = n.geom.out_channels;
    } else {
      wshape = {n.geom.out_dim, n.geom.in_dim};
      fan_in = n.geom.in_dim;
      out = n.geom.out_dim;
    }
    const double sd = scheme.kind == InitScheme::Kind::fixed
                          ? scheme.stddev
                          : std::sqrt(2.0 / static_cast<double>(fan_in));
    LayerParams p;
    p.weights = gaussian_init(wshape, sd, derive_seed(seed, n.id));
    p.bias = zeros({out});
    g.params[n.id] = p;
  }
}

// Everything one forward pass leaves behind: head logits, every node
// output (handy for structural checks), and the caches the backward pass
// consumes.
struct ForwardResult {
  std::map<std::string, Tensor> head_logits; // head node id -> [N,K]
  std::map<std::string, Tensor> outputs;
  std::map<std::string, LayerCache> caches;
  Mode mode = Mode::train;
};

// Topological execution. Test mode skips every auxiliary node (the branch
// exists only to inject training signal) and runs dropout as the identity.
inline ForwardResult forward(const NetworkGraph& g, const Tensor& batch,
                             Mode mode, std::uint64_t seed) {
  g.validate_structure();
  if (batch.rank() != 4) {
    throw ShapeError("forward: batch must be [N,C,H,W]");
  }
  if (batch.shape[1] != g.input_shape[0] ||
      batch.shape[2] != g.input_shape[1] ||
      batch.shape[3] != g.input_shape[2]) {
    throw ShapeError("forward: batch " + Tensor::shape_str(batch.shape) +
                     " does not match graph input [" +
                     std::to_string(g.input_shape[0]) + "," +
                     std::to_string(g.input_shape[1]) + "," +
                     std::to_string(g.input_shape[2]) + "]");
  }
  for (const auto& n : g.nodes) {
    if (n.trainable() && !g.params.count(n.id)) {
      throw StateError("forward: node '" + n.id +
                       "' has no parameters; call init_params or load a "
                       "checkpoint first");
    }
  }

  ForwardResult run;
  run.mode = mode;
  const std::size_t batch_n = batch.shape[0];
  for (const auto& n : g.nodes) {
    if (mode == Mode::test && n.branch != "main") continue;
    LayerCache& cache = run.caches[n.id];
    Tensor out;
    switch (n.kind) {
      case NodeKind::input:
        out = batch;
        break;
      case NodeKind::conv:
        out = conv2d_forward(run.outputs.at(n.inputs[0]), g.params.at(n.id),
                             n.geom.stride, n.geom.pad, cache);
        break;
      case NodeKind::relu:
        out = relu_forward(run.outputs.at(n.inputs[0]), cache);
        break;
      case NodeKind::maxpool:
        out = maxpool_forward(run.outputs.at(n.inputs[0]), n.geom.kernel,
                              n.geom.stride, cache);
        break;
      case NodeKind::avgpool:
        out = avgpool_forward(run.outputs.at(n.inputs[0]), n.geom.kernel,
                              n.geom.stride, cache);
        break;
      case NodeKind::dropout:
        out = dropout_forward(run.outputs.at(n.inputs[0]), n.geom.rate, mode,
                              derive_seed(seed, n.id), cache);
        break;
      case NodeKind::flatten: {
        const Tensor& in = run.outputs.at(n.inputs[0]);
        std::size_t d = in.size() / batch_n;
        cache.begin_forward(in, {batch_n, d});
        out = reshape(in, {batch_n, d});
        break;
      }
      case NodeKind::fc:
        out = fc_forward(run.outputs.at(n.inputs[0]), g.params.at(n.id),
                         cache);
        break;
      case NodeKind::add:
        out = elementwise_add(run.outputs.at(n.inputs[0]),
                              run.outputs.at(n.inputs[1]));
        cache.begin_forward(Tensor(), out.shape);
        break;
      case NodeKind::softmax:
        // Heads carry logits; the probability map is taken by the loss.
        out = run.outputs.at(n.inputs[0]);
        cache.begin_forward(Tensor(), out.shape);
        break;
    }
    run.outputs[n.id] = std::move(out);
  }
  for (const auto& h : g.heads) {
    if (mode == Mode::test && h.branch != "main") continue;
    run.head_logits[h.node] = run.outputs.at(h.node);
  }
  return run;
}

struct ParamGrads {
  Tensor weights;
  Tensor bias;
};

// Reverse-topological accumulation from the supplied per-head logit
// gradients. Gradients from different heads sum where paths share nodes;
// nodes the heads cannot reach keep zero parameter gradients.
inline std::map<std::string, ParamGrads> backward(
    const NetworkGraph& g, ForwardResult& run,
    const std::map<std::string, Tensor>& head_grads) {
  if (run.mode != Mode::train) {
    throw StateError("backward: requires caches from a train-mode forward");
  }
  if (run.caches.empty()) {
    throw StateError("backward: no forward caches present");
  }

  std::map<std::string, Tensor> grad; // w.r.t. node output
  for (const auto& [head, gtensor] : head_grads) {
    bool known = false;
    for (const auto& h : g.heads) {
      if (h.node == head) known = true;
    }
    if (!known) {
      throw StateError("backward: '" + head + "' is not a head");
    }
    if (gtensor.shape != run.outputs.at(head).shape) {
      throw ShapeError("backward: gradient for head '" + head +
                       "' has wrong shape");
    }
    grad[head] = gtensor;
  }

  std::map<std::string, ParamGrads> result;
  for (const auto& n : g.nodes) {
    if (n.trainable()) {
      result[n.id] = {zeros(g.params.at(n.id).weights.shape),
                      zeros(g.params.at(n.id).bias.shape)};
    }
  }

  auto accumulate = [&grad](const std::string& id, Tensor t) {
    auto it = grad.find(id);
    if (it == grad.end()) {
      grad.emplace(id, std::move(t));
    } else {
      it->second = elementwise_add(it->second, t);
    }
  };

  for (auto it = g.nodes.rbegin(); it != g.nodes.rend(); ++it) {
    const LayerNode& n = *it;
    auto git = grad.find(n.id);
    if (git == grad.end()) continue;
    const Tensor gout = std::move(git->second);
    grad.erase(git);
    auto cit = run.caches.find(n.id);
    if (cit == run.caches.end()) {
      throw StateError("backward: no cache for node '" + n.id + "'");
    }
    LayerCache& cache = cit->second;
    switch (n.kind) {
      case NodeKind::input:
        break;
      case NodeKind::conv: {
        ConvGrads cg = conv2d_backward(gout, g.params.at(n.id), cache,
                                       n.geom.stride, n.geom.pad);
        result[n.id].weights = elementwise_add(result[n.id].weights,
                                               cg.grad_weights);
        result[n.id].bias = elementwise_add(result[n.id].bias, cg.grad_bias);
        accumulate(n.inputs[0], std::move(cg.grad_input));
        break;
      }
      case NodeKind::fc: {
        FcGrads fg = fc_backward(gout, g.params.at(n.id), cache);
        result[n.id].weights = elementwise_add(result[n.id].weights,
                                               fg.grad_weights);
        result[n.id].bias = elementwise_add(result[n.id].bias, fg.grad_bias);
        accumulate(n.inputs[0], std::move(fg.grad_input));
        break;
      }
      case NodeKind::relu:
        accumulate(n.inputs[0], relu_backward(gout, cache));
        break;
      case NodeKind::maxpool:
        accumulate(n.inputs[0], maxpool_backward(gout, cache));
        break;
      case NodeKind::avgpool:
        accumulate(n.inputs[0], avgpool_backward(gout, cache));
        break;
      case NodeKind::dropout:
        accumulate(n.inputs[0], dropout_backward(gout, cache));
        break;
      case NodeKind::flatten:
        cache.consume_backward(gout, "flatten");
        accumulate(n.inputs[0], reshape(gout, cache.input.shape));
        break;
      case NodeKind::add:
        cache.consume_backward(gout, "add");
        accumulate(n.inputs[0], gout);
        accumulate(n.inputs[1], gout);
        break;
      case NodeKind::softmax:
        cache.consume_backward(gout, "softmax");
        accumulate(n.inputs[0], gout);
        break;
    }
  }
  return result;
}

} // namespace rcnds

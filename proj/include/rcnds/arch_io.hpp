#pragma once

#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "json.hpp"

#include "rcnds/error.hpp"
#include "rcnds/graph.hpp"

namespace rcnds {

// Architecture files are plain JSON so a residual rewrite can be read and
// diffed by eye: one entry per node with id / kind / geometry / inputs /
// branch, plus the head list.
inline void save_arch(const NetworkGraph& g, std::ostream& os) {
  nlohmann::json j;
  j["format"] = "rcnds-arch-v1";
  j["input"] = {g.input_shape[0], g.input_shape[1], g.input_shape[2]};
  j["classes"] = g.classes;
  j["post_add_relu"] = g.post_add_relu;
  j["nodes"] = nlohmann::json::array();
  for (const auto& n : g.nodes) {
    nlohmann::json jn;
    jn["id"] = n.id;
    jn["kind"] = kind_name(n.kind);
    jn["inputs"] = n.inputs;
    jn["branch"] = n.branch;
    nlohmann::json geom;
    switch (n.kind) {
      case NodeKind::conv:
        geom["kernel"] = n.geom.kernel;
        geom["stride"] = n.geom.stride;
        geom["pad"] = n.geom.pad;
        geom["in_channels"] = n.geom.in_channels;
        geom["out_channels"] = n.geom.out_channels;
        break;
      case NodeKind::maxpool:
      case NodeKind::avgpool:
        geom["kernel"] = n.geom.kernel;
        geom["stride"] = n.geom.stride;
        break;
      case NodeKind::dropout:
        geom["rate"] = n.geom.rate;
        break;
      case NodeKind::fc:
        geom["in"] = n.geom.in_dim;
        geom["out"] = n.geom.out_dim;
        break;
      default:
        break;
    }
    if (!geom.empty()) {
      jn["geometry"] = geom;
    }
    j["nodes"].push_back(jn);
  }
  j["heads"] = nlohmann::json::array();
  for (const auto& h : g.heads) {
    j["heads"].push_back({{"node", h.node}, {"branch", h.branch}});
  }
  os << j.dump(2) << "\n";
  if (!os) {
    throw IoError("save_arch: stream failure");
  }
}

inline NetworkGraph load_arch(std::istream& is) {
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("load_arch: malformed JSON: ") + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != "rcnds-arch-v1") {
      throw ConfigError("load_arch: unknown format tag");
    }
    NetworkGraph g;
    const auto in = j.at("input");
    g.input_shape = {in.at(0).get<std::size_t>(),
                     in.at(1).get<std::size_t>(),
                     in.at(2).get<std::size_t>()};
    g.classes = j.at("classes").get<std::size_t>();
    g.post_add_relu = j.value("post_add_relu", false);
    for (const auto& jn : j.at("nodes")) {
      LayerNode n;
      n.id = jn.at("id").get<std::string>();
      n.kind = kind_from_name(jn.at("kind").get<std::string>());
      n.inputs = jn.at("inputs").get<std::vector<std::string>>();
      n.branch = jn.at("branch").get<std::string>();
      if (jn.contains("geometry")) {
        const auto& geom = jn["geometry"];
        n.geom.kernel = geom.value("kernel", std::size_t{0});
        n.geom.stride = geom.value("stride", std::size_t{0});
        n.geom.pad = geom.value("pad", std::size_t{0});
        n.geom.in_channels = geom.value("in_channels", std::size_t{0});
        n.geom.out_channels = geom.value("out_channels", std::size_t{0});
        n.geom.in_dim = geom.value("in", std::size_t{0});
        n.geom.out_dim = geom.value("out", std::size_t{0});
        n.geom.rate = geom.value("rate", 0.0);
      }
      g.nodes.push_back(std::move(n));
    }
    for (const auto& jh : j.at("heads")) {
      g.heads.push_back({jh.at("node").get<std::string>(),
                         jh.at("branch").get<std::string>()});
    }
    try {
      g.validate_structure();
    } catch (const StateError& e) {
      throw ConfigError(std::string("load_arch: ") + e.what());
    }
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("load_arch: missing or bad field: ") +
                      e.what());
  }
}

inline void save_arch_file(const NetworkGraph& g,
                           const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) {
    throw IoError("save_arch_file: cannot open " + path.string());
  }
  save_arch(g, os);
}

inline NetworkGraph load_arch_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) {
    throw IoError("load_arch_file: cannot open " + path.string());
  }
  return load_arch(is);
}

} // namespace rcnds

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "json.hpp"

#include "rcnds/error.hpp"
#include "rcnds/layers.hpp"
#include "rcnds/tensor_io.hpp"

namespace rcnds {

// Everything needed to continue a run exactly where it stopped: completed
// epoch count, the running auxiliary weight (the recursive schedule is
// stateful), parameters and optimizer velocities per node, the root seed
// (all RNG streams are derived from it statelessly) and a hash of the
// resolved config so a checkpoint cannot silently resume under different
// hyperparameters.
struct Checkpoint {
  int epoch = 0; // epochs completed
  double alpha = 0.0;
  std::string config_hash;
  std::uint64_t seed = 0;
  int best_epoch = -1;
  double best_val_top1 = -1.0;
  std::map<std::string, LayerParams> params;
  std::map<std::string, LayerParams> velocity;
};

// Container layout:
//   8 bytes  magic "RCNDSCK1"
//   u64 LE   manifest length
//   bytes    JSON manifest (epoch, config hash, name -> blob offset)
//   bytes    concatenated tensor blobs, offsets relative to this section
inline constexpr char kCheckpointMagic[8] = {'R', 'C', 'N', 'D',
                                             'S', 'C', 'K', '1'};

inline void save_checkpoint(const std::filesystem::path& path,
                            const Checkpoint& ck) {
  std::ostringstream blobs(std::ios::binary);
  nlohmann::json entries = nlohmann::json::array();
  auto add = [&](const std::string& name, const Tensor& t) {
    entries.push_back({{"name", name},
                       {"offset", static_cast<std::uint64_t>(
                                      blobs.tellp())}});
    write_tensor(blobs, t);
  };
  for (const auto& [id, p] : ck.params) {
    add(id + ".w", p.weights);
    add(id + ".b", p.bias);
  }
  for (const auto& [id, v] : ck.velocity) {
    add(id + ".vw", v.weights);
    add(id + ".vb", v.bias);
  }

  nlohmann::json manifest;
  manifest["epoch"] = ck.epoch;
  manifest["alpha"] = ck.alpha;
  manifest["config_hash"] = ck.config_hash;
  manifest["seed"] = ck.seed;
  manifest["best_epoch"] = ck.best_epoch;
  manifest["best_val_top1"] = ck.best_val_top1;
  manifest["entries"] = entries;
  const std::string mtext = manifest.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw IoError("save_checkpoint: cannot open " + path.string());
  }
  os.write(kCheckpointMagic, 8);
  std::uint64_t len = mtext.size();
  unsigned char lb[8];
  for (int i = 0; i < 8; ++i) lb[i] = static_cast<unsigned char>(len >> (8 * i));
  os.write(reinterpret_cast<const char*>(lb), 8);
  os << mtext;
  const std::string blob = blobs.str();
  os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!os) {
    throw IoError("save_checkpoint: write failure on " + path.string());
  }
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw IoError("load_checkpoint: cannot open " + path.string());
  }
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw IoError("load_checkpoint: bad magic in " + path.string());
  }
  unsigned char lb[8];
  is.read(reinterpret_cast<char*>(lb), 8);
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(lb[i]) << (8 * i);
  std::string mtext(len, '\0');
  is.read(mtext.data(), static_cast<std::streamsize>(len));
  if (!is) {
    throw IoError("load_checkpoint: truncated manifest");
  }
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mtext);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("load_checkpoint: bad manifest: ") + e.what());
  }

  Checkpoint ck;
  ck.epoch = manifest.at("epoch").get<int>();
  ck.alpha = manifest.at("alpha").get<double>();
  ck.config_hash = manifest.at("config_hash").get<std::string>();
  ck.seed = manifest.at("seed").get<std::uint64_t>();
  ck.best_epoch = manifest.at("best_epoch").get<int>();
  ck.best_val_top1 = manifest.at("best_val_top1").get<double>();

  const std::streampos blob_start = is.tellg();
  for (const auto& e : manifest.at("entries")) {
    const std::string name = e.at("name").get<std::string>();
    const auto offset = e.at("offset").get<std::uint64_t>();
    is.seekg(blob_start + static_cast<std::streamoff>(offset));
    Tensor t = read_tensor(is);
    const auto dot = name.rfind('.');
    const std::string id = name.substr(0, dot);
    const std::string field = name.substr(dot + 1);
    if (field == "w") {
      ck.params[id].weights = std::move(t);
    } else if (field == "b") {
      ck.params[id].bias = std::move(t);
    } else if (field == "vw") {
      ck.velocity[id].weights = std::move(t);
    } else if (field == "vb") {
      ck.velocity[id].bias = std::move(t);
    } else {
      throw IoError("load_checkpoint: unknown entry '" + name + "'");
    }
  }
  return ck;
}

} // namespace rcnds

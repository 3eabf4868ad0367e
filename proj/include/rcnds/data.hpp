#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "rcnds/error.hpp"
#include "rcnds/rng.hpp"
#include "rcnds/tensor.hpp"
#include "rcnds/tensor_io.hpp"

namespace rcnds {

struct DatasetRecord {
  std::string file; // relative to the manifest's directory
  int label = 0;
};

// Index of one dataset split. Images are pre-decoded [3,H,W] tensor blobs
// so the core never needs an image codec; a converter from common formats
// is ordinary repo tooling, not part of the pipeline.
struct DatasetManifest {
  std::filesystem::path root; // directory holding the manifest
  std::string split;
  std::vector<std::string> classes;
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  bool has_mean = false;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<DatasetRecord> records;

  int num_classes() const { return static_cast<int>(classes.size()); }
};

inline Tensor load_image(const DatasetManifest& m, const DatasetRecord& rec) {
  Tensor t = load_tensor(m.root / rec.file);
  if (t.rank() != 3 || t.shape[0] != 3 || t.shape[1] != m.height ||
      t.shape[2] != m.width) {
    throw ConfigError("image '" + rec.file + "' decodes to " +
                      Tensor::shape_str(t.shape) + ", manifest declares [3," +
                      std::to_string(m.height) + "," +
                      std::to_string(m.width) + "]");
  }
  return t;
}

// Per-channel scalar means over every image in the manifest.
inline std::array<double, 3> compute_channel_means(const DatasetManifest& m) {
  std::array<double, 3> acc{0.0, 0.0, 0.0};
  std::size_t per_channel = 0;
  for (const auto& rec : m.records) {
    Tensor img = load_image(m, rec);
    const std::size_t plane = m.height * m.width;
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t i = 0; i < plane; ++i) {
        acc[c] += img.values[c * plane + i];
      }
    }
    per_channel += plane;
  }
  if (per_channel == 0) {
    throw ConfigError("compute_channel_means: empty manifest");
  }
  for (auto& v : acc) {
    v /= static_cast<double>(per_channel);
  }
  return acc;
}

inline void save_manifest(const DatasetManifest& m,
                          const std::filesystem::path& path) {
  nlohmann::json j;
  j["split"] = m.split;
  j["classes"] = m.classes;
  j["height"] = m.height;
  j["width"] = m.width;
  if (m.has_mean) {
    j["mean"] = {m.mean[0], m.mean[1], m.mean[2]};
  }
  j["records"] = nlohmann::json::array();
  for (const auto& r : m.records) {
    j["records"].push_back({{"file", r.file}, {"label", r.label}});
  }
  std::ofstream os(path);
  if (!os) {
    throw IoError("save_manifest: cannot open " + path.string());
  }
  os << j.dump(2) << "\n";
}

// Parses and validates a manifest: labels in range, every referenced file
// present with the declared geometry. When the per-channel means are
// missing they are computed over this split's records and written back,
// so a freshly generated training split becomes self-describing. Eval
// splits should carry the training means rather than their own.
inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) {
    throw IoError("load_manifest: cannot open " + path.string());
  }
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("load_manifest: malformed JSON in " + path.string() +
                      ": " + e.what());
  }
  DatasetManifest m;
  m.root = path.parent_path();
  try {
    m.split = j.value("split", std::string("train"));
    m.classes = j.at("classes").get<std::vector<std::string>>();
    m.height = j.at("height").get<std::size_t>();
    m.width = j.at("width").get<std::size_t>();
    if (j.contains("mean")) {
      const auto& jm = j["mean"];
      m.mean = {jm.at(0).get<double>(), jm.at(1).get<double>(),
                jm.at(2).get<double>()};
      m.has_mean = true;
    }
    for (const auto& jr : j.at("records")) {
      m.records.push_back({jr.at("file").get<std::string>(),
                           jr.at("label").get<int>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("load_manifest: missing or bad field in " +
                      path.string() + ": " + e.what());
  }
  if (m.classes.size() < 2) {
    throw ConfigError("load_manifest: need at least 2 classes");
  }
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto& rec = m.records[i];
    if (rec.label < 0 || rec.label >= m.num_classes()) {
      throw ConfigError("load_manifest: record " + std::to_string(i) + " ('" +
                        rec.file + "') has label " +
                        std::to_string(rec.label) + ", class count is " +
                        std::to_string(m.num_classes()));
    }
    if (!std::filesystem::exists(m.root / rec.file)) {
      throw ConfigError("load_manifest: record " + std::to_string(i) +
                        " references missing file '" + rec.file + "'");
    }
  }
  if (!m.has_mean) {
    m.mean = compute_channel_means(m);
    m.has_mean = true;
    save_manifest(m, path);
  }
  return m;
}

// The only preprocessing: subtract each channel's training mean. No
// rescaling, and deliberately not idempotent; applying it twice shifts by
// the mean twice.
inline Tensor preprocess(const Tensor& image, const DatasetManifest& m) {
  if (image.rank() != 3 || image.shape[0] != 3) {
    throw ConfigError("preprocess: image must be [3,H,W]");
  }
  Tensor out = image;
  const std::size_t plane = image.shape[1] * image.shape[2];
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      out.values[c * plane + i] -= m.mean[c];
    }
  }
  return out;
}

inline Tensor crop(const Tensor& t, std::size_t row, std::size_t col,
                   std::size_t c) {
  const std::size_t ch = t.shape[0], h = t.shape[1], w = t.shape[2];
  if (c > h || c > w) {
    throw ValueError("crop: size " + std::to_string(c) +
                     " exceeds image " + Tensor::shape_str(t.shape));
  }
  if (row + c > h || col + c > w) {
    throw ValueError("crop: origin out of bounds");
  }
  Tensor out = zeros({ch, c, c});
  for (std::size_t k = 0; k < ch; ++k) {
    for (std::size_t y = 0; y < c; ++y) {
      for (std::size_t x = 0; x < c; ++x) {
        out.values[(k * c + y) * c + x] =
            t.values[(k * h + row + y) * w + col + x];
      }
    }
  }
  return out;
}

// Mirror along the horizontal axis (reverses columns). An involution.
inline Tensor hflip(const Tensor& t) {
  const std::size_t ch = t.shape[0], h = t.shape[1], w = t.shape[2];
  Tensor out = t;
  for (std::size_t k = 0; k < ch; ++k) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        out.values[(k * h + y) * w + x] =
            t.values[(k * h + y) * w + (w - 1 - x)];
      }
    }
  }
  return out;
}

// Training augmentation: crop of size c at a uniformly random in-bounds
// origin, then a fair-coin horizontal reflection. Both draws come from the
// seeded stream, crop first.
inline Tensor augment_train(const Tensor& t, std::size_t c,
                            std::uint64_t seed) {
  const std::size_t h = t.shape[1], w = t.shape[2];
  if (c > h || c > w) {
    throw ValueError("augment_train: crop " + std::to_string(c) +
                     " exceeds image " + Tensor::shape_str(t.shape));
  }
  Rng rng(seed);
  const std::size_t row = rng.uniform_index(h - c + 1);
  const std::size_t col = rng.uniform_index(w - c + 1);
  Tensor out = crop(t, row, col, c);
  if (rng.uniform() < 0.5) {
    out = hflip(out);
  }
  return out;
}

inline Tensor center_crop(const Tensor& t, std::size_t c) {
  const std::size_t h = t.shape[1], w = t.shape[2];
  if (c > h || c > w) {
    throw ValueError("center_crop: crop " + std::to_string(c) +
                     " exceeds image " + Tensor::shape_str(t.shape));
  }
  return crop(t, (h - c) / 2, (w - c) / 2, c);
}

// The fixed evaluation enumeration: four corners and the center, then the
// horizontal mirror of each, in that order (TL, TR, BL, BR, C, mirrors
// likewise). Pure function of (tensor, c).
inline std::vector<Tensor> ten_crop(const Tensor& t, std::size_t c) {
  const std::size_t h = t.shape[1], w = t.shape[2];
  if (c > h || c > w) {
    throw ValueError("ten_crop: crop " + std::to_string(c) +
                     " exceeds image " + Tensor::shape_str(t.shape));
  }
  std::vector<Tensor> crops;
  crops.reserve(10);
  crops.push_back(crop(t, 0, 0, c));
  crops.push_back(crop(t, 0, w - c, c));
  crops.push_back(crop(t, h - c, 0, c));
  crops.push_back(crop(t, h - c, w - c, c));
  crops.push_back(crop(t, (h - c) / 2, (w - c) / 2, c));
  for (std::size_t i = 0; i < 5; ++i) {
    crops.push_back(hflip(crops[i]));
  }
  return crops;
}

} // namespace rcnds

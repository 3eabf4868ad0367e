#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "rcnds/data.hpp"
#include "rcnds/rng.hpp"
#include "rcnds/tensor.hpp"
#include "rcnds/tensor_io.hpp"

namespace rcnds {

struct SynthOptions {
  std::size_t train_count = 600;
  std::size_t test_count = 300;
  std::size_t height = 40;
  std::size_t width = 40;
  std::uint64_t seed = 0;
};

namespace detail {

// Three texture families that survive random crops and horizontal
// reflection: horizontal stripes, vertical stripes, and a checker field.
// Random phase, per-image gain jitter and pixel noise keep single pixels
// uninformative.
inline Tensor synth_image(int label, Rng& rng, std::size_t h, std::size_t w) {
  constexpr double period = 8.0;
  constexpr double two_pi = 6.283185307179586476925286766559;
  const double phase_r = rng.uniform() * period;
  const double phase_c = rng.uniform() * period;
  const double gain = 45.0 + 20.0 * rng.uniform();

  Tensor img = zeros({3, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double v = 0.0;
      const double ry = two_pi * (static_cast<double>(y) + phase_r) / period;
      const double rx = two_pi * (static_cast<double>(x) + phase_c) / period;
      if (label == 0) {
        v = std::sin(ry);
      } else if (label == 1) {
        v = std::sin(rx);
      } else {
        v = std::sin(ry) * std::sin(rx) * 1.41421356237;
      }
      const double base = 128.0 + gain * v;
      for (std::size_t c = 0; c < 3; ++c) {
        const double noisy = base + rng.normal(0.0, 12.0);
        img.values[(c * h + y) * w + x] = std::clamp(noisy, 0.0, 255.0);
      }
    }
  }
  return img;
}

inline DatasetManifest synth_split(const std::filesystem::path& dir,
                                   const std::string& split,
                                   std::size_t count, std::uint64_t seed,
                                   std::size_t h, std::size_t w) {
  std::filesystem::create_directories(dir / "imgs");
  DatasetManifest m;
  m.root = dir;
  m.split = split;
  m.classes = {"h_stripes", "v_stripes", "checker"};
  m.height = h;
  m.width = w;
  Rng rng(seed);
  char name[32];
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % 3);
    Tensor img = synth_image(label, rng, h, w);
    std::snprintf(name, sizeof(name), "imgs/%05zu.tnsr", i);
    save_tensor(dir / name, img);
    m.records.push_back({name, label});
  }
  return m;
}

} // namespace detail

// Writes a self-contained 3-class dataset under root/{train,test}, images
// in the tensor blob format, manifests in JSON. The training split's
// channel means are stamped into both manifests, mirroring the usual
// protocol of normalizing eval data with training statistics.
inline void generate_synthetic_dataset(const std::filesystem::path& root,
                                       const SynthOptions& opt) {
  DatasetManifest train = detail::synth_split(
      root / "train", "train", opt.train_count,
      derive_seed(opt.seed, "synth-train"), opt.height, opt.width);
  DatasetManifest test = detail::synth_split(
      root / "test", "test", opt.test_count,
      derive_seed(opt.seed, "synth-test"), opt.height, opt.width);
  train.mean = compute_channel_means(train);
  train.has_mean = true;
  test.mean = train.mean;
  test.has_mean = true;
  save_manifest(train, root / "train" / "manifest.json");
  save_manifest(test, root / "test" / "manifest.json");
}

} // namespace rcnds

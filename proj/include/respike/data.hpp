#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "respike/keyres.hpp"
#include "respike/tensor.hpp"

namespace respike {

/// Moving-shape clips whose label is the motion pattern. Classes 0..7 are
/// translations at k*45 degrees; 8 and 9 (when requested) are expansion and
/// contraction in place. Shape kind, size, start position, speed, colour,
/// polarity and background clutter are drawn independently of the label.
struct SyntheticSpec {
  std::size_t num_classes = 8;
  std::size_t train_per_class = 25;
  std::size_t test_per_class = 10;
  std::size_t frames = 16;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 3;
  double noise = 0.02;
  double clutter = 0.05;
  double min_speed = 1.5, max_speed = 2.5;
  double min_size = 6.0, max_size = 10.0;
  bool mixed_polarity = false;  // shapes brighter or darker than the background
  // Shape pixels flicker between 0.5 +/- colour offset, redrawn every frame,
  // so a single residual frame does not tell the key-frame imprint from the
  // current position.
  bool dynamic_texture = false;
  // Appearance pools shared by all clips and drawn from `seed`: clips pick a
  // background texture, a colour and a size from these, so no clip has a
  // unique look.
  std::size_t backgrounds = 2;
  std::size_t colours = 2;
  std::size_t sizes = 2;
  std::uint64_t seed = 7;

  void validate() const;
  nlohmann::json to_json() const;
  static SyntheticSpec from_json(const nlohmann::json& j);
};

/// Pixel values are snapped to multiples of 2^-16 so frame differences are
/// exact in both precisions.
inline constexpr double kPixelQuantum = 1.0 / 65536.0;

std::uint64_t splitmix64(std::uint64_t x);
/// Seed of clip `index` in the global clip order; independent of generation order.
std::uint64_t clip_seed(std::uint64_t master, std::uint64_t index);

/// One clip [frames, channels, height, width] in [0,1].
template <class T>
Tensor<T> generate_clip(const SyntheticSpec& spec, int label, std::uint64_t seed);

struct ManifestEntry {
  std::string path;  // relative to the dataset directory
  int label = 0;
  std::size_t frames = 0, height = 0, width = 0, channels = 0;
  std::string split;  // train, val or test
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  nlohmann::json spec;  // generator parameters, informational
  std::size_t num_classes = 0;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
};

/// Writes clips/*.rspk and manifest.json under `dir`; returns the manifest.
DatasetManifest generate_synthetic(const SyntheticSpec& spec, const std::string& dir);

DatasetManifest read_manifest(const std::string& dir);
void write_manifest(const DatasetManifest& m, const std::string& dir);

template <class T>
Tensor<T> read_clip(const std::string& path);
template <class T>
void write_clip(const Tensor<T>& clip, const std::string& path);

/// Clips of one split held in memory.
template <class T>
struct Dataset {
  std::vector<Clip<T>> clips;
  std::size_t num_classes = 0;

  std::size_t size() const { return clips.size(); }
  /// Stacks clips[indices] into [b, T, c, h, w] plus their labels.
  Tensor<T> batch(const std::vector<std::size_t>& indices, std::vector<int>* labels) const;
};

/// Loads every entry of `split`, checking each file header against the manifest.
template <class T>
Dataset<T> load_split(const std::string& dir, const std::string& split);

}  // namespace respike

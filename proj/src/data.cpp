#include "respike/data.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <set>

#include "respike/errors.hpp"
#include "respike/rspk_io.hpp"

namespace respike {

namespace fs = std::filesystem;

void SyntheticSpec::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("synthetic spec: " + m); };
  if (num_classes < 2 || num_classes > 10) fail("num_classes must be in [2,10]");
  if (train_per_class + test_per_class == 0) fail("no clips requested");
  if (frames < 2) fail("frames must be >= 2");
  if (height < 8 || width < 8) fail("frames must be at least 8x8");
  if (channels != 1 && channels != 3) fail("channels must be 1 or 3");
  if (noise < 0 || clutter < 0 || clutter > 0.2) fail("noise >= 0 and clutter in [0,0.2] required");
  if (min_speed < 0 || max_speed < min_speed) fail("bad speed range");
  if (min_size < 1 || max_size < min_size) fail("bad size range");
  if (backgrounds == 0 || colours == 0 || sizes == 0) fail("appearance pools must be non-empty");
}

nlohmann::json SyntheticSpec::to_json() const {
  return {{"num_classes", num_classes}, {"train_per_class", train_per_class},
          {"test_per_class", test_per_class}, {"frames", frames},
          {"height", height}, {"width", width},
          {"channels", channels}, {"noise", noise},
          {"clutter", clutter}, {"min_speed", min_speed},
          {"max_speed", max_speed}, {"min_size", min_size},
          {"max_size", max_size}, {"mixed_polarity", mixed_polarity},
          {"dynamic_texture", dynamic_texture},
          {"backgrounds", backgrounds}, {"colours", colours},
          {"sizes", sizes}, {"seed", seed}};
}

SyntheticSpec SyntheticSpec::from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  const nlohmann::json defaults = s.to_json();
  for (const auto& [key, _] : j.items()) {
    if (!defaults.contains(key)) throw std::invalid_argument("synthetic spec: unknown key '" + key + "'");
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("num_classes", s.num_classes);
    get("train_per_class", s.train_per_class);
    get("test_per_class", s.test_per_class);
    get("frames", s.frames);
    get("height", s.height);
    get("width", s.width);
    get("channels", s.channels);
    get("noise", s.noise);
    get("clutter", s.clutter);
    get("min_speed", s.min_speed);
    get("max_speed", s.max_speed);
    get("min_size", s.min_size);
    get("max_size", s.max_size);
    get("mixed_polarity", s.mixed_polarity);
    get("dynamic_texture", s.dynamic_texture);
    get("backgrounds", s.backgrounds);
    get("colours", s.colours);
    get("sizes", s.sizes);
    get("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("synthetic spec: ") + e.what());
  }
  return s;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t clip_seed(std::uint64_t master, std::uint64_t index) {
  return splitmix64(splitmix64(master) ^ (index * 0xD1B54A32D192ED03ull));
}

namespace {

enum class ShapeKind { square, disk, diamond };

// Signed offset from c to p on a ring of length n, in [-n/2, n/2).
double wrap(double p, double c, double n) {
  double d = std::fmod(p - c, n);
  if (d < -n / 2) d += n;
  if (d >= n / 2) d -= n;
  return d;
}

bool inside(ShapeKind kind, double dx, double dy, double radius) {
  switch (kind) {
    case ShapeKind::square: return std::abs(dx) <= radius && std::abs(dy) <= radius;
    case ShapeKind::disk: return dx * dx + dy * dy <= radius * radius;
    case ShapeKind::diamond: return std::abs(dx) + std::abs(dy) <= radius;
  }
  return false;
}

double quantize(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return std::round(v / kPixelQuantum) * kPixelQuantum;
}

}  // namespace

template <class T>
Tensor<T> generate_clip(const SyntheticSpec& spec, int label, std::uint64_t seed) {
  spec.validate();
  if (label < 0 || static_cast<std::size_t>(label) >= spec.num_classes) {
    throw std::invalid_argument("generate_clip: label " + std::to_string(label) + " out of range");
  }
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const std::size_t t_n = spec.frames, c_n = spec.channels, h = spec.height, w = spec.width;

  // Shared pools come from the master seed only.
  std::mt19937_64 pool_rng(splitmix64(spec.seed ^ 0xA5A5A5A5A5A5A5A5ull));
  const std::size_t bh = (h + 3) / 4, bw = (w + 3) / 4;
  std::vector<double> textures(spec.backgrounds * c_n * bh * bw);
  for (auto& b : textures) b = 0.5 + spec.clutter * (2 * u01(pool_rng) - 1);
  std::vector<double> palette(spec.colours * c_n);
  for (auto& c : palette) c = 0.25 + 0.2 * u01(pool_rng);

  std::mt19937_64 rng(seed);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  const auto kind = static_cast<ShapeKind>(rng() % 3);
  const std::size_t size_idx = rng() % spec.sizes;
  const double size = spec.sizes == 1 ? spec.min_size
                                      : spec.min_size + (spec.max_size - spec.min_size) *
                                                            static_cast<double>(size_idx) /
                                                            static_cast<double>(spec.sizes - 1);
  const double* texture = textures.data() + (rng() % spec.backgrounds) * c_n * bh * bw;
  const double* delta = palette.data() + (rng() % spec.colours) * c_n;
  const double cx0 = uniform(0, static_cast<double>(w));
  const double cy0 = uniform(0, static_cast<double>(h));
  const double speed = uniform(spec.min_speed, spec.max_speed);
  const bool flip = rng() & 1;
  const double polarity = spec.mixed_polarity && flip ? -1.0 : 1.0;
  std::vector<double> colour(c_n);
  for (std::size_t c = 0; c < c_n; ++c) colour[c] = 0.5 + polarity * delta[c];

  double vx = 0, vy = 0, growth = 0, radius0 = size / 2;
  if (label < 8) {
    const double theta = label * std::numbers::pi / 4;
    vx = speed * std::cos(theta);
    vy = -speed * std::sin(theta);
  } else {
    // Expansion (8) or contraction (9) about a fixed centre.
    const double span = 0.4 * speed * static_cast<double>(t_n - 1);
    growth = (label == 8 ? 1.0 : -1.0) * 0.4 * speed;
    radius0 = label == 8 ? uniform(1.5, 3.0) : uniform(1.5, 3.0) + span;
  }

  std::normal_distribution<double> noise(0.0, spec.noise);
  std::vector<T> out(t_n * c_n * h * w);
  for (std::size_t t = 0; t < t_n; ++t) {
    const double cx = cx0 + vx * static_cast<double>(t);
    const double cy = cy0 + vy * static_cast<double>(t);
    const double radius = radius0 + growth * static_cast<double>(t);
    for (std::size_t y = 0; y < h; ++y) {
      const double dy = wrap(static_cast<double>(y) + 0.5, cy, static_cast<double>(h));
      for (std::size_t x = 0; x < w; ++x) {
        const double dx = wrap(static_cast<double>(x) + 0.5, cx, static_cast<double>(w));
        const bool on = inside(kind, dx, dy, radius);
        const double sign = on && spec.dynamic_texture && (rng() & 1) ? -1.0 : 1.0;
        for (std::size_t c = 0; c < c_n; ++c) {
          double v = on ? 0.5 + sign * (colour[c] - 0.5) : texture[(c * bh + y / 4) * bw + x / 4];
          if (spec.noise > 0) v += noise(rng);
          out[((t * c_n + c) * h + y) * w + x] = static_cast<T>(quantize(v));
        }
      }
    }
  }
  return Tensor<T>({t_n, c_n, h, w}, std::move(out));
}

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json clips = nlohmann::json::array();
  for (const auto& e : entries) {
    clips.push_back({{"path", e.path}, {"label", e.label}, {"frames", e.frames},
                     {"height", e.height}, {"width", e.width}, {"channels", e.channels},
                     {"split", e.split}});
  }
  return {{"format", "respike-dataset"}, {"version", 1}, {"num_classes", num_classes},
          {"spec", spec}, {"clips", clips}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  DatasetManifest m;
  try {
    if (j.value("format", "") != "respike-dataset") throw FormatError("not a dataset manifest");
    if (j.at("version").get<int>() != 1) throw FormatError("unsupported manifest version");
    m.num_classes = j.at("num_classes").get<std::size_t>();
    if (j.contains("spec")) m.spec = j.at("spec");
    static const std::set<std::string> splits = {"train", "val", "test"};
    for (const auto& c : j.at("clips")) {
      ManifestEntry e;
      e.path = c.at("path").get<std::string>();
      e.label = c.at("label").get<int>();
      e.frames = c.at("frames").get<std::size_t>();
      e.height = c.at("height").get<std::size_t>();
      e.width = c.at("width").get<std::size_t>();
      e.channels = c.at("channels").get<std::size_t>();
      e.split = c.at("split").get<std::string>();
      if (!splits.count(e.split)) throw FormatError("unknown split '" + e.split + "' for " + e.path);
      if (e.label < 0 || static_cast<std::size_t>(e.label) >= m.num_classes) {
        throw FormatError("label out of range for " + e.path);
      }
      m.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset manifest: ") + e.what());
  }
  return m;
}

void write_manifest(const DatasetManifest& m, const std::string& dir) {
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw IoError("cannot write manifest in " + dir);
  out << m.to_json().dump(2) << '\n';
  if (!out) throw IoError("failed writing manifest in " + dir);
}

DatasetManifest read_manifest(const std::string& dir) {
  const fs::path p = fs::path(dir) / "manifest.json";
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
  return DatasetManifest::from_json(j);
}

DatasetManifest generate_synthetic(const SyntheticSpec& spec, const std::string& dir) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "clips", ec);
  if (ec) throw IoError("cannot create dataset directory " + dir + ": " + ec.message());
  DatasetManifest m;
  m.num_classes = spec.num_classes;
  m.spec = spec.to_json();
  std::uint64_t index = 0;
  for (const std::string split : {"train", "test"}) {
    const std::size_t per_class = split == "train" ? spec.train_per_class : spec.test_per_class;
    for (std::size_t label = 0; label < spec.num_classes; ++label) {
      for (std::size_t i = 0; i < per_class; ++i, ++index) {
        char name[64];
        std::snprintf(name, sizeof name, "clips/%s_%05llu.rspk", split.c_str(),
                      static_cast<unsigned long long>(index));
        Tensor<float> clip = generate_clip<float>(spec, static_cast<int>(label),
                                                  clip_seed(spec.seed, index));
        write_rspk((fs::path(dir) / name).string(), clip);
        m.entries.push_back({name, static_cast<int>(label), spec.frames, spec.height, spec.width,
                             spec.channels, split});
      }
    }
  }
  write_manifest(m, dir);
  return m;
}

template <class T>
Tensor<T> read_clip(const std::string& path) {
  Tensor<T> t = read_rspk<T>(path);
  if (t.dim() != 4) throw FormatError(path + ": clip must be 4-D [T,c,h,w], got " + shape_str(t.shape()));
  return t;
}

template <class T>
void write_clip(const Tensor<T>& clip, const std::string& path) {
  if (clip.dim() != 4) throw ShapeError("write_clip: clip must be [T,c,h,w], got " + shape_str(clip.shape()));
  write_rspk(path, clip);
}

template <class T>
Tensor<T> Dataset<T>::batch(const std::vector<std::size_t>& indices, std::vector<int>* labels) const {
  if (indices.empty()) throw std::invalid_argument("batch: no indices");
  const Shape& first = clips.at(indices[0]).frames.shape();
  const std::size_t per = shape_numel(first);
  std::vector<T> v(indices.size() * per);
  if (labels) labels->clear();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Clip<T>& c = clips.at(indices[i]);
    if (c.frames.shape() != first) {
      throw ShapeError("batch: clip " + std::to_string(indices[i]) + " has shape " +
                       shape_str(c.frames.shape()) + ", expected " + shape_str(first));
    }
    auto d = c.frames.data();
    std::copy(d.begin(), d.end(), v.begin() + i * per);
    if (labels) labels->push_back(c.label);
  }
  Shape s = first;
  s.insert(s.begin(), indices.size());
  return Tensor<T>(std::move(s), std::move(v));
}

template <class T>
Dataset<T> load_split(const std::string& dir, const std::string& split) {
  DatasetManifest m = read_manifest(dir);
  Dataset<T> ds;
  ds.num_classes = m.num_classes;
  for (const auto& e : m.entries) {
    if (e.split != split) continue;
    const std::string path = (fs::path(dir) / e.path).string();
    const RspkHeader hdr = read_rspk_header(path);
    const Shape expect{e.frames, e.channels, e.height, e.width};
    if (hdr.shape != expect) {
      throw FormatError(path + ": header shape " + shape_str(hdr.shape) +
                        " does not match manifest " + shape_str(expect));
    }
    ds.clips.push_back({read_clip<T>(path), e.label});
  }
  if (ds.clips.empty()) throw std::invalid_argument("dataset " + dir + " has no '" + split + "' clips");
  return ds;
}

template Tensor<float> generate_clip<float>(const SyntheticSpec&, int, std::uint64_t);
template Tensor<double> generate_clip<double>(const SyntheticSpec&, int, std::uint64_t);
template Tensor<float> read_clip<float>(const std::string&);
template Tensor<double> read_clip<double>(const std::string&);
template void write_clip<float>(const Tensor<float>&, const std::string&);
template void write_clip<double>(const Tensor<double>&, const std::string&);
template struct Dataset<float>;
template struct Dataset<double>;
template Dataset<float> load_split<float>(const std::string&, const std::string&);
template Dataset<double> load_split<double>(const std::string&, const std::string&);

}  // namespace respike

#include "respike/respike.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <variant>

#include "respike/data.hpp"
#include "respike/energy.hpp"
#include "respike/keyres.hpp"
#include "respike/model.hpp"
#include "respike/rspk_io.hpp"
#include "respike/trainer.hpp"

namespace fs = std::filesystem;
using namespace respike;
using nlohmann::json;

struct rspk_model {
  std::variant<std::unique_ptr<ReSpikeModel<float>>, std::unique_ptr<ReSpikeModel<double>>> m;
};

namespace {

thread_local std::string g_error;

int fail(int code, const std::string& msg) {
  g_error = msg;
  return code;
}

// Maps exceptions escaping the core onto status codes.
template <class F>
int guarded(F&& f) {
  try {
    g_error.clear();
    return f();
  } catch (const NumericError& e) {
    return fail(RSPK_E_NUMERIC, e.what());
  } catch (const ShapeError& e) {
    return fail(RSPK_E_SHAPE, e.what());
  } catch (const FormatError& e) {
    return fail(RSPK_E_FORMAT, e.what());
  } catch (const IoError& e) {
    return fail(RSPK_E_IO, e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(RSPK_E_IO, e.what());
  } catch (const json::exception& e) {
    return fail(RSPK_E_INVALID, std::string("json: ") + e.what());
  } catch (const std::invalid_argument& e) {
    return fail(RSPK_E_INVALID, e.what());
  } catch (const std::out_of_range& e) {
    return fail(RSPK_E_INVALID, e.what());
  } catch (const std::exception& e) {
    return fail(RSPK_E_INTERNAL, e.what());
  } catch (...) {
    return fail(RSPK_E_INTERNAL, "unknown exception");
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void require(const void* p, const char* what) {
  if (!p) throw std::invalid_argument(std::string(what) + " must not be NULL");
}

struct Resolved {
  SyntheticSpec data;
  ReSpikeConfig model;
  TrainConfig train;
};

Resolved resolve(const char* text) {
  json j = text && *text ? json::parse(text) : json::object();
  if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (key != "data" && key != "model" && key != "train") {
      throw std::invalid_argument("config: unknown section '" + key +
                                  "' (expected data, model or train)");
    }
  }
  Resolved r;
  if (j.contains("data")) r.data = SyntheticSpec::from_json(j.at("data"));
  if (j.contains("model")) r.model = ReSpikeConfig::from_json(j.at("model"));
  if (j.contains("train")) r.train = train_config_from_json(j.at("train"));
  r.data.validate();
  r.model.validate();
  r.train.validate();
  return r;
}

bool has_split(const std::string& dir, const std::string& split) {
  for (const auto& e : read_manifest(dir).entries)
    if (e.split == split) return true;
  return false;
}

template <class T>
std::vector<Tensor<T>> sample_clips(const std::string& dir, const std::string& split,
                                    std::size_t max_clips, std::uint64_t seed) {
  Dataset<T> ds = load_split<T>(dir, split);
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  if (max_clips > 0 && order.size() > max_clips) order.resize(max_clips);
  std::sort(order.begin(), order.end());
  std::vector<Tensor<T>> out;
  for (std::size_t i : order) out.push_back(ds.clips[i].frames);
  return out;
}

void fill(rspk_energy* out, const EnergyReport& r) {
  if (!out) return;
  out->flops = r.flops_total;
  out->syops = r.syops_total;
  out->energy_mj = r.energy_mj;
}

void write_ppm(const std::string& path, const std::vector<std::uint8_t>& rgb, std::size_t w,
               std::size_t h) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << "P6\n" << w << ' ' << h << "\n255\n";
  f.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!f) throw IoError("failed writing " + path);
}

template <class T>
void attn_dump(ReSpikeModel<T>& model, const std::string& data_dir, const std::string& split,
               std::size_t clip_index, std::size_t stage, const std::vector<std::size_t>& queries,
               std::size_t top_k, const std::string& out_dir) {
  Dataset<T> ds = load_split<T>(data_dir, split);
  if (clip_index >= ds.size()) {
    throw std::out_of_range("clip index " + std::to_string(clip_index) + " out of range, split '" +
                            split + "' has " + std::to_string(ds.size()) + " clips");
  }
  const Tensor<T>& clip = ds.clips[clip_index].frames;
  const std::size_t c = clip.shape()[1], h = clip.shape()[2], w = clip.shape()[3];
  fs::create_directories(out_dir);
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> file(
      std::fopen((fs::path(out_dir) / "attention.csv").string().c_str(), "w"), &std::fclose);
  if (!file) throw IoError("cannot write " + out_dir + "/attention.csv");
  std::FILE* csv = file.get();
  std::fprintf(csv, "query,rank,token,token_row,token_col,weight\n");
  constexpr std::size_t kScale = 8;
  const std::size_t W = w * kScale, H = h * kScale;
  auto px = clip.data();  // frame 0 is the first key frame
  for (std::size_t q : queries) {
    std::size_t gh = 0, gw = 0;
    const std::vector<double> row = model.attention_row(clip, stage, q, &gh, &gw);
    const auto top = top_k_entries(row, top_k);
    for (std::size_t r = 0; r < top.size(); ++r) {
      std::fprintf(csv, "%zu,%zu,%zu,%zu,%zu,%.9g\n", q, r + 1, top[r].first, top[r].first / gw,
                   top[r].first % gw, top[r].second);
    }
    const double peak = *std::max_element(row.begin(), row.end());
    std::vector<bool> outlined(row.size(), false);
    for (const auto& e : top) outlined[e.first] = true;
    std::vector<std::uint8_t> rgb(W * H * 3);
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t sy = y / kScale, sx = x / kScale;
        const std::size_t ty = y * gh / H, tx = x * gw / W, tok = ty * gw + tx;
        const double a = peak > 0 ? 0.7 * row[tok] / peak : 0.0;
        const std::size_t cy0 = ty * H / gh, cx0 = tx * W / gw;
        const std::size_t cy1 = (ty + 1) * H / gh - 1, cx1 = (tx + 1) * W / gw - 1;
        const bool border = y == cy0 || y == cy1 || x == cx0 || x == cx1;
        for (std::size_t ch = 0; ch < 3; ++ch) {
          double v = static_cast<double>(px[((ch % c) * h + sy) * w + sx]);
          const double heat = ch == 0 ? 1.0 : (ch == 1 ? 0.2 : 0.0);
          v = (1 - a) * v + a * heat;
          if (border && tok == q) v = ch == 1 ? 1.0 : 0.0;  // query token in green
          else if (border && outlined[tok]) v = ch == 2 ? 0.0 : 1.0;  // top-k in yellow
          rgb[(y * W + x) * 3 + ch] =
              static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        }
      }
    }
    char name[64];
    std::snprintf(name, sizeof name, "attn_q%zu.ppm", q);
    write_ppm((fs::path(out_dir) / name).string(), rgb, W, H);
  }
  if (std::fclose(file.release()) != 0) throw IoError("failed writing attention.csv");
}

template <class T>
void write_sparsity(const KeyResSegments<T>& segs, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw IoError("cannot write " + path);
  std::fprintf(f, "segment,residual_frame,nonzero_fraction\n");
  auto r = segs.residuals.data();
  const Shape& s = segs.residuals.shape();
  const std::size_t per = s.size() > 2 ? s[2] * s[3] * s[4] : 0;
  for (std::size_t k = 0; k < segs.segments; ++k) {
    for (std::size_t j = 0; j + 1 < segs.stride; ++j) {
      std::size_t nz = 0;
      const T* p = r.data() + (k * (segs.stride - 1) + j) * per;
      for (std::size_t i = 0; i < per; ++i) nz += p[i] != T(0);
      std::fprintf(f, "%zu,%zu,%.6f\n", k, j + 1, per ? static_cast<double>(nz) / per : 0.0);
    }
  }
  std::fprintf(f, "all,all,%.6f\n", residual_nonzero_fraction(segs));
  if (std::fclose(f) != 0) throw IoError("failed writing " + path);
}

template <class T>
void decompose_file(const std::string& clip_path, std::size_t stride, const std::string& out_dir,
                    rspk_sparsity* stats) {
  Tensor<T> clip = read_rspk<T>(clip_path);
  if (clip.dim() != 4) {
    throw ShapeError(clip_path + ": expected a [T, c, h, w] clip, got " + shape_str(clip.shape()));
  }
  KeyResSegments<T> segs = decompose(clip, stride);
  fs::create_directories(out_dir);
  write_rspk((fs::path(out_dir) / "keys.rspk").string(), segs.keys);
  write_rspk((fs::path(out_dir) / "residuals.rspk").string(), segs.residuals);
  write_sparsity(segs, (fs::path(out_dir) / "sparsity.csv").string());
  if (stats) {
    stats->frames = clip.shape()[0];
    stats->stride = stride;
    stats->segments = segs.segments;
    stats->dropped_frames = clip.shape()[0] - segs.segments * stride;
    stats->nonzero_fraction = residual_nonzero_fraction(segs);
  }
}

rspk_log_fn g_log_fn = nullptr;
void* g_log_user = nullptr;

}  // namespace

extern "C" {

const char* rspk_version(void) { return "0.1.0"; }

const char* rspk_last_error(void) { return g_error.c_str(); }

const char* rspk_status_name(int status) {
  switch (status) {
    case RSPK_OK: return "ok";
    case RSPK_E_INVALID: return "invalid argument";
    case RSPK_E_IO: return "i/o error";
    case RSPK_E_FORMAT: return "format error";
    case RSPK_E_NUMERIC: return "numeric error";
    case RSPK_E_SHAPE: return "shape error";
    case RSPK_E_INTERNAL: return "internal error";
  }
  return "unknown status";
}

void rspk_set_log_callback(rspk_log_fn fn, void* user) {
  g_log_fn = fn;
  g_log_user = user;
  if (fn) set_warning_sink([](const std::string& m) { g_log_fn(m.c_str(), g_log_user); });
  else set_warning_sink(nullptr);
}

void rspk_string_free(char* s) { std::free(s); }

int rspk_resolve_config(const char* text, char** resolved) {
  return guarded([&] {
    require(resolved, "resolved");
    Resolved r = resolve(text);
    json j = {{"data", r.data.to_json()},
              {"model", r.model.to_json()},
              {"train", train_config_to_json(r.train)}};
    *resolved = dup_string(j.dump(2));
    return RSPK_OK;
  });
}

int rspk_gen_data(const char* config_json, const char* out_dir, size_t* clips_written) {
  return guarded([&] {
    require(out_dir, "out_dir");
    DatasetManifest m = generate_synthetic(resolve(config_json).data, out_dir);
    if (clips_written) *clips_written = m.entries.size();
    return RSPK_OK;
  });
}

int rspk_decompose(const char* clip_path, size_t stride, const char* out_dir,
                   rspk_sparsity* stats) {
  return guarded([&] {
    require(clip_path, "clip_path");
    require(out_dir, "out_dir");
    if (read_rspk_header(clip_path).dtype == Precision::f64) {
      decompose_file<double>(clip_path, stride, out_dir, stats);
    } else {
      decompose_file<float>(clip_path, stride, out_dir, stats);
    }
    return RSPK_OK;
  });
}

int rspk_model_create(const char* config_json, const char* data_dir, int precision,
                      rspk_model** out) {
  return guarded([&] {
    require(out, "out");
    *out = nullptr;
    ReSpikeConfig cfg = resolve(config_json).model;
    if (data_dir) {
      const DatasetManifest m = read_manifest(data_dir);
      if (m.entries.empty()) throw std::invalid_argument(std::string("dataset ") + data_dir + " is empty");
      const ManifestEntry& e = m.entries.front();
      cfg.num_classes = m.num_classes;
      cfg.frames = e.frames;
      cfg.channels = e.channels;
      cfg.height = e.height;
      cfg.width = e.width;
      cfg.validate();
    }
    auto h = std::make_unique<rspk_model>();
    if (precision == RSPK_F32) h->m = std::make_unique<ReSpikeModel<float>>(cfg);
    else if (precision == RSPK_F64) h->m = std::make_unique<ReSpikeModel<double>>(cfg);
    else throw std::invalid_argument("precision must be RSPK_F32 or RSPK_F64");
    *out = h.release();
    return RSPK_OK;
  });
}

int rspk_model_load(const char* checkpoint_dir, rspk_model** out) {
  return guarded([&] {
    require(checkpoint_dir, "checkpoint_dir");
    require(out, "out");
    *out = nullptr;
    std::ifstream in(fs::path(checkpoint_dir) / "manifest.json");
    if (!in) throw IoError(std::string("cannot open ") + checkpoint_dir + "/manifest.json");
    json manifest;
    try {
      in >> manifest;
    } catch (const json::exception& e) {
      throw FormatError(std::string(checkpoint_dir) + "/manifest.json: " + e.what());
    }
    auto h = std::make_unique<rspk_model>();
    if (parse_precision(manifest.value("precision", "f32")) == Precision::f64) {
      h->m = ReSpikeModel<double>::load(checkpoint_dir);
    } else {
      h->m = ReSpikeModel<float>::load(checkpoint_dir);
    }
    *out = h.release();
    return RSPK_OK;
  });
}

int rspk_model_save(const rspk_model* model, const char* checkpoint_dir) {
  return guarded([&] {
    require(model, "model");
    require(checkpoint_dir, "checkpoint_dir");
    std::visit([&](const auto& m) { m->save(checkpoint_dir); }, model->m);
    return RSPK_OK;
  });
}

void rspk_model_free(rspk_model* model) { delete model; }

int rspk_model_precision(const rspk_model* model, int* precision) {
  return guarded([&] {
    require(model, "model");
    require(precision, "precision");
    *precision = model->m.index() == 0 ? RSPK_F32 : RSPK_F64;
    return RSPK_OK;
  });
}

int rspk_model_config(const rspk_model* model, char** out) {
  return guarded([&] {
    require(model, "model");
    require(out, "out");
    std::visit([&](const auto& m) { *out = dup_string(m->config().to_json().dump(2)); }, model->m);
    return RSPK_OK;
  });
}

int rspk_model_parameter_count(const rspk_model* model, size_t* count) {
  return guarded([&] {
    require(model, "model");
    require(count, "count");
    std::visit(
        [&](const auto& m) {
          *count = 0;
          for (auto* p : m->parameters()) *count += p->numel();
        },
        model->m);
    return RSPK_OK;
  });
}

int rspk_train(rspk_model* model, const char* config_json, const char* data_dir,
               const char* metrics_csv, rspk_epoch_fn on_epoch, void* user) {
  return guarded([&] {
    require(model, "model");
    require(data_dir, "data_dir");
    const TrainConfig tc = resolve(config_json).train;
    std::visit(
        [&](auto& m) {
          using T = typename std::decay_t<decltype(*m)>::value_type;
          Dataset<T> tr = load_split<T>(data_dir, "train");
          // without a val split the held-out split is reported; it is never
          // used for selection
          const std::string val_split = has_split(data_dir, "val") ? "val" : "test";
          std::unique_ptr<Dataset<T>> val;
          if (has_split(data_dir, val_split)) val = std::make_unique<Dataset<T>>(load_split<T>(data_dir, val_split));
          train(*m, tr, val.get(), tc, metrics_csv ? metrics_csv : "", [&](const EpochMetrics& e) {
            if (on_epoch) on_epoch(e.epoch, e.loss, e.train_acc, e.val_acc, user);
          });
        },
        model->m);
    return RSPK_OK;
  });
}

int rspk_evaluate(rspk_model* model, const char* data_dir, const char* split, rspk_eval* out) {
  return guarded([&] {
    require(model, "model");
    require(data_dir, "data_dir");
    require(split, "split");
    std::visit(
        [&](auto& m) {
          using T = typename std::decay_t<decltype(*m)>::value_type;
          Dataset<T> ds = load_split<T>(data_dir, split);
          EvalResult r = evaluate(*m, ds);
          if (out) {
            out->accuracy = r.accuracy;
            out->loss = r.loss;
            out->clips = ds.size();
          }
        },
        model->m);
    return RSPK_OK;
  });
}

int rspk_profile(rspk_model* model, const char* data_dir, const char* split, size_t max_clips,
                 uint64_t seed, const char* report_json, rspk_energy* out) {
  return guarded([&] {
    require(model, "model");
    require(data_dir, "data_dir");
    require(split, "split");
    std::visit(
        [&](auto& m) {
          using T = typename std::decay_t<decltype(*m)>::value_type;
          EnergyReport r = profile_energy(*m, sample_clips<T>(data_dir, split, max_clips, seed));
          if (report_json) {
            write_energy_json(r, report_json, std::string("measured on ") + data_dir + " (" + split + ")");
          }
          fill(out, r);
        },
        model->m);
    return RSPK_OK;
  });
}

int rspk_table4_rows(char** rows) {
  return guarded([&] {
    require(rows, "rows");
    json j = json::array();
    for (const auto& r : table4_rows()) {
      j.push_back({{"id", r.id},
                   {"label", r.label},
                   {"gflops", r.gflops},
                   {"gsyops", r.gsyops},
                   {"published_mj", r.published_mj}});
    }
    *rows = dup_string(j.dump(2));
    return RSPK_OK;
  });
}

int rspk_table4(const char* row, const char* report_json, rspk_energy* out, double* published_mj) {
  return guarded([&] {
    require(row, "row");
    const Table4Row& t = table4_row(row);
    EnergyReport r = energy_from_counts(t.gflops * 1e9, t.gsyops * 1e9);
    if (report_json) write_energy_json(r, report_json, "published counts: " + t.label);
    fill(out, r);
    if (published_mj) *published_mj = t.published_mj;
    return RSPK_OK;
  });
}

int rspk_energy_summary(const rspk_energy* energy, char** out) {
  return guarded([&] {
    require(energy, "energy");
    require(out, "out");
    EnergyReport r = energy_from_counts(energy->flops, energy->syops);
    *out = dup_string(energy_summary(r));
    return RSPK_OK;
  });
}

int rspk_attn_dump(rspk_model* model, const char* data_dir, const char* split, size_t clip_index,
                   size_t stage, const size_t* queries, size_t n_queries, size_t top_k,
                   const char* out_dir) {
  return guarded([&] {
    require(model, "model");
    require(data_dir, "data_dir");
    require(split, "split");
    require(out_dir, "out_dir");
    if (n_queries == 0) throw std::invalid_argument("attn-dump: no query tokens given");
    require(queries, "queries");
    if (top_k == 0) throw std::invalid_argument("attn-dump: top_k must be >= 1");
    std::vector<std::size_t> q(queries, queries + n_queries);
    std::visit([&](auto& m) { attn_dump(*m, data_dir, split, clip_index, stage, q, top_k, out_dir); },
               model->m);
    return RSPK_OK;
  });
}

}  // extern "C"

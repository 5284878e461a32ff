#include "respike/model.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include "respike/errors.hpp"
#include "respike/keyres.hpp"
#include "respike/rspk_io.hpp"

namespace respike {

namespace fs = std::filesystem;

const char* architecture_name(Architecture a) {
  switch (a) {
    case Architecture::hybrid: return "hybrid";
    case Architecture::hybrid_no_attention: return "no-attn";
    case Architecture::ann_only: return "ann-only";
    case Architecture::snn_only: return "snn-only";
  }
  return "?";
}

Architecture parse_architecture(const std::string& s) {
  if (s == "hybrid") return Architecture::hybrid;
  if (s == "no-attn") return Architecture::hybrid_no_attention;
  if (s == "ann-only") return Architecture::ann_only;
  if (s == "snn-only") return Architecture::snn_only;
  throw std::invalid_argument("unknown architecture '" + s +
                              "' (expected hybrid, ann-only, snn-only or no-attn)");
}

const char* input_mode_name(InputMode m) {
  switch (m) {
    case InputMode::key_res: return "key-res";
    case InputMode::all: return "all";
    case InputMode::key: return "key";
    case InputMode::res: return "res";
  }
  return "?";
}

InputMode parse_input_mode(const std::string& s) {
  if (s == "key-res") return InputMode::key_res;
  if (s == "all") return InputMode::all;
  if (s == "key") return InputMode::key;
  if (s == "res") return InputMode::res;
  throw std::invalid_argument("unknown input mode '" + s + "' (expected key-res, all, key or res)");
}

// --- config -------------------------------------------------------------------

namespace {
std::size_t conv_out(std::size_t in, std::size_t stride) { return (in + 2 - 3) / stride + 1; }
}  // namespace

std::size_t ReSpikeConfig::stage_height(std::size_t i) const {
  std::size_t h = conv_out(height, stem_stride);
  for (std::size_t s = 1; s <= i; ++s) h = conv_out(h, 2);
  return h;
}

std::size_t ReSpikeConfig::stage_width(std::size_t i) const {
  std::size_t w = conv_out(width, stem_stride);
  for (std::size_t s = 1; s <= i; ++s) w = conv_out(w, 2);
  return w;
}

std::size_t ReSpikeConfig::resolved_downsample(std::size_t i) const {
  if (fusion_downsample[i] != 0) return fusion_downsample[i];
  return default_downsample(stage_height(i), stage_width(i));
}

void ReSpikeConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("config: " + m); };
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (stride < 2) fail("stride must be >= 2");
  if (frames < stride) fail("frames must be >= stride");
  if (channels == 0 || height < 3 || width < 3) fail("input size too small");
  if (stem_stride < 1) fail("stem_stride must be >= 1");
  for (std::size_t i = 0; i < kStages; ++i) {
    if (ann_channels[i] == 0 || snn_channels[i] == 0) fail("stage channels must be positive");
    if (blocks[i] == 0) fail("blocks per stage must be positive");
  }
  if (heads == 0 || mlp_ratio == 0) fail("heads and mlp_ratio must be positive");
  lif.validate();
  const bool hybrid = arch == Architecture::hybrid || arch == Architecture::hybrid_no_attention;
  if (hybrid && input != InputMode::key_res && input != InputMode::all) {
    fail(std::string("hybrid models take key-res or all input, not ") + input_mode_name(input));
  }
  if (!hybrid && input == InputMode::key_res) {
    fail(std::string(architecture_name(arch)) + " takes all, key or res input");
  }
  if (uses_fusion()) {
    for (std::size_t i = 0; i < kStages; ++i) {
      if (snn_channels[i] % heads != 0) {
        fail("snn channels of stage " + std::to_string(i + 1) + " not divisible by heads");
      }
      if (ann_channels[i] < snn_channels[i]) {
        fail("stage " + std::to_string(i + 1) + " needs ann channels >= snn channels");
      }
      const std::size_t f = resolved_downsample(i);
      if (stage_height(i) % f != 0 || stage_width(i) % f != 0) {
        fail("fusion downsample " + std::to_string(f) + " does not divide stage " +
             std::to_string(i + 1) + " grid");
      }
    }
  }
}

nlohmann::json ReSpikeConfig::to_json() const {
  return {{"num_classes", num_classes},
          {"frames", frames},
          {"stride", stride},
          {"channels", channels},
          {"height", height},
          {"width", width},
          {"ann_channels", ann_channels},
          {"snn_channels", snn_channels},
          {"blocks", blocks},
          {"fusion_downsample", fusion_downsample},
          {"stem_stride", stem_stride},
          {"heads", heads},
          {"mlp_ratio", mlp_ratio},
          {"lif", {{"tau", lif.tau}, {"v_th", lif.v_th}, {"alpha", lif.alpha}}},
          {"arch", architecture_name(arch)},
          {"input", input_mode_name(input)},
          {"init_seed", init_seed}};
}

ReSpikeConfig ReSpikeConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
  static const std::set<std::string> known = {
      "num_classes", "frames",      "stride",           "channels", "height",
      "width",       "ann_channels", "snn_channels",    "blocks",   "fusion_downsample",
      "stem_stride", "heads",        "mlp_ratio",       "lif",      "arch",
      "input",       "init_seed"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw std::invalid_argument("config: unknown key '" + key + "'");
  }
  ReSpikeConfig c;
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("num_classes", c.num_classes);
    get("frames", c.frames);
    get("stride", c.stride);
    get("channels", c.channels);
    get("height", c.height);
    get("width", c.width);
    get("ann_channels", c.ann_channels);
    get("snn_channels", c.snn_channels);
    get("blocks", c.blocks);
    get("fusion_downsample", c.fusion_downsample);
    get("stem_stride", c.stem_stride);
    get("heads", c.heads);
    get("mlp_ratio", c.mlp_ratio);
    get("init_seed", c.init_seed);
    if (j.contains("lif")) {
      const auto& l = j.at("lif");
      for (const auto& [key, _] : l.items()) {
        if (key != "tau" && key != "v_th" && key != "alpha") {
          throw std::invalid_argument("config: unknown key 'lif." + key + "'");
        }
      }
      if (l.contains("tau")) l.at("tau").get_to(c.lif.tau);
      if (l.contains("v_th")) l.at("v_th").get_to(c.lif.v_th);
      if (l.contains("alpha")) l.at("alpha").get_to(c.lif.alpha);
    }
    if (j.contains("arch")) c.arch = parse_architecture(j.at("arch").get<std::string>());
    if (j.contains("input")) c.input = parse_input_mode(j.at("input").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  return c;
}

// --- blocks ---------------------------------------------------------------------

template <class T>
AnnBlock<T>::AnnBlock(std::string name, std::size_t c_in, std::size_t c_out, std::size_t stride,
                      Rng& rng)
    : Module<T>(name),
      conv1(name + ".conv1", c_in, c_out, 3, stride, 1, rng),
      conv2(name + ".conv2", c_out, c_out, 3, 1, 1, rng),
      bn1(name + ".bn1", c_out),
      bn2(name + ".bn2", c_out) {
  if (stride != 1 || c_in != c_out) {
    down_conv = std::make_unique<Conv2d<T>>(name + ".down", c_in, c_out, 1, stride, 0, rng);
    down_bn = std::make_unique<BatchNorm2d<T>>(name + ".down_bn", c_out);
  }
}

template <class T>
Tensor<T> AnnBlock<T>::forward(const Tensor<T>& x, ForwardContext<T>& ctx) {
  Tensor<T> h = ops::relu(bn1.forward(conv1.forward(x, ctx), ctx));
  Tensor<T> r = bn2.forward(conv2.forward(h, ctx), ctx);
  Tensor<T> shortcut = down_conv ? down_bn->forward(down_conv->forward(x, ctx), ctx) : x;
  return ops::relu(ops::add(shortcut, r));
}

template <class T>
void AnnBlock<T>::collect(std::vector<NamedTensor<T>>& out) {
  conv1.collect(out);
  bn1.collect(out);
  conv2.collect(out);
  bn2.collect(out);
  if (down_conv) {
    down_conv->collect(out);
    down_bn->collect(out);
  }
}

// --- model ----------------------------------------------------------------------

template <class T>
ReSpikeModel<T>::ReSpikeModel(ReSpikeConfig cfg) : Module<T>("respike"), cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(cfg_.init_seed);
  const std::array<std::size_t, kStages> strides{1, 2, 2, 2};
  if (cfg_.uses_ann()) {
    ann_stem = std::make_unique<Conv2d<T>>("ann.stem", cfg_.channels, cfg_.ann_channels[0], 3,
                                           cfg_.stem_stride, 1, rng);
    ann_stem_bn = std::make_unique<BatchNorm2d<T>>("ann.stem_bn", cfg_.ann_channels[0]);
    std::size_t c_in = cfg_.ann_channels[0];
    for (std::size_t i = 0; i < kStages; ++i) {
      ann_stages.emplace_back();
      for (std::size_t b = 0; b < cfg_.blocks[i]; ++b) {
        const std::string name =
            "ann.stage" + std::to_string(i + 1) + ".block" + std::to_string(b);
        ann_stages[i].push_back(std::make_unique<AnnBlock<T>>(
            name, c_in, cfg_.ann_channels[i], b == 0 ? strides[i] : 1, rng));
        c_in = cfg_.ann_channels[i];
      }
    }
  }
  if (cfg_.uses_snn()) {
    snn_stem = std::make_unique<Conv2d<T>>("snn.stem", cfg_.channels, cfg_.snn_channels[0], 3,
                                           cfg_.stem_stride, 1, rng);
    snn_stem_bn = std::make_unique<BatchNorm2d<T>>("snn.stem_bn", cfg_.snn_channels[0]);
    std::size_t c_in = cfg_.snn_channels[0];
    for (std::size_t i = 0; i < kStages; ++i) {
      snn_stages.emplace_back();
      for (std::size_t b = 0; b < cfg_.blocks[i]; ++b) {
        const std::string name =
            "snn.stage" + std::to_string(i + 1) + ".block" + std::to_string(b);
        snn_stages[i].push_back(std::make_unique<MsBlock<T>>(
            name, c_in, cfg_.snn_channels[i], b == 0 ? strides[i] : 1, rng));
        c_in = cfg_.snn_channels[i];
      }
      if (cfg_.uses_fusion()) {
        fusions.push_back(std::make_unique<FusionBlock<T>>(
            "fusion" + std::to_string(i + 1), cfg_.snn_channels[i], cfg_.ann_channels[i],
            cfg_.heads, cfg_.resolved_downsample(i), cfg_.mlp_ratio, rng));
      }
    }
  }
  std::size_t feat = 0;
  if (cfg_.uses_ann()) feat += cfg_.ann_channels[kStages - 1];
  if (cfg_.uses_snn()) feat += cfg_.snn_channels[kStages - 1];
  fc = std::make_unique<Linear<T>>("head.fc", feat, cfg_.num_classes, rng);
}

template <class T>
PreparedInput<T> ReSpikeModel<T>::prepare(const Tensor<T>& clips) const {
  if (clips.dim() != 5) {
    throw ShapeError("model input must be [b,T,c,h,w], got " + shape_str(clips.shape()));
  }
  const std::size_t b = clips.shape()[0], t_total = clips.shape()[1];
  const std::size_t c = clips.shape()[2], h = clips.shape()[3], w = clips.shape()[4];
  if (c != cfg_.channels) throw ShapeError("model input: channel dimension 2 is " + std::to_string(c) + ", expected " + std::to_string(cfg_.channels));
  if (h != cfg_.height) throw ShapeError("model input: height dimension 3 is " + std::to_string(h) + ", expected " + std::to_string(cfg_.height));
  if (w != cfg_.width) throw ShapeError("model input: width dimension 4 is " + std::to_string(w) + ", expected " + std::to_string(cfg_.width));
  const std::size_t s = cfg_.stride;
  if (t_total < s) {
    throw std::invalid_argument("clip has " + std::to_string(t_total) + " frames, fewer than stride " +
                                std::to_string(s));
  }
  const std::size_t n = t_total / s;
  if (n * s != t_total) {
    emit_warning("T=" + std::to_string(t_total) + " is not a multiple of s=" + std::to_string(s) +
                 "; dropping " + std::to_string(t_total - n * s) + " trailing frame(s)");
  }
  const std::size_t fsize = c * h * w;
  auto x = clips.data();
  auto frame = [&](std::size_t clip, std::size_t t) { return x.data() + (clip * t_total + t) * fsize; };
  auto put = [&](std::vector<T>& dst, std::size_t slot, const T* src) {
    std::copy(src, src + fsize, dst.begin() + slot * fsize);
  };
  auto put_res = [&](std::vector<T>& dst, std::size_t slot, const T* f, const T* key) {
    T* out = dst.data() + slot * fsize;
    for (std::size_t i = 0; i < fsize; ++i) out[i] = f[i] - key[i];
  };

  PreparedInput<T> in;
  auto make = [&](std::vector<T>&& v, std::size_t count) {
    return Tensor<T>({count, c, h, w}, std::move(v));
  };
  const bool hybrid = cfg_.arch == Architecture::hybrid ||
                      cfg_.arch == Architecture::hybrid_no_attention;
  if (hybrid) {
    in.units_per_clip = n;
    in.units = b * n;
    in.timesteps = cfg_.input == InputMode::all ? s : s - 1;
    std::vector<T> keys(in.units * fsize), seq(in.timesteps * in.units * fsize);
    for (std::size_t ci = 0; ci < b; ++ci) {
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t u = ci * n + k;
        const T* key = frame(ci, k * s);
        put(keys, u, key);
        for (std::size_t t = 0; t < in.timesteps; ++t) {
          if (cfg_.input == InputMode::all) put(seq, t * in.units + u, frame(ci, k * s + t));
          else put_res(seq, t * in.units + u, frame(ci, k * s + t + 1), key);
        }
      }
    }
    in.ann = make(std::move(keys), in.units);
    in.snn = make(std::move(seq), in.timesteps * in.units);
  } else if (cfg_.arch == Architecture::ann_only) {
    in.timesteps = 1;
    std::vector<T> v;
    if (cfg_.input == InputMode::key) {
      in.units_per_clip = n;
      v.resize(b * n * fsize);
      for (std::size_t ci = 0; ci < b; ++ci)
        for (std::size_t k = 0; k < n; ++k) put(v, ci * n + k, frame(ci, k * s));
    } else if (cfg_.input == InputMode::res) {
      in.units_per_clip = n * (s - 1);
      v.resize(b * in.units_per_clip * fsize);
      for (std::size_t ci = 0; ci < b; ++ci)
        for (std::size_t k = 0; k < n; ++k)
          for (std::size_t j = 1; j < s; ++j)
            put_res(v, ci * in.units_per_clip + k * (s - 1) + j - 1, frame(ci, k * s + j),
                    frame(ci, k * s));
    } else {
      in.units_per_clip = n * s;
      v.resize(b * n * s * fsize);
      for (std::size_t ci = 0; ci < b; ++ci)
        for (std::size_t t = 0; t < n * s; ++t) put(v, ci * n * s + t, frame(ci, t));
    }
    in.units = b * in.units_per_clip;
    in.ann = make(std::move(v), in.units);
  } else {
    std::vector<T> v;
    if (cfg_.input == InputMode::key) {
      in.units_per_clip = 1;
      in.units = b;
      in.timesteps = n;
      v.resize(n * b * fsize);
      for (std::size_t ci = 0; ci < b; ++ci)
        for (std::size_t k = 0; k < n; ++k) put(v, k * b + ci, frame(ci, k * s));
    } else {
      in.units_per_clip = n;
      in.units = b * n;
      in.timesteps = cfg_.input == InputMode::all ? s : s - 1;
      v.resize(in.timesteps * in.units * fsize);
      for (std::size_t ci = 0; ci < b; ++ci)
        for (std::size_t k = 0; k < n; ++k)
          for (std::size_t t = 0; t < in.timesteps; ++t) {
            const std::size_t slot = t * in.units + ci * n + k;
            if (cfg_.input == InputMode::all) put(v, slot, frame(ci, k * s + t));
            else put_res(v, slot, frame(ci, k * s + t + 1), frame(ci, k * s));
          }
    }
    in.snn = make(std::move(v), in.timesteps * in.units);
  }
  return in;
}

template <class T>
std::vector<Tensor<T>> ReSpikeModel<T>::ann_forward(const Tensor<T>& keys, ForwardContext<T>& ctx) {
  if (!ann_stem) throw std::logic_error("model has no ANN branch");
  std::vector<Tensor<T>> outs;
  Tensor<T> x = ops::relu(ann_stem_bn->forward(ann_stem->forward(keys, ctx), ctx));
  for (auto& stage : ann_stages) {
    for (auto& block : stage) x = block->forward(x, ctx);
    outs.push_back(x);
  }
  return outs;
}

template <class T>
Tensor<T> ReSpikeModel<T>::snn_forward(const Tensor<T>& seq, std::size_t timesteps,
                                       const std::vector<Tensor<T>>& ann_feats,
                                       ForwardContext<T>& ctx) {
  if (!snn_stem) throw std::logic_error("model has no SNN branch");
  if (!fusions.empty() && ann_feats.size() != kStages) {
    throw std::invalid_argument("snn branch: fusion needs " + std::to_string(kStages) +
                                " ANN stage outputs, got " + std::to_string(ann_feats.size()));
  }
  Tensor<T> x = snn_stem_bn->forward(snn_stem->forward(seq, ctx), ctx);
  for (std::size_t i = 0; i < snn_stages.size(); ++i) {
    for (auto& block : snn_stages[i]) x = block->forward(x, timesteps, cfg_.lif, ctx);
    if (!fusions.empty()) {
      x = fusions[i]->forward(x, ann_feats[i], timesteps, ctx,
                              capture_attention ? &last_cross_weights[i] : nullptr);
    }
  }
  return x;
}

template <class T>
Tensor<T> ReSpikeModel<T>::head(const Tensor<T>& f_a, const Tensor<T>& f_s, std::size_t timesteps,
                                ForwardContext<T>& ctx) {
  Tensor<T> s_mean;
  if (f_s.defined()) {
    const Shape& sh = f_s.shape();
    if (sh[0] % timesteps != 0) throw ShapeError("head: F_S batch not a multiple of timesteps");
    Tensor<T> r = ops::reshape(f_s, {timesteps, sh[0] / timesteps, sh[1], sh[2], sh[3]});
    s_mean = ops::mean_axis(r, 0);
  }
  Tensor<T> fused;
  if (f_a.defined() && s_mean.defined()) fused = ops::concat(f_a, s_mean, 1);
  else fused = f_a.defined() ? f_a : s_mean;
  if (fused.shape()[1] != fc->weight.shape()[1]) {
    throw ShapeError("head: channel dimension 1 is " + std::to_string(fused.shape()[1]) +
                     ", classifier expects " + std::to_string(fc->weight.shape()[1]));
  }
  return fc->forward(ops::global_avg_pool(fused), ctx);
}

template <class T>
Tensor<T> ReSpikeModel<T>::average_units(const Tensor<T>& unit_logits, std::size_t clips) {
  const std::size_t units = unit_logits.shape()[0], k = unit_logits.shape()[1];
  if (units % clips != 0) throw ShapeError("unit logits not divisible among clips");
  return ops::mean_axis(ops::reshape(unit_logits, {clips, units / clips, k}), 1);
}

template <class T>
Tensor<T> ReSpikeModel<T>::forward_units(const PreparedInput<T>& in, ForwardContext<T>& ctx) {
  std::vector<Tensor<T>> a;
  Tensor<T> f_a, f_s;
  if (cfg_.uses_ann()) {
    a = ann_forward(in.ann, ctx);
    f_a = a.back();
  }
  if (cfg_.uses_snn()) f_s = snn_forward(in.snn, in.timesteps, a, ctx);
  return head(f_a, f_s, in.timesteps, ctx);
}

template <class T>
Tensor<T> ReSpikeModel<T>::forward(const Tensor<T>& clips, ForwardContext<T>& ctx) {
  PreparedInput<T> in = prepare(clips);
  if (ctx.costs) ctx.costs->set_clips(clips.shape()[0]);
  return average_units(forward_units(in, ctx), clips.shape()[0]);
}

template <class T>
void ReSpikeModel<T>::collect(std::vector<NamedTensor<T>>& out) {
  if (ann_stem) {
    ann_stem->collect(out);
    ann_stem_bn->collect(out);
    for (auto& stage : ann_stages)
      for (auto& b : stage) b->collect(out);
  }
  if (snn_stem) {
    snn_stem->collect(out);
    snn_stem_bn->collect(out);
    for (std::size_t i = 0; i < snn_stages.size(); ++i) {
      for (auto& b : snn_stages[i]) b->collect(out);
      if (!fusions.empty()) fusions[i]->collect(out);
    }
  }
  fc->collect(out);
}

template <class T>
std::size_t ReSpikeModel<T>::copy_matching_from(ReSpikeModel& other) {
  std::map<std::string, Tensor<T>*> src;
  for (auto& nt : other.named_tensors()) src[nt.name] = nt.tensor;
  std::size_t copied = 0;
  for (auto& nt : this->named_tensors()) {
    auto it = src.find(nt.name);
    if (it == src.end() || it->second->shape() != nt.tensor->shape()) continue;
    auto from = it->second->data();
    std::copy(from.begin(), from.end(), nt.tensor->data().begin());
    ++copied;
  }
  return copied;
}

template <class T>
std::vector<double> ReSpikeModel<T>::attention_row(const Tensor<T>& clip, std::size_t stage,
                                                   std::size_t query_index, std::size_t* grid_h,
                                                   std::size_t* grid_w) {
  if (!cfg_.uses_fusion()) {
    throw std::invalid_argument(std::string("attention maps need a fused model, this one is '") +
                                architecture_name(cfg_.arch) + "'");
  }
  if (stage >= kStages) {
    throw std::out_of_range("fusion stage " + std::to_string(stage) + " out of range [0," +
                            std::to_string(kStages) + ")");
  }
  NoGradGuard no_grad;
  Shape s = clip.shape();
  s.insert(s.begin(), 1);
  ForwardContext<T> ctx;
  capture_attention = true;
  try {
    forward(clip.alias(s), ctx);
  } catch (...) {
    capture_attention = false;
    throw;
  }
  capture_attention = false;
  const std::size_t ds = cfg_.resolved_downsample(stage);
  if (grid_h) *grid_h = cfg_.stage_height(stage) / ds;
  if (grid_w) *grid_w = cfg_.stage_width(stage) / ds;
  return head_averaged_row(last_cross_weights[stage], cfg_.heads, query_index);
}

template <class T>
void ReSpikeModel<T>::save(const std::string& dir) const {
  auto* self = const_cast<ReSpikeModel*>(this);
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "tensors", ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir + ": " + ec.message());
  nlohmann::json manifest;
  manifest["format"] = "respike-checkpoint";
  manifest["version"] = 1;
  manifest["precision"] = precision_name(precision_of<T>());
  manifest["config"] = cfg_.to_json();
  nlohmann::json list = nlohmann::json::array();
  for (auto& nt : self->named_tensors()) {
    const std::string file = "tensors/" + nt.name + ".rspk";
    write_rspk((fs::path(dir) / file).string(), *nt.tensor);
    list.push_back({{"name", nt.name}, {"shape", nt.tensor->shape()}, {"file", file}});
  }
  manifest["tensors"] = std::move(list);
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw IoError("cannot write manifest in " + dir);
  out << manifest.dump(2) << '\n';
}

template <class T>
std::unique_ptr<ReSpikeModel<T>> ReSpikeModel<T>::load(const std::string& dir) {
  const fs::path mpath = fs::path(dir) / "manifest.json";
  std::ifstream in(mpath);
  if (!in) throw IoError("cannot open " + mpath.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(mpath.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "respike-checkpoint") {
    throw FormatError(mpath.string() + ": not a checkpoint manifest");
  }
  auto model = std::make_unique<ReSpikeModel<T>>(ReSpikeConfig::from_json(manifest.at("config")));
  std::map<std::string, nlohmann::json> entries;
  for (const auto& e : manifest.at("tensors")) entries[e.at("name").get<std::string>()] = e;
  for (auto& nt : model->named_tensors()) {
    auto it = entries.find(nt.name);
    if (it == entries.end()) throw FormatError(mpath.string() + ": missing tensor " + nt.name);
    const std::string file = it->second.at("file").template get<std::string>();
    Tensor<T> t = read_rspk<T>((fs::path(dir) / file).string());
    if (t.shape() != nt.tensor->shape()) {
      throw FormatError(nt.name + ": checkpoint shape " + shape_str(t.shape()) +
                        " does not match model shape " + shape_str(nt.tensor->shape()));
    }
    auto src = t.data();
    std::copy(src.begin(), src.end(), nt.tensor->data().begin());
  }
  return model;
}

template <class T>
EnergyReport profile_energy(ReSpikeModel<T>& model, const std::vector<Tensor<T>>& clips,
                            SpikeRateRecorder* rates_out) {
  if (clips.empty()) throw std::invalid_argument("profile: no clips");
  NoGradGuard no_grad;
  CostLog log;
  SpikeRateRecorder rates;
  for (const auto& clip : clips) {
    Shape s = clip.shape();
    s.insert(s.begin(), 1);
    ForwardContext<T> ctx;
    ctx.costs = &log;
    ctx.spikes = &rates;
    model.forward(clip.alias(s), ctx);
  }
  std::vector<LayerCostSpec> specs = log.specs();
  for (auto& spec : specs) {
    if (spec.branch == Branch::snn) spec.spike_rate = rates.rate(spec.spike_source);
  }
  if (rates_out) *rates_out = rates;
  return model_energy(specs);
}

template class AnnBlock<float>;
template class AnnBlock<double>;
template class ReSpikeModel<float>;
template class ReSpikeModel<double>;
template EnergyReport profile_energy<float>(ReSpikeModel<float>&, const std::vector<Tensor<float>>&,
                                            SpikeRateRecorder*);
template EnergyReport profile_energy<double>(ReSpikeModel<double>&,
                                             const std::vector<Tensor<double>>&, SpikeRateRecorder*);

}  // namespace respike

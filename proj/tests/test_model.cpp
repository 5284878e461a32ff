#include <gtest/gtest.h>

#include "respike/errors.hpp"
#include "respike/model.hpp"
#include "support.hpp"

using namespace respike;
using testsupport::Gen;

namespace {

ReSpikeConfig small_config(Architecture arch = Architecture::hybrid,
                           InputMode input = InputMode::key_res) {
  ReSpikeConfig cfg;
  cfg.height = cfg.width = 16;
  cfg.frames = 8;
  cfg.stride = 4;
  cfg.ann_channels = {4, 8, 8, 8};
  cfg.snn_channels = {4, 8, 8, 8};
  cfg.heads = 2;
  cfg.num_classes = 5;
  cfg.arch = arch;
  cfg.input = input;
  return cfg;
}

Tensor<double> clips(const ReSpikeConfig& cfg, std::size_t b, std::uint64_t seed) {
  Gen g(seed);
  return g.tensor<double>({b, cfg.frames, cfg.channels, cfg.height, cfg.width}, 0, 1);
}

// Training moves BN statistics off their identity initialisation; do the
// same so eval-mode checks exercise them.
void scramble_buffers(ReSpikeModel<double>& m, std::uint64_t seed) {
  Gen g(seed);
  for (auto& nt : m.named_tensors()) {
    if (nt.trainable) continue;
    const bool var = nt.name.find("var") != std::string::npos;
    for (auto& v : nt.tensor->data()) v = var ? g.uniform(0.5, 1.5) : g.uniform(-0.2, 0.2);
  }
}

Tensor<double> rows(const Tensor<double>& x, const std::vector<std::size_t>& idx) {
  Shape s = x.shape();
  const std::size_t per = x.numel() / s[0];
  s[0] = idx.size();
  Tensor<double> out(s);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(x.data().begin() + idx[i] * per, per, out.data().begin() + i * per);
  return out;
}

}  // namespace

TEST(Config, JsonRoundTrip) {
  ReSpikeConfig cfg = small_config(Architecture::snn_only, InputMode::res);
  cfg.lif.tau = 0.25;
  cfg.fusion_downsample = {2, 1, 1, 1};
  cfg.init_seed = 77;
  ReSpikeConfig back = ReSpikeConfig::from_json(cfg.to_json());
  EXPECT_EQ(back.to_json(), cfg.to_json());
  EXPECT_EQ(back.arch, Architecture::snn_only);
  EXPECT_EQ(back.lif.tau, 0.25);
}

TEST(Config, UnknownKeysAreRejected) {
  nlohmann::json j = ReSpikeConfig{}.to_json();
  j["chanels"] = 3;
  EXPECT_THROW(ReSpikeConfig::from_json(j), std::invalid_argument);
  j = ReSpikeConfig{}.to_json();
  j["lif"]["threshold"] = 1.0;
  EXPECT_THROW(ReSpikeConfig::from_json(j), std::invalid_argument);
  EXPECT_EQ(ReSpikeConfig::from_json(nlohmann::json::object()).to_json(), ReSpikeConfig{}.to_json());
}

TEST(Config, ValidationNamesTheProblem) {
  auto bad = [](auto edit) {
    ReSpikeConfig cfg = small_config();
    edit(cfg);
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
  };
  bad([](ReSpikeConfig& c) { c.stride = 1; });
  bad([](ReSpikeConfig& c) { c.frames = 3; });
  bad([](ReSpikeConfig& c) { c.num_classes = 1; });
  bad([](ReSpikeConfig& c) { c.input = InputMode::res; });
  bad([](ReSpikeConfig& c) { c.arch = Architecture::ann_only; });  // with key-res
  bad([](ReSpikeConfig& c) { c.heads = 3; });
  bad([](ReSpikeConfig& c) { c.fusion_downsample = {3, 0, 0, 0}; });
  bad([](ReSpikeConfig& c) { c.lif.v_th = 0; });
  EXPECT_NO_THROW(small_config().validate());
  EXPECT_NO_THROW(small_config(Architecture::ann_only, InputMode::all).validate());
}

TEST(Model, StageSizesHalveFromTheStem) {
  ReSpikeConfig cfg;  // 32x32, stem stride 2
  for (std::size_t i = 0; i < kStages; ++i) {
    EXPECT_EQ(cfg.stage_height(i), 32u >> (i + 1));
    EXPECT_EQ(cfg.stage_width(i), 32u >> (i + 1));
  }
  ReSpikeModel<float> m(cfg);
  ForwardContext<float> ctx;
  auto outs = m.ann_forward(Tensor<float>({2, 3, 32, 32}, 0.5f), ctx);
  ASSERT_EQ(outs.size(), kStages);
  for (std::size_t i = 0; i < kStages; ++i)
    EXPECT_EQ(outs[i].shape(), (Shape{2, cfg.ann_channels[i], 32u >> (i + 1), 32u >> (i + 1)}));
}

TEST(Model, PreparedShapesPerArchitecture) {
  struct Row {
    Architecture arch;
    InputMode input;
    std::size_t units_per_clip, timesteps;
    bool ann, snn;
  };
  // T = 8, s = 4: two segments, three residual frames each
  const std::vector<Row> table{
      {Architecture::hybrid, InputMode::key_res, 2, 3, true, true},
      {Architecture::hybrid, InputMode::all, 2, 4, true, true},
      {Architecture::hybrid_no_attention, InputMode::key_res, 2, 3, true, true},
      {Architecture::ann_only, InputMode::key, 2, 1, true, false},
      {Architecture::ann_only, InputMode::res, 6, 1, true, false},
      {Architecture::ann_only, InputMode::all, 8, 1, true, false},
      {Architecture::snn_only, InputMode::key, 1, 2, false, true},
      {Architecture::snn_only, InputMode::res, 2, 3, false, true},
      {Architecture::snn_only, InputMode::all, 2, 4, false, true},
  };
  for (const Row& r : table) {
    ReSpikeConfig cfg = small_config(r.arch, r.input);
    ReSpikeModel<double> m(cfg);
    PreparedInput<double> in = m.prepare(clips(cfg, 3, 1));
    SCOPED_TRACE(std::string(architecture_name(r.arch)) + "/" + input_mode_name(r.input));
    EXPECT_EQ(in.units_per_clip, r.units_per_clip);
    EXPECT_EQ(in.units, 3 * r.units_per_clip);
    EXPECT_EQ(in.timesteps, r.timesteps);
    EXPECT_EQ(in.ann.defined(), r.ann);
    EXPECT_EQ(in.snn.defined(), r.snn);
    if (r.snn) {
      EXPECT_EQ(in.snn.shape()[0], in.timesteps * in.units);
    }
    ForwardContext<double> ctx;
    EXPECT_EQ(m.forward(clips(cfg, 3, 1), ctx).shape(), (Shape{3, cfg.num_classes}));
  }
}

TEST(Model, PreparedResidualsAreFrameMinusKey) {
  ReSpikeConfig cfg = small_config();
  ReSpikeModel<double> m(cfg);
  Tensor<double> x = clips(cfg, 2, 2);
  PreparedInput<double> in = m.prepare(x);
  const std::size_t fs = cfg.channels * cfg.height * cfg.width, t = cfg.frames;
  // clip 1, segment 1, residual 2 (frame 7 - frame 4); unit 3, time-major
  const std::size_t unit = 1 * 2 + 1, slot = 2 * in.units + unit;
  for (std::size_t i = 0; i < fs; ++i) {
    ASSERT_EQ(in.snn[slot * fs + i], x[(1 * t + 7) * fs + i] - x[(1 * t + 4) * fs + i]);
    ASSERT_EQ(in.ann[unit * fs + i], x[(1 * t + 4) * fs + i]);
  }
}

TEST(Model, IdenticalClipsGiveIdenticalLogits) {
  ReSpikeConfig cfg = small_config();
  ReSpikeModel<double> m(cfg);
  Tensor<double> x = clips(cfg, 3, 3);
  const std::size_t per = x.numel() / 3;
  std::copy_n(x.data().begin(), per, x.data().begin() + 2 * per);
  ForwardContext<double> ctx;
  Tensor<double> y = m.forward(x, ctx);
  // GEMM tiling depends on a row's position in the batch, so equality holds
  // to rounding rather than bitwise
  for (std::size_t k = 0; k < cfg.num_classes; ++k)
    EXPECT_NEAR(y[k], y[2 * cfg.num_classes + k], 1e-12 * std::max(1.0, std::abs(y[k])));
}

TEST(Model, BatchPermutationPermutesAnnFeatures) {
  ReSpikeConfig cfg = small_config();
  ReSpikeModel<double> m(cfg);
  scramble_buffers(m, 4);
  Gen g(4);
  auto keys = g.tensor<double>({4, 3, 16, 16}, 0, 1);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  ForwardContext<double> ctx;
  auto a = m.ann_forward(keys, ctx).back();
  auto b = m.ann_forward(rows(keys, perm), ctx).back();
  Tensor<double> expect = rows(a, perm);
  for (std::size_t i = 0; i < b.numel(); ++i) ASSERT_NEAR(b[i], expect[i], 1e-12);
}

TEST(Model, ZeroInputAndZeroParamsGiveZeroFeatures) {
  ReSpikeConfig cfg = small_config();
  ReSpikeModel<double> m(cfg);
  for (auto& nt : m.named_tensors())
    if (nt.name.rfind("ann", 0) == 0 && nt.name.find("var") == std::string::npos)
      std::fill(nt.tensor->data().begin(), nt.tensor->data().end(), 0.0);
  ForwardContext<double> ctx;
  for (const auto& f : m.ann_forward(Tensor<double>({2, 3, 16, 16}), ctx))
    for (double v : f.data()) ASSERT_EQ(v, 0.0);
}

// forward() must equal running the pieces by hand.
TEST(Model, ForwardMatchesStagedExecution) {
  for (Architecture arch : {Architecture::hybrid, Architecture::hybrid_no_attention}) {
    ReSpikeConfig cfg = small_config(arch);
    ReSpikeModel<double> m(cfg);
    scramble_buffers(m, 5);
    Tensor<double> x = clips(cfg, 2, 5);
    ForwardContext<double> ctx;
    Tensor<double> y = m.forward(x, ctx);

    PreparedInput<double> in = m.prepare(x);
    auto stages = m.ann_forward(in.ann, ctx);
    Tensor<double> f_s = m.snn_forward(in.snn, in.timesteps, stages, ctx);
    ASSERT_EQ(f_s.shape()[0], in.timesteps * in.units);
    Tensor<double> unit_logits = m.head(stages.back(), f_s, in.timesteps, ctx);
    const std::size_t k = cfg.num_classes;
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t j = 0; j < k; ++j) {
        double mean = 0;
        for (std::size_t u = 0; u < in.units_per_clip; ++u)
          mean += unit_logits[(c * in.units_per_clip + u) * k + j];
        ASSERT_NEAR(y[c * k + j], mean / in.units_per_clip, 1e-12);
      }
  }
}

// Folding segments into the batch equals running each segment alone and
// averaging its logits (eval-mode BN keeps units independent).
TEST(Model, SegmentFoldMatchesSegmentLoop) {
  ReSpikeConfig cfg = small_config();
  ReSpikeModel<double> m(cfg);
  scramble_buffers(m, 6);
  const std::size_t b = 3, n = cfg.segments();
  Tensor<double> x = clips(cfg, b, 6);
  ForwardContext<double> ctx;
  Tensor<double> folded = m.forward(x, ctx);
  PreparedInput<double> all = m.prepare(x);
  std::vector<double> acc(folded.numel(), 0.0);
  for (std::size_t seg = 0; seg < n; ++seg) {
    std::vector<std::size_t> ann_rows, snn_rows;
    for (std::size_t c = 0; c < b; ++c) ann_rows.push_back(c * n + seg);
    for (std::size_t t = 0; t < all.timesteps; ++t)
      for (std::size_t c = 0; c < b; ++c) snn_rows.push_back(t * all.units + c * n + seg);
    PreparedInput<double> one{rows(all.ann, ann_rows), rows(all.snn, snn_rows), b, 1,
                              all.timesteps};
    Tensor<double> y = m.forward_units(one, ctx);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += y[i] / n;
  }
  for (std::size_t i = 0; i < acc.size(); ++i) EXPECT_NEAR(folded[i], acc[i], 1e-5);
}

TEST(Model, HeadMatchesHandComputation) {
  ReSpikeConfig cfg = small_config();
  ReSpikeModel<double> m(cfg);
  Gen g(7);
  for (auto* p : {&m.fc->weight, &m.fc->bias})
    for (auto& v : p->data()) v = g.uniform(-1, 1);
  const std::size_t c = cfg.ann_channels[3], d = cfg.snn_channels[3], t = 3, b = 2, hw = 4;
  auto f_a = g.tensor<double>({b, c, 2, 2}), f_s = g.tensor<double>({t * b, d, 2, 2});
  ForwardContext<double> ctx;
  Tensor<double> y = m.head(f_a, f_s, t, ctx);
  ASSERT_EQ(y.shape(), (Shape{b, cfg.num_classes}));
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<double> feat;
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0;
      for (std::size_t p = 0; p < hw; ++p) s += f_a[(i * c + ch) * hw + p];
      feat.push_back(s / hw);
    }
    for (std::size_t ch = 0; ch < d; ++ch) {
      double s = 0;
      for (std::size_t step = 0; step < t; ++step)
        for (std::size_t p = 0; p < hw; ++p) s += f_s[((step * b + i) * d + ch) * hw + p];
      feat.push_back(s / (hw * t));
    }
    for (std::size_t k = 0; k < cfg.num_classes; ++k) {
      double z = m.fc->bias[k];
      for (std::size_t j = 0; j < c + d; ++j) z += m.fc->weight[k * (c + d) + j] * feat[j];
      EXPECT_NEAR(y[i * cfg.num_classes + k], z, 1e-12);
    }
  }
  EXPECT_THROW(m.head(f_a, g.tensor<double>({t * b, d + 1, 2, 2}), t, ctx), ShapeError);
}

// Zeroing the classifier columns that read F_S leaves exactly an ANN-only
// model on the key frames.
TEST(Model, ZeroedSnnHeadEqualsAnnOnlyModel) {
  ReSpikeConfig hcfg = small_config();
  ReSpikeModel<double> hybrid(hcfg);
  scramble_buffers(hybrid, 8);
  ReSpikeModel<double> ann(small_config(Architecture::ann_only, InputMode::key));
  ann.copy_matching_from(hybrid);
  const std::size_t c = hcfg.ann_channels[3], d = hcfg.snn_channels[3], k = hcfg.num_classes;
  for (std::size_t r = 0; r < k; ++r) {
    for (std::size_t j = 0; j < c; ++j) ann.fc->weight.data()[r * c + j] = hybrid.fc->weight[r * (c + d) + j];
    for (std::size_t j = c; j < c + d; ++j) hybrid.fc->weight.data()[r * (c + d) + j] = 0;
    ann.fc->bias.data()[r] = hybrid.fc->bias[r];
  }
  Tensor<double> x = clips(hcfg, 2, 8);
  ForwardContext<double> ctx;
  Tensor<double> a = hybrid.forward(x, ctx), b = ann.forward(x, ctx);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Model, CheckpointRoundTrip) {
  ReSpikeConfig cfg = small_config();
  ReSpikeModel<float> m(cfg);
  Gen g(9);
  for (auto& nt : m.named_tensors())
    for (auto& v : nt.tensor->data()) v += static_cast<float>(g.uniform(-0.01, 0.01));
  const auto dir = testsupport::temp_dir("ckpt");
  m.save(dir.string());
  auto back = ReSpikeModel<float>::load(dir.string());
  EXPECT_EQ(back->config().to_json(), cfg.to_json());
  auto a = m.named_tensors(), b = back->named_tensors();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a[i].name, b[i].name);
    for (std::size_t j = 0; j < a[i].tensor->numel(); ++j)
      ASSERT_EQ((*a[i].tensor)[j], (*b[i].tensor)[j]) << a[i].name;
  }
  // a 32-bit checkpoint widens to 64 bits; the reverse is refused
  EXPECT_NO_THROW(ReSpikeModel<double>::load(dir.string()));
  ReSpikeModel<double> wide(cfg);
  const auto dir64 = testsupport::temp_dir("ckpt64");
  wide.save(dir64.string());
  EXPECT_THROW(ReSpikeModel<float>::load(dir64.string()), FormatError);
  EXPECT_THROW(ReSpikeModel<float>::load((dir / "missing").string()), IoError);
}

TEST(Model, CopyMatchingSkipsShapeMismatches) {
  ReSpikeModel<double> hybrid(small_config());
  ReSpikeModel<double> ann(small_config(Architecture::ann_only, InputMode::key));
  std::size_t ann_tensors = 0;
  for (auto& nt : ann.named_tensors())
    if (nt.name != "head.fc.weight") ++ann_tensors;
  EXPECT_EQ(ann.copy_matching_from(hybrid), ann_tensors);
}

TEST(Model, RejectsWrongInputShapes) {
  ReSpikeConfig cfg = small_config();
  ReSpikeModel<double> m(cfg);
  ForwardContext<double> ctx;
  EXPECT_THROW(m.forward(Tensor<double>({1, 8, 3, 8, 16}), ctx), ShapeError);
  EXPECT_THROW(m.forward(Tensor<double>({1, 8, 1, 16, 16}), ctx), ShapeError);
  EXPECT_THROW(m.forward(Tensor<double>({8, 3, 16, 16}), ctx), ShapeError);
  EXPECT_THROW(m.forward(Tensor<double>({1, 3, 3, 16, 16}), ctx), std::invalid_argument);
}

TEST(Model, AttentionRowNeedsFusion) {
  ReSpikeConfig cfg = small_config(Architecture::hybrid_no_attention);
  ReSpikeModel<double> m(cfg);
  EXPECT_THROW(m.attention_row(clips(cfg, 1, 1).alias({8, 3, 16, 16}), 3, 0), std::invalid_argument);
  ReSpikeModel<double> f(small_config());
  std::size_t gh = 0, gw = 0;
  auto row = f.attention_row(clips(cfg, 1, 1).alias({8, 3, 16, 16}), 0, 0, &gh, &gw);
  EXPECT_EQ(row.size(), gh * gw);
  EXPECT_THROW(f.attention_row(clips(cfg, 1, 1).alias({8, 3, 16, 16}), 4, 0), std::out_of_range);
}

#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "respike/energy.hpp"
#include "respike/fusion.hpp"
#include "respike/nn.hpp"
#include "respike/spiking.hpp"

namespace respike {

enum class Architecture { hybrid, hybrid_no_attention, ann_only, snn_only };
/// key_res: keys to the ANN, residuals to the SNN. For single-branch models
/// key / res / all select the frames fed to that branch.
enum class InputMode { key_res, all, key, res };

const char* architecture_name(Architecture a);
Architecture parse_architecture(const std::string& s);
const char* input_mode_name(InputMode m);
InputMode parse_input_mode(const std::string& s);

inline constexpr std::size_t kStages = 4;

struct ReSpikeConfig {
  std::size_t num_classes = 8;
  std::size_t frames = 16;
  std::size_t stride = 4;
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::array<std::size_t, kStages> ann_channels{8, 16, 32, 64};
  std::array<std::size_t, kStages> snn_channels{8, 16, 32, 64};
  std::array<std::size_t, kStages> blocks{1, 1, 1, 1};
  /// 0 picks the smallest factor leaving at most 49 tokens.
  std::array<std::size_t, kStages> fusion_downsample{0, 0, 0, 0};
  std::size_t stem_stride = 2;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;
  LifConfig lif;
  Architecture arch = Architecture::hybrid;
  InputMode input = InputMode::key_res;
  std::uint64_t init_seed = 1;

  void validate() const;
  std::size_t segments() const { return frames / stride; }
  /// Spatial size after stage i (0-based).
  std::size_t stage_height(std::size_t i) const;
  std::size_t stage_width(std::size_t i) const;
  std::size_t resolved_downsample(std::size_t i) const;
  bool uses_ann() const { return arch != Architecture::snn_only; }
  bool uses_snn() const { return arch != Architecture::ann_only; }
  bool uses_fusion() const { return arch == Architecture::hybrid; }

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static ReSpikeConfig from_json(const nlohmann::json& j);
};

/// Branch inputs for a batch of clips. Units are clip-major
/// (unit = clip * units_per_clip + j); SNN sequences are time-major
/// ([timesteps * units, c, h, w]).
template <class T>
struct PreparedInput {
  Tensor<T> ann;
  Tensor<T> snn;
  std::size_t units = 0;
  std::size_t units_per_clip = 0;
  std::size_t timesteps = 0;
};

template <class T>
class AnnBlock : public Module<T> {
 public:
  AnnBlock(std::string name, std::size_t c_in, std::size_t c_out, std::size_t stride, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, ForwardContext<T>& ctx);
  void collect(std::vector<NamedTensor<T>>& out) override;

  Conv2d<T> conv1, conv2;
  BatchNorm2d<T> bn1, bn2;
  std::unique_ptr<Conv2d<T>> down_conv;
  std::unique_ptr<BatchNorm2d<T>> down_bn;
};

template <class T>
class ReSpikeModel : public Module<T> {
 public:
  using value_type = T;

  explicit ReSpikeModel(ReSpikeConfig cfg);

  const ReSpikeConfig& config() const { return cfg_; }

  /// clips: [b, T, c, h, w] -> per-clip logits [b, num_classes], averaging
  /// the logits of each clip's units.
  Tensor<T> forward(const Tensor<T>& clips, ForwardContext<T>& ctx);
  /// Per-unit logits before averaging.
  Tensor<T> forward_units(const PreparedInput<T>& in, ForwardContext<T>& ctx);

  PreparedInput<T> prepare(const Tensor<T>& clips) const;
  /// Stem + stages; returns the four stage outputs (the last is F_A).
  std::vector<Tensor<T>> ann_forward(const Tensor<T>& keys, ForwardContext<T>& ctx);
  /// Stem + stages interleaved with fusion when enabled; returns F_S.
  Tensor<T> snn_forward(const Tensor<T>& seq, std::size_t timesteps,
                        const std::vector<Tensor<T>>& ann_stages, ForwardContext<T>& ctx);
  /// mean_t(F_S) ++ F_A -> GAP -> FC. Either feature may be undefined for
  /// single-branch models.
  Tensor<T> head(const Tensor<T>& f_a, const Tensor<T>& f_s, std::size_t timesteps,
                 ForwardContext<T>& ctx);
  static Tensor<T> average_units(const Tensor<T>& unit_logits, std::size_t clips);

  void collect(std::vector<NamedTensor<T>>& out) override;

  /// Cross-attention weights of the last forward, per fusion stage, when
  /// capture_attention is set.
  bool capture_attention = false;
  std::array<Tensor<T>, kStages> last_cross_weights;

  /// Head-averaged cross-attention row of fusion stage `stage` for one query
  /// token, taken from the first segment's first residual timestep of `clip`
  /// ([T, c, h, w]). grid_h/grid_w receive the token grid of that stage.
  std::vector<double> attention_row(const Tensor<T>& clip, std::size_t stage,
                                    std::size_t query_index, std::size_t* grid_h = nullptr,
                                    std::size_t* grid_w = nullptr);

  void save(const std::string& dir) const;
  static std::unique_ptr<ReSpikeModel> load(const std::string& dir);
  /// Copies tensors with matching names and shapes; returns how many.
  std::size_t copy_matching_from(ReSpikeModel& other);

  // ANN branch
  std::unique_ptr<Conv2d<T>> ann_stem;
  std::unique_ptr<BatchNorm2d<T>> ann_stem_bn;
  std::vector<std::vector<std::unique_ptr<AnnBlock<T>>>> ann_stages;
  // SNN branch
  std::unique_ptr<Conv2d<T>> snn_stem;
  std::unique_ptr<BatchNorm2d<T>> snn_stem_bn;
  std::vector<std::vector<std::unique_ptr<MsBlock<T>>>> snn_stages;
  std::vector<std::unique_ptr<FusionBlock<T>>> fusions;
  std::unique_ptr<Linear<T>> fc;

 private:
  ReSpikeConfig cfg_;
};

/// Runs each clip once in eval mode with instrumentation and returns the
/// per-clip energy report with measured spike rates.
template <class T>
EnergyReport profile_energy(ReSpikeModel<T>& model, const std::vector<Tensor<T>>& clips,
                            SpikeRateRecorder* rates_out = nullptr);

}  // namespace respike

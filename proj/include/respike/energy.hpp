#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace respike {

// Per-operation energy costs in joules.
inline constexpr double kEnergyAnnJ = 4.6e-12;
inline constexpr double kEnergySnnJ = 0.9e-12;

enum class LayerKind { conv, fc, attention };
// ann = dense arithmetic (FLOPs); snn = spike-driven accumulate (SyOPs).
enum class Branch { ann, snn };

const char* layer_kind_name(LayerKind k);
const char* branch_name(Branch b);

struct ConvGeometry {
  std::size_t k_w = 0, k_h = 0, c_in = 0, c_out = 0, h_out = 0, w_out = 0;
};

struct FcGeometry {
  std::size_t f_in = 0, f_out = 0;
};

/// m query tokens attending over p key tokens of width d. Projection widths of
/// zero mean the projections are logged as separate fc layers.
struct AttentionGeometry {
  std::size_t m = 0, p = 0, d = 0;
  std::size_t q_in = 0, kv_in = 0;
  bool out_proj = false;
};

struct LayerCostSpec {
  std::string name;
  LayerKind kind = LayerKind::conv;
  Branch branch = Branch::ann;
  ConvGeometry conv;
  FcGeometry fc;
  AttentionGeometry attn;
  /// Applications per clip (frames, token rows, sequences).
  double repeats = 1.0;
  /// Spikes per neuron summed over timesteps; required for snn layers.
  std::optional<double> spike_rate;
  /// Recorder layer whose spikes drive this layer (snn only).
  std::string spike_source;
};

/// Operation count of one application of the layer's geometry. One
/// multiply-accumulate counts as one operation.
double flops_of_layer(const LayerCostSpec& spec);
/// spike_rate x geometry FLOPs x repeats.
double syops_of_layer(const LayerCostSpec& spec);

struct LayerEnergy {
  std::string name;
  LayerKind kind;
  Branch branch;
  double flops = 0;
  double syops = 0;
  double energy_mj = 0;
};

struct EnergyReport {
  double flops_total = 0;
  double syops_total = 0;
  double energy_mj = 0;
  std::vector<LayerEnergy> layers;
};

double energy_mj(double flops, double syops);
EnergyReport model_energy(const std::vector<LayerCostSpec>& specs);
/// Report built from totals only (no per-layer breakdown).
EnergyReport energy_from_counts(double flops, double syops);

/// "FLOPs=…G SyOPs=…G E=…mJ"
std::string energy_summary(const EnergyReport& r);
void write_energy_json(const EnergyReport& r, const std::string& path,
                       const std::string& source);

struct Table4Row {
  std::string id;
  std::string label;
  double gflops;
  double gsyops;
  double published_mj;
};

const std::vector<Table4Row>& table4_rows();
const Table4Row& table4_row(const std::string& id);

/// Collects layer geometry during a forward pass. Each layer name is
/// registered once; repeats are normalized per clip.
class CostLog {
 public:
  void set_clips(std::size_t clips) { clips_ = clips; }
  std::size_t clips() const { return clips_; }
  void add(LayerCostSpec spec, double applications);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const std::vector<LayerCostSpec>& specs() const { return specs_; }
  void clear();

 private:
  std::size_t clips_ = 1;
  std::vector<LayerCostSpec> specs_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace respike

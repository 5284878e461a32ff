#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "respike/nn.hpp"
#include "respike/tensor.hpp"

namespace respike {

struct LifConfig {
  double tau = 0.5;
  double v_th = 1.0;
  double alpha = 2.0;
  /// Use the true almost-everywhere derivative of the spike (zero) instead of
  /// the surrogate. Only meaningful for finite-difference checks.
  bool exact_gradient = false;

  void validate() const;
};

/// alpha / (2 (1 + (pi/2 alpha (u_pre - v_th))^2))
double surrogate_derivative(double u_pre, const LifConfig& cfg);
template <class T>
Tensor<T> surrogate_derivative(const Tensor<T>& u_pre, const LifConfig& cfg);

/// Heaviside(u_pre - v_th) with strict inequality; backward uses the
/// surrogate (or zero when cfg.exact_gradient).
template <class T>
Tensor<T> spike_fn(const Tensor<T>& u_pre, const LifConfig& cfg);

template <class T>
struct MembraneState {
  Tensor<T> u;
  static MembraneState zeros(const Shape& shape) { return {Tensor<T>::zeros(shape)}; }
};

template <class T>
struct LifStep {
  Tensor<T> spikes;
  MembraneState<T> state;
};

/// u_pre = input + tau u; spike = u_pre > v_th; u = u_pre (1 - spike), with
/// the spike inside the reset treated as a constant in backward.
template <class T>
LifStep<T> lif_step(const Tensor<T>& input, const MembraneState<T>& state, const LifConfig& cfg);

/// Runs the LIF recurrence over the leading axis split into `timesteps`
/// time-major slices ([T' * b, ...]); membrane starts at zero. One fused
/// graph node, backward through time.
template <class T>
Tensor<T> lif_sequence(const Tensor<T>& inputs, std::size_t timesteps, const LifConfig& cfg);
template <class T>
Tensor<T> lif_sequence(const Tensor<T>& inputs, const LifConfig& cfg) {
  return lif_sequence(inputs, inputs.shape()[0], cfg);
}

struct SpikeLayerStats {
  std::size_t neurons = 0;
  std::size_t timesteps = 0;
  double total_spikes = 0;
  std::size_t sequences = 0;
  /// Spikes per neuron per sequence, summed over timesteps.
  double rate() const;
};

class SpikeRateRecorder {
 public:
  /// spikes is [timesteps * sequences, ...]; neurons are counted per sample.
  template <class T>
  void record(const std::string& layer, const Tensor<T>& spikes, std::size_t timesteps);
  /// Direct accumulation, used when merging or replaying counts.
  void add(const std::string& layer, std::size_t neurons, std::size_t timesteps,
           double total_spikes, std::size_t sequences);
  void merge(const SpikeRateRecorder& other);

  bool contains(const std::string& layer) const { return index_.count(layer) != 0; }
  const SpikeLayerStats& stats(const std::string& layer) const;
  double rate(const std::string& layer) const { return stats(layer).rate(); }
  const std::vector<std::string>& layers() const { return order_; }
  void clear();

  void write_csv(const std::string& path) const;

 private:
  std::vector<std::string> order_;
  std::map<std::string, SpikeLayerStats> index_;
};

/// Spiking layer: LIF over time plus spike-rate instrumentation.
template <class T>
Tensor<T> lif_layer(const Tensor<T>& x, std::size_t timesteps, const LifConfig& cfg,
                    ForwardContext<T>& ctx, const std::string& name);

/// Membrane-shortcut residual block:
///   out = shortcut(x) + BN(conv(LIF(BN(conv(LIF(x))))))
/// The shortcut is the identity, or a strided 1x1 conv + BN when the shape
/// changes; it carries floating values.
template <class T>
class MsBlock : public Module<T> {
 public:
  MsBlock(std::string name, std::size_t c_in, std::size_t c_out, std::size_t stride, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, std::size_t timesteps, const LifConfig& cfg,
                    ForwardContext<T>& ctx);
  void collect(std::vector<NamedTensor<T>>& out) override;

  Conv2d<T> conv1, conv2;
  BatchNorm2d<T> bn1, bn2;
  std::unique_ptr<Conv2d<T>> down_conv;
  std::unique_ptr<BatchNorm2d<T>> down_bn;
};

}  // namespace respike

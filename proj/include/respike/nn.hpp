#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "respike/energy.hpp"
#include "respike/ops.hpp"
#include "respike/tensor.hpp"

namespace respike {

using Rng = std::mt19937_64;

class SpikeRateRecorder;

/// Per-forward switches and optional instrumentation sinks.
template <class T>
struct ForwardContext {
  bool training = false;
  T bn_momentum = T(0.1);
  SpikeRateRecorder* spikes = nullptr;
  CostLog* costs = nullptr;
};

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T>* tensor;
  bool trainable;
};

/// Base for anything owning parameters or buffers. `name` prefixes every
/// tensor name and is used for checkpoints and cost logs.
template <class T>
class Module {
 public:
  explicit Module(std::string name) : name_(std::move(name)) {}
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  const std::string& name() const { return name_; }
  /// Appends parameters (trainable) and buffers (not trainable).
  virtual void collect(std::vector<NamedTensor<T>>& out) = 0;

  std::vector<NamedTensor<T>> named_tensors() {
    std::vector<NamedTensor<T>> out;
    collect(out);
    return out;
  }
  std::vector<Tensor<T>*> parameters() {
    std::vector<Tensor<T>*> out;
    for (auto& nt : named_tensors()) {
      if (nt.trainable) out.push_back(nt.tensor);
    }
    return out;
  }

 protected:
  std::string name_;
};

/// Uniform(-sqrt(6/fan_in), sqrt(6/fan_in)).
template <class T>
Tensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng);

template <class T>
class Conv2d : public Module<T> {
 public:
  Conv2d(std::string name, std::size_t c_in, std::size_t c_out, std::size_t k, std::size_t stride,
         std::size_t padding, Rng& rng);
  /// spike_source names the recorder layer whose spikes feed this conv; when
  /// set, the layer is logged as spike-driven and charged once per sequence
  /// of `timesteps` batch slices.
  Tensor<T> forward(const Tensor<T>& x, ForwardContext<T>& ctx,
                    const std::string& spike_source = "", std::size_t timesteps = 1) const;
  void collect(std::vector<NamedTensor<T>>& out) override;

  Tensor<T> weight;
  std::size_t stride, padding;
};

template <class T>
class Linear : public Module<T> {
 public:
  Linear(std::string name, std::size_t f_in, std::size_t f_out, Rng& rng, bool bias = true);
  Tensor<T> forward(const Tensor<T>& x, ForwardContext<T>& ctx) const;
  void collect(std::vector<NamedTensor<T>>& out) override;

  Tensor<T> weight;
  Tensor<T> bias;
};

template <class T>
class BatchNorm2d : public Module<T> {
 public:
  BatchNorm2d(std::string name, std::size_t channels);
  Tensor<T> forward(const Tensor<T>& x, ForwardContext<T>& ctx);
  void collect(std::vector<NamedTensor<T>>& out) override;

  Tensor<T> gamma, beta, running_mean, running_var;
};

template <class T>
class LayerNorm : public Module<T> {
 public:
  LayerNorm(std::string name, std::size_t dim);
  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(std::vector<NamedTensor<T>>& out) override;

  Tensor<T> gamma, beta;
};

}  // namespace respike

#include "respike/spiking.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "respike/errors.hpp"

namespace respike {

void LifConfig::validate() const {
  if (!(tau > 0.0 && tau <= 1.0)) throw std::invalid_argument("lif: tau must be in (0,1]");
  if (!(v_th > 0.0)) throw std::invalid_argument("lif: v_th must be > 0");
  if (!(alpha > 0.0)) throw std::invalid_argument("lif: alpha must be > 0");
}

double surrogate_derivative(double u_pre, const LifConfig& cfg) {
  const double z = std::numbers::pi / 2.0 * cfg.alpha * (u_pre - cfg.v_th);
  return cfg.alpha / (2.0 * (1.0 + z * z));
}

namespace {
template <class T>
T surrogate(T u_pre, T v_th, T alpha) {
  const T z = std::numbers::pi_v<T> / T(2) * alpha * (u_pre - v_th);
  return alpha / (T(2) * (T(1) + z * z));
}
}  // namespace

template <class T>
Tensor<T> surrogate_derivative(const Tensor<T>& u_pre, const LifConfig& cfg) {
  std::vector<T> out(u_pre.numel());
  auto x = u_pre.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = surrogate(x[i], T(cfg.v_th), T(cfg.alpha));
  }
  return Tensor<T>(u_pre.shape(), std::move(out));
}

template <class T>
Tensor<T> spike_fn(const Tensor<T>& u_pre, const LifConfig& cfg) {
  const T v_th = static_cast<T>(cfg.v_th);
  auto x = u_pre.data();
  std::vector<T> out(x.size());
  DecisionTrace* trace = DecisionTrace::active();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const bool fire = x[i] > v_th;
    out[i] = fire ? T(1) : T(0);
    if (trace) {
      trace->record(fire);
      trace->record_margin(std::abs(static_cast<double>(x[i]) - cfg.v_th));
    }
  }
  return Tensor<T>::make_result("spike", u_pre.shape(), std::move(out), {u_pre},
                                [u_pre, cfg](std::span<const T> g) {
                                  std::vector<T> d(g.size(), T(0));
                                  if (!cfg.exact_gradient) {
                                    auto x = u_pre.data();
                                    for (std::size_t i = 0; i < g.size(); ++i) {
                                      d[i] = g[i] * surrogate(x[i], T(cfg.v_th), T(cfg.alpha));
                                    }
                                  }
                                  u_pre.accumulate_grad(d);
                                });
}

template <class T>
LifStep<T> lif_step(const Tensor<T>& input, const MembraneState<T>& state, const LifConfig& cfg) {
  if (input.shape() != state.u.shape()) {
    throw ShapeError("lif_step: input " + shape_str(input.shape()) + " and membrane " +
                     shape_str(state.u.shape()) + " differ");
  }
  Tensor<T> u_pre = ops::add(input, ops::scale(state.u, static_cast<T>(cfg.tau)));
  Tensor<T> spikes = spike_fn(u_pre, cfg);
  std::vector<T> keep(spikes.numel());
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = T(1) - spikes[i];
  Tensor<T> u = ops::mul(u_pre, Tensor<T>(spikes.shape(), std::move(keep)));
  return {spikes, {u}};
}

template <class T>
Tensor<T> lif_sequence(const Tensor<T>& inputs, std::size_t timesteps, const LifConfig& cfg) {
  if (timesteps == 0) throw ShapeError("lif_sequence: empty sequence");
  if (inputs.shape()[0] % timesteps != 0) {
    throw ShapeError("lif_sequence: leading extent " + std::to_string(inputs.shape()[0]) +
                     " is not a multiple of " + std::to_string(timesteps) + " timesteps");
  }
  const std::size_t n = inputs.numel() / timesteps;
  const T tau = static_cast<T>(cfg.tau);
  const T v_th = static_cast<T>(cfg.v_th);
  auto x = inputs.data();
  std::vector<T> spikes(inputs.numel());
  std::vector<T> u_pre(inputs.numel());
  std::vector<T> u(n, T(0));
  DecisionTrace* trace = DecisionTrace::active();
  for (std::size_t t = 0; t < timesteps; ++t) {
    const T* xt = x.data() + t * n;
    T* st = spikes.data() + t * n;
    T* pt = u_pre.data() + t * n;
    for (std::size_t i = 0; i < n; ++i) {
      const T up = xt[i] + tau * u[i];
      const T y = up > v_th ? T(1) : T(0);
      pt[i] = up;
      st[i] = y;
      u[i] = up * (T(1) - y);
    }
    if (trace) {
      for (std::size_t i = 0; i < n; ++i) {
        trace->record(st[i] != T(0));
        trace->record_margin(std::abs(static_cast<double>(pt[i]) - cfg.v_th));
      }
    }
  }
  std::vector<T> fired = spikes;
  return Tensor<T>::make_result(
      "lif_sequence", inputs.shape(), std::move(spikes), {inputs},
      [inputs, cfg, n, timesteps, u_pre = std::move(u_pre),
       fired = std::move(fired)](std::span<const T> g) {
        const T tau = static_cast<T>(cfg.tau);
        const T v_th = static_cast<T>(cfg.v_th);
        const T alpha = static_cast<T>(cfg.alpha);
        std::vector<T> dx(inputs.numel());
        std::vector<T> du(n, T(0));  // dL/du[t] flowing back from step t+1
        for (std::size_t t = timesteps; t-- > 0;) {
          const std::size_t off = t * n;
          for (std::size_t i = 0; i < n; ++i) {
            const T sg = cfg.exact_gradient ? T(0) : surrogate(u_pre[off + i], v_th, alpha);
            const T d = g[off + i] * sg + du[i] * (T(1) - fired[off + i]);
            dx[off + i] = d;
            du[i] = tau * d;
          }
        }
        inputs.accumulate_grad(dx);
      });
}

// --- spike-rate bookkeeping ---------------------------------------------------

double SpikeLayerStats::rate() const {
  if (neurons == 0 || sequences == 0) return 0.0;
  return total_spikes / (static_cast<double>(neurons) * static_cast<double>(sequences));
}

template <class T>
void SpikeRateRecorder::record(const std::string& layer, const Tensor<T>& spikes,
                               std::size_t timesteps) {
  if (timesteps == 0 || spikes.shape()[0] % timesteps != 0) {
    throw ShapeError("spike record for '" + layer + "': leading extent " +
                     std::to_string(spikes.shape()[0]) + " is not a multiple of timesteps");
  }
  double count = 0;
  for (T v : spikes.data()) {
    if (v == T(1)) count += 1;
    else if (v != T(0)) {
      throw std::invalid_argument("spike record for '" + layer + "': non-binary value " +
                                  std::to_string(static_cast<double>(v)));
    }
  }
  add(layer, spikes.numel() / spikes.shape()[0], timesteps, count,
      spikes.shape()[0] / timesteps);
}

void SpikeRateRecorder::add(const std::string& layer, std::size_t neurons, std::size_t timesteps,
                            double total_spikes, std::size_t sequences) {
  auto it = index_.find(layer);
  if (it == index_.end()) {
    order_.push_back(layer);
    index_[layer] = {neurons, timesteps, total_spikes, sequences};
    return;
  }
  SpikeLayerStats& s = it->second;
  if (s.neurons != neurons) {
    throw std::invalid_argument("spike record for '" + layer + "': neuron count changed from " +
                                std::to_string(s.neurons) + " to " + std::to_string(neurons));
  }
  if (s.timesteps != timesteps) {
    throw std::invalid_argument("spike record for '" + layer + "': timestep count changed");
  }
  s.total_spikes += total_spikes;
  s.sequences += sequences;
}

void SpikeRateRecorder::merge(const SpikeRateRecorder& other) {
  for (const auto& name : other.order_) {
    const auto& s = other.index_.at(name);
    add(name, s.neurons, s.timesteps, s.total_spikes, s.sequences);
  }
}

const SpikeLayerStats& SpikeRateRecorder::stats(const std::string& layer) const {
  auto it = index_.find(layer);
  if (it == index_.end()) throw std::invalid_argument("no spike record for layer '" + layer + "'");
  return it->second;
}

void SpikeRateRecorder::clear() {
  order_.clear();
  index_.clear();
}

void SpikeRateRecorder::write_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "layer,neurons,timesteps,total_spikes,spike_rate\n";
  for (const auto& name : order_) {
    const auto& s = index_.at(name);
    char buf[128];
    std::snprintf(buf, sizeof buf, ",%zu,%zu,%.0f,%.6f\n", s.neurons, s.timesteps, s.total_spikes,
                  s.rate());
    out << name << buf;
  }
  if (!out) throw IoError("failed writing " + path);
}

template <class T>
Tensor<T> lif_layer(const Tensor<T>& x, std::size_t timesteps, const LifConfig& cfg,
                    ForwardContext<T>& ctx, const std::string& name) {
  Tensor<T> s = lif_sequence(x, timesteps, cfg);
  if (ctx.spikes) ctx.spikes->record(name, s, timesteps);
  return s;
}

// --- membrane-shortcut block ----------------------------------------------------

template <class T>
MsBlock<T>::MsBlock(std::string name, std::size_t c_in, std::size_t c_out, std::size_t stride,
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
Tensor<T> MsBlock<T>::forward(const Tensor<T>& x, std::size_t timesteps, const LifConfig& cfg,
                              ForwardContext<T>& ctx) {
  const std::string lif1 = this->name_ + ".lif1";
  const std::string lif2 = this->name_ + ".lif2";
  Tensor<T> s1 = lif_layer(x, timesteps, cfg, ctx, lif1);
  Tensor<T> h = bn1.forward(conv1.forward(s1, ctx, lif1, timesteps), ctx);
  Tensor<T> s2 = lif_layer(h, timesteps, cfg, ctx, lif2);
  Tensor<T> r = bn2.forward(conv2.forward(s2, ctx, lif2, timesteps), ctx);
  Tensor<T> shortcut = down_conv ? down_bn->forward(down_conv->forward(x, ctx), ctx) : x;
  if (shortcut.shape() != r.shape()) {
    throw ShapeError(this->name_ + ": shortcut " + shape_str(shortcut.shape()) +
                     " does not match conv path " + shape_str(r.shape()));
  }
  return ops::add(shortcut, r);
}

template <class T>
void MsBlock<T>::collect(std::vector<NamedTensor<T>>& out) {
  conv1.collect(out);
  bn1.collect(out);
  conv2.collect(out);
  bn2.collect(out);
  if (down_conv) {
    down_conv->collect(out);
    down_bn->collect(out);
  }
}

#define RESPIKE_INSTANTIATE_SPIKING(T)                                                       \
  template Tensor<T> surrogate_derivative<T>(const Tensor<T>&, const LifConfig&);           \
  template Tensor<T> spike_fn<T>(const Tensor<T>&, const LifConfig&);                       \
  template LifStep<T> lif_step<T>(const Tensor<T>&, const MembraneState<T>&,                \
                                  const LifConfig&);                                        \
  template Tensor<T> lif_sequence<T>(const Tensor<T>&, std::size_t, const LifConfig&);      \
  template void SpikeRateRecorder::record<T>(const std::string&, const Tensor<T>&,          \
                                             std::size_t);                                  \
  template Tensor<T> lif_layer<T>(const Tensor<T>&, std::size_t, const LifConfig&,          \
                                  ForwardContext<T>&, const std::string&);                  \
  template class MsBlock<T>;

RESPIKE_INSTANTIATE_SPIKING(float)
RESPIKE_INSTANTIATE_SPIKING(double)

}  // namespace respike

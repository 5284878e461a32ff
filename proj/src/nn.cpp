#include "respike/nn.hpp"

#include <cmath>

namespace respike {

template <class T>
Tensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(values));
}

template <class T>
Conv2d<T>::Conv2d(std::string name, std::size_t c_in, std::size_t c_out, std::size_t k,
                  std::size_t stride_, std::size_t padding_, Rng& rng)
    : Module<T>(std::move(name)),
      weight(kaiming_uniform<T>({c_out, c_in, k, k}, c_in * k * k, rng)),
      stride(stride_),
      padding(padding_) {
  weight.set_requires_grad(true);
}

template <class T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x, ForwardContext<T>& ctx,
                             const std::string& spike_source, std::size_t timesteps) const {
  Tensor<T> y = ops::conv2d(x, weight, stride, padding);
  if (ctx.costs && !ctx.costs->contains(this->name_)) {
    LayerCostSpec spec;
    spec.name = this->name_;
    spec.kind = LayerKind::conv;
    spec.branch = spike_source.empty() ? Branch::ann : Branch::snn;
    spec.spike_source = spike_source;
    spec.conv = {weight.shape()[3], weight.shape()[2], weight.shape()[1],
                 weight.shape()[0], y.shape()[2], y.shape()[3]};
    // the spike rate already sums over timesteps
    const std::size_t applications = spike_source.empty() ? x.shape()[0] : x.shape()[0] / timesteps;
    ctx.costs->add(std::move(spec), static_cast<double>(applications));
  }
  return y;
}

template <class T>
void Conv2d<T>::collect(std::vector<NamedTensor<T>>& out) {
  out.push_back({this->name_ + ".weight", &weight, true});
}

template <class T>
Linear<T>::Linear(std::string name, std::size_t f_in, std::size_t f_out, Rng& rng, bool with_bias)
    : Module<T>(std::move(name)), weight(kaiming_uniform<T>({f_out, f_in}, f_in, rng)) {
  weight.set_requires_grad(true);
  if (with_bias) {
    bias = Tensor<T>::zeros({f_out});
    bias.set_requires_grad(true);
  }
}

template <class T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x, ForwardContext<T>& ctx) const {
  Tensor<T> y = ops::linear(x, weight, bias);
  if (ctx.costs && !ctx.costs->contains(this->name_)) {
    LayerCostSpec spec;
    spec.name = this->name_;
    spec.kind = LayerKind::fc;
    spec.fc = {weight.shape()[1], weight.shape()[0]};
    ctx.costs->add(std::move(spec), static_cast<double>(x.numel() / weight.shape()[1]));
  }
  return y;
}

template <class T>
void Linear<T>::collect(std::vector<NamedTensor<T>>& out) {
  out.push_back({this->name_ + ".weight", &weight, true});
  if (bias.defined()) out.push_back({this->name_ + ".bias", &bias, true});
}

template <class T>
BatchNorm2d<T>::BatchNorm2d(std::string name, std::size_t channels)
    : Module<T>(std::move(name)),
      gamma(Tensor<T>::ones({channels})),
      beta(Tensor<T>::zeros({channels})),
      running_mean(Tensor<T>::zeros({channels})),
      running_var(Tensor<T>::ones({channels})) {
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
}

template <class T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x, ForwardContext<T>& ctx) {
  return ops::batch_norm(x, gamma, beta, running_mean, running_var, ctx.training,
                         ctx.bn_momentum);
}

template <class T>
void BatchNorm2d<T>::collect(std::vector<NamedTensor<T>>& out) {
  out.push_back({this->name_ + ".gamma", &gamma, true});
  out.push_back({this->name_ + ".beta", &beta, true});
  out.push_back({this->name_ + ".running_mean", &running_mean, false});
  out.push_back({this->name_ + ".running_var", &running_var, false});
}

template <class T>
LayerNorm<T>::LayerNorm(std::string name, std::size_t dim)
    : Module<T>(std::move(name)), gamma(Tensor<T>::ones({dim})), beta(Tensor<T>::zeros({dim})) {
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
}

template <class T>
Tensor<T> LayerNorm<T>::forward(const Tensor<T>& x) const {
  return ops::layer_norm(x, gamma, beta);
}

template <class T>
void LayerNorm<T>::collect(std::vector<NamedTensor<T>>& out) {
  out.push_back({this->name_ + ".gamma", &gamma, true});
  out.push_back({this->name_ + ".beta", &beta, true});
}

template Tensor<float> kaiming_uniform<float>(Shape, std::size_t, Rng&);
template Tensor<double> kaiming_uniform<double>(Shape, std::size_t, Rng&);
template class Conv2d<float>;
template class Conv2d<double>;
template class Linear<float>;
template class Linear<double>;
template class BatchNorm2d<float>;
template class BatchNorm2d<double>;
template class LayerNorm<float>;
template class LayerNorm<double>;

}  // namespace respike

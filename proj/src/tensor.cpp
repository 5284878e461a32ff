#include "respike/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace respike {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

const char* precision_name(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision parse_precision(const std::string& name) {
  if (name == "f32") return Precision::f32;
  if (name == "f64") return Precision::f64;
  throw std::invalid_argument("unknown precision '" + name + "' (expected f32 or f64)");
}

namespace {
thread_local bool t_grad_enabled = true;
#ifdef NDEBUG
thread_local bool t_finite_checks = false;
#else
thread_local bool t_finite_checks = true;
#endif
thread_local DecisionTrace* t_trace = nullptr;
}  // namespace

bool grad_enabled() { return t_grad_enabled; }
NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool finite_checks_enabled() { return t_finite_checks; }
FiniteCheckGuard::FiniteCheckGuard(bool enabled) : previous_(t_finite_checks) {
  t_finite_checks = enabled;
}
FiniteCheckGuard::~FiniteCheckGuard() { t_finite_checks = previous_; }

DecisionTrace::DecisionTrace() : previous_(t_trace) { t_trace = this; }
DecisionTrace::~DecisionTrace() { t_trace = previous_; }
DecisionTrace* DecisionTrace::active() { return t_trace; }

void DecisionTrace::record(bool decision) {
  // FNV-1a over the decision stream
  hash_ ^= decision ? 0x9eu : 0x31u;
  hash_ *= 1099511628211ull;
  ++count_;
}

void DecisionTrace::record_margin(double margin) {
  if (margin < min_margin_) min_margin_ = margin;
  margins_.push_back(margin);
}

void DecisionTrace::reset() {
  hash_ = 1469598103934665603ull;
  count_ = 0;
  min_margin_ = std::numeric_limits<double>::infinity();
  margins_.clear();
}

// --- Tensor -----------------------------------------------------------------

template <class T>
Tensor<T>::Tensor(Shape shape, T fill) : impl_(std::make_shared<TensorImpl<T>>()) {
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == 0) {
      throw ShapeError("tensor extent " + std::to_string(i) + " is zero in " + shape_str(shape));
    }
  }
  impl_->storage = std::make_shared<std::vector<T>>(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

template <class T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<TensorImpl<T>>()) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                     " values but " + std::to_string(values.size()) + " were given");
  }
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == 0) {
      throw ShapeError("tensor extent " + std::to_string(i) + " is zero in " + shape_str(shape));
    }
  }
  impl_->storage = std::make_shared<std::vector<T>>(std::move(values));
  impl_->shape = std::move(shape);
}

template <class T>
std::size_t Tensor<T>::size(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_str(impl_->shape));
  }
  return impl_->shape[axis];
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return (*impl_->storage)[0];
}

template <class T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  if (!is_leaf()) throw GraphError("requires_grad can only be set on leaf tensors");
  impl_->requires_grad = on;
  return *this;
}

template <class T>
void Tensor<T>::accumulate_grad(std::span<const T> g) const {
  if (!impl_->requires_grad) return;
  auto& grad = impl_->grad;
  if (g.size() != numel()) {
    throw ShapeError("gradient of size " + std::to_string(g.size()) + " for tensor " +
                     shape_str(shape()));
  }
  if (grad.empty()) {
    grad.assign(g.begin(), g.end());
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

template <class T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(impl_->shape, *impl_->storage);
}

template <class T>
Tensor<T> Tensor<T>::alias(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("cannot view " + shape_str(impl_->shape) + " as " + shape_str(shape));
  }
  Tensor out;
  out.impl_ = std::make_shared<TensorImpl<T>>();
  out.impl_->shape = std::move(shape);
  out.impl_->storage = impl_->storage;
  return out;
}

namespace {
template <class T>
void check_finite(const char* op, std::span<const T> values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(std::string(op) + " produced a non-finite value at flat index " +
                         std::to_string(i));
    }
  }
}
}  // namespace

template <class T>
void Tensor<T>::attach(Tensor& out, const char* op, std::vector<Tensor> inputs,
                       BackwardFn<T> backward) {
  if (!t_grad_enabled) return;
  bool any = false;
  for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
  if (!any) return;
  auto node = std::make_shared<Node<T>>();
  node->op = op;
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  out.impl_->node = std::move(node);
  out.impl_->requires_grad = true;
}

template <class T>
Tensor<T> Tensor<T>::make_result(const char* op, Shape shape, std::vector<T> values,
                                 std::vector<Tensor> inputs, BackwardFn<T> backward) {
  Tensor out(std::move(shape), std::move(values));
  if (t_finite_checks) check_finite<T>(op, out.data());
  attach(out, op, std::move(inputs), std::move(backward));
  return out;
}

template <class T>
Tensor<T> Tensor<T>::make_view(const char* op, Shape shape, const Tensor& source,
                               BackwardFn<T> backward) {
  Tensor out = source.alias(std::move(shape));
  attach(out, op, {source}, std::move(backward));
  return out;
}

// --- Graph ------------------------------------------------------------------

template <class T>
Graph<T> Graph<T>::trace(const Tensor<T>& root) {
  Graph g;
  g.root_ = root;
  std::unordered_set<TensorImpl<T>*> seen;
  // iterative post-order DFS
  struct Frame {
    TensorImpl<T>* impl;
    std::size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({root.impl(), 0});
  seen.insert(root.impl());
  while (!stack.empty()) {
    Frame& f = stack.back();
    const auto& node = f.impl->node;
    if (node && f.next < node->inputs.size()) {
      TensorImpl<T>* child = node->inputs[f.next++].impl();
      if (child && child->requires_grad && seen.insert(child).second) {
        stack.push_back({child, 0});
      }
      continue;
    }
    g.order_.push_back(f.impl);
    stack.pop_back();
  }
  return g;
}

template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined()) throw GraphError("backward on an undefined tensor");
  if (loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) throw GraphError("loss does not depend on any tensor requiring grad");
  if (loss.node() && loss.node()->consumed) {
    throw GraphError("backward called twice on the same graph; run a new forward pass first");
  }
  Graph<T> graph = Graph<T>::trace(loss);
  auto order = graph.order();
  for (TensorImpl<T>* impl : order) {
    if (impl->node && impl->node->consumed) {
      throw GraphError(std::string("graph node '") + impl->node->op +
                       "' was already consumed by an earlier backward pass");
    }
  }
  // Releasing node inputs below may drop the last owner of a tensor that is
  // still ahead in the order; hold every input until the pass is done.
  std::vector<Tensor<T>> keep_alive;
  for (TensorImpl<T>* impl : order) {
    if (impl->node) keep_alive.insert(keep_alive.end(), impl->node->inputs.begin(), impl->node->inputs.end());
  }
  loss.impl()->grad.assign(1, T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl<T>* impl = *it;
    auto& node = impl->node;
    if (!node) continue;
    if (!impl->grad.empty() && node->backward) node->backward(impl->grad);
    node->consumed = true;
    node->backward = nullptr;
    node->inputs.clear();
    // intermediate grads are not retained
    impl->grad.clear();
    impl->grad.shrink_to_fit();
  }
}

template class Tensor<float>;
template class Tensor<double>;
template class Graph<float>;
template class Graph<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace respike

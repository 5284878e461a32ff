#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace respike {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when operand shapes are incompatible. The message names the
/// offending dimension.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a primitive produces NaN/Inf while finite checks are enabled,
/// or when training hits a non-finite loss.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Misuse of the differentiation graph (e.g. a second backward pass).
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class Precision { f32, f64 };

template <class T>
constexpr Precision precision_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? Precision::f32 : Precision::f64;
}

const char* precision_name(Precision p);
Precision parse_precision(const std::string& name);

// --- global (thread-local) engine modes ------------------------------------

bool grad_enabled();

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool finite_checks_enabled();

/// Enables or disables the NaN/Inf check that runs after every primitive.
class FiniteCheckGuard {
 public:
  explicit FiniteCheckGuard(bool enabled);
  ~FiniteCheckGuard();
  FiniteCheckGuard(const FiniteCheckGuard&) = delete;
  FiniteCheckGuard& operator=(const FiniteCheckGuard&) = delete;

 private:
  bool previous_;
};

/// Records the discrete branch decisions (ReLU gates, spike emissions) made
/// during a forward pass. Finite-difference checks compare signatures to
/// detect perturbations that cross a kink.
class DecisionTrace {
 public:
  DecisionTrace();
  ~DecisionTrace();
  DecisionTrace(const DecisionTrace&) = delete;
  DecisionTrace& operator=(const DecisionTrace&) = delete;

  static DecisionTrace* active();

  void record(bool decision);
  /// Distance of a thresholded quantity to its threshold, in forward order.
  void record_margin(double margin);

  std::uint64_t signature() const { return hash_; }
  std::size_t count() const { return count_; }
  double min_margin() const { return min_margin_; }
  const std::vector<double>& margins() const { return margins_; }
  void reset();

 private:
  std::uint64_t hash_ = 1469598103934665603ull;
  std::size_t count_ = 0;
  double min_margin_ = std::numeric_limits<double>::infinity();
  std::vector<double> margins_;
  DecisionTrace* previous_;
};

// --- tensors and graph -------------------------------------------------------

template <class T>
class Tensor;

/// Receives d(loss)/d(output) and accumulates into the captured inputs.
template <class T>
using BackwardFn = std::function<void(std::span<const T> grad_out)>;

template <class T>
struct Node {
  const char* op = "";
  std::vector<Tensor<T>> inputs;
  BackwardFn<T> backward;
  bool consumed = false;
};

template <class T>
struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<T>> storage;
  std::vector<T> grad;
  bool requires_grad = false;
  std::shared_ptr<Node<T>> node;
};

/// Dense row-major tensor with value semantics for metadata and shared
/// ownership of storage. Copies of a Tensor alias the same buffer.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor full(Shape shape, T value) { return Tensor(std::move(shape), value); }
  static Tensor scalar(T value) { return Tensor(Shape{1}, value); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim() const { return impl_->shape.size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const { return impl_->storage->size(); }

  std::span<T> data() { return {impl_->storage->data(), impl_->storage->size()}; }
  std::span<const T> data() const { return {impl_->storage->data(), impl_->storage->size()}; }
  T operator[](std::size_t i) const { return (*impl_->storage)[i]; }
  T item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }
  void accumulate_grad(std::span<const T> g) const;

  /// Deep copy detached from the graph.
  Tensor detach() const;
  /// Same storage under a different shape; no graph edge. Use ops::reshape
  /// inside differentiable code.
  Tensor alias(Shape shape) const;

  const std::shared_ptr<Node<T>>& node() const { return impl_->node; }
  bool is_leaf() const { return impl_->node == nullptr; }
  TensorImpl<T>* impl() const { return impl_.get(); }
  bool shares_storage(const Tensor& other) const {
    return impl_->storage == other.impl_->storage;
  }

  /// Builds the output of a primitive. A graph node is attached only when
  /// recording is enabled and some input requires grad.
  static Tensor make_result(const char* op, Shape shape, std::vector<T> values,
                            std::vector<Tensor> inputs, BackwardFn<T> backward);
  /// Like make_result, but the output aliases `source`'s storage.
  static Tensor make_view(const char* op, Shape shape, const Tensor& source,
                          BackwardFn<T> backward);

 private:
  static void attach(Tensor& out, const char* op, std::vector<Tensor> inputs,
                     BackwardFn<T> backward);
  std::shared_ptr<TensorImpl<T>> impl_;
};

/// Topologically ordered record of the primitives that produced `root`:
/// every node's inputs precede it.
template <class T>
class Graph {
 public:
  static Graph trace(const Tensor<T>& root);

  std::span<TensorImpl<T>* const> order() const { return order_; }
  std::size_t size() const { return order_.size(); }

 private:
  Tensor<T> root_;
  std::vector<TensorImpl<T>*> order_;
};

/// Reverse pass from a scalar loss. Leaf tensors that require grad receive
/// accumulated gradients; the traversed nodes are consumed, so a second call
/// without a new forward pass throws GraphError.
template <class T>
void backward(const Tensor<T>& loss);

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace respike

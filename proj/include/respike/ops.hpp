#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "respike/tensor.hpp"

// Differentiable primitives. Each records its backward rule on the graph when
// an input requires grad. Shape errors raise ShapeError naming the dimension.
namespace respike::ops {

template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <class T> Tensor<T> relu(const Tensor<T>& a);
template <class T> Tensor<T> gelu(const Tensor<T>& a);

template <class T> Tensor<T> sum(const Tensor<T>& a);
template <class T> Tensor<T> mean(const Tensor<T>& a);
/// Mean over one axis; the axis is removed from the result.
template <class T> Tensor<T> mean_axis(const Tensor<T>& a, std::size_t axis);

/// 2-D [m,k]x[k,n] or batched 3-D [b,m,k]x[b,k,n] product. The transpose
/// flags apply to the trailing two dimensions.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                 bool trans_b = false);

/// y = x W^T + bias over the last axis of x. weight is [out, in]; bias may be
/// undefined. Each output accumulates over `in` in index order.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// input [b,c_in,h,w], kernel [c_out,c_in,k_h,k_w], no bias.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride,
                 std::size_t padding);

/// Per-channel normalization of [n,c,...]. In training mode batch statistics
/// are used and the running estimates are updated in place with `momentum`;
/// in eval mode the running estimates are used.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                     T momentum = T(0.1), T eps = T(1e-5));

/// Normalizes over the last axis.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));

/// Non-overlapping k x k mean pooling of [n,c,h,w]; k must divide h and w.
template <class T> Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t k);
/// [n,c,h,w] -> [n,c]
template <class T> Tensor<T> global_avg_pool(const Tensor<T>& x);
/// Nearest-neighbour upsampling of [n,c,h,w] by an integer factor.
template <class T> Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t k);

template <class T> Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, std::size_t axis);
template <class T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <class T> Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm);
/// [n,...] -> [times*n,...]; block t holds a copy of x.
template <class T> Tensor<T> repeat_batch(const Tensor<T>& x, std::size_t times);

/// Softmax over the last axis, computed with max subtraction.
template <class T> Tensor<T> softmax_rows(const Tensor<T>& m);

/// Mean cross-entropy of softmax(logits[b,c]) against integer labels.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

}  // namespace respike::ops

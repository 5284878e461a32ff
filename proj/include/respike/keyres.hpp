#pragma once

#include <functional>
#include <string>

#include "respike/tensor.hpp"

namespace respike {

template <class T>
struct Clip {
  Tensor<T> frames;  // [T, channels, h, w], values in [0,1]
  int label = 0;
};

template <class T>
struct KeyResSegments {
  Tensor<T> keys;       // [n, c, h, w]
  Tensor<T> residuals;  // [n, s-1, c, h, w]
  std::size_t stride = 0;
  std::size_t segments = 0;
};

/// Called when trailing frames are dropped because T is not a multiple of s.
using WarningSink = std::function<void(const std::string&)>;
void set_warning_sink(WarningSink sink);
void emit_warning(const std::string& message);

/// Key of segment k is frame k*s; residual x[t] - x[k*s] for the other frames
/// of the segment. Requires s >= 2.
template <class T>
KeyResSegments<T> decompose(const Tensor<T>& frames, std::size_t s);

/// x[t] = x_res[t] + x[k*s].
template <class T>
Tensor<T> recompose(const KeyResSegments<T>& segs);

/// Fraction of residual values with |r| > threshold.
template <class T>
double residual_nonzero_fraction(const KeyResSegments<T>& segs, double threshold = 0.0);

}  // namespace respike

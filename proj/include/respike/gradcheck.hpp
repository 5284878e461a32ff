#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "respike/tensor.hpp"

namespace respike {

struct GradCheckOptions {
  double epsilon = 1e-5;
  /// Coordinates whose perturbed evaluations bring a thresholded quantity
  /// within this distance of its threshold, or flip any branch decision, are
  /// excluded as non-differentiable.
  double kink_margin = 1e-3;
  /// Denominator floor of the relative error. Gradients below it are judged
  /// on an absolute scale, which keeps exactly-zero gradients (a shift a
  /// softmax ignores) from comparing against difference roundoff.
  double abs_floor = 1e-8;
  /// 0 checks every coordinate; otherwise a seeded random subset.
  std::size_t max_coords = 0;
  std::uint64_t seed = 1;
};

struct GradCheckResult {
  double max_rel_err = 0;
  std::size_t checked = 0;
  std::size_t excluded = 0;
  /// Smallest threshold distance seen in the unperturbed forward.
  double base_margin = 0;
  // worst checked coordinate
  std::size_t worst_param = 0, worst_index = 0;
  double worst_analytic = 0, worst_numeric = 0;
};

/// Compares backward() against central differences of a scalar function of
/// `params`. Relative error per coordinate is |a - n| / max(|a|, |n|, abs_floor).
/// f must be deterministic; with a non-deterministic f the result is
/// meaningless.
template <class T>
GradCheckResult grad_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> params,
                           const GradCheckOptions& opt = {});

/// Single-point convenience form.
template <class T>
GradCheckResult grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, Tensor<T> point,
                           double epsilon);

}  // namespace respike

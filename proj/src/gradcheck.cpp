#include "respike/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace respike {

namespace {

struct Probe {
  double value;
  std::uint64_t signature;
  std::vector<double> margins;
};

template <class T>
Probe evaluate(const std::function<Tensor<T>()>& f) {
  NoGradGuard no_grad;
  DecisionTrace trace;
  const Tensor<T> out = f();
  return {static_cast<double>(out.item()), trace.signature(), trace.margins()};
}

// A thresholded quantity the coordinate moves (its margin differs from the
// base pass) and that sits within kink_margin of the threshold makes the
// difference quotient straddle a kink.
bool near_kink(const std::vector<double>& base, const Probe& plus, const Probe& minus,
               double kink_margin) {
  if (plus.margins.size() != base.size() || minus.margins.size() != base.size()) return true;
  for (std::size_t k = 0; k < base.size(); ++k) {
    if (plus.margins[k] == base[k] && minus.margins[k] == base[k]) continue;
    if (std::min({base[k], plus.margins[k], minus.margins[k]}) < kink_margin) return true;
  }
  return false;
}

}  // namespace

template <class T>
GradCheckResult grad_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> params,
                           const GradCheckOptions& opt) {
  for (auto& p : params) {
    p.zero_grad();
    p.set_requires_grad(true);
  }
  std::uint64_t base_signature;
  double base_margin;
  std::vector<double> base_margins;
  {
    DecisionTrace trace;
    const Tensor<T> loss = f();
    base_signature = trace.signature();
    base_margin = trace.min_margin();
    base_margins = trace.margins();
    backward(loss);
  }
  std::vector<std::vector<T>> analytic;
  for (auto& p : params) {
    if (p.has_grad()) analytic.emplace_back(p.grad().begin(), p.grad().end());
    else analytic.emplace_back(p.numel(), T(0));
  }

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    for (std::size_t i = 0; i < params[pi].numel(); ++i) coords.emplace_back(pi, i);
  }
  if (opt.max_coords != 0 && coords.size() > opt.max_coords) {
    std::mt19937_64 rng(opt.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(opt.max_coords);
  }

  GradCheckResult r;
  r.base_margin = base_margin;
  const T eps = static_cast<T>(opt.epsilon);
  for (auto [pi, i] : coords) {
    auto data = params[pi].data();
    const T original = data[i];
    data[i] = original + eps;
    const Probe plus = evaluate(f);
    data[i] = original - eps;
    const Probe minus = evaluate(f);
    data[i] = original;
    if (plus.signature != base_signature || minus.signature != base_signature ||
        near_kink(base_margins, plus, minus, opt.kink_margin)) {
      ++r.excluded;
      continue;
    }
    const double numeric = (plus.value - minus.value) / (2.0 * opt.epsilon);
    const double a = static_cast<double>(analytic[pi][i]);
    const double denom = std::max({std::abs(a), std::abs(numeric), opt.abs_floor});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > r.max_rel_err || r.checked == 0) {
      r.max_rel_err = rel;
      r.worst_param = pi;
      r.worst_index = i;
      r.worst_analytic = a;
      r.worst_numeric = numeric;
    }
    ++r.checked;
  }
  return r;
}

template <class T>
GradCheckResult grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, Tensor<T> point,
                           double epsilon) {
  GradCheckOptions opt;
  opt.epsilon = epsilon;
  return grad_check<T>(std::function<Tensor<T>()>([&] { return f(point); }), {point}, opt);
}

template GradCheckResult grad_check<float>(const std::function<Tensor<float>()>&,
                                           std::vector<Tensor<float>>, const GradCheckOptions&);
template GradCheckResult grad_check<double>(const std::function<Tensor<double>()>&,
                                            std::vector<Tensor<double>>, const GradCheckOptions&);
template GradCheckResult grad_check<float>(const std::function<Tensor<float>(const Tensor<float>&)>&,
                                           Tensor<float>, double);
template GradCheckResult grad_check<double>(
    const std::function<Tensor<double>(const Tensor<double>&)>&, Tensor<double>, double);

}  // namespace respike

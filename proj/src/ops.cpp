#include "respike/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace respike::ops {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MutMap = Eigen::Map<RowMat<T>>;
template <class T>
using AlignedVec = std::vector<T, Eigen::aligned_allocator<T>>;

// Eigen chooses where its packet loops start from the runtime alignment of
// each pointer, so products over plain heap buffers round differently from
// one allocation to the next. Operands and results of every product live in
// Eigen-aligned memory to keep training bitwise reproducible.
template <class T>
RowMat<T> owned(const T* p, std::size_t r, std::size_t c) {
  return ConstMap<T>(p, r, c);
}

template <class T, class Expr>
void store(T* dst, std::size_t r, std::size_t c, const Expr& e) {
  RowMat<T> tmp = e;
  MutMap<T>(dst, r, c) = tmp;
}

void fail_dim(const char* op, const std::string& what, std::size_t expected, std::size_t got) {
  throw ShapeError(std::string(op) + ": " + what + " mismatch (expected " +
                   std::to_string(expected) + ", got " + std::to_string(got) + ")");
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.dim() != b.dim()) fail_dim(op, "rank", a.dim(), b.dim());
  for (std::size_t i = 0; i < a.dim(); ++i) {
    if (a.shape()[i] != b.shape()[i]) {
      fail_dim(op, "dimension " + std::to_string(i), a.shape()[i], b.shape()[i]);
    }
  }
}

template <class T>
void require_rank(const Tensor<T>& a, std::size_t rank, const char* op, const char* name) {
  if (a.dim() != rank) {
    throw ShapeError(std::string(op) + ": " + name + " must have rank " + std::to_string(rank) +
                     ", got shape " + shape_str(a.shape()));
  }
}

// Splits a shape around `axis` into (outer, len, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

// --- elementwise --------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  auto x = a.data();
  auto y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return Tensor<T>::make_result("add", a.shape(), std::move(out), {a, b},
                                [a, b](std::span<const T> g) {
                                  a.accumulate_grad(g);
                                  b.accumulate_grad(g);
                                });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  auto x = a.data();
  auto y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return Tensor<T>::make_result("sub", a.shape(), std::move(out), {a, b},
                                [a, b](std::span<const T> g) {
                                  a.accumulate_grad(g);
                                  if (b.requires_grad()) {
                                    std::vector<T> neg(g.size());
                                    for (std::size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
                                    b.accumulate_grad(neg);
                                  }
                                });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  auto x = a.data();
  auto y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return Tensor<T>::make_result("mul", a.shape(), std::move(out), {a, b},
                                [a, b](std::span<const T> g) {
                                  std::vector<T> tmp(g.size());
                                  if (a.requires_grad()) {
                                    auto y = b.data();
                                    for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * y[i];
                                    a.accumulate_grad(tmp);
                                  }
                                  if (b.requires_grad()) {
                                    auto x = a.data();
                                    for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * x[i];
                                    b.accumulate_grad(tmp);
                                  }
                                });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  auto x = a.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return Tensor<T>::make_result("scale", a.shape(), std::move(out), {a},
                                [a, factor](std::span<const T> g) {
                                  std::vector<T> d(g.size());
                                  for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * factor;
                                  a.accumulate_grad(d);
                                });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  auto x = a.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  if (auto* trace = DecisionTrace::active()) {
    for (std::size_t i = 0; i < x.size(); ++i) trace->record(x[i] > T(0));
  }
  return Tensor<T>::make_result("relu", a.shape(), std::move(out), {a},
                                [a](std::span<const T> g) {
                                  auto x = a.data();
                                  std::vector<T> d(g.size());
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                    d[i] = x[i] > T(0) ? g[i] : T(0);
                                  }
                                  a.accumulate_grad(d);
                                });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  auto x = a.data();
  std::vector<T> out(x.size());
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
  }
  return Tensor<T>::make_result(
      "gelu", a.shape(), std::move(out), {a}, [a, inv_sqrt2](std::span<const T> g) {
        auto x = a.data();
        const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
        std::vector<T> d(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
          const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x[i] * x[i]);
          d[i] = g[i] * (cdf + x[i] * pdf);
        }
        a.accumulate_grad(d);
      });
}

// --- reductions ---------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  return Tensor<T>::make_result("sum", Shape{1}, {acc}, {a}, [a](std::span<const T> g) {
    std::vector<T> d(a.numel(), g[0]);
    a.accumulate_grad(d);
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  const T n = static_cast<T>(a.numel());
  return Tensor<T>::make_result("mean", Shape{1}, {acc / n}, {a},
                                [a, n](std::span<const T> g) {
                                  std::vector<T> d(a.numel(), g[0] / n);
                                  a.accumulate_grad(d);
                                });
}

template <class T>
Tensor<T> mean_axis(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.dim()) {
    throw ShapeError("mean_axis: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(a.shape()));
  }
  const AxisSplit s = split_axis(a.shape(), axis);
  Shape out_shape;
  for (std::size_t i = 0; i < a.dim(); ++i) {
    if (i != axis) out_shape.push_back(a.shape()[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  auto x = a.data();
  std::vector<T> out(s.outer * s.inner, T(0));
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t l = 0; l < s.len; ++l) {
      const T* src = x.data() + (o * s.len + l) * s.inner;
      T* dst = out.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  const T inv = T(1) / static_cast<T>(s.len);
  for (auto& v : out) v *= inv;
  return Tensor<T>::make_result("mean_axis", std::move(out_shape), std::move(out), {a},
                                [a, s, inv](std::span<const T> g) {
                                  std::vector<T> d(a.numel());
                                  for (std::size_t o = 0; o < s.outer; ++o) {
                                    for (std::size_t l = 0; l < s.len; ++l) {
                                      T* dst = d.data() + (o * s.len + l) * s.inner;
                                      const T* src = g.data() + o * s.inner;
                                      for (std::size_t i = 0; i < s.inner; ++i) {
                                        dst[i] = src[i] * inv;
                                      }
                                    }
                                  }
                                  a.accumulate_grad(d);
                                });
}

// --- matrix products ----------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a, bool trans_b) {
  if (a.dim() != b.dim() || (a.dim() != 2 && a.dim() != 3)) {
    throw ShapeError("matmul: operands must both be 2-D or 3-D, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  const bool batched = a.dim() == 3;
  const std::size_t batch = batched ? a.shape()[0] : 1;
  if (batched && b.shape()[0] != batch) fail_dim("matmul", "batch dimension 0", batch, b.shape()[0]);
  const std::size_t off = batched ? 1 : 0;
  const std::size_t ar = a.shape()[off], ac = a.shape()[off + 1];
  const std::size_t br = b.shape()[off], bc = b.shape()[off + 1];
  const std::size_t m = trans_a ? ac : ar;
  const std::size_t k = trans_a ? ar : ac;
  const std::size_t kb = trans_b ? bc : br;
  const std::size_t n = trans_b ? br : bc;
  if (k != kb) fail_dim("matmul", "inner dimension", k, kb);

  std::vector<T> out(batch * m * n);
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < batch; ++i) {
    const RowMat<T> A = owned(x.data() + i * ar * ac, ar, ac);
    const RowMat<T> B = owned(y.data() + i * br * bc, br, bc);
    T* C = out.data() + i * m * n;
    if (!trans_a && !trans_b) store(C, m, n, A * B);
    else if (trans_a && !trans_b) store(C, m, n, A.transpose() * B);
    else if (!trans_a && trans_b) store(C, m, n, A * B.transpose());
    else store(C, m, n, A.transpose() * B.transpose());
  }
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  return Tensor<T>::make_result(
      "matmul", std::move(shape), std::move(out), {a, b},
      [a, b, batch, ar, ac, br, bc, m, n, trans_a, trans_b](std::span<const T> g) {
        auto x = a.data();
        auto y = b.data();
        if (a.requires_grad()) {
          std::vector<T> da(a.numel());
          for (std::size_t i = 0; i < batch; ++i) {
            const RowMat<T> G = owned(g.data() + i * m * n, m, n);
            const RowMat<T> B = owned(y.data() + i * br * bc, br, bc);
            T* D = da.data() + i * ar * ac;
            // op(B) is [k,n]
            if (!trans_a) {
              if (!trans_b) store(D, ar, ac, G * B.transpose());
              else store(D, ar, ac, G * B);
            } else {
              if (!trans_b) store(D, ar, ac, B * G.transpose());
              else store(D, ar, ac, B.transpose() * G.transpose());
            }
          }
          a.accumulate_grad(da);
        }
        if (b.requires_grad()) {
          std::vector<T> db(b.numel());
          for (std::size_t i = 0; i < batch; ++i) {
            const RowMat<T> G = owned(g.data() + i * m * n, m, n);
            const RowMat<T> A = owned(x.data() + i * ar * ac, ar, ac);
            T* D = db.data() + i * br * bc;
            // op(A) is [m,k]
            if (!trans_b) {
              if (!trans_a) store(D, br, bc, A.transpose() * G);
              else store(D, br, bc, A * G);
            } else {
              if (!trans_a) store(D, br, bc, G.transpose() * A);
              else store(D, br, bc, G.transpose() * A.transpose());
            }
          }
          b.accumulate_grad(db);
        }
      });
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(weight, 2, "linear", "weight");
  const std::size_t f_out = weight.shape()[0];
  const std::size_t f_in = weight.shape()[1];
  if (x.dim() < 1) throw ShapeError("linear: input must have rank >= 1");
  if (x.shape().back() != f_in) fail_dim("linear", "input feature dimension", f_in, x.shape().back());
  if (bias.defined()) {
    require_rank(bias, 1, "linear", "bias");
    if (bias.shape()[0] != f_out) fail_dim("linear", "bias length", f_out, bias.shape()[0]);
  }
  const std::size_t rows = x.numel() / f_in;
  auto xv = x.data();
  auto wv = weight.data();
  std::vector<T> wt(f_in * f_out);
  for (std::size_t o = 0; o < f_out; ++o) {
    for (std::size_t k = 0; k < f_in; ++k) wt[k * f_out + o] = wv[o * f_in + k];
  }
  std::vector<T> out(rows * f_out);
  for (std::size_t r = 0; r < rows; ++r) {
    T* y = out.data() + r * f_out;
    if (bias.defined()) {
      auto bv = bias.data();
      std::copy(bv.begin(), bv.end(), y);
    } else {
      std::fill(y, y + f_out, T(0));
    }
    const T* xr = xv.data() + r * f_in;
    for (std::size_t k = 0; k < f_in; ++k) {
      const T s = xr[k];
      const T* w = wt.data() + k * f_out;
      for (std::size_t o = 0; o < f_out; ++o) y[o] += s * w[o];
    }
  }
  Shape shape = x.shape();
  shape.back() = f_out;
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor<T>::make_result(
      "linear", std::move(shape), std::move(out), std::move(inputs),
      [x, weight, bias, rows, f_in, f_out](std::span<const T> g) {
        const RowMat<T> G = owned(g.data(), rows, f_out);
        if (x.requires_grad()) {
          std::vector<T> dx(rows * f_in);
          const RowMat<T> W = owned(weight.data().data(), f_out, f_in);
          store(dx.data(), rows, f_in, G * W);
          x.accumulate_grad(dx);
        }
        if (weight.requires_grad()) {
          std::vector<T> dw(f_out * f_in);
          const RowMat<T> X = owned(x.data().data(), rows, f_in);
          store(dw.data(), f_out, f_in, G.transpose() * X);
          weight.accumulate_grad(dw);
        }
        if (bias.defined() && bias.requires_grad()) {
          std::vector<T> db(f_out, T(0));
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t o = 0; o < f_out; ++o) db[o] += g[r * f_out + o];
          }
          bias.accumulate_grad(db);
        }
      });
}

// --- convolution (patch gather + GEMM) -----------------------------------------

namespace {

struct ConvGeom {
  std::size_t n, c, h, w, o, kh, kw, stride, pad, ho, wo;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t pixels() const { return ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// cols has row stride `ld`; writes columns [col0, col0 + pixels).
template <class T>
void im2col(const T* x, const ConvGeom& g, T* cols, std::size_t ld, std::size_t col0) {
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols + ((c * g.kh + ki) * g.kw + kj) * ld + col0;
        const T* plane = x + c * g.h * g.w;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
          T* dst = row + oh * g.wo;
          if (ih < 0 || ih >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(ih) * g.w;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
            dst[ow] = (iw < 0 || iw >= static_cast<long>(g.w)) ? T(0)
                                                                 : src[static_cast<std::size_t>(iw)];
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* cols, const ConvGeom& g, std::size_t ld, std::size_t col0, T* dx) {
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * ld + col0;
        T* plane = dx + c * g.h * g.w;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
          if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
          T* dst = plane + static_cast<std::size_t>(ih) * g.w;
          const T* src = row + oh * g.wo;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
            if (iw >= 0 && iw < static_cast<long>(g.w)) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

// Items per GEMM so the gathered patch matrix stays around 8 MiB.
template <class T>
std::size_t conv_chunk(const ConvGeom& g) {
  const std::size_t per_item = g.patch() * g.pixels() * sizeof(T);
  return std::clamp<std::size_t>((std::size_t{8} << 20) / std::max<std::size_t>(per_item, 1), 1,
                                 g.n);
}

}  // namespace

template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride,
                 std::size_t padding) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(kernel, 4, "conv2d", "kernel");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  ConvGeom g{};
  g.n = input.shape()[0];
  g.c = input.shape()[1];
  g.h = input.shape()[2];
  g.w = input.shape()[3];
  g.o = kernel.shape()[0];
  g.kh = kernel.shape()[2];
  g.kw = kernel.shape()[3];
  g.stride = stride;
  g.pad = padding;
  if (kernel.shape()[1] != g.c) fail_dim("conv2d", "input channel dimension 1", kernel.shape()[1], g.c);
  if (g.h + 2 * padding < g.kh) fail_dim("conv2d", "padded height (dimension 2)", g.kh, g.h + 2 * padding);
  if (g.w + 2 * padding < g.kw) fail_dim("conv2d", "padded width (dimension 3)", g.kw, g.w + 2 * padding);
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;

  const std::size_t K = g.patch(), P = g.pixels(), in_item = g.c * g.h * g.w;
  const std::size_t chunk = conv_chunk<T>(g);
  std::vector<T> out(g.n * g.o * P);
  auto x = input.data();
  const RowMat<T> W = owned(kernel.data().data(), g.o, K);
  AlignedVec<T> cols, res;
  for (std::size_t n0 = 0; n0 < g.n; n0 += chunk) {
    const std::size_t cnt = std::min(chunk, g.n - n0);
    const std::size_t ld = cnt * P;
    if (g.pointwise() && cnt == 1) {
      store(out.data() + n0 * g.o * P, g.o, P, W * owned(x.data() + n0 * in_item, K, P));
      continue;
    }
    cols.resize(K * ld);
    for (std::size_t i = 0; i < cnt; ++i) im2col(x.data() + (n0 + i) * in_item, g, cols.data(), ld, i * P);
    res.resize(g.o * ld);
    MutMap<T>(res.data(), g.o, ld).noalias() = W * ConstMap<T>(cols.data(), K, ld);
    for (std::size_t i = 0; i < cnt; ++i) {
      for (std::size_t o = 0; o < g.o; ++o) {
        std::copy_n(res.data() + o * ld + i * P, P, out.data() + ((n0 + i) * g.o + o) * P);
      }
    }
  }
  return Tensor<T>::make_result(
      "conv2d", Shape{g.n, g.o, g.ho, g.wo}, std::move(out), {input, kernel},
      [input, kernel, g](std::span<const T> grad) {
        const std::size_t K = g.patch(), P = g.pixels(), in_item = g.c * g.h * g.w;
        const std::size_t chunk = conv_chunk<T>(g);
        auto x = input.data();
        const RowMat<T> W = owned(kernel.data().data(), g.o, K);
        AlignedVec<T> dw(kernel.requires_grad() ? g.o * K : 0, T(0));
        std::vector<T> dx(input.requires_grad() ? input.numel() : 0, T(0));
        AlignedVec<T> cols, gbig, dcols;
        for (std::size_t n0 = 0; n0 < g.n; n0 += chunk) {
          const std::size_t cnt = std::min(chunk, g.n - n0);
          const std::size_t ld = cnt * P;
          gbig.resize(g.o * ld);
          for (std::size_t i = 0; i < cnt; ++i) {
            for (std::size_t o = 0; o < g.o; ++o) {
              std::copy_n(grad.data() + ((n0 + i) * g.o + o) * P, P, gbig.data() + o * ld + i * P);
            }
          }
          ConstMap<T> G(gbig.data(), g.o, ld);
          if (kernel.requires_grad()) {
            cols.resize(K * ld);
            for (std::size_t i = 0; i < cnt; ++i) {
              im2col(x.data() + (n0 + i) * in_item, g, cols.data(), ld, i * P);
            }
            MutMap<T>(dw.data(), g.o, K).noalias() += G * ConstMap<T>(cols.data(), K, ld).transpose();
          }
          if (input.requires_grad()) {
            dcols.resize(K * ld);
            MutMap<T>(dcols.data(), K, ld).noalias() = W.transpose() * G;
            for (std::size_t i = 0; i < cnt; ++i) {
              col2im_add(dcols.data(), g, ld, i * P, dx.data() + (n0 + i) * in_item);
            }
          }
        }
        if (kernel.requires_grad()) kernel.accumulate_grad(dw);
        if (input.requires_grad()) input.accumulate_grad(dx);
      });
}

// --- normalization ------------------------------------------------------------

template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                     T momentum, T eps) {
  if (x.dim() < 2) throw ShapeError("batch_norm: input must be [n,c,...], got " + shape_str(x.shape()));
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  const std::size_t spatial = x.numel() / (n * c);
  for (const Tensor<T>* p : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &running_mean, &running_var}) {
    if (p->numel() != c) fail_dim("batch_norm", "channel dimension 1", p->numel(), c);
  }
  const std::size_t m = n * spatial;
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  std::vector<T> mu(c), invstd(c);
  if (training) {
    auto rm = running_mean.data();
    auto rv = running_var.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      T s = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = xv.data() + (i * c + ch) * spatial;
        for (std::size_t j = 0; j < spatial; ++j) s += p[j];
      }
      const T mean = s / static_cast<T>(m);
      T ss = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = xv.data() + (i * c + ch) * spatial;
        for (std::size_t j = 0; j < spatial; ++j) ss += (p[j] - mean) * (p[j] - mean);
      }
      const T var = ss / static_cast<T>(m);
      mu[ch] = mean;
      invstd[ch] = T(1) / std::sqrt(var + eps);
      const T unbiased = m > 1 ? ss / static_cast<T>(m - 1) : var;
      rm[ch] = (T(1) - momentum) * rm[ch] + momentum * mean;
      rv[ch] = (T(1) - momentum) * rv[ch] + momentum * unbiased;
    }
  } else {
    auto rm = running_mean.data();
    auto rv = running_var.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = rm[ch];
      invstd[ch] = T(1) / std::sqrt(rv[ch] + eps);
    }
  }
  std::vector<T> xhat(x.numel()), out(x.numel());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (i * c + ch) * spatial;
      for (std::size_t j = 0; j < spatial; ++j) {
        const T h = (xv[base + j] - mu[ch]) * invstd[ch];
        xhat[base + j] = h;
        out[base + j] = gv[ch] * h + bv[ch];
      }
    }
  }
  return Tensor<T>::make_result(
      "batch_norm", x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), invstd = std::move(invstd), n, c, spatial, m,
       training](std::span<const T> g) {
        std::vector<T> sg(c, T(0)), sgx(c, T(0));
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (i * c + ch) * spatial;
            for (std::size_t j = 0; j < spatial; ++j) {
              sg[ch] += g[base + j];
              sgx[ch] += g[base + j] * xhat[base + j];
            }
          }
        }
        if (gamma.requires_grad()) gamma.accumulate_grad(sgx);
        if (beta.requires_grad()) beta.accumulate_grad(sg);
        if (!x.requires_grad()) return;
        auto gv = gamma.data();
        std::vector<T> dx(x.numel());
        const T inv_m = T(1) / static_cast<T>(m);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (i * c + ch) * spatial;
            const T k = gv[ch] * invstd[ch];
            for (std::size_t j = 0; j < spatial; ++j) {
              dx[base + j] = training ? k * (g[base + j] - inv_m * sg[ch] - xhat[base + j] * inv_m * sgx[ch])
                                      : k * g[base + j];
            }
          }
        }
        x.accumulate_grad(dx);
      });
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d) fail_dim("layer_norm", "gamma length", d, gamma.numel());
  if (beta.numel() != d) fail_dim("layer_norm", "beta length", d, beta.numel());
  const std::size_t rows = x.numel() / d;
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  std::vector<T> xhat(x.numel()), invstd(rows), out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = xv.data() + r * d;
    T s = 0;
    for (std::size_t j = 0; j < d; ++j) s += p[j];
    const T mean = s / static_cast<T>(d);
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += (p[j] - mean) * (p[j] - mean);
    const T is = T(1) / std::sqrt(ss / static_cast<T>(d) + eps);
    invstd[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (p[j] - mean) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = gv[j] * h + bv[j];
    }
  }
  return Tensor<T>::make_result(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), invstd = std::move(invstd), rows,
       d](std::span<const T> g) {
        auto gv = gamma.data();
        std::vector<T> dgamma(d, T(0)), dbeta(d, T(0));
        std::vector<T> dx(x.requires_grad() ? x.numel() : 0);
        std::vector<T> dh(d);
        const T inv_d = T(1) / static_cast<T>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr = g.data() + r * d;
          const T* hr = xhat.data() + r * d;
          T s1 = 0, s2 = 0;
          for (std::size_t j = 0; j < d; ++j) {
            dgamma[j] += gr[j] * hr[j];
            dbeta[j] += gr[j];
            dh[j] = gr[j] * gv[j];
            s1 += dh[j];
            s2 += dh[j] * hr[j];
          }
          if (!dx.empty()) {
            for (std::size_t j = 0; j < d; ++j) {
              dx[r * d + j] = invstd[r] * (dh[j] - inv_d * s1 - hr[j] * inv_d * s2);
            }
          }
        }
        if (gamma.requires_grad()) gamma.accumulate_grad(dgamma);
        if (beta.requires_grad()) beta.accumulate_grad(dbeta);
        if (!dx.empty()) x.accumulate_grad(dx);
      });
}

// --- pooling / resampling -------------------------------------------------------

template <class T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t k) {
  require_rank(x, 4, "avg_pool2d", "input");
  if (k < 1) throw ShapeError("avg_pool2d: factor must be >= 1");
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  if (h % k != 0) throw ShapeError("avg_pool2d: factor " + std::to_string(k) + " does not divide height " + std::to_string(h));
  if (w % k != 0) throw ShapeError("avg_pool2d: factor " + std::to_string(k) + " does not divide width " + std::to_string(w));
  if (k == 1) return reshape(x, x.shape());
  const std::size_t ho = h / k, wo = w / k;
  const T inv = T(1) / static_cast<T>(k * k);
  auto xv = x.data();
  std::vector<T> out(n * c * ho * wo, T(0));
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = xv.data() + p * h * w;
    T* dst = out.data() + p * ho * wo;
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) dst[(i / k) * wo + j / k] += src[i * w + j];
    }
    for (std::size_t q = 0; q < ho * wo; ++q) dst[q] *= inv;
  }
  return Tensor<T>::make_result("avg_pool2d", Shape{n, c, ho, wo}, std::move(out), {x},
                                [x, n, c, h, w, k, ho, wo, inv](std::span<const T> g) {
                                  std::vector<T> dx(x.numel());
                                  for (std::size_t p = 0; p < n * c; ++p) {
                                    const T* src = g.data() + p * ho * wo;
                                    T* dst = dx.data() + p * h * w;
                                    for (std::size_t i = 0; i < h; ++i) {
                                      for (std::size_t j = 0; j < w; ++j) {
                                        dst[i * w + j] = src[(i / k) * wo + j / k] * inv;
                                      }
                                    }
                                  }
                                  x.accumulate_grad(dx);
                                });
}

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank(x, 4, "global_avg_pool", "input");
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  const std::size_t hw = x.shape()[2] * x.shape()[3];
  auto xv = x.data();
  std::vector<T> out(n * c);
  for (std::size_t p = 0; p < n * c; ++p) {
    T s = 0;
    for (std::size_t j = 0; j < hw; ++j) s += xv[p * hw + j];
    out[p] = s / static_cast<T>(hw);
  }
  return Tensor<T>::make_result("global_avg_pool", Shape{n, c}, std::move(out), {x},
                                [x, n, c, hw](std::span<const T> g) {
                                  std::vector<T> dx(x.numel());
                                  for (std::size_t p = 0; p < n * c; ++p) {
                                    const T v = g[p] / static_cast<T>(hw);
                                    std::fill_n(dx.data() + p * hw, hw, v);
                                  }
                                  x.accumulate_grad(dx);
                                });
}

template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t k) {
  require_rank(x, 4, "upsample_nearest", "input");
  if (k < 1) throw ShapeError("upsample_nearest: factor must be >= 1");
  if (k == 1) return reshape(x, x.shape());
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const std::size_t ho = h * k, wo = w * k;
  auto xv = x.data();
  std::vector<T> out(n * c * ho * wo);
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = xv.data() + p * h * w;
    T* dst = out.data() + p * ho * wo;
    for (std::size_t i = 0; i < ho; ++i) {
      for (std::size_t j = 0; j < wo; ++j) dst[i * wo + j] = src[(i / k) * w + j / k];
    }
  }
  return Tensor<T>::make_result("upsample_nearest", Shape{n, c, ho, wo}, std::move(out), {x},
                                [x, n, c, h, w, k, ho, wo](std::span<const T> g) {
                                  std::vector<T> dx(x.numel(), T(0));
                                  for (std::size_t p = 0; p < n * c; ++p) {
                                    const T* src = g.data() + p * ho * wo;
                                    T* dst = dx.data() + p * h * w;
                                    for (std::size_t i = 0; i < ho; ++i) {
                                      for (std::size_t j = 0; j < wo; ++j) {
                                        dst[(i / k) * w + j / k] += src[i * wo + j];
                                      }
                                    }
                                  }
                                  x.accumulate_grad(dx);
                                });
}

// --- layout ------------------------------------------------------------------

template <class T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, std::size_t axis) {
  if (a.dim() != b.dim()) fail_dim("concat", "rank", a.dim(), b.dim());
  if (axis >= a.dim()) throw ShapeError("concat: axis " + std::to_string(axis) + " out of range");
  for (std::size_t i = 0; i < a.dim(); ++i) {
    if (i != axis && a.shape()[i] != b.shape()[i]) {
      fail_dim("concat", "dimension " + std::to_string(i), a.shape()[i], b.shape()[i]);
    }
  }
  const AxisSplit sa = split_axis(a.shape(), axis);
  const AxisSplit sb = split_axis(b.shape(), axis);
  const std::size_t la = sa.len * sa.inner, lb = sb.len * sb.inner;
  Shape shape = a.shape();
  shape[axis] += b.shape()[axis];
  auto av = a.data();
  auto bv = b.data();
  std::vector<T> out(a.numel() + b.numel());
  for (std::size_t o = 0; o < sa.outer; ++o) {
    std::copy_n(av.data() + o * la, la, out.data() + o * (la + lb));
    std::copy_n(bv.data() + o * lb, lb, out.data() + o * (la + lb) + la);
  }
  const std::size_t outer = sa.outer;
  return Tensor<T>::make_result("concat", std::move(shape), std::move(out), {a, b},
                                [a, b, outer, la, lb](std::span<const T> g) {
                                  if (a.requires_grad()) {
                                    std::vector<T> da(outer * la);
                                    for (std::size_t o = 0; o < outer; ++o) {
                                      std::copy_n(g.data() + o * (la + lb), la, da.data() + o * la);
                                    }
                                    a.accumulate_grad(da);
                                  }
                                  if (b.requires_grad()) {
                                    std::vector<T> db(outer * lb);
                                    for (std::size_t o = 0; o < outer; ++o) {
                                      std::copy_n(g.data() + o * (la + lb) + la, lb, db.data() + o * lb);
                                    }
                                    b.accumulate_grad(db);
                                  }
                                });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return Tensor<T>::make_view("reshape", std::move(shape), x,
                              [x](std::span<const T> g) { x.accumulate_grad(g); });
}

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t rank = x.dim();
  if (perm.size() != rank) fail_dim("permute", "permutation length", rank, perm.size());
  std::vector<bool> used(rank, false);
  for (auto p : perm) {
    if (p >= rank || used[p]) throw ShapeError("permute: invalid permutation");
    used[p] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.shape()[perm[i]];
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.shape()[i];
  // source index for each output position
  std::vector<std::size_t> src(x.numel());
  std::vector<std::size_t> idx(rank, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < src.size(); ++flat) {
    src[flat] = offset;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      offset += in_stride[perm[d]];
      if (idx[d] < out_shape[d]) break;
      offset -= in_stride[perm[d]] * out_shape[d];
      idx[d] = 0;
    }
  }
  auto xv = x.data();
  std::vector<T> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = xv[src[i]];
  return Tensor<T>::make_result("permute", std::move(out_shape), std::move(out), {x},
                                [x, src = std::move(src)](std::span<const T> g) {
                                  std::vector<T> dx(x.numel());
                                  for (std::size_t i = 0; i < src.size(); ++i) dx[src[i]] = g[i];
                                  x.accumulate_grad(dx);
                                });
}

template <class T>
Tensor<T> repeat_batch(const Tensor<T>& x, std::size_t times) {
  if (times < 1) throw ShapeError("repeat_batch: times must be >= 1");
  Shape shape = x.shape();
  shape[0] *= times;
  const std::size_t n = x.numel();
  auto xv = x.data();
  std::vector<T> out(n * times);
  for (std::size_t t = 0; t < times; ++t) std::copy(xv.begin(), xv.end(), out.begin() + t * n);
  return Tensor<T>::make_result("repeat_batch", std::move(shape), std::move(out), {x},
                                [x, n, times](std::span<const T> g) {
                                  std::vector<T> dx(g.begin(), g.begin() + n);
                                  for (std::size_t t = 1; t < times; ++t) {
                                    for (std::size_t i = 0; i < n; ++i) dx[i] += g[t * n + i];
                                  }
                                  x.accumulate_grad(dx);
                                });
}

// --- softmax / loss -------------------------------------------------------------

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& m) {
  const std::size_t d = m.shape().back();
  const std::size_t rows = m.numel() / d;
  auto xv = m.data();
  std::vector<T> out(m.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = xv.data() + r * d;
    T* y = out.data() + r * d;
    const T mx = *std::max_element(x, x + d);
    T s = 0;
    for (std::size_t j = 0; j < d; ++j) {
      y[j] = std::exp(x[j] - mx);
      s += y[j];
    }
    for (std::size_t j = 0; j < d; ++j) y[j] /= s;
  }
  std::vector<T> probs = out;
  return Tensor<T>::make_result("softmax_rows", m.shape(), std::move(out), {m},
                                [m, probs = std::move(probs), rows, d](std::span<const T> g) {
                                  std::vector<T> dx(m.numel());
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    const T* y = probs.data() + r * d;
                                    const T* gr = g.data() + r * d;
                                    T dot = 0;
                                    for (std::size_t j = 0; j < d; ++j) dot += gr[j] * y[j];
                                    for (std::size_t j = 0; j < d; ++j) dx[r * d + j] = y[j] * (gr[j] - dot);
                                  }
                                  m.accumulate_grad(dx);
                                });
}

template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy", "logits");
  const std::size_t b = logits.shape()[0], c = logits.shape()[1];
  if (labels.size() != b) fail_dim("cross_entropy", "label count", b, labels.size());
  auto xv = logits.data();
  std::vector<T> probs(b * c);
  T total = 0;
  for (std::size_t r = 0; r < b; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= c) {
      throw std::invalid_argument("cross_entropy: label " + std::to_string(labels[r]) +
                                  " out of range for " + std::to_string(c) + " classes");
    }
    const T* x = xv.data() + r * c;
    const T mx = *std::max_element(x, x + c);
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[r * c + j] = std::exp(x[j] - mx);
      s += probs[r * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= s;
    total += (mx + std::log(s)) - x[labels[r]];
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return Tensor<T>::make_result(
      "cross_entropy", Shape{1}, {total / static_cast<T>(b)}, {logits},
      [logits, probs = std::move(probs), lab = std::move(lab), b, c](std::span<const T> g) {
        std::vector<T> dx(probs);
        for (std::size_t r = 0; r < b; ++r) dx[r * c + static_cast<std::size_t>(lab[r])] -= T(1);
        const T k = g[0] / static_cast<T>(b);
        for (auto& v : dx) v *= k;
        logits.accumulate_grad(dx);
      });
}

#define RESPIKE_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                            \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                                \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                 \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                \
  template Tensor<T> mean_axis<T>(const Tensor<T>&, std::size_t);                              \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&, bool, bool);                \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);          \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);  \
  template Tensor<T> batch_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                   Tensor<T>&, Tensor<T>&, bool, T, T);                        \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);   \
  template Tensor<T> avg_pool2d<T>(const Tensor<T>&, std::size_t);                             \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                     \
  template Tensor<T> upsample_nearest<T>(const Tensor<T>&, std::size_t);                       \
  template Tensor<T> concat<T>(const Tensor<T>&, const Tensor<T>&, std::size_t);               \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                      \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<std::size_t>&);            \
  template Tensor<T> repeat_batch<T>(const Tensor<T>&, std::size_t);                           \
  template Tensor<T> softmax_rows<T>(const Tensor<T>&);                                        \
  template Tensor<T> cross_entropy<T>(const Tensor<T>&, std::span<const int>);

RESPIKE_INSTANTIATE_OPS(float)
RESPIKE_INSTANTIATE_OPS(double)

}  // namespace respike::ops

#include "respike/keyres.hpp"

#include <cmath>
#include <cstdio>
#include <mutex>
#include <stdexcept>

namespace respike {

namespace {
std::mutex g_sink_mutex;
WarningSink g_sink;
}  // namespace

void set_warning_sink(WarningSink sink) {
  std::lock_guard<std::mutex> lock(g_sink_mutex);
  g_sink = std::move(sink);
}

void emit_warning(const std::string& message) {
  std::lock_guard<std::mutex> lock(g_sink_mutex);
  if (g_sink) g_sink(message);
  else std::fprintf(stderr, "warning: %s\n", message.c_str());
}

template <class T>
KeyResSegments<T> decompose(const Tensor<T>& frames, std::size_t s) {
  if (frames.dim() != 4) {
    throw ShapeError("decompose: clip must be [T,c,h,w], got " + shape_str(frames.shape()));
  }
  if (s < 2) {
    throw std::invalid_argument("decompose: invalid stride " + std::to_string(s) +
                                " (need s >= 2 for at least one residual frame)");
  }
  const std::size_t total = frames.shape()[0];
  if (total < s) {
    throw std::invalid_argument("decompose: stride " + std::to_string(s) + " exceeds clip length " +
                                std::to_string(total));
  }
  const std::size_t n = total / s;
  if (n * s != total) {
    emit_warning("decompose: T=" + std::to_string(total) + " is not a multiple of s=" +
                 std::to_string(s) + "; dropping " + std::to_string(total - n * s) +
                 " trailing frame(s)");
  }
  const std::size_t c = frames.shape()[1], h = frames.shape()[2], w = frames.shape()[3];
  const std::size_t fsize = c * h * w;
  auto x = frames.data();
  std::vector<T> keys(n * fsize), res(n * (s - 1) * fsize);
  for (std::size_t k = 0; k < n; ++k) {
    const T* key = x.data() + k * s * fsize;
    std::copy(key, key + fsize, keys.begin() + k * fsize);
    for (std::size_t j = 1; j < s; ++j) {
      const T* f = x.data() + (k * s + j) * fsize;
      T* r = res.data() + (k * (s - 1) + j - 1) * fsize;
      for (std::size_t i = 0; i < fsize; ++i) r[i] = f[i] - key[i];
    }
  }
  KeyResSegments<T> out;
  out.keys = Tensor<T>({n, c, h, w}, std::move(keys));
  out.residuals = Tensor<T>({n, s - 1, c, h, w}, std::move(res));
  out.stride = s;
  out.segments = n;
  return out;
}

template <class T>
Tensor<T> recompose(const KeyResSegments<T>& segs) {
  const std::size_t n = segs.segments, s = segs.stride;
  const Shape& ks = segs.keys.shape();
  const std::size_t c = ks[1], h = ks[2], w = ks[3];
  const std::size_t fsize = c * h * w;
  auto keys = segs.keys.data();
  auto res = segs.residuals.data();
  std::vector<T> out(n * s * fsize);
  for (std::size_t k = 0; k < n; ++k) {
    const T* key = keys.data() + k * fsize;
    std::copy(key, key + fsize, out.begin() + k * s * fsize);
    for (std::size_t j = 1; j < s; ++j) {
      const T* r = res.data() + (k * (s - 1) + j - 1) * fsize;
      T* f = out.data() + (k * s + j) * fsize;
      for (std::size_t i = 0; i < fsize; ++i) f[i] = r[i] + key[i];
    }
  }
  return Tensor<T>({n * s, c, h, w}, std::move(out));
}

template <class T>
double residual_nonzero_fraction(const KeyResSegments<T>& segs, double threshold) {
  std::size_t nz = 0;
  for (T v : segs.residuals.data()) {
    if (std::abs(static_cast<double>(v)) > threshold) ++nz;
  }
  return static_cast<double>(nz) / static_cast<double>(segs.residuals.numel());
}

template KeyResSegments<float> decompose<float>(const Tensor<float>&, std::size_t);
template KeyResSegments<double> decompose<double>(const Tensor<double>&, std::size_t);
template Tensor<float> recompose<float>(const KeyResSegments<float>&);
template Tensor<double> recompose<double>(const KeyResSegments<double>&);
template double residual_nonzero_fraction<float>(const KeyResSegments<float>&, double);
template double residual_nonzero_fraction<double>(const KeyResSegments<double>&, double);

}  // namespace respike

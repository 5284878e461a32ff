#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "respike/tensor.hpp"

namespace testsupport {

using respike::Shape;
using respike::Tensor;

// Small hand-rolled generator for property tests: draws are reproducible from
// the case index alone.
class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed * 0x9E3779B97F4A7C15ull + 17) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  std::size_t index(std::size_t lo, std::size_t hi) {  // inclusive
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
  }
  bool coin() { return (rng_() & 1) != 0; }

  template <class T>
  Tensor<T> tensor(Shape shape, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(uniform(lo, hi));
    return t;
  }

  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("respike_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Direct nested-loop convolution, the reference for conv2d.
template <class T>
std::vector<double> naive_conv(const Tensor<T>& x, const Tensor<T>& k, std::size_t stride,
                               std::size_t pad) {
  const auto& xs = x.shape();
  const auto& ks = k.shape();
  const std::size_t n = xs[0], ci = xs[1], h = xs[2], w = xs[3];
  const std::size_t co = ks[0], kh = ks[2], kw = ks[3];
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1, wo = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> out(n * co * ho * wo, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t y = 0; y < ho; ++y)
        for (std::size_t xx = 0; xx < wo; ++xx) {
          double acc = 0;
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t dy = 0; dy < kh; ++dy)
              for (std::size_t dx = 0; dx < kw; ++dx) {
                const long iy = static_cast<long>(y * stride + dy) - static_cast<long>(pad);
                const long ix = static_cast<long>(xx * stride + dx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                acc += static_cast<double>(x[((b * ci + c) * h + iy) * w + ix]) *
                       static_cast<double>(k[((o * ci + c) * kh + dy) * kw + dx]);
              }
          out[((b * co + o) * ho + y) * wo + xx] = acc;
        }
  return out;
}

}  // namespace testsupport

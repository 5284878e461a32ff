#include "respike/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace respike {

template <class T>
TokenGrid<T> tokenize(const Tensor<T>& feature, std::size_t downsample) {
  if (feature.dim() != 4) {
    throw ShapeError("tokenize: feature must be [n,c,h,w], got " + shape_str(feature.shape()));
  }
  Tensor<T> pooled = ops::avg_pool2d(feature, downsample);
  const std::size_t n = pooled.shape()[0], c = pooled.shape()[1];
  const std::size_t h = pooled.shape()[2], w = pooled.shape()[3];
  Tensor<T> flat = ops::reshape(pooled, {n, c, h * w});
  return {ops::permute(flat, {0, 2, 1}), h, w, c};
}

template <class T>
Tensor<T> detokenize(const TokenGrid<T>& grid) {
  const std::size_t n = grid.tokens.shape()[0];
  Tensor<T> chw = ops::permute(grid.tokens, {0, 2, 1});
  return ops::reshape(chw, {n, grid.d, grid.h, grid.w});
}

std::size_t default_downsample(std::size_t h, std::size_t w, std::size_t max_tokens) {
  for (std::size_t f = 1; f <= std::min(h, w); ++f) {
    if (h % f == 0 && w % f == 0 && (h / f) * (w / f) <= max_tokens) return f;
  }
  throw std::invalid_argument("no downsample factor of " + std::to_string(h) + "x" +
                              std::to_string(w) + " leaves at most " + std::to_string(max_tokens) +
                              " tokens");
}

template <class T>
AttentionResult<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k,
                                        const Tensor<T>& v) {
  if (q.dim() != k.dim() || k.dim() != v.dim()) throw ShapeError("attention: rank mismatch");
  const std::size_t d = q.shape().back();
  if (k.shape().back() != d) {
    throw ShapeError("attention: key width " + std::to_string(k.shape().back()) +
                     " differs from query width " + std::to_string(d));
  }
  const std::size_t tok_axis = q.dim() - 2;
  if (k.shape()[tok_axis] != v.shape()[tok_axis]) {
    throw ShapeError("attention: " + std::to_string(k.shape()[tok_axis]) + " keys but " +
                     std::to_string(v.shape()[tok_axis]) + " values");
  }
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  Tensor<T> scores = ops::scale(ops::matmul(q, k, false, true), scale);
  Tensor<T> weights = ops::softmax_rows(scores);
  return {ops::matmul(weights, v), weights};
}

template <class T>
AttentionResult<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                        std::size_t heads) {
  const std::size_t n = q.shape()[0], m = q.shape()[1], d = q.shape()[2];
  const std::size_t p = k.shape()[1];
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  auto split = [&](const Tensor<T>& x, std::size_t len) {
    Tensor<T> r = ops::reshape(x, {n, len, heads, dh});
    return ops::reshape(ops::permute(r, {0, 2, 1, 3}), {n * heads, len, dh});
  };
  if (heads == 1) return scaled_dot_attention(q, k, v);
  AttentionResult<T> r = scaled_dot_attention(split(q, m), split(k, p), split(v, p));
  Tensor<T> merged = ops::permute(ops::reshape(r.out, {n, heads, m, dh}), {0, 2, 1, 3});
  return {ops::reshape(merged, {n, m, d}), r.weights};
}

template <class T>
FusionBlock<T>::FusionBlock(std::string name, std::size_t d, std::size_t c, std::size_t heads_,
                            std::size_t downsample_, std::size_t mlp_ratio, Rng& rng)
    : Module<T>(name),
      heads(heads_),
      downsample(downsample_),
      dim(d),
      ln_self(name + ".ln_self", d),
      self_q(name + ".self_q", d, d, rng),
      self_k(name + ".self_k", d, d, rng),
      self_v(name + ".self_v", d, d, rng),
      self_out(name + ".self_out", d, d, rng),
      reduce(name + ".reduce", c, d, rng),
      ln_kv(name + ".ln_kv", d),
      ln_cross(name + ".ln_cross", d),
      cross_q(name + ".cross_q", d, d, rng),
      cross_k(name + ".cross_k", d, d, rng),
      cross_v(name + ".cross_v", d, d, rng),
      cross_out(name + ".cross_out", d, d, rng),
      ln_mlp(name + ".ln_mlp", d),
      fc1(name + ".fc1", d, d * mlp_ratio, rng),
      fc2(name + ".fc2", d * mlp_ratio, d, rng) {
  if (heads == 0 || d % heads != 0) {
    throw std::invalid_argument(name + ": width " + std::to_string(d) + " not divisible by " +
                                std::to_string(heads) + " heads");
  }
  if (c < d) {
    throw std::invalid_argument(name + ": channel reduction needs ann width >= snn width (" +
                                std::to_string(c) + " < " + std::to_string(d) + ")");
  }
}

namespace {
template <class T>
void log_attention(ForwardContext<T>& ctx, const std::string& name, std::size_t m, std::size_t p,
                   std::size_t d, std::size_t applications) {
  if (!ctx.costs || ctx.costs->contains(name)) return;
  LayerCostSpec spec;
  spec.name = name;
  spec.kind = LayerKind::attention;
  spec.attn = {m, p, d, 0, 0, false};
  ctx.costs->add(std::move(spec), static_cast<double>(applications));
}
}  // namespace

template <class T>
Tensor<T> FusionBlock<T>::forward(const Tensor<T>& snn, const Tensor<T>& ann,
                                  std::size_t timesteps, ForwardContext<T>& ctx,
                                  Tensor<T>* cross_weights) {
  if (snn.dim() != 4 || ann.dim() != 4) throw ShapeError(this->name_ + ": inputs must be 4-D");
  if (snn.shape()[0] != ann.shape()[0] * timesteps) {
    throw ShapeError(this->name_ + ": snn batch " + std::to_string(snn.shape()[0]) + " is not " +
                     std::to_string(timesteps) + " x ann batch " + std::to_string(ann.shape()[0]));
  }
  if (snn.shape()[2] != ann.shape()[2] || snn.shape()[3] != ann.shape()[3]) {
    throw ShapeError(this->name_ + ": grid mismatch between branches, snn " +
                     shape_str(snn.shape()) + " vs ann " + shape_str(ann.shape()));
  }
  if (snn.shape()[1] != dim) {
    throw ShapeError(this->name_ + ": snn width " + std::to_string(snn.shape()[1]) +
                     " differs from block width " + std::to_string(dim));
  }
  TokenGrid<T> grid = tokenize(snn, downsample);
  const Tensor<T>& x0 = grid.tokens;
  const std::size_t slices = x0.shape()[0], len = x0.shape()[1];

  // self-attention over SNN tokens
  Tensor<T> h = ln_self.forward(x0);
  AttentionResult<T> sa = multi_head_attention(self_q.forward(h, ctx), self_k.forward(h, ctx),
                                               self_v.forward(h, ctx), heads);
  log_attention(ctx, this->name_ + ".self_attn", len, len, dim, slices);
  Tensor<T> x1 = ops::add(x0, self_out.forward(sa.out, ctx));

  // cross-attention: keys/values from reduced ANN tokens, shared by all slices
  TokenGrid<T> ann_grid = tokenize(ann, downsample);
  Tensor<T> kv = ln_kv.forward(reduce.forward(ann_grid.tokens, ctx));
  Tensor<T> key = ops::repeat_batch(cross_k.forward(kv, ctx), timesteps);
  Tensor<T> value = ops::repeat_batch(cross_v.forward(kv, ctx), timesteps);
  Tensor<T> q = cross_q.forward(ln_cross.forward(x1), ctx);
  AttentionResult<T> ca = multi_head_attention(q, key, value, heads);
  log_attention(ctx, this->name_ + ".cross_attn", len, ann_grid.tokens.shape()[1], dim, slices);
  if (cross_weights) *cross_weights = ca.weights;
  Tensor<T> x2 = ops::add(x1, cross_out.forward(ca.out, ctx));

  Tensor<T> m = fc2.forward(ops::gelu(fc1.forward(ln_mlp.forward(x2), ctx)), ctx);
  Tensor<T> x3 = ops::add(x2, m);

  TokenGrid<T> delta{ops::sub(x3, x0), grid.h, grid.w, dim};
  Tensor<T> back = ops::upsample_nearest(detokenize(delta), downsample);
  return ops::add(snn, back);
}

template <class T>
void FusionBlock<T>::collect(std::vector<NamedTensor<T>>& out) {
  ln_self.collect(out);
  self_q.collect(out);
  self_k.collect(out);
  self_v.collect(out);
  self_out.collect(out);
  reduce.collect(out);
  ln_kv.collect(out);
  ln_cross.collect(out);
  cross_q.collect(out);
  cross_k.collect(out);
  cross_v.collect(out);
  cross_out.collect(out);
  ln_mlp.collect(out);
  fc1.collect(out);
  fc2.collect(out);
}

template <class T>
void FusionBlock<T>::zero_output_projections() {
  for (Linear<T>* l : {&self_out, &cross_out, &fc2}) {
    std::fill(l->weight.data().begin(), l->weight.data().end(), T(0));
    if (l->bias.defined()) std::fill(l->bias.data().begin(), l->bias.data().end(), T(0));
  }
}

template <class T>
std::vector<double> head_averaged_row(const Tensor<T>& weights, std::size_t heads,
                                      std::size_t query_index) {
  const std::size_t m = weights.shape()[1], p = weights.shape()[2];
  if (query_index >= m) {
    throw std::out_of_range("query index " + std::to_string(query_index) + " out of range for " +
                            std::to_string(m) + " tokens");
  }
  std::vector<double> row(p, 0.0);
  auto w = weights.data();
  // slice 0 occupies the first `heads` matrices
  for (std::size_t hd = 0; hd < heads; ++hd) {
    const T* r = w.data() + (hd * m + query_index) * p;
    for (std::size_t j = 0; j < p; ++j) row[j] += static_cast<double>(r[j]);
  }
  for (auto& v : row) v /= static_cast<double>(heads);
  return row;
}

std::vector<std::pair<std::size_t, double>> top_k_entries(const std::vector<double>& row,
                                                          std::size_t top_k) {
  std::vector<std::pair<std::size_t, double>> entries;
  for (std::size_t j = 0; j < row.size(); ++j) entries.emplace_back(j, row[j]);
  std::stable_sort(entries.begin(), entries.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (entries.size() > top_k) entries.resize(top_k);
  return entries;
}

template <class T>
std::vector<double> cross_attention_row(FusionBlock<T>& block, const Tensor<T>& snn,
                                        const Tensor<T>& ann, std::size_t timesteps,
                                        std::size_t query_index) {
  NoGradGuard no_grad;
  ForwardContext<T> ctx;
  Tensor<T> weights;
  block.forward(snn, ann, timesteps, ctx, &weights);
  return head_averaged_row(weights, block.heads, query_index);
}

template <class T>
std::vector<std::pair<std::size_t, double>> export_attention_map(
    FusionBlock<T>& block, const Tensor<T>& snn, const Tensor<T>& ann, std::size_t timesteps,
    std::size_t query_index, std::size_t top_k) {
  return top_k_entries(cross_attention_row(block, snn, ann, timesteps, query_index), top_k);
}

#define RESPIKE_INSTANTIATE_FUSION(T)                                                        \
  template TokenGrid<T> tokenize<T>(const Tensor<T>&, std::size_t);                          \
  template Tensor<T> detokenize<T>(const TokenGrid<T>&);                                     \
  template AttentionResult<T> scaled_dot_attention<T>(const Tensor<T>&, const Tensor<T>&,    \
                                                      const Tensor<T>&);                     \
  template AttentionResult<T> multi_head_attention<T>(const Tensor<T>&, const Tensor<T>&,    \
                                                      const Tensor<T>&, std::size_t);        \
  template class FusionBlock<T>;                                                             \
  template std::vector<double> head_averaged_row<T>(const Tensor<T>&, std::size_t,          \
                                                    std::size_t);                            \
  template std::vector<double> cross_attention_row<T>(FusionBlock<T>&, const Tensor<T>&,     \
                                                      const Tensor<T>&, std::size_t,         \
                                                      std::size_t);                          \
  template std::vector<std::pair<std::size_t, double>> export_attention_map<T>(              \
      FusionBlock<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t,         \
      std::size_t);

RESPIKE_INSTANTIATE_FUSION(float)
RESPIKE_INSTANTIATE_FUSION(double)

}  // namespace respike

#pragma once

#include <utility>
#include <vector>

#include "respike/nn.hpp"
#include "respike/tensor.hpp"

namespace respike {

template <class T>
struct TokenGrid {
  Tensor<T> tokens;  // [n, h*w, d]
  std::size_t h = 0, w = 0, d = 0;
};

/// Average-pools [n,c,h,w] by `downsample` and flattens the grid into tokens.
template <class T>
TokenGrid<T> tokenize(const Tensor<T>& feature, std::size_t downsample);
/// Inverse of tokenize at the pooled resolution: [n, d, h, w].
template <class T>
Tensor<T> detokenize(const TokenGrid<T>& grid);

/// Smallest factor dividing h and w that leaves at most `max_tokens` tokens.
std::size_t default_downsample(std::size_t h, std::size_t w, std::size_t max_tokens = 49);

template <class T>
struct AttentionResult {
  Tensor<T> out;
  Tensor<T> weights;  // softmax rows, [batch, m, p]
};

/// softmax(Q K^T / sqrt(d)) V for [m,d]/[p,d] or batched [b,m,d]/[b,p,d].
template <class T>
AttentionResult<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k,
                                        const Tensor<T>& v);

/// Splits d into `heads` slices; weights are [n*heads, m, p] (head-minor).
template <class T>
AttentionResult<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                        std::size_t heads);

/// Pre-norm fusion block applied to every timestep slice with shared params:
///   x1 = x0 + SelfAttn(LN(x0))
///   x2 = x1 + CrossAttn(Q = LN(x1), K,V from LN(reduce(ann tokens)))
///   x3 = x2 + MLP(LN(x2))
/// and returns snn + upsample(detokenize(x3 - x0)), so zeroed output
/// projections give the identity.
template <class T>
class FusionBlock : public Module<T> {
 public:
  FusionBlock(std::string name, std::size_t snn_dim, std::size_t ann_dim, std::size_t heads,
              std::size_t downsample, std::size_t mlp_ratio, Rng& rng);

  /// snn: [T'*n, d, h, w] time-major; ann: [n, c, h, w]. When
  /// `cross_weights` is given it receives the cross-attention softmax rows.
  Tensor<T> forward(const Tensor<T>& snn, const Tensor<T>& ann, std::size_t timesteps,
                    ForwardContext<T>& ctx, Tensor<T>* cross_weights = nullptr);
  void collect(std::vector<NamedTensor<T>>& out) override;

  /// Zeroes the three residual-branch output projections.
  void zero_output_projections();

  std::size_t heads, downsample, dim;
  LayerNorm<T> ln_self;
  Linear<T> self_q, self_k, self_v, self_out;
  Linear<T> reduce;
  LayerNorm<T> ln_kv, ln_cross;
  Linear<T> cross_q, cross_k, cross_v, cross_out;
  LayerNorm<T> ln_mlp;
  Linear<T> fc1, fc2;
};

/// Head-averaged cross-attention row of `query_index` for the first unit and
/// timestep, as (key token, weight) sorted by descending weight (ties to the
/// lower index), truncated to top_k.
template <class T>
std::vector<std::pair<std::size_t, double>> export_attention_map(
    FusionBlock<T>& block, const Tensor<T>& snn, const Tensor<T>& ann, std::size_t timesteps,
    std::size_t query_index, std::size_t top_k);

/// Mean over heads of row `query_index` of the first slice of [n*heads, m, p]
/// softmax weights.
template <class T>
std::vector<double> head_averaged_row(const Tensor<T>& weights, std::size_t heads,
                                      std::size_t query_index);
/// (index, value) sorted by descending value, ties to the lower index.
std::vector<std::pair<std::size_t, double>> top_k_entries(const std::vector<double>& row,
                                                          std::size_t top_k);

/// The full head-averaged row (token order) used by export_attention_map.
template <class T>
std::vector<double> cross_attention_row(FusionBlock<T>& block, const Tensor<T>& snn,
                                        const Tensor<T>& ann, std::size_t timesteps,
                                        std::size_t query_index);

}  // namespace respike

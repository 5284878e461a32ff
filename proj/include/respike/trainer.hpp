#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdio>
#include <functional>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "respike/data.hpp"
#include "respike/errors.hpp"
#include "respike/nn.hpp"
#include "respike/ops.hpp"

namespace respike {

enum class LrSchedule { cosine, step, constant };

struct TrainConfig {
  double lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t epochs = 15;
  std::size_t batch_size = 8;
  std::uint64_t seed = 1;
  LrSchedule schedule = LrSchedule::cosine;
  std::size_t step_epochs = 10;  // step schedule: multiply by step_gamma every step_epochs
  double step_gamma = 0.1;
  double clip_norm = 0.0;  // global-norm clipping, 0 = off
  bool bn_eval = false;    // keep batch norm in eval mode while training
  // Per-clip random circular shift and channel permutation of training
  // batches. Label-preserving for the synthetic set, whose motion wraps
  // around the frame edges.
  bool augment = true;

  void validate() const {
    if (!(lr >= 0)) throw std::invalid_argument("train config: lr must be >= 0");
    if (momentum < 0 || momentum >= 1) throw std::invalid_argument("train config: momentum must be in [0,1)");
    if (weight_decay < 0) throw std::invalid_argument("train config: weight_decay must be >= 0");
    if (batch_size == 0) throw std::invalid_argument("train config: batch_size must be >= 1");
    if (clip_norm < 0) throw std::invalid_argument("train config: clip_norm must be >= 0");
  }

  double lr_at(std::size_t epoch) const {
    switch (schedule) {
      case LrSchedule::cosine:
        return lr * 0.5 * (1 + std::cos(std::numbers::pi * static_cast<double>(epoch) /
                                        static_cast<double>(std::max<std::size_t>(epochs, 1))));
      case LrSchedule::step:
        return lr * std::pow(step_gamma, static_cast<double>(epoch / std::max<std::size_t>(step_epochs, 1)));
      case LrSchedule::constant: return lr;
    }
    return lr;
  }
};

inline LrSchedule parse_schedule(const std::string& s) {
  if (s == "cosine") return LrSchedule::cosine;
  if (s == "step") return LrSchedule::step;
  if (s == "constant") return LrSchedule::constant;
  throw std::invalid_argument("unknown lr schedule '" + s + "' (expected cosine, step or constant)");
}

inline const char* schedule_name(LrSchedule s) {
  switch (s) {
    case LrSchedule::cosine: return "cosine";
    case LrSchedule::step: return "step";
    case LrSchedule::constant: return "constant";
  }
  return "?";
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"schedule", schedule_name(c.schedule)},
          {"step_epochs", c.step_epochs},
          {"step_gamma", c.step_gamma},
          {"clip_norm", c.clip_norm},
          {"bn_eval", c.bn_eval},
          {"augment", c.augment}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("train config: expected a JSON object");
  TrainConfig c;
  const nlohmann::json defaults = train_config_to_json(c);
  for (const auto& [key, _] : j.items()) {
    if (!defaults.contains(key)) throw std::invalid_argument("train config: unknown key '" + key + "'");
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("lr", c.lr);
    get("momentum", c.momentum);
    get("weight_decay", c.weight_decay);
    get("epochs", c.epochs);
    get("batch_size", c.batch_size);
    get("seed", c.seed);
    get("step_epochs", c.step_epochs);
    get("step_gamma", c.step_gamma);
    get("clip_norm", c.clip_norm);
    get("bn_eval", c.bn_eval);
    get("augment", c.augment);
    if (j.contains("schedule")) c.schedule = parse_schedule(j.at("schedule").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss = 0;
  double train_acc = 0;
  double val_acc = 0;
};

struct EvalResult {
  double loss = 0;
  double accuracy = 0;
  std::vector<int> predictions;
};

/// Anything trainable here: maps [b,T,c,h,w] clips to [b,classes] logits.
template <class M>
concept Classifier = requires(M m, const Tensor<typename M::value_type>& x,
                              ForwardContext<typename M::value_type>& ctx) {
  { m.forward(x, ctx) } -> std::same_as<Tensor<typename M::value_type>>;
  { m.parameters() } -> std::same_as<std::vector<Tensor<typename M::value_type>*>>;
};

/// v <- momentum*v + (g + wd*p);  p <- p - lr*v
template <class T>
class Sgd {
 public:
  Sgd(std::vector<Tensor<T>*> params, double momentum, double weight_decay)
      : params_(std::move(params)), momentum_(momentum), wd_(weight_decay) {
    for (auto* p : params_) velocity_.emplace_back(p->numel(), T(0));
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  /// Scales all grads so their global L2 norm is at most max_norm; returns the norm before.
  double clip_grad_norm(double max_norm) {
    double sq = 0;
    for (auto* p : params_) {
      if (!p->has_grad()) continue;
      for (T g : p->grad()) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0) {
      const T f = static_cast<T>(max_norm / norm);
      for (auto* p : params_)
        if (p->has_grad())
          for (T& g : p->mutable_grad()) g *= f;
    }
    return norm;
  }

  void step(double lr) {
    const T mu = static_cast<T>(momentum_), wd = static_cast<T>(wd_), eta = static_cast<T>(lr);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& p = *params_[i];
      if (!p.has_grad()) {
        throw std::logic_error("sgd_step: parameter " + std::to_string(i) + " " +
                               shape_str(p.shape()) + " has no gradient");
      }
      auto g = p.grad();
      auto d = p.data();
      auto& v = velocity_[i];
      for (std::size_t k = 0; k < d.size(); ++k) {
        v[k] = mu * v[k] + (g[k] + wd * d[k]);
        d[k] -= eta * v[k];
      }
    }
  }

  const std::vector<std::vector<T>>& velocity() const { return velocity_; }

 private:
  std::vector<Tensor<T>*> params_;
  std::vector<std::vector<T>> velocity_;
  double momentum_, wd_;
};

/// Row-wise argmax; ties go to the lowest index.
template <class T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const std::size_t rows = logits.shape()[0], cols = logits.shape()[1];
  auto d = logits.data();
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c)
      if (d[r * cols + c] > d[r * cols + best]) best = c;
    out[r] = static_cast<int>(best);
  }
  return out;
}

template <class T>
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size,
                                                   std::uint64_t seed, bool shuffle) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) {
    // Explicit Fisher-Yates so the permutation does not depend on the
    // standard library's shuffle implementation.
    std::mt19937_64 rng(seed);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    out.emplace_back(order.begin() + i, order.begin() + std::min(n, i + batch_size));
  }
  return out;
}

/// Rolls every frame of each clip in [b,T,c,h,w] by one random (dy,dx) and
/// permutes its channels.
template <class T>
void augment_batch(Tensor<T>& clips, std::mt19937_64& rng) {
  const Shape& s = clips.shape();
  const std::size_t b = s[0], t = s[1], c = s[2], h = s[3], w = s[4];
  auto d = clips.data();
  std::vector<T> frame(c * h * w);
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t dy = rng() % h, dx = rng() % w;
    std::vector<std::size_t> perm(c);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t k = c; k > 1; --k) std::swap(perm[k - 1], perm[rng() % k]);
    for (std::size_t f = 0; f < t; ++f) {
      T* x = d.data() + (i * t + f) * c * h * w;
      std::copy(x, x + c * h * w, frame.begin());
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t xx = 0; xx < w; ++xx)
            x[(ch * h + (y + dy) % h) * w + (xx + dx) % w] = frame[(perm[ch] * h + y) * w + xx];
    }
  }
}

/// One pass over shuffled batches: forward, backward, sgd step. Returns
/// (mean loss, train accuracy).
template <Classifier M>
std::pair<double, double> train_epoch(M& model, Sgd<typename M::value_type>& opt,
                                      const Dataset<typename M::value_type>& data,
                                      const TrainConfig& cfg, std::size_t epoch) {
  using T = typename M::value_type;
  if (data.size() == 0) throw std::invalid_argument("train_epoch: empty dataset");
  const double lr = cfg.lr_at(epoch);
  double loss_sum = 0;
  std::size_t correct = 0;
  std::size_t step = 0;
  const std::uint64_t epoch_seed = splitmix64(cfg.seed ^ (0x5851F42D4C957F2Dull * (epoch + 1)));
  std::mt19937_64 aug_rng(splitmix64(epoch_seed));
  for (const auto& idx : make_batches<T>(data.size(), cfg.batch_size, epoch_seed, true)) {
    std::vector<int> labels;
    Tensor<T> x = data.batch(idx, &labels);
    if (cfg.augment) augment_batch(x, aug_rng);
    ForwardContext<T> ctx;
    ctx.training = !cfg.bn_eval;
    opt.zero_grad();
    Tensor<T> logits = model.forward(x, ctx);
    Tensor<T> loss = ops::cross_entropy(logits, std::span<const int>(labels));
    const double lv = static_cast<double>(loss.item());
    if (!std::isfinite(lv)) {
      throw NumericError("non-finite loss " + std::to_string(lv) + " at epoch " +
                         std::to_string(epoch) + ", step " + std::to_string(step) + " (lr " +
                         std::to_string(lr) + ")");
    }
    backward(loss);
    if (cfg.clip_norm > 0) opt.clip_grad_norm(cfg.clip_norm);
    opt.step(lr);
    loss_sum += lv * static_cast<double>(idx.size());
    const auto pred = argmax_rows(logits);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
    ++step;
  }
  return {loss_sum / static_cast<double>(data.size()),
          static_cast<double>(correct) / static_cast<double>(data.size())};
}

/// Eval-mode accuracy over per-clip averaged logits.
template <Classifier M>
EvalResult evaluate(M& model, const Dataset<typename M::value_type>& data, std::size_t batch_size = 16) {
  using T = typename M::value_type;
  NoGradGuard no_grad;
  EvalResult r;
  double loss_sum = 0;
  std::size_t correct = 0;
  for (const auto& idx : make_batches<T>(data.size(), batch_size, 0, false)) {
    std::vector<int> labels;
    Tensor<T> x = data.batch(idx, &labels);
    ForwardContext<T> ctx;
    Tensor<T> logits = model.forward(x, ctx);
    loss_sum += static_cast<double>(ops::cross_entropy(logits, std::span<const int>(labels)).item()) *
                static_cast<double>(idx.size());
    for (int p : argmax_rows(logits)) r.predictions.push_back(p);
    for (std::size_t i = 0; i < idx.size(); ++i) correct += r.predictions[r.predictions.size() - idx.size() + i] == labels[i];
  }
  r.loss = loss_sum / static_cast<double>(data.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return r;
}

inline void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& rows) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw IoError("cannot write " + path);
  std::fprintf(f, "epoch,loss,train_acc,val_acc\n");
  for (const auto& m : rows) {
    std::fprintf(f, "%zu,%.9g,%.6f,%.6f\n", m.epoch, m.loss, m.train_acc, m.val_acc);
  }
  if (std::fclose(f) != 0) throw IoError("failed writing " + path);
}

/// Full run. `on_epoch` (optional) sees each row as it is produced; metrics
/// are written to metrics_path when it is non-empty.
template <Classifier M>
std::vector<EpochMetrics> train(M& model, const Dataset<typename M::value_type>& train_set,
                                const Dataset<typename M::value_type>* val_set,
                                const TrainConfig& cfg, const std::string& metrics_path = "",
                                const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  cfg.validate();
  Sgd<typename M::value_type> opt(model.parameters(), cfg.momentum, cfg.weight_decay);
  std::vector<EpochMetrics> rows;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    EpochMetrics m;
    m.epoch = e + 1;
    std::tie(m.loss, m.train_acc) = train_epoch(model, opt, train_set, cfg, e);
    if (val_set) m.val_acc = evaluate(model, *val_set, cfg.batch_size).accuracy;
    rows.push_back(m);
    if (!metrics_path.empty()) write_metrics_csv(metrics_path, rows);
    if (on_epoch) on_epoch(m);
  }
  return rows;
}

}  // namespace respike

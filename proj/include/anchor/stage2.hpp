#ifndef ANCHOR_STAGE2_HPP_
#define ANCHOR_STAGE2_HPP_

#include "anchor/losses.hpp"
#include "anchor/optim.hpp"
#include "anchor/report.hpp"
#include "anchor/stage1.hpp"

#include <chrono>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

// Stage II: InfoNCE contrastive fine-tuning, optionally through low-rank
// adapters on selected projection matrices. Adapters freeze the base model;
// with B initialized to zero the adapted model starts exactly equal to it,
// and merging folds scale*A*B back into the base weights.

namespace anchor {

struct AdapterConfig {
  Index rank = 16;
  double scale = 2.0;
  std::vector<std::string> targets = {"wq", "wv"};
};

struct Stage2Config {
  double tau = 0.05;
  Index steps = 250;
  Index warmup_steps = 40;
  double learning_rate = 1e-3;
  Index batch_size = 32;
  uint64_t seed = 0;
  double weight_decay = 0.01;
  Index hard_negs_per_query = 1;
  std::optional<AdapterConfig> adapter;

  void validate() const {
    if (!(tau > 0.0)) throw TrainError("Stage2Config: tau must be positive");
    if (steps < 0 || warmup_steps < 0) throw TrainError("Stage2Config: negative step counts");
    if (learning_rate <= 0.0) throw TrainError("Stage2Config: learning rate must be positive");
    if (hard_negs_per_query < 0)
      throw TrainError("Stage2Config: hard_negs_per_query must be >= 0");
    if (adapter && adapter->rank < 1)
      throw TrainError("Stage2Config: adapter rank must be >= 1");
  }
};

template <typename S>
struct LowRankAdapters {
  struct Entry {
    size_t layer;
    std::string target;  // wq / wk / wv / wo / w_up / w_down
    Tensor<S> a;         // [d_in, r]
    Tensor<S> b;         // [r, d_out]
  };
  AdapterConfig cfg;
  std::vector<Entry> entries;

  Index trainable_count() const {
    Index n = 0;
    for (const auto& e : entries) n += e.a.numel() + e.b.numel();
    return n;
  }

  std::vector<Tensor<S>> trainable() {
    std::vector<Tensor<S>> out;
    for (auto& e : entries) {
      out.push_back(e.a);
      out.push_back(e.b);
    }
    return out;
  }

  void zero_grads() {
    for (auto& e : entries) {
      e.a.zero_grad();
      e.b.zero_grad();
    }
  }

  template <typename F>
  void for_each_param(F&& f) {
    for (auto& e : entries) {
      const std::string p = "adapters." + std::to_string(e.layer) + "." + e.target;
      f(p + ".A", e.a);
      f(p + ".B", e.b);
    }
  }
};

namespace detail {

template <typename S>
Tensor<S>& layer_target(LayerParams<S>& layer, const std::string& name) {
  if (name == "wq") return layer.wq;
  if (name == "wk") return layer.wk;
  if (name == "wv") return layer.wv;
  if (name == "wo") return layer.wo;
  if (name == "w_up") return layer.w_up;
  if (name == "w_down") return layer.w_down;
  throw TrainError("adapters: unknown target matrix \"" + name + "\"");
}

}  // namespace detail

// Freezes the base model and attaches trainable (A, B) factors to each
// target matrix in every layer. B starts at zero so the adapted model is
// initially identical to the base model.
template <typename S>
LowRankAdapters<S> attach_adapters(ModelParams<S>& params, const AdapterConfig& cfg,
                                   uint64_t seed) {
  if (cfg.rank < 1) throw TrainError("attach_adapters: rank must be >= 1");
  LowRankAdapters<S> ad;
  ad.cfg = cfg;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, kInitStd);
  for (size_t l = 0; l < params.layers.size(); ++l) {
    for (const auto& target : cfg.targets) {
      Tensor<S>& w = detail::layer_target(params.layers[l], target);
      const Index d_in = w.dim(0), d_out = w.dim(1);
      if (cfg.rank > std::min(d_in, d_out))
        throw TrainError("attach_adapters: rank " + std::to_string(cfg.rank) +
                         " exceeds matrix dimension " + shape_str(w.shape()));
      typename LowRankAdapters<S>::Entry e;
      e.layer = l;
      e.target = target;
      e.a = Tensor<S>::zeros({d_in, cfg.rank}, true);
      for (Index i = 0; i < e.a.numel(); ++i) e.a.values()[i] = S(normal(rng));
      e.b = Tensor<S>::zeros({cfg.rank, d_out}, true);
      ad.entries.push_back(std::move(e));
    }
  }
  params.set_trainable(false);
  return ad;
}

// Effective parameters for the adapted model: W + scale * A * B on target
// matrices, shared handles everywhere else. Run under a tape during
// training so gradients reach A and B.
template <typename S>
ModelParams<S> compose_adapters(const ModelParams<S>& base, LowRankAdapters<S>& ad) {
  ModelParams<S> eff = base;  // tensor handles are shared, not copied
  for (auto& e : ad.entries) {
    Tensor<S>& w = detail::layer_target(eff.layers[e.layer], e.target);
    w = add(w, scale(matmul(e.a, e.b), S(ad.cfg.scale)));
  }
  return eff;
}

// Folds scale * A * B into the base weights, producing an adapter-free
// model with identical forward behavior, and unfreezes it.
template <typename S>
void merge_adapters(ModelParams<S>& params, LowRankAdapters<S>& ad) {
  for (auto& e : ad.entries) {
    Tensor<S>& w = detail::layer_target(params.layers[e.layer], e.target);
    const Index d_in = w.dim(0), d_out = w.dim(1), r = ad.cfg.rank;
    w.mat(d_in, d_out).noalias() +=
        S(ad.cfg.scale) * (e.a.mat(d_in, r) * e.b.mat(r, d_out));
  }
  params.set_trainable(true);
}

template <typename S>
TrainReport train_stage2(ModelParams<S>& params, const std::vector<QDPair>& corpus,
                         const Stage2Config& cfg) {
  cfg.validate();
  if (corpus.empty()) throw TrainError("train_stage2: empty corpus");
  if (cfg.batch_size < 2)
    throw TrainError("train_stage2: batch_size must be >= 2 for in-batch negatives");
  const auto t0 = std::chrono::steady_clock::now();

  std::optional<LowRankAdapters<S>> adapters;
  std::vector<Tensor<S>> trainables;
  if (cfg.adapter) {
    adapters = attach_adapters(params, *cfg.adapter, cfg.seed ^ 0xADA77E5ULL);
    trainables = adapters->trainable();
  } else {
    trainables = detail::collect_params(params);
  }

  AdamWConfig ocfg;
  ocfg.learning_rate = cfg.learning_rate;
  ocfg.weight_decay = cfg.weight_decay;
  ocfg.warmup_steps = cfg.warmup_steps;
  AdamW<S> opt(trainables, ocfg);

  TrainReport report;
  report.label = "stage2";
  report.seed = cfg.seed;
  report.columns = {"step", "info_nce", "lr"};

  std::vector<PairBatch> batches;
  size_t cursor = 0;
  Index epoch = 0;
  for (Index step = 0; step < cfg.steps; ++step) {
    if (cursor == batches.size()) {
      batches = make_batches(corpus, cfg.batch_size, params.config.pad_token_id, cfg.seed,
                             /*shuffle=*/true, epoch++, cfg.hard_negs_per_query,
                             /*min_batch=*/2);
      if (batches.empty())
        throw TrainError("train_stage2: corpus too small for batch_size " +
                         std::to_string(cfg.batch_size));
      cursor = 0;
    }
    params.zero_grads();
    if (adapters) adapters->zero_grads();
    double value = 0;
    {
      GradTape<S> tape;
      ModelParams<S> eff = adapters ? compose_adapters(params, *adapters) : params;
      Tensor<S> loss = info_nce(eff, batches[cursor++], S(cfg.tau));
      value = double(loss.item());
      if (!std::isfinite(value))
        throw TrainError("stage2: non-finite loss at step " + std::to_string(step + 1));
      tape.backward(loss);
    }
    const double lr = opt.step();
    report.rows.push_back({double(opt.steps_taken()), value, lr});
  }

  if (adapters) merge_adapters(params, *adapters);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace anchor

#endif  // ANCHOR_STAGE2_HPP_

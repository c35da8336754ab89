#ifndef ANCHOR_STAGE1_HPP_
#define ANCHOR_STAGE1_HPP_

#include "anchor/losses.hpp"
#include "anchor/optim.hpp"
#include "anchor/report.hpp"

#include <chrono>
#include <cmath>
#include <sstream>
#include <vector>

// Stage I: bidirectional reconstruction. Every step evaluates both
// directions on the same batch, mixes them as alpha*q2d + (1-alpha)*d2q,
// and applies one full-parameter AdamW update under a linear-warmup
// schedule.

namespace anchor {

struct Stage1Config {
  double alpha = 0.2;
  Index steps = 500;
  Index warmup_steps = 75;
  double learning_rate = 1e-3;
  Index batch_size = 32;
  uint64_t seed = 0;
  double weight_decay = 0.01;

  void validate() const {
    if (alpha < 0.0 || alpha > 1.0)
      throw TrainError("Stage1Config: alpha " + std::to_string(alpha) + " outside [0,1]");
    if (steps < 0 || warmup_steps < 0 || warmup_steps > std::max<Index>(steps, 1))
      throw TrainError("Stage1Config: warmup_steps must lie within steps");
    if (learning_rate <= 0.0) throw TrainError("Stage1Config: learning rate must be positive");
    if (batch_size < 1) throw TrainError("Stage1Config: batch_size must be >= 1");
  }
};

struct Stage1StepRecord {
  Index step;
  double l_q2d;
  double l_d2q;
  double l_stage1;
  double lr;
};

namespace detail {

template <typename S>
std::vector<Tensor<S>> collect_params(ModelParams<S>& params) {
  std::vector<Tensor<S>> out;
  params.for_each_param([&out](const std::string&, Tensor<S>& t) { out.push_back(t); });
  return out;
}

template <typename S>
std::string grad_norm_digest(ModelParams<S>& params) {
  std::ostringstream os;
  params.for_each_param([&os](const std::string& name, Tensor<S>& t) {
    if (!t.grad_allocated()) return;
    os << " " << name << "=" << std::sqrt(double(t.grad().square().sum()));
  });
  return os.str();
}

}  // namespace detail

template <typename S>
Stage1StepRecord stage1_step(ModelParams<S>& params, const PairBatch& batch,
                             const Stage1Config& cfg, AdamW<S>& opt) {
  params.zero_grads();
  double v_q2d = 0, v_d2q = 0, v_mix = 0;
  {
    GradTape<S> tape;
    Tensor<S> l_q = loss_q2d(params, batch);
    Tensor<S> l_d = loss_d2q(params, batch);
    Tensor<S> l = mix_losses(l_q, l_d, S(cfg.alpha));
    v_q2d = double(l_q.item());
    v_d2q = double(l_d.item());
    v_mix = double(l.item());
    if (!std::isfinite(v_mix)) {
      std::ostringstream os;
      os << "stage1: non-finite loss at step " << opt.steps_taken() + 1
         << " (l_q2d=" << v_q2d << ", l_d2q=" << v_d2q << ")";
      throw TrainError(os.str());
    }
    tape.backward(l);
    if (!params.all_finite())
      throw TrainError("stage1: non-finite parameter after backward; grad norms:" +
                       detail::grad_norm_digest(params));
  }
  const double lr = opt.step();
  if (!params.all_finite())
    throw TrainError("stage1: non-finite parameter after update at step " +
                     std::to_string(opt.steps_taken()) + "; grad norms:" +
                     detail::grad_norm_digest(params));
  return {opt.steps_taken(), v_q2d, v_d2q, v_mix, lr};
}

template <typename S>
TrainReport train_stage1(ModelParams<S>& params, const std::vector<QDPair>& corpus,
                         const Stage1Config& cfg) {
  cfg.validate();
  if (corpus.empty()) throw TrainError("train_stage1: empty corpus");
  const auto t0 = std::chrono::steady_clock::now();

  AdamWConfig ocfg;
  ocfg.learning_rate = cfg.learning_rate;
  ocfg.weight_decay = cfg.weight_decay;
  ocfg.warmup_steps = cfg.warmup_steps;
  AdamW<S> opt(detail::collect_params(params), ocfg);

  TrainReport report;
  report.label = "stage1";
  report.seed = cfg.seed;
  report.columns = {"step", "l_q2d", "l_d2q", "l_stage1", "lr"};

  std::vector<PairBatch> batches;
  size_t cursor = 0;
  Index epoch = 0;
  for (Index step = 0; step < cfg.steps; ++step) {
    if (cursor == batches.size()) {
      batches = make_batches(corpus, cfg.batch_size, params.config.pad_token_id, cfg.seed,
                             /*shuffle=*/true, epoch++, /*hard_negs_per_query=*/0);
      cursor = 0;
    }
    const auto rec = stage1_step(params, batches[cursor++], cfg, opt);
    report.rows.push_back(
        {double(rec.step), rec.l_q2d, rec.l_d2q, rec.l_stage1, rec.lr});
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace anchor

#endif  // ANCHOR_STAGE1_HPP_

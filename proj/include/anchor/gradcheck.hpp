#ifndef ANCHOR_GRADCHECK_HPP_
#define ANCHOR_GRADCHECK_HPP_

#include "anchor/losses.hpp"
#include "anchor/stage2.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

// Verification harness: analytic gradients of every training objective
// against central finite differences, per named parameter group, in double
// precision. Frozen groups are reported with a zero analytic gradient and
// excluded from the comparison.

namespace anchor {

enum class LossKind { kQ2D, kD2Q, kStageI, kInfoNCE };

inline const char* loss_kind_name(LossKind k) {
  switch (k) {
    case LossKind::kQ2D: return "q2d";
    case LossKind::kD2Q: return "d2q";
    case LossKind::kStageI: return "stage1";
    case LossKind::kInfoNCE: return "info_nce";
  }
  return "?";
}

struct GradCheckOptions {
  Index samples_per_group = 32;
  uint64_t seed = 0;
  double alpha = 0.2;  // StageI mix
  double tau = 0.05;   // InfoNCE temperature
};

struct GradCheckGroup {
  std::string name;
  bool frozen = false;
  Index checked = 0;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  LossKind kind = LossKind::kStageI;
  std::vector<GradCheckGroup> groups;
  double max_rel_err = 0.0;

  bool pass(double threshold = 1e-4) const { return max_rel_err < threshold; }
};

// Synthetic batch of raw token ids for gradient checking; content ids avoid
// the pad/eos specials so any vocab size >= 4 works.
inline PairBatch make_gradcheck_batch(const ModelConfig& c, Index batch, Index len_lo,
                                      Index len_hi, uint64_t seed,
                                      Index hard_negs_per_query = 1) {
  std::mt19937_64 rng(seed);
  auto rand_seq = [&] {
    const Index len = len_lo + static_cast<Index>(rng() % uint64_t(len_hi - len_lo + 1));
    TokenSequence s(static_cast<size_t>(len));
    for (auto& id : s)
      id = 2 + static_cast<int32_t>(rng() % uint64_t(c.vocab_size - 2));
    return s;
  };
  std::vector<TokenSequence> qs, ds, hs;
  std::vector<Index> owners;
  for (Index i = 0; i < batch; ++i) {
    qs.push_back(rand_seq());
    ds.push_back(rand_seq());
    for (Index h = 0; h < hard_negs_per_query; ++h) {
      hs.push_back(rand_seq());
      owners.push_back(i);
    }
  }
  PairBatch b;
  b.query = TokenBatch::pad(qs, c.pad_token_id);
  b.doc = TokenBatch::pad(ds, c.pad_token_id);
  b.hard_negs = TokenBatch::pad(hs, c.pad_token_id);
  b.hard_neg_owner = std::move(owners);
  return b;
}

// Central-difference check of d(loss)/d(parameter) for a random sample of
// coordinates in each parameter group. The step is scale-aware,
// h = max(1e-5, 1e-4*|w|), and the error denominator is floored at 1e-3 so
// negligible coordinates compare absolutely.
inline GradCheckReport grad_check(ModelParams<double>& params, const PairBatch& batch,
                                  LossKind kind, const GradCheckOptions& opt = {},
                                  LowRankAdapters<double>* adapters = nullptr) {
  auto eval_loss = [&]() -> Tensor<double> {
    const ModelParams<double> eff =
        adapters ? compose_adapters(params, *adapters) : params;
    switch (kind) {
      case LossKind::kQ2D: return loss_q2d(eff, batch);
      case LossKind::kD2Q: return loss_d2q(eff, batch);
      case LossKind::kStageI:
        return mix_losses(loss_q2d(eff, batch), loss_d2q(eff, batch), opt.alpha);
      case LossKind::kInfoNCE: return info_nce(eff, batch, opt.tau);
    }
    throw TensorError("grad_check: unknown loss kind");
  };

  params.zero_grads();
  if (adapters) adapters->zero_grads();
  {
    GradTape<double> tape;
    Tensor<double> loss = eval_loss();
    if (!std::isfinite(loss.item()))
      throw TensorError("grad_check: non-finite loss");
    tape.backward(loss);
  }

  GradCheckReport report;
  report.kind = kind;
  std::mt19937_64 rng(opt.seed ^ 0xC0FFEEULL);

  auto check_group = [&](const std::string& name, Tensor<double>& t) {
    GradCheckGroup g;
    g.name = name;
    if (!t.requires_grad()) {
      g.frozen = true;
      g.max_rel_err = 0.0;
      // A frozen group must not have accumulated anything.
      if (t.grad_allocated() && t.grad().abs().maxCoeff() != 0.0)
        throw TensorError("grad_check: frozen group " + name + " holds gradient");
      report.groups.push_back(g);
      return;
    }
    std::vector<Index> coords(static_cast<size_t>(t.numel()));
    for (Index i = 0; i < t.numel(); ++i) coords[static_cast<size_t>(i)] = i;
    const Index take = std::min<Index>(opt.samples_per_group, t.numel());
    for (Index i = 0; i < take; ++i) {  // partial Fisher-Yates
      const size_t j = static_cast<size_t>(i) + rng() % (coords.size() - static_cast<size_t>(i));
      std::swap(coords[static_cast<size_t>(i)], coords[j]);
    }
    NoGrad<double> off;
    for (Index i = 0; i < take; ++i) {
      const Index c = coords[static_cast<size_t>(i)];
      const double w = t.values()[c];
      const double h = std::max(1e-5, 1e-4 * std::abs(w));
      t.values()[c] = w + h;
      const double up = eval_loss().item();
      t.values()[c] = w - h;
      const double dn = eval_loss().item();
      t.values()[c] = w;
      if (!std::isfinite(up) || !std::isfinite(dn))
        throw TensorError("grad_check: non-finite loss during differencing");
      const double numeric = (up - dn) / (2.0 * h);
      const double analytic = t.grad_allocated() ? t.grad()[c] : 0.0;
      const double rel = std::abs(numeric - analytic) /
                         std::max({std::abs(numeric), std::abs(analytic), 1e-3});
      g.max_rel_err = std::max(g.max_rel_err, rel);
      ++g.checked;
    }
    report.groups.push_back(g);
  };

  params.for_each_param(check_group);
  if (adapters) adapters->for_each_param(check_group);

  for (const auto& g : report.groups)
    if (!g.frozen) report.max_rel_err = std::max(report.max_rel_err, g.max_rel_err);
  return report;
}

}  // namespace anchor

#endif  // ANCHOR_GRADCHECK_HPP_

#ifndef ANCHOR_LOSSES_HPP_
#define ANCHOR_LOSSES_HPP_

#include "anchor/data.hpp"
#include "anchor/model.hpp"

#include <span>
#include <vector>

// Training objectives. Reconstruction losses condition teacher-forced
// generation of one side of a pair on the other side's [EOS] embedding;
// gradients flow through both the decode pass and the encoding pass.
// The contrastive loss scores temperature-scaled cosine similarity of a
// query against its positive document, all other in-batch positives, and
// its own hard negatives.

namespace anchor {

// Cross entropy of `target` (plus a trailing [EOS] terminator) generated
// from the [EOS] embedding of `source`, averaged per sequence then over the
// batch.
template <typename S>
Tensor<S> reconstruction_loss(const ModelParams<S>& p, const TokenBatch& source,
                              const TokenBatch& target) {
  Tensor<S> prefix = encode_eos(p, source);
  Tensor<S> logits = decode_with_prefix(p, prefix, target);  // [B, 1+m, V]
  const Index b = target.rows, m = target.width;
  std::vector<int32_t> gold(static_cast<size_t>(b * (1 + m)), p.config.pad_token_id);
  std::vector<uint8_t> mask(static_cast<size_t>(b * (1 + m)), 0);
  for (Index r = 0; r < b; ++r) {
    const Index len = target.lengths[static_cast<size_t>(r)];
    for (Index t = 0; t < len; ++t) {
      gold[static_cast<size_t>(r * (1 + m) + t)] = target.at(r, t);
      mask[static_cast<size_t>(r * (1 + m) + t)] = 1;
    }
    gold[static_cast<size_t>(r * (1 + m) + len)] = p.config.eos_token_id;
    mask[static_cast<size_t>(r * (1 + m) + len)] = 1;
  }
  return cross_entropy(logits, gold, mask);
}

template <typename S>
Tensor<S> loss_q2d(const ModelParams<S>& p, const PairBatch& batch) {
  return reconstruction_loss(p, batch.query, batch.doc);
}

template <typename S>
Tensor<S> loss_d2q(const ModelParams<S>& p, const PairBatch& batch) {
  return reconstruction_loss(p, batch.doc, batch.query);
}

// Weighted multi-task mix: alpha * q2d + (1 - alpha) * d2q.
template <typename S>
Tensor<S> mix_losses(const Tensor<S>& q2d, const Tensor<S>& d2q, S alpha) {
  if (alpha < S(0) || alpha > S(1))
    throw TensorError("mix_losses: alpha " + std::to_string(double(alpha)) +
                      " outside [0,1]");
  return add(scale(q2d, alpha), scale(d2q, S(1) - alpha));
}

// Temperature-scaled cosine similarity of two embedding vectors.
template <typename S>
Tensor<S> sim_score(const Tensor<S>& e_q, const Tensor<S>& e_d, S tau) {
  if (!(tau > S(0))) throw TensorError("sim_score: temperature must be positive");
  Tensor<S> q = e_q, d = e_d;
  if (q.ndim() == 2 && q.dim(0) == 1) q = reshape(q, {q.dim(1)});
  if (d.ndim() == 2 && d.dim(0) == 1) d = reshape(d, {d.dim(1)});
  return scale(cosine_similarity(q, d), S(1) / tau);
}

// Contrastive loss over precomputed embeddings. Negatives for query i are
// every other in-batch document (minus explicit exclusions) plus the hard
// negatives owned by row i. `inbatch_excluded` is an optional B*B row-major
// mask; the diagonal (the positive) is always kept.
template <typename S>
Tensor<S> info_nce_from_embeddings(const Tensor<S>& e_q, const Tensor<S>& e_d,
                                   const Tensor<S>* e_hard,
                                   std::span<const Index> hard_owner, S tau,
                                   const std::vector<uint8_t>& inbatch_excluded = {}) {
  if (!(tau > S(0))) throw TensorError("info_nce: temperature must be positive");
  if (e_q.ndim() != 2 || e_d.ndim() != 2 || e_q.shape() != e_d.shape())
    fail_shapes("info_nce", e_q.shape(), e_d.shape());
  const Index b = e_q.dim(0);
  const Index h = e_hard == nullptr ? 0 : e_hard->dim(0);
  if (h != static_cast<Index>(hard_owner.size()))
    throw TensorError("info_nce: hard negative owner list does not match embeddings");
  if (!inbatch_excluded.empty() &&
      inbatch_excluded.size() != static_cast<size_t>(b * b))
    throw TensorError("info_nce: exclusion mask must be B*B");

  // Per-row negative support must be non-empty.
  std::vector<Index> hard_per_row(static_cast<size_t>(b), 0);
  for (Index owner : hard_owner) {
    if (owner < 0 || owner >= b) throw TensorError("info_nce: hard negative owner out of range");
    ++hard_per_row[static_cast<size_t>(owner)];
  }
  for (Index i = 0; i < b; ++i) {
    Index negs = hard_per_row[static_cast<size_t>(i)];
    for (Index j = 0; j < b; ++j) {
      if (j == i) continue;
      const bool excluded =
          !inbatch_excluded.empty() && inbatch_excluded[static_cast<size_t>(i * b + j)];
      if (!excluded) ++negs;
    }
    if (negs == 0) throw TensorError("info_nce: empty negative set");
  }

  Tensor<S> nq = l2_normalize_rows(e_q);
  Tensor<S> nd = l2_normalize_rows(e_d);
  Tensor<S> logits = scale(matmul(nq, transpose(nd)), S(1) / tau);  // [B,B]
  Index cols = b;
  if (h > 0) {
    Tensor<S> nh = l2_normalize_rows(*e_hard);
    Tensor<S> hard_logits = scale(matmul(nq, transpose(nh)), S(1) / tau);  // [B,H]
    logits = concat<S>({logits, hard_logits}, 1);
    cols = b + h;
  }

  // Additive mask: excluded in-batch documents and non-owned hard negatives
  // drop out of the softmax support exactly.
  Tensor<S> bias = Tensor<S>::zeros({b, cols});
  const S neg = S(kAttnMaskValue);
  for (Index i = 0; i < b; ++i) {
    for (Index j = 0; j < b; ++j) {
      if (j == i) continue;
      if (!inbatch_excluded.empty() && inbatch_excluded[static_cast<size_t>(i * b + j)])
        bias.values()[i * cols + j] = neg;
    }
    for (Index k = 0; k < h; ++k)
      if (hard_owner[static_cast<size_t>(k)] != i) bias.values()[i * cols + b + k] = neg;
  }
  Tensor<S> masked = add(logits, bias);
  Tensor<S> lse = logsumexp_lastdim(masked);  // [B]
  std::vector<Index> diag(static_cast<size_t>(b));
  for (Index i = 0; i < b; ++i) diag[static_cast<size_t>(i)] = i;
  Tensor<S> positives = gather_cols(masked, diag);
  return mean(sub(lse, positives));
}

// Full-batch contrastive loss from token batches. In-batch negatives that
// are token-identical to a query's own positive are excluded to avoid false
// negatives in tiny corpora.
template <typename S>
Tensor<S> info_nce(const ModelParams<S>& p, const PairBatch& batch, S tau) {
  const Index b = batch.size();
  if (b < 1) throw TensorError("info_nce: empty batch");
  if (b < 2 && batch.hard_negs.rows == 0)
    throw TensorError("info_nce: empty negative set");

  std::vector<uint8_t> excluded(static_cast<size_t>(b * b), 0);
  auto same_doc = [&](Index i, Index j) {
    if (batch.doc.lengths[static_cast<size_t>(i)] != batch.doc.lengths[static_cast<size_t>(j)])
      return false;
    for (Index t = 0; t < batch.doc.lengths[static_cast<size_t>(i)]; ++t)
      if (batch.doc.at(i, t) != batch.doc.at(j, t)) return false;
    return true;
  };
  for (Index i = 0; i < b; ++i)
    for (Index j = 0; j < b; ++j)
      if (i != j && same_doc(i, j)) excluded[static_cast<size_t>(i * b + j)] = 1;

  Tensor<S> eq = encode_eos(p, batch.query);
  Tensor<S> ed = encode_eos(p, batch.doc);
  if (batch.hard_negs.rows > 0) {
    Tensor<S> eh = encode_eos(p, batch.hard_negs);
    return info_nce_from_embeddings(eq, ed, &eh, batch.hard_neg_owner, tau, excluded);
  }
  return info_nce_from_embeddings<S>(eq, ed, nullptr, {}, tau, excluded);
}

}  // namespace anchor

#endif  // ANCHOR_LOSSES_HPP_

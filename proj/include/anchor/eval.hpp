#ifndef ANCHOR_EVAL_HPP_
#define ANCHOR_EVAL_HPP_

#include "anchor/stage1.hpp"
#include "anchor/stage2.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

// Retrieval evaluation over frozen parameters plus the ablation harness.
// Ranking is exact cosine similarity computed in double precision with ties
// broken by ascending document id, so results are reproducible bit for bit.

namespace anchor {

struct EvalReport {
  std::string label;
  uint64_t seed = 0;
  std::string corpus;
  double recall_at_1 = 0.0;
  double recall_at_10 = 0.0;
  double mrr = 0.0;
  double ndcg_at_10 = 0.0;
};

// Embeds every sequence with encode_eos in fixed-size chunks. Row i of the
// result is the embedding of texts[i] regardless of batch_size.
template <typename S>
MatX<S> embed_corpus(const ModelParams<S>& p, const std::vector<TokenSequence>& texts,
                     Index batch_size = 32) {
  if (batch_size < 1) throw TensorError("embed_corpus: batch_size must be >= 1");
  NoGrad<S> off;
  const Index n = static_cast<Index>(texts.size());
  const Index d = p.config.hidden_dim;
  MatX<S> out(n, d);
  for (Index start = 0; start < n; start += batch_size) {
    const Index stop = std::min(n, start + batch_size);
    std::vector<TokenSequence> chunk(texts.begin() + start, texts.begin() + stop);
    Tensor<S> emb = encode_eos(p, TokenBatch::pad(chunk, p.config.pad_token_id));
    for (Index r = 0; r < stop - start; ++r)
      for (Index j = 0; j < d; ++j) out(start + r, j) = emb.values()[r * d + j];
  }
  return out;
}

// Exact top-k cosine ranking, descending similarity, ties by ascending id.
inline std::vector<std::vector<Index>> retrieve_topk(const MatX<double>& queries,
                                                     const MatX<double>& docs, Index k) {
  if (queries.cols() != docs.cols())
    throw TensorError("retrieve_topk: dimension mismatch between queries and documents");
  if (k < 0 || k > docs.rows())
    throw TensorError("retrieve_topk: k " + std::to_string(k) + " exceeds collection size " +
                      std::to_string(docs.rows()));
  MatX<double> qn = queries, dn = docs;
  for (Index r = 0; r < qn.rows(); ++r) {
    const double norm = qn.row(r).norm();
    if (norm == 0.0) throw TensorError("retrieve_topk: degenerate embedding norm");
    qn.row(r) /= norm;
  }
  for (Index r = 0; r < dn.rows(); ++r) {
    const double norm = dn.row(r).norm();
    if (norm == 0.0) throw TensorError("retrieve_topk: degenerate embedding norm");
    dn.row(r) /= norm;
  }
  MatX<double> sims = qn * dn.transpose();
  std::vector<std::vector<Index>> out(static_cast<size_t>(queries.rows()));
  for (Index q = 0; q < queries.rows(); ++q) {
    std::vector<Index> ids(static_cast<size_t>(docs.rows()));
    for (Index i = 0; i < docs.rows(); ++i) ids[static_cast<size_t>(i)] = i;
    std::sort(ids.begin(), ids.end(), [&](Index a, Index b) {
      if (sims(q, a) != sims(q, b)) return sims(q, a) > sims(q, b);
      return a < b;
    });
    ids.resize(static_cast<size_t>(k));
    out[static_cast<size_t>(q)] = std::move(ids);
  }
  return out;
}

// Standard single-gold metrics. A gold document absent from a (truncated)
// ranking counts as unranked; with full rankings every gold is found.
inline EvalReport compute_metrics(const std::vector<std::vector<Index>>& rankings,
                                  const std::vector<Index>& gold, Index num_docs) {
  if (rankings.size() != gold.size())
    throw TensorError("compute_metrics: rankings and gold lists differ in size");
  if (rankings.empty()) throw TensorError("compute_metrics: no queries");
  EvalReport rep;
  double r1 = 0, r10 = 0, mrr = 0, ndcg = 0;
  for (size_t q = 0; q < rankings.size(); ++q) {
    if (gold[q] < 0 || gold[q] >= num_docs)
      throw TensorError("compute_metrics: gold id " + std::to_string(gold[q]) +
                        " missing from collection of " + std::to_string(num_docs));
    Index rank = 0;  // 1-based; 0 = not found
    for (size_t pos = 0; pos < rankings[q].size(); ++pos) {
      if (rankings[q][pos] == gold[q]) {
        rank = static_cast<Index>(pos) + 1;
        break;
      }
    }
    if (rank == 1) r1 += 1;
    if (rank >= 1 && rank <= 10) {
      r10 += 1;
      ndcg += 1.0 / std::log2(double(rank) + 1.0);
    }
    if (rank >= 1) mrr += 1.0 / double(rank);
  }
  const double n = double(rankings.size());
  rep.recall_at_1 = r1 / n;
  rep.recall_at_10 = r10 / n;
  rep.mrr = mrr / n;
  rep.ndcg_at_10 = ndcg / n;
  return rep;
}

// Held-out retrieval: query i against all held-out documents, gold = own.
template <typename S>
EvalReport evaluate_retrieval(const ModelParams<S>& p, const std::vector<QDPair>& heldout,
                              Index batch_size = 32) {
  if (heldout.empty()) throw TensorError("evaluate_retrieval: empty held-out set");
  std::vector<TokenSequence> queries, docs;
  for (const auto& pair : heldout) {
    queries.push_back(pair.query);
    docs.push_back(pair.document);
  }
  MatX<S> qe = embed_corpus(p, queries, batch_size);
  MatX<S> de = embed_corpus(p, docs, batch_size);
  auto rankings = retrieve_topk(qe.template cast<double>(), de.template cast<double>(),
                                static_cast<Index>(docs.size()));
  std::vector<Index> gold(heldout.size());
  for (size_t i = 0; i < heldout.size(); ++i) gold[i] = static_cast<Index>(i);
  return compute_metrics(rankings, gold, static_cast<Index>(docs.size()));
}

// ---------------------------------------------------------------------------
// ablation harness
// ---------------------------------------------------------------------------

enum class StageMode { kNone, kStage1Only, kStage2Only, kBoth };

inline const char* stage_mode_name(StageMode m) {
  switch (m) {
    case StageMode::kNone: return "none";
    case StageMode::kStage1Only: return "stage1_only";
    case StageMode::kStage2Only: return "stage2_only";
    case StageMode::kBoth: return "stage1+stage2";
  }
  return "?";
}

struct AblationRun {
  std::string label;
  StageMode mode = StageMode::kBoth;
  double alpha = 0.2;
  Index stage1_steps = 0;
  Index stage2_steps = 0;
};

struct AblationGrid {
  std::vector<AblationRun> runs;
};

inline AblationGrid stage_axis_grid(Index s1_steps, Index s2_steps) {
  AblationGrid g;
  g.runs.push_back({"none", StageMode::kNone, 0.2, 0, 0});
  g.runs.push_back({"stage1_only", StageMode::kStage1Only, 0.2, s1_steps, 0});
  g.runs.push_back({"stage2_only", StageMode::kStage2Only, 0.2, 0, s2_steps});
  g.runs.push_back({"stage1+stage2", StageMode::kBoth, 0.2, s1_steps, s2_steps});
  return g;
}

inline AblationGrid alpha_axis_grid(Index s1_steps, Index s2_steps,
                                    const std::vector<double>& alphas = {0.0, 0.2, 0.5,
                                                                         0.8, 1.0}) {
  AblationGrid g;
  for (double a : alphas) {
    std::ostringstream label;
    label << "alpha=" << a;
    g.runs.push_back({label.str(), StageMode::kBoth, a, s1_steps, s2_steps});
  }
  return g;
}

// Steps-matched control: contrastive-only training for the full step budget
// against the two-stage schedule.
inline AblationGrid steps_matched_grid(Index s1_steps, Index s2_steps) {
  AblationGrid g;
  g.runs.push_back(
      {"stage2_only_matched", StageMode::kStage2Only, 0.2, 0, s1_steps + s2_steps});
  g.runs.push_back({"stage1+stage2", StageMode::kBoth, 0.2, s1_steps, s2_steps});
  return g;
}

struct AblationInputs {
  ModelConfig model;
  Stage1Config stage1;
  Stage2Config stage2;
  std::vector<QDPair> train;
  std::vector<QDPair> heldout;
  std::string corpus_descriptor;
};

struct AblationResult {
  AblationRun run;
  uint64_t seed = 0;
  EvalReport eval;
  TrainReport stage1_report;
  TrainReport stage2_report;
};

// Executes one grid cell from the shared initialization seed.
inline AblationResult run_ablation_cell(const AblationRun& run, const AblationInputs& in,
                                        uint64_t seed) {
  AblationResult res;
  res.run = run;
  res.seed = seed;
  auto params = init_params<float>(in.model, seed);
  if (run.mode == StageMode::kStage1Only || run.mode == StageMode::kBoth) {
    Stage1Config cfg = in.stage1;
    cfg.alpha = run.alpha;
    cfg.steps = run.stage1_steps;
    cfg.seed = seed;
    res.stage1_report = train_stage1(params, in.train, cfg);
  }
  if (run.mode == StageMode::kStage2Only || run.mode == StageMode::kBoth) {
    Stage2Config cfg = in.stage2;
    cfg.steps = run.stage2_steps;
    cfg.seed = seed;
    res.stage2_report = train_stage2(params, in.train, cfg);
  }
  res.eval = evaluate_retrieval(params, in.heldout);
  res.eval.label = run.label;
  res.eval.seed = seed;
  res.eval.corpus = in.corpus_descriptor;
  return res;
}

// Every (run, seed) cell trains from the same per-seed initialization and
// evaluates on the held-out split. Cells are independent, so they may be
// executed on a small thread pool without affecting the numbers.
inline std::vector<AblationResult> run_ablation(const AblationGrid& grid,
                                                const AblationInputs& in,
                                                const std::vector<uint64_t>& seeds,
                                                Index threads = 0) {
  std::vector<std::pair<size_t, uint64_t>> cells;
  for (size_t r = 0; r < grid.runs.size(); ++r)
    for (uint64_t s : seeds) cells.emplace_back(r, s);
  std::vector<AblationResult> results(cells.size());
  if (threads <= 0)
    threads = static_cast<Index>(std::max(1u, std::thread::hardware_concurrency()));
  threads = std::min<Index>(threads, static_cast<Index>(cells.size()));

  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<size_t>(threads));
  for (Index t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        while (true) {
          const size_t i = next.fetch_add(1);
          if (i >= cells.size()) break;
          results[i] = run_ablation_cell(grid.runs[cells[i].first], in, cells[i].second);
        }
      } catch (...) {
        errors[static_cast<size_t>(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return results;
}

inline void write_ablation_csv(const std::vector<AblationResult>& results,
                               const std::string& path) {
  std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw TensorError("write_ablation_csv: cannot open " + path);
  os << "label,seed,recall_at_1,recall_at_10,mrr,ndcg_at_10\n";
  os << std::setprecision(10);
  for (const auto& r : results)
    os << r.run.label << ',' << r.seed << ',' << r.eval.recall_at_1 << ','
       << r.eval.recall_at_10 << ',' << r.eval.mrr << ',' << r.eval.ndcg_at_10 << '\n';
  if (!os) throw TensorError("write_ablation_csv: write failed for " + path);
}

// Per-seed rows plus per-label means, aligned for terminal output.
inline std::string ablation_table(const std::vector<AblationResult>& results) {
  std::ostringstream os;
  os << std::left << std::setw(22) << "label" << std::right << std::setw(6) << "seed"
     << std::setw(10) << "r@1" << std::setw(10) << "r@10" << std::setw(10) << "mrr"
     << std::setw(10) << "ndcg@10" << '\n';
  os << std::fixed << std::setprecision(4);
  std::map<std::string, std::array<double, 5>> agg;  // sums + count
  std::vector<std::string> label_order;
  for (const auto& r : results) {
    os << std::left << std::setw(22) << r.run.label << std::right << std::setw(6) << r.seed
       << std::setw(10) << r.eval.recall_at_1 << std::setw(10) << r.eval.recall_at_10
       << std::setw(10) << r.eval.mrr << std::setw(10) << r.eval.ndcg_at_10 << '\n';
    if (!agg.count(r.run.label)) label_order.push_back(r.run.label);
    auto& a = agg[r.run.label];
    a[0] += r.eval.recall_at_1;
    a[1] += r.eval.recall_at_10;
    a[2] += r.eval.mrr;
    a[3] += r.eval.ndcg_at_10;
    a[4] += 1;
  }
  os << '\n';
  for (const auto& label : label_order) {
    const auto& a = agg[label];
    os << std::left << std::setw(22) << (label + " (mean)") << std::right << std::setw(6)
       << int(a[4]) << std::setw(10) << a[0] / a[4] << std::setw(10) << a[1] / a[4]
       << std::setw(10) << a[2] / a[4] << std::setw(10) << a[3] / a[4] << '\n';
  }
  return os.str();
}

// Mean of one metric across the seeds of a labeled configuration.
inline double mean_recall_at_1(const std::vector<AblationResult>& results,
                               const std::string& label) {
  double sum = 0;
  int n = 0;
  for (const auto& r : results)
    if (r.run.label == label) {
      sum += r.eval.recall_at_1;
      ++n;
    }
  if (n == 0) throw TensorError("mean_recall_at_1: no results labeled " + label);
  return sum / n;
}

}  // namespace anchor

#endif  // ANCHOR_EVAL_HPP_

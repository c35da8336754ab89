#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "anchor/gradcheck.hpp"
#include "anchor/stage1.hpp"
#include "test_util.hpp"

#include <cmath>
#include <map>
#include <vector>

using namespace anchor;

namespace {

ModelConfig gradcheck_config() {
  ModelConfig c;
  c.vocab_size = 32;
  c.hidden_dim = 16;
  c.num_layers = 2;
  c.num_heads = 2;
  c.ffn_dim = 32;
  c.max_seq_len = 16;
  return c;
}

ModelConfig small_train_config() {
  ModelConfig c;
  c.vocab_size = 48;
  c.hidden_dim = 32;
  c.num_layers = 2;
  c.num_heads = 2;
  c.ffn_dim = 64;
  c.max_seq_len = 32;
  return c;
}

template <typename S>
std::map<std::string, std::vector<S>> grads_by_name(ModelParams<S>& p) {
  std::map<std::string, std::vector<S>> out;
  p.for_each_param([&out](const std::string& name, Tensor<S>& t) {
    auto& g = t.grad();
    out[name] = {g.data(), g.data() + g.size()};
  });
  return out;
}

PairBatch single_pair_batch(const QDPair& pair, int32_t pad_id) {
  PairBatch b;
  b.query = TokenBatch::pad({pair.query}, pad_id);
  b.doc = TokenBatch::pad({pair.document}, pad_id);
  return b;
}

}  // namespace

TEST_CASE("reconstruction losses pass the finite-difference gradient suite") {
  auto c = gradcheck_config();
  auto params = init_params<double>(c, 42);
  CHECK(param_count(c) <= 50000);
  auto batch = make_gradcheck_batch(c, 4, 3, 6, 7, 0);

  for (LossKind kind : {LossKind::kQ2D, LossKind::kD2Q, LossKind::kStageI}) {
    auto report = grad_check(params, batch, kind);
    INFO("loss kind ", loss_kind_name(kind), " max rel err ", report.max_rel_err);
    CHECK(report.pass(1e-4));
    for (const auto& g : report.groups) CHECK_FALSE(g.frozen);
  }
}

TEST_CASE("frozen parameter groups report zero gradient and are excluded") {
  auto c = gradcheck_config();
  auto params = init_params<double>(c, 1);
  params.token_embed.set_requires_grad(false);
  auto batch = make_gradcheck_batch(c, 2, 3, 5, 3, 0);
  auto report = grad_check(params, batch, LossKind::kStageI);
  bool saw_frozen = false;
  for (const auto& g : report.groups) {
    if (g.name == "token_embed") {
      saw_frozen = true;
      CHECK(g.frozen);
      CHECK(g.checked == 0);
      CHECK(g.max_rel_err == 0.0);
    }
  }
  CHECK(saw_frozen);
  CHECK(report.pass(1e-4));
  CHECK_FALSE(params.token_embed.grad_allocated());
}

TEST_CASE("random-init reconstruction loss sits near ln V") {
  ModelConfig c;  // default toy scale: V=64
  auto params = init_params<float>(c, 3);
  GenSpec spec;
  spec.count = 32;
  auto pairs = generate_synthetic_pairs(5, spec, Tokenizer::standard());
  auto batches = make_batches(pairs, 32, c.pad_token_id, 0, false);
  auto l_q = loss_q2d(params, batches[0]).item();
  auto l_d = loss_d2q(params, batches[0]).item();
  CHECK(std::abs(double(l_q) - std::log(64.0)) <= 0.3);
  CHECK(std::abs(double(l_d) - std::log(64.0)) <= 0.3);
}

TEST_CASE("swapping query and document fields swaps the losses bit-for-bit") {
  auto c = small_train_config();
  auto params = init_params<double>(c, 9);
  auto batch = make_gradcheck_batch(c, 5, 3, 7, 11, 0);
  PairBatch swapped;
  swapped.query = batch.doc;
  swapped.doc = batch.query;
  CHECK(loss_q2d(params, batch).item() == loss_d2q(params, swapped).item());
  CHECK(loss_d2q(params, batch).item() == loss_q2d(params, swapped).item());
}

TEST_CASE("losses are invariant to right padding") {
  auto c = small_train_config();
  auto params = init_params<double>(c, 13);
  auto batch = make_gradcheck_batch(c, 3, 3, 6, 17, 0);
  PairBatch padded = batch;
  padded.query = TokenBatch::pad(batch.query.unpad(), c.pad_token_id, batch.query.width + 4);
  padded.doc = TokenBatch::pad(batch.doc.unpad(), c.pad_token_id, batch.doc.width + 3);
  CHECK(std::abs(loss_q2d(params, batch).item() - loss_q2d(params, padded).item()) <= 1e-9);
  CHECK(std::abs(loss_d2q(params, batch).item() - loss_d2q(params, padded).item()) <= 1e-9);
}

TEST_CASE("stage mixing identity holds across the alpha grid") {
  auto c = small_train_config();
  auto params = init_params<double>(c, 19);
  auto batch = make_gradcheck_batch(c, 4, 3, 6, 23, 0);
  const double l_q = loss_q2d(params, batch).item();
  const double l_d = loss_d2q(params, batch).item();
  for (double alpha : {0.0, 0.2, 0.5, 0.8, 1.0}) {
    const double mixed =
        mix_losses(loss_q2d(params, batch), loss_d2q(params, batch), alpha).item();
    const double expect = alpha * l_q + (1.0 - alpha) * l_d;
    CHECK(std::abs(mixed - expect) / std::max(1.0, std::abs(expect)) <= 1e-6);
  }

  auto two = Tensor<double>::scalar(2.0);
  auto three = Tensor<double>::scalar(3.0);
  CHECK(mix_losses(two, three, 0.2).item() == doctest::Approx(2.8).epsilon(1e-12));
}

TEST_CASE("alpha endpoints reproduce single-objective gradients exactly") {
  auto c = gradcheck_config();
  auto batch = make_gradcheck_batch(c, 3, 3, 5, 29, 0);

  auto mixed_grads = [&](double alpha) {
    auto params = init_params<double>(c, 31);
    GradTape<double> tape;
    auto loss = mix_losses(loss_q2d(params, batch), loss_d2q(params, batch), alpha);
    tape.backward(loss);
    return grads_by_name(params);
  };
  auto single_grads = [&](bool q2d) {
    auto params = init_params<double>(c, 31);
    GradTape<double> tape;
    auto loss = q2d ? loss_q2d(params, batch) : loss_d2q(params, batch);
    tape.backward(loss);
    return grads_by_name(params);
  };

  auto a0 = mixed_grads(0.0);
  auto d2q_only = single_grads(false);
  for (const auto& [name, g] : a0) {
    const auto& ref = d2q_only.at(name);
    for (size_t i = 0; i < g.size(); ++i) CHECK(g[i] == ref[i]);
  }

  auto a1 = mixed_grads(1.0);
  auto q2d_only = single_grads(true);
  for (const auto& [name, g] : a1) {
    const auto& ref = q2d_only.at(name);
    for (size_t i = 0; i < g.size(); ++i) CHECK(g[i] == ref[i]);
  }
}

TEST_CASE("gradient flows through the prefix into the encoder") {
  auto c = small_train_config();
  auto params = init_params<double>(c, 37);
  GenSpec spec;
  spec.count = 8;
  auto pairs = generate_synthetic_pairs(41, spec, Tokenizer::standard());
  auto batch = make_batches(pairs, 8, c.pad_token_id, 0, false)[0];

  {
    GradTape<double> tape;
    auto loss = loss_q2d(params, batch);
    tape.backward(loss);
  }
  // Token-embedding rows of query tokens must receive gradient: the only
  // path from the query into the loss is through e_Q.
  const Index d = c.hidden_dim;
  for (Index r = 0; r < batch.query.rows; ++r) {
    for (Index t = 0; t < batch.query.lengths[static_cast<size_t>(r)]; ++t) {
      const int32_t id = batch.query.at(r, t);
      const double norm =
          std::sqrt(params.token_embed.grad().segment(Index(id) * d, d).square().sum());
      CHECK(norm > 0.0);
    }
  }

  // And one optimizer step must move those same rows.
  auto before = params.token_embed.values();
  Stage1Config cfg;
  cfg.steps = 1;
  cfg.warmup_steps = 0;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 8;
  AdamWConfig ocfg;
  ocfg.learning_rate = cfg.learning_rate;
  AdamW<double> opt(anchor::detail::collect_params(params), ocfg);
  stage1_step(params, batch, cfg, opt);
  const int32_t some_query_token = batch.query.at(0, 0);
  double moved = (params.token_embed.values().segment(Index(some_query_token) * d, d) -
                  before.segment(Index(some_query_token) * d, d))
                     .abs()
                     .maxCoeff();
  CHECK(moved > 0.0);
}

TEST_CASE("overfitting a single pair drives both losses to zero and decodes exactly") {
  auto c = small_train_config();
  auto params = init_params<float>(c, 0);
  GenSpec spec;
  spec.count = 1;
  auto pairs = generate_synthetic_pairs(3, spec, Tokenizer::standard());
  auto batch = single_pair_batch(pairs[0], c.pad_token_id);

  Stage1Config cfg;
  cfg.alpha = 0.2;
  cfg.steps = 300;
  cfg.warmup_steps = 30;
  cfg.learning_rate = 3e-3;
  cfg.batch_size = 1;
  cfg.weight_decay = 0.0;
  auto report = train_stage1(params, pairs, cfg);

  const double final_q2d = loss_q2d(params, batch).item();
  const double final_d2q = loss_d2q(params, batch).item();
  INFO("overfit losses ", final_q2d, " / ", final_d2q);
  CHECK(final_q2d < 0.01);
  CHECK(final_d2q < 0.01);

  auto prefix = encode_eos(params, batch.query);
  auto decoded = greedy_decode(params, prefix, c.max_seq_len);
  CHECK(decoded == pairs[0].document);
  CHECK(report.rows.size() == 300);
}

TEST_CASE("training halves the mixed loss and is reproducible; zero steps is a no-op") {
  auto c = small_train_config();
  GenSpec spec;
  spec.count = 32;
  auto pairs = generate_synthetic_pairs(51, spec, Tokenizer::standard());

  for (uint64_t seed : {0ull, 1ull, 2ull}) {
    auto params = init_params<float>(c, seed);
    Stage1Config cfg;
    cfg.steps = 400;
    cfg.warmup_steps = 40;
    cfg.learning_rate = 2e-3;
    cfg.batch_size = 16;
    cfg.seed = seed;
    auto report = train_stage1(params, pairs, cfg);
    const double first = report.rows.front()[3];
    const double last = report.rows.back()[3];
    INFO("seed ", seed, ": ", first, " -> ", last);
    CHECK(last <= 0.5 * first);

    // Logged mixing identity at every step.
    for (const auto& row : report.rows) {
      const double expect = cfg.alpha * row[1] + (1.0 - cfg.alpha) * row[2];
      CHECK(std::abs(row[3] - expect) / std::max(1.0, std::abs(expect)) <= 1e-6);
    }

    if (seed == 0) {
      auto params2 = init_params<float>(c, seed);
      auto report2 = train_stage1(params2, pairs, cfg);
      REQUIRE(report.rows.size() == report2.rows.size());
      for (size_t i = 0; i < report.rows.size(); ++i)
        for (size_t j = 0; j < report.rows[i].size(); ++j)
          CHECK(report.rows[i][j] == report2.rows[i][j]);
    }
  }

  auto params = init_params<float>(c, 7);
  auto before = params.token_embed.values();
  Stage1Config cfg;
  cfg.steps = 0;
  cfg.warmup_steps = 0;
  auto report = train_stage1(params, pairs, cfg);
  CHECK(report.rows.empty());
  CHECK((params.token_embed.values() == before).all());

  CHECK_THROWS_AS(train_stage1(params, {}, cfg), TrainError);
}

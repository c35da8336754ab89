#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "anchor/tensor.hpp"
#include "test_util.hpp"

#include <cmath>
#include <random>
#include <vector>

using namespace anchor;
using anchor_test::max_grad_error;
using anchor_test::random_tensor;
using anchor_test::weighted_probe;

TEST_CASE("softmax closed forms") {
  auto a = Tensor<double>::from_data({2}, {0.0, 0.0});
  auto sa = softmax_lastdim(a);
  CHECK(sa.values()[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(sa.values()[1] == doctest::Approx(0.5).epsilon(1e-12));

  auto b = Tensor<double>::from_data({2}, {std::log(1.0), std::log(3.0)});
  auto sb = softmax_lastdim(b);
  CHECK(sb.values()[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(sb.values()[1] == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("matmul identity and shape errors") {
  std::mt19937_64 rng(0);
  auto a = random_tensor({3, 3}, rng);
  auto eye = Tensor<double>::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto out = matmul(eye, a);
  for (Index i = 0; i < 9; ++i) CHECK(out.values()[i] == a.values()[i]);

  auto bad = Tensor<double>::zeros({4, 2});
  CHECK_THROWS_WITH_AS(matmul(a, bad), "matmul: incompatible shapes [3x3] and [4x2]",
                       TensorError);
  CHECK_THROWS_AS(add(a, bad), TensorError);
}

TEST_CASE("cross entropy closed forms") {
  const Index v = 64;
  auto logits = Tensor<double>::zeros({1, v});
  std::vector<int32_t> tgt{17};
  std::vector<uint8_t> mask{1};
  auto loss = cross_entropy(logits, tgt, mask);
  CHECK(loss.item() == doctest::Approx(std::log(64.0)).epsilon(1e-12));

  auto hot = Tensor<double>::zeros({1, v});
  hot.values()[17] = 1000.0;
  CHECK(cross_entropy(hot, tgt, mask).item() == doctest::Approx(0.0).epsilon(1e-9));

  // Direct evaluation of the softmax formula.
  auto small = Tensor<double>::from_data({1, 3}, {1.0, 2.0, 3.0});
  std::vector<int32_t> t2{2};
  const double expected = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - 3.0;
  CHECK(cross_entropy(small, t2, mask).item() == doctest::Approx(expected).epsilon(1e-12));
  CHECK(cross_entropy(small, t2, mask).item() == doctest::Approx(0.407606).epsilon(1e-6));

  std::vector<uint8_t> dead{0};
  CHECK_THROWS_WITH_AS(cross_entropy(small, t2, dead), "cross_entropy: empty loss support",
                       TensorError);
}

TEST_CASE("cross entropy batched reduction averages per sequence then batch") {
  // Sequence 0 has two live positions, sequence 1 has one; the batched loss
  // must match the hand-averaged per-sequence means.
  std::mt19937_64 rng(7);
  auto logits = random_tensor({2, 2, 5}, rng);
  std::vector<int32_t> tgt{1, 2, 3, 0};
  std::vector<uint8_t> mask{1, 1, 1, 0};
  const double batched = cross_entropy(logits, tgt, mask).item();

  auto row = [&](Index b, Index t) {
    auto r = Tensor<double>::zeros({1, 5});
    for (Index i = 0; i < 5; ++i) r.values()[i] = logits.values()[(b * 2 + t) * 5 + i];
    std::vector<int32_t> tt{tgt[static_cast<size_t>(b * 2 + t)]};
    std::vector<uint8_t> mm{1};
    return cross_entropy(r, tt, mm).item();
  };
  const double expect = 0.5 * ((row(0, 0) + row(0, 1)) / 2.0 + row(1, 0));
  CHECK(batched == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("cosine similarity closed forms") {
  auto v = Tensor<double>::from_data({3}, {0.3, -1.2, 2.0});
  CHECK(cosine_similarity(v, v).item() == doctest::Approx(1.0).epsilon(1e-12));

  auto e1 = Tensor<double>::from_data({2}, {1.0, 0.0});
  auto e2 = Tensor<double>::from_data({2}, {0.0, 1.0});
  CHECK(cosine_similarity(e1, e2).item() == doctest::Approx(0.0).epsilon(1e-12));

  auto d = Tensor<double>::from_data({2}, {1.0, 1.0});
  CHECK(cosine_similarity(d, e1).item() ==
        doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));

  auto z = Tensor<double>::zeros({2});
  CHECK_THROWS_WITH_AS(cosine_similarity(z, e1).item(),
                       "cosine_similarity: degenerate embedding norm", TensorError);
}

TEST_CASE("backward quadratic matches central difference") {
  auto w = Tensor<double>::from_data({}, {3.0}).set_requires_grad(true);
  {
    GradTape<double> tape;
    auto loss = mul(w, w);
    tape.backward(loss);
  }
  CHECK(w.grad()[0] == doctest::Approx(6.0).epsilon(1e-12));

  const double h = 1e-3;
  const double fd = ((3.0 + h) * (3.0 + h) - (3.0 - h) * (3.0 - h)) / (2.0 * h);
  CHECK(std::abs(w.grad()[0] - fd) / std::abs(fd) <= 1e-6);
}

TEST_CASE("backward leaves unreachable leaves at zero") {
  auto w = Tensor<double>::from_data({2}, {1.0, 2.0}).set_requires_grad(true);
  auto unused = Tensor<double>::from_data({2}, {5.0, 5.0}).set_requires_grad(true);
  {
    GradTape<double> tape;
    auto loss = sum(mul(w, w));
    tape.backward(loss);
  }
  CHECK_FALSE(unused.grad_allocated());
  CHECK(unused.grad()[0] == 0.0);
  CHECK(unused.grad()[1] == 0.0);
}

TEST_CASE("backward is linear in the loss") {
  std::mt19937_64 rng(21);
  const double a = 0.7, b = -1.3;
  auto x = random_tensor({4}, rng);
  auto y = random_tensor({4}, rng);
  x.set_requires_grad(true);
  y.set_requires_grad(true);

  auto l1_of = [&] { return sum(mul(x, y)); };
  auto l2_of = [&] { return mean(mul(x, x)); };

  auto grad_of = [](Tensor<double>& t) {
    return std::vector<double>(t.grad().data(), t.grad().data() + t.numel());
  };

  // Combined pass.
  std::vector<double> combined_gx, combined_gy;
  {
    GradTape<double> tape;
    auto loss = add(scale(l1_of(), a), scale(l2_of(), b));
    tape.backward(loss);
  }
  combined_gx = grad_of(x);
  combined_gy = grad_of(y);

  x.zero_grad();
  y.zero_grad();
  std::vector<double> g1x, g1y;
  {
    GradTape<double> tape;
    tape.backward(l1_of());
    g1x = grad_of(x);
    g1y = grad_of(y);
  }
  x.zero_grad();
  y.zero_grad();
  std::vector<double> g2x, g2y;
  {
    GradTape<double> tape;
    tape.backward(l2_of());
    g2x = grad_of(x);
    g2y = grad_of(y);
  }
  for (size_t i = 0; i < 4; ++i) {
    CHECK(std::abs(combined_gx[i] - (a * g1x[i] + b * g2x[i])) <= 1e-10);
    CHECK(std::abs(combined_gy[i] - (a * g1y[i] + b * g2y[i])) <= 1e-10);
  }
}

TEST_CASE("identical inputs give bit-identical forwards and gradients") {
  auto run = [] {
    std::mt19937_64 rng(5);
    auto x = random_tensor({6, 4}, rng).set_requires_grad(true);
    auto w = random_tensor({4, 3}, rng).set_requires_grad(true);
    GradTape<double> tape;
    auto out = softmax_lastdim(matmul(x, w));
    auto loss = weighted_probe(out);
    tape.backward(loss);
    std::vector<double> r{loss.item()};
    for (Index i = 0; i < w.numel(); ++i) r.push_back(w.grad()[i]);
    return r;
  };
  auto r1 = run();
  auto r2 = run();
  for (size_t i = 0; i < r1.size(); ++i) CHECK(r1[i] == r2[i]);
}

TEST_CASE("per-op gradients match finite differences") {
  std::mt19937_64 rng(13);
  using Inputs = std::vector<Tensor<double>>;
  auto check = [&](Inputs inputs,
                   std::function<Tensor<double>(Inputs&)> fn, double tol = 5e-7) {
    CHECK(max_grad_error(inputs, fn) <= tol);
  };

  check({random_tensor({3, 4}, rng), random_tensor({4, 5}, rng)},
        [](Inputs& in) { return weighted_probe(matmul(in[0], in[1])); });

  check({random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 2}, rng)},
        [](Inputs& in) { return weighted_probe(matmul_batched(in[0], in[1])); });

  check({random_tensor({2, 5}, rng), random_tensor({2, 5}, rng)},
        [](Inputs& in) { return weighted_probe(sub(in[0], in[1])); });

  check({random_tensor({2, 3, 4}, rng), random_tensor({3, 4}, rng)},
        [](Inputs& in) { return weighted_probe(add_broadcast(in[0], in[1])); });

  check({random_tensor({7}, rng)},
        [](Inputs& in) { return weighted_probe(scale(in[0], -2.5)); });

  check({random_tensor({4, 6}, rng)},
        [](Inputs& in) { return weighted_probe(softmax_lastdim(in[0])); });

  check({random_tensor({3, 5}, rng)},
        [](Inputs& in) { return weighted_probe(logsumexp_lastdim(in[0])); });

  check({random_tensor({4, 6}, rng), random_tensor({6}, rng, 0.3)},
        [](Inputs& in) {
          return weighted_probe(rmsnorm(in[0], in[1], 1e-5));
        });

  check({random_tensor({3, 4}, rng)},
        [](Inputs& in) { return weighted_probe(gelu(in[0])); });

  check({random_tensor({2, 3, 4}, rng)},
        [](Inputs& in) { return weighted_probe(permute(in[0], {2, 0, 1})); });

  check({random_tensor({3, 4}, rng), random_tensor({2, 4}, rng)},
        [](Inputs& in) {
          return weighted_probe(concat<double>({in[0], in[1]}, 0));
        });

  check({random_tensor({2, 6}, rng)},
        [](Inputs& in) { return weighted_probe(slice(in[0], 1, 2, 3)); });

  check({random_tensor({5, 3}, rng)}, [](Inputs& in) {
    std::vector<int32_t> ids{4, 0, 2, 2};
    return weighted_probe(gather_rows(in[0], ids));
  });

  check({random_tensor({2, 4, 3}, rng)}, [](Inputs& in) {
    std::vector<Index> steps{3, 1};
    return weighted_probe(take_timestep(in[0], steps));
  });

  check({random_tensor({3, 4}, rng)}, [](Inputs& in) {
    std::vector<Index> cols{1, 3, 0};
    return weighted_probe(gather_cols(in[0], cols));
  });

  check({random_tensor({4, 5}, rng)},
        [](Inputs& in) { return weighted_probe(l2_normalize_rows(in[0])); });

  check({random_tensor({2, 3, 4}, rng)},
        [](Inputs& in) { return weighted_probe(reshape(in[0], {6, 4})); });

  check({random_tensor({2, 3, 5}, rng)}, [](Inputs& in) {
    std::vector<int32_t> tgt{1, 4, 0, 2, 3, 1};
    std::vector<uint8_t> mask{1, 1, 0, 1, 0, 1};
    return cross_entropy(in[0], tgt, mask);
  });

  check({random_tensor({6}, rng), random_tensor({6}, rng)},
        [](Inputs& in) { return cosine_similarity(in[0], in[1]); });

  check({random_tensor({5}, rng)},
        [](Inputs& in) { return mean(in[0]); });
}

TEST_CASE("gradients accumulate across uses of the same tensor") {
  auto x = Tensor<double>::from_data({2}, {2.0, -1.0}).set_requires_grad(true);
  {
    GradTape<double> tape;
    auto loss = add(sum(mul(x, x)), sum(x));  // d/dx = 2x + 1
    tape.backward(loss);
  }
  CHECK(x.grad()[0] == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(x.grad()[1] == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("no recording without an active tape") {
  auto x = Tensor<double>::from_data({2}, {1.0, 2.0}).set_requires_grad(true);
  auto y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
  GradTape<double> tape;
  {
    NoGrad<double> off;
    auto z = mul(x, x);
    CHECK_FALSE(z.requires_grad());
  }
  auto z = mul(x, x);
  CHECK(z.requires_grad());
  CHECK(tape.size() == 1);
  tape.clear();
  CHECK(tape.size() == 0);
}

TEST_CASE("backward requires a scalar loss") {
  auto x = Tensor<double>::from_data({2}, {1.0, 2.0}).set_requires_grad(true);
  GradTape<double> tape;
  auto y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), TensorError);
}

#ifndef ANCHOR_TESTS_TEST_UTIL_HPP_
#define ANCHOR_TESTS_TEST_UTIL_HPP_

#include "anchor/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

// Shared helpers for the test binaries. The finite-difference checker here
// is the independent oracle for every backward rule: it never touches the
// tape machinery beyond calling the op under test.

namespace anchor_test {

using anchor::GradTape;
using anchor::Index;
using anchor::Shape;
using anchor::Tensor;

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double scl = 1.0) {
  Tensor<double> t = Tensor<double>::zeros(std::move(shape));
  std::normal_distribution<double> dist(0.0, scl);
  for (Index i = 0; i < t.numel(); ++i) t.values()[i] = dist(rng);
  return t;
}

// Central-difference gradient of a scalar-valued function of several
// tensors, compared coordinate by coordinate against the taped gradient.
// `fn` must evaluate a fresh scalar from the current input values.
inline double max_grad_error(
    std::vector<Tensor<double>>& inputs,
    const std::function<Tensor<double>(std::vector<Tensor<double>>&)>& fn,
    double h = 1e-6) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    GradTape<double> tape;
    Tensor<double> loss = fn(inputs);
    tape.backward(loss);
  }
  double worst = 0.0;
  for (auto& t : inputs) {
    for (Index i = 0; i < t.numel(); ++i) {
      const double keep = t.values()[i];
      t.values()[i] = keep + h;
      const double up = fn(inputs).item();
      t.values()[i] = keep - h;
      const double dn = fn(inputs).item();
      t.values()[i] = keep;
      const double numeric = (up - dn) / (2.0 * h);
      const double analytic = t.grad_allocated() ? t.grad()[i] : 0.0;
      const double err = std::abs(numeric - analytic) /
                         std::max({std::abs(numeric), std::abs(analytic), 1.0});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

// Scalar probe: sum of elementwise product with a fixed pseudo-random
// weight tensor, so every output coordinate influences the loss.
inline Tensor<double> weighted_probe(const Tensor<double>& out, uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(0.5, 1.5);
  Tensor<double> w = Tensor<double>::zeros(out.shape());
  for (Index i = 0; i < w.numel(); ++i) w.values()[i] = dist(rng);
  return anchor::sum(anchor::mul(out, w));
}

inline std::filesystem::path temp_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() /
             ("anchor_test_" + tag + "_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace anchor_test

#endif  // ANCHOR_TESTS_TEST_UTIL_HPP_

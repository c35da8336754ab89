#ifndef ANCHOR_OPTIM_HPP_
#define ANCHOR_OPTIM_HPP_

#include "anchor/tensor.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace anchor {

class TrainError : public std::runtime_error {
 public:
  explicit TrainError(const std::string& msg) : std::runtime_error(msg) {}
};

struct AdamWConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  Index warmup_steps = 0;  // linear warmup, then constant
};

// Decoupled-weight-decay Adam over an explicit parameter list. Frozen
// tensors simply never appear in the list.
template <typename S>
class AdamW {
 public:
  AdamW(std::vector<Tensor<S>> params, AdamWConfig cfg)
      : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      m_.push_back(ArrX<S>::Zero(p.numel()));
      v_.push_back(ArrX<S>::Zero(p.numel()));
    }
  }

  double lr_at(Index step) const {  // step is 1-based
    if (cfg_.warmup_steps > 0 && step <= cfg_.warmup_steps)
      return cfg_.learning_rate * double(step) / double(cfg_.warmup_steps);
    return cfg_.learning_rate;
  }

  // One update from the gradients currently on the parameters.
  double step() {
    ++t_;
    const S lr = S(lr_at(t_));
    const S b1 = S(cfg_.beta1), b2 = S(cfg_.beta2), eps = S(cfg_.eps);
    const S wd = S(cfg_.weight_decay);
    const S bc1 = S(1) - std::pow(b1, S(t_));
    const S bc2 = S(1) - std::pow(b2, S(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      const ArrX<S>& g = p.grad();  // zeros if nothing reached this leaf
      m_[i] = b1 * m_[i] + (S(1) - b1) * g;
      v_[i] = b2 * v_[i] + (S(1) - b2) * g.square();
      p.values() -= lr * ((m_[i] / bc1) / ((v_[i] / bc2).sqrt() + eps) + wd * p.values());
    }
    return double(lr);
  }

  void zero_grads() {
    for (auto& p : params_) p.zero_grad();
  }

  Index steps_taken() const { return t_; }

 private:
  std::vector<Tensor<S>> params_;
  std::vector<ArrX<S>> m_, v_;
  AdamWConfig cfg_;
  Index t_ = 0;
};

}  // namespace anchor

#endif  // ANCHOR_OPTIM_HPP_

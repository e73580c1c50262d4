// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pemma/errors.hpp"
#include "pemma/metrics.hpp"
#include "pemma/tensor.hpp"

namespace pemma {

struct AdamWConfig {
  double lr0 = 1e-3;
  int total_steps = 1000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
};

// Decoupled-weight-decay Adam with a cosine learning-rate schedule. Decay is
// applied to the parameter before the moment update. State exists only for
// the trainable tensors handed in; passing a frozen tensor is an error.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>*> params, AdamWConfig cfg)
      : params_(std::move(params)), cfg_(cfg) {
    for (Tensor<T>* p : params_) {
      if (!p->requires_grad)
        throw ConfigError("adamw: refusing to track a frozen parameter");
      p->ensure_grad();
    }
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i]->data.size(), 0.0);
      v_[i].assign(params_[i]->data.size(), 0.0);
    }
  }

  // Consumes the gradients currently stored on the parameters and clears
  // them afterwards.
  void step() {
    const double lr = cosine_lr(cfg_.lr0, t_, cfg_.total_steps);
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& p = *params_[i];
      p.ensure_grad();
      for (size_t j = 0; j < p.data.size(); ++j) {
        double w = static_cast<double>(p.data[j]);
        w -= lr * cfg_.weight_decay * w;
        const double g = static_cast<double>(p.grad[j]);
        if (!std::isfinite(g))
          throw NumericError("adamw: non-finite gradient in parameter " + std::to_string(i) +
                             " at element " + std::to_string(j));
        m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g;
        v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m_[i][j] / bc1;
        const double vhat = v_[i][j] / bc2;
        w -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        p.data[j] = static_cast<T>(w);
      }
      p.zero_grad();
    }
  }

  int steps_taken() const { return t_; }
  double current_lr() const { return cosine_lr(cfg_.lr0, t_, cfg_.total_steps); }

 private:
  std::vector<Tensor<T>*> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  int t_ = 0;
};

}  // namespace pemma

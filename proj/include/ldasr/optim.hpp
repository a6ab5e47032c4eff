// Adam with bias correction, a ramp + inverse-sqrt learning-rate schedule, and
// an optional EMA shadow of the parameters for evaluation.

#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "ldasr/tensor.hpp"

namespace ldasr {

// Linear ramp to peak_lr over `warmup` steps, then peak_lr * sqrt(warmup/step).
inline double lr_at_step(int64_t step, double peak_lr, int64_t warmup) {
  if (step < 1) throw ContractError("lr_at_step: step must be >= 1");
  if (warmup < 1) throw ContractError("lr_at_step: warmup must be >= 1");
  const double ramp = (double)step / (double)warmup;
  const double decay = std::sqrt((double)warmup / (double)step);
  return peak_lr * std::min(ramp, decay);
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double peak_lr = 1.8e-3;
  int64_t warmup_steps = 1000;
  bool ema_enabled = false;
  double ema_decay = 0.999;  // shadow = decay*shadow + (1-decay)*param
};

// Owns the moment estimates for a fixed named parameter set. The parameter
// tensors themselves live in the model; step() reads their grads in name
// order and updates them in place.
class AdamOptimizer {
 public:
  AdamOptimizer() = default;
  AdamOptimizer(std::map<std::string, Tensor> params, AdamConfig cfg)
      : cfg_(cfg), params_(std::move(params)) {
    for (auto& [name, p] : params_) {
      m_[name] = Tensor::zeros(p.shape());
      v_[name] = Tensor::zeros(p.shape());
      if (cfg_.ema_enabled) {
        Tensor shadow = Tensor::zeros(p.shape());
        shadow.data() = p.data();
        ema_[name] = shadow;
      }
    }
  }

  int64_t step_count() const { return step_; }
  const std::map<std::string, Tensor>& params() const { return params_; }
  const std::map<std::string, Tensor>& ema_shadow() const { return ema_; }

  double current_lr() const { return lr_at_step(step_ + 1, cfg_.peak_lr, cfg_.warmup_steps); }

  // One bias-corrected Adam update over every owned parameter, then the EMA
  // pass. Parameters whose grad was never touched this step update with g=0.
  void step() {
    const int64_t t = step_ + 1;
    const double lr = lr_at_step(t, cfg_.peak_lr, cfg_.warmup_steps);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, (double)t);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, (double)t);
    for (auto& [name, p] : params_) {
      float* m = m_[name].ptr();
      float* v = v_[name].ptr();
      float* w = p.ptr();
      const bool has_g = p.has_grad();
      const float* g = has_g ? p.node()->grad.data() : nullptr;
      for (int64_t i = 0; i < p.numel(); ++i) {
        const float gi = has_g ? g[i] : 0.0f;
        if (!std::isfinite(gi))
          throw TrainError("non-finite gradient in parameter '" + name + "'");
        m[i] = (float)(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi);
        v[i] = (float)(cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * (double)gi * gi);
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] -= (float)(lr * mhat / (std::sqrt(vhat) + cfg_.epsilon));
      }
    }
    step_ = t;
    if (cfg_.ema_enabled) {
      for (auto& [name, p] : params_) {
        float* s = ema_[name].ptr();
        const float* w = p.ptr();
        for (int64_t i = 0; i < p.numel(); ++i)
          s[i] = (float)(cfg_.ema_decay * s[i] + (1.0 - cfg_.ema_decay) * w[i]);
      }
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

 private:
  AdamConfig cfg_;
  int64_t step_ = 0;
  std::map<std::string, Tensor> params_;
  std::map<std::string, Tensor> m_, v_, ema_;
};

}  // namespace ldasr

#pragma once

#include <cmath>
#include <cstdint>

#include "vapors/dynamics.hpp"

namespace vapors {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-4;
  double clip_norm = 1000.0;
};

template <typename S>
struct OptimizerState {
  AdamConfig hyper;
  ModelParams<S> first_moment;
  ModelParams<S> second_moment;
  std::int64_t step = 0;

  static OptimizerState create(const ModelConfig& cfg, const AdamConfig& hyper = {}) {
    return {hyper, ModelParams<S>::zeros(cfg), ModelParams<S>::zeros(cfg), 0};
  }
};

struct AdamStepInfo {
  bool applied = false;    // false when the gradient was non-finite and the update was skipped
  double grad_norm = 0.0;  // global norm before clipping
  double clip_scale = 1.0;
};

template <typename S>
double global_norm(const ModelParams<S>& g) {
  double sq = 0.0;
  for (const auto& t : g.tensors) sq += t.template cast<double>().squaredNorm();
  return std::sqrt(sq);
}

/// Global-norm clipping followed by a bias-corrected Adam update, in place.
template <typename S>
AdamStepInfo adam_step(ModelParams<S>& params, const ModelParams<S>& grads, OptimizerState<S>& opt) {
  AdamStepInfo info;
  info.grad_norm = global_norm(grads);
  if (!std::isfinite(info.grad_norm)) return info;
  if (info.grad_norm > opt.hyper.clip_norm) info.clip_scale = opt.hyper.clip_norm / info.grad_norm;

  ++opt.step;
  const auto& h = opt.hyper;
  const S b1 = static_cast<S>(h.beta1), b2 = static_cast<S>(h.beta2);
  const S scale = static_cast<S>(info.clip_scale);
  const S correction1 = static_cast<S>(1.0 - std::pow(h.beta1, static_cast<double>(opt.step)));
  const S correction2 = static_cast<S>(1.0 - std::pow(h.beta2, static_cast<double>(opt.step)));
  const S lr = static_cast<S>(h.learning_rate), eps = static_cast<S>(h.epsilon);
  for (int i = 0; i < kNumParams; ++i) {
    auto& m = opt.first_moment.tensors[i];
    auto& v = opt.second_moment.tensors[i];
    const Mat<S> g = grads.tensors[i] * scale;
    m = b1 * m + (S(1) - b1) * g;
    v = b2 * v + (S(1) - b2) * g.cwiseProduct(g);
    params.tensors[i].array() -=
        lr * (m.array() / correction1) / ((v.array() / correction2).sqrt() + eps);
  }
  info.applied = true;
  return info;
}

}  // namespace vapors

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "capt/tensor.hpp"

namespace capt::ad {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::int64_t step = 0;
};

// One Adam update over `params`, reading each parameter's accumulated grad.
// A parameter without a populated grad is treated as having zero gradient.
template <class T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, const AdamConfig& cfg) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), T(0));
      state.v.emplace_back(p.numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam_step: optimizer state does not match parameters");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T step_size = static_cast<T>(cfg.lr / bc1);
  const T inv_bc2 = static_cast<T>(1.0 / bc2);
  const T eps = static_cast<T>(cfg.eps);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto values = params[p].mutable_values();
    auto& m = state.m[p];
    auto& v = state.v[p];
    if (m.size() != values.size()) throw ContractError("adam_step: state shape mismatch");
    if (!params[p].has_grad()) {
      // Zero gradient still decays the moments.
      for (std::size_t i = 0; i < values.size(); ++i) {
        m[i] *= b1;
        v[i] *= b2;
        if (m[i] != T(0)) values[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
      }
      continue;
    }
    const auto g = params[p].grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      if (m[i] != T(0)) values[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
    }
  }
}

}  // namespace capt::ad

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "tmoe/error.hpp"
#include "tmoe/tensor.hpp"

namespace tmoe {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// One bias-corrected Adam update over `params`; tensors without a gradient
// are treated as having a zero gradient. Moments are kept in double so the
// update is independent of accumulation order.
template <class T>
void adam_step(std::vector<BasicTensor<T>>& params, AdamState& state, const AdamConfig& cfg) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
      state.v.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    }
  }
  require(state.m.size() == params.size(), ErrorCategory::kContract,
          "adam_step: optimizer state does not match parameter list");
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].mutable_data();
    const auto grad = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad.empty() ? 0.0 : static_cast<double>(grad[j]);
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      data[j] = static_cast<T>(static_cast<double>(data[j]) - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

template <class T>
double global_grad_norm(const std::vector<BasicTensor<T>>& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (auto g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

// Rescales all gradients so their global L2 norm is at most `max_norm`.
// Returns the norm before clipping.
template <class T>
double clip_grad_norm(std::vector<BasicTensor<T>>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (auto& g : p.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

template <class T>
void zero_grads(std::vector<BasicTensor<T>>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace tmoe

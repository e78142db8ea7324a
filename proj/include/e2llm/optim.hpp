#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "e2llm/tensor.hpp"

namespace e2llm {

struct AdamWHyper {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.1;
  double epsilon = 1e-8;
};

template <typename T>
struct AdamWState {
  AdamWHyper hyper;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
  std::uint64_t step_count = 0;

  AdamWState() = default;
  AdamWState(AdamWHyper h, std::span<const std::size_t> lengths) : hyper(h) {
    for (std::size_t n : lengths) {
      first_moment.emplace_back(n, T{0});
      second_moment.emplace_back(n, T{0});
    }
  }
};

// One AdamW update with decoupled weight decay and bias correction.
// Nothing is modified when any gradient entry is non-finite.
template <typename T>
void adamw_step(std::span<const std::span<T>> params, std::span<const std::span<const T>> grads,
                AdamWState<T>& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw DimensionError("adamw_step: " + std::to_string(params.size()) + " params, " +
                         std::to_string(grads.size()) + " grads, " +
                         std::to_string(state.first_moment.size()) + " moment slots");
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (params[p].size() != grads[p].size() || params[p].size() != state.first_moment[p].size() ||
        params[p].size() != state.second_moment[p].size()) {
      throw DimensionError("adamw_step: length mismatch in parameter " + std::to_string(p));
    }
    for (std::size_t i = 0; i < grads[p].size(); ++i) {
      if (!std::isfinite(grads[p][i])) {
        throw NonFiniteError("adamw_step: non-finite gradient in parameter " + std::to_string(p) +
                             " at index " + std::to_string(i) + "; step skipped");
      }
    }
  }

  const AdamWHyper& h = state.hyper;
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(h.beta1, t);
  const double bc2 = 1.0 - std::pow(h.beta2, t);
  const T b1 = static_cast<T>(h.beta1);
  const T b2 = static_cast<T>(h.beta2);
  const T decay = static_cast<T>(1.0 - h.learning_rate * h.weight_decay);
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::span<T> w = params[p];
    std::span<const T> g = grads[p];
    std::vector<T>& m = state.first_moment[p];
    std::vector<T>& v = state.second_moment[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (T{1} - b1) * g[i];
      v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
      const double m_hat = static_cast<double>(m[i]) / bc1;
      const double v_hat = static_cast<double>(v[i]) / bc2;
      w[i] = w[i] * decay - static_cast<T>(h.learning_rate * m_hat / (std::sqrt(v_hat) + h.epsilon));
    }
  }
}

// Scales all gradients so their joint L2 norm is at most `max_norm`.
// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::span<const std::span<T>> grads, double max_norm) {
  double sq = 0.0;
  for (std::span<T> g : grads) {
    for (T x : g) sq += static_cast<double>(x) * static_cast<double>(x);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T f = static_cast<T>(max_norm / norm);
    for (std::span<T> g : grads) {
      for (T& x : g) x *= f;
    }
  }
  return norm;
}

}  // namespace e2llm

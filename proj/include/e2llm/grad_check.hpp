#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "e2llm/autograd.hpp"

namespace e2llm {

struct GradCheckOptions {
  double step = 1e-3;
  // Denominator floor for the relative error, so that entries whose true
  // derivative is ~0 are judged on absolute error instead.
  double magnitude_floor = 1e-6;
  // One-sided differences disagreeing by more than this fraction of their
  // mean magnitude (or the absolute kink floor) mark a non-differentiable
  // point.
  double kink_ratio = 0.5;
  double kink_floor = 1e-2;
};

struct GradCheckPoint {
  std::size_t input = 0;
  std::size_t index = 0;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t compared = 0;
  std::vector<GradCheckPoint> non_comparable;
  GradCheckPoint worst;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Scalar-valued function of one or more tensor inputs, built on a tape.
template <typename T>
using TapeFunction = std::function<Var(Tape<T>&, std::span<const Var>)>;

template <typename T>
double evaluate(const TapeFunction<T>& f, std::vector<Tensor<T>>& inputs) {
  Tape<T> tape(Recording::off);
  std::vector<Var> vars;
  for (Tensor<T>& in : inputs) vars.push_back(tape.parameter(in));
  return static_cast<double>(tape.value(f(tape, vars)).data.at(0));
}

template <typename T>
std::vector<std::vector<T>> analytic_gradient(const TapeFunction<T>& f, std::vector<Tensor<T>>& inputs) {
  Tape<T> tape;
  std::vector<Var> vars;
  for (Tensor<T>& in : inputs) {
    in.enable_grad();
    vars.push_back(tape.parameter(in));
  }
  tape.backward(f(tape, vars));
  std::vector<std::vector<T>> grads;
  for (Tensor<T>& in : inputs) grads.push_back(in.grad);
  return grads;
}

// Compares reverse-mode gradients of `analytic_f` against central
// differences of `numeric_f` coordinate by coordinate. The two may run at
// different precisions; inputs are shared through `inputs_numeric`.
template <typename TA, typename TN>
GradCheckReport grad_check_mixed(const TapeFunction<TA>& analytic_f, const TapeFunction<TN>& numeric_f,
                                 const std::vector<Tensor<TN>>& inputs_numeric,
                                 const GradCheckOptions& opt = {}) {
  std::vector<Tensor<TA>> inputs_analytic;
  for (const auto& in : inputs_numeric) inputs_analytic.push_back(in.template cast<TA>());
  const auto grads = analytic_gradient(analytic_f, inputs_analytic);

  std::vector<Tensor<TN>> probe = inputs_numeric;
  const double f0 = evaluate(numeric_f, probe);
  GradCheckReport report;
  for (std::size_t p = 0; p < probe.size(); ++p) {
    for (std::size_t i = 0; i < probe[p].size(); ++i) {
      const TN saved = probe[p].data[i];
      probe[p].data[i] = static_cast<TN>(saved + opt.step);
      const double fp = evaluate(numeric_f, probe);
      probe[p].data[i] = static_cast<TN>(saved - opt.step);
      const double fm = evaluate(numeric_f, probe);
      probe[p].data[i] = saved;

      const double forward = (fp - f0) / opt.step;
      const double backward = (f0 - fm) / opt.step;
      const double spread = std::abs(forward - backward);
      if (spread > std::max(opt.kink_floor, opt.kink_ratio * 0.5 * (std::abs(forward) + std::abs(backward)))) {
        report.non_comparable.push_back({p, i});
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double err = relative_error(static_cast<double>(grads[p][i]), numeric, opt.magnitude_floor);
      ++report.compared;
      if (err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst = {p, i};
      }
    }
  }
  return report;
}

template <typename T>
GradCheckReport grad_check(const TapeFunction<T>& f, const std::vector<Tensor<T>>& inputs,
                           const GradCheckOptions& opt = {}) {
  return grad_check_mixed<T, T>(f, f, inputs, opt);
}

}  // namespace e2llm

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "e2llm/grad_check.hpp"
#include "e2llm/model.hpp"
#include "e2llm/train.hpp"

namespace e2llm::testing {

inline ModelConfig probe_config() {
  ModelConfig c;
  c.vocab_size = 16;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.head_dim = 8;
  c.ffn_mult = 2;
  c.base_window = 8;
  c.max_sequence = 64;
  return c;
}

// Full-model check: tape gradients of a TA-precision copy against central
// differences (fourth order) of the double-precision batch loss, perturbing weights in place.
template <typename TA>
GradCheckReport model_grad_check(Model<double> reference, std::span<const std::int32_t> tokens,
                                 std::size_t seg_len, std::span<const IterationPlan> plans,
                                 const GradCheckOptions& opt) {
  Model<TA> analytic = reference.template cast<TA>();
  analytic.enable_grad();
  {
    const ModelConfig& cfg = analytic.config();
    Tape<TA> tape;
    const auto table = batch_rotary_table<TA>(plans, seg_len, cfg.head_dim, cfg.rope_base);
    const auto targets = next_token_targets(tokens, seg_len);
    tape.backward(cross_entropy(tape, analytic.forward(tape, tokens, seg_len, table),
                                std::span<const std::int32_t>(targets)));
  }
  std::vector<const Tensor<TA>*> grads;
  analytic.for_each_parameter([&](const std::string&, Tensor<TA>& p) { grads.push_back(&p); });

  const double f0 = batch_loss(reference, tokens, seg_len, plans);
  GradCheckReport report;
  std::size_t p = 0;
  reference.for_each_parameter([&](const std::string&, Tensor<double>& w) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double saved = w.data[i];
      auto at = [&](double dx) {
        w.data[i] = saved + dx;
        const double f = batch_loss(reference, tokens, seg_len, plans);
        w.data[i] = saved;
        return f;
      };
      const double h = opt.step;
      const double fp = at(h), fm = at(-h);
      const double fwd = (fp - f0) / h, bwd = (f0 - fm) / h;
      if (std::abs(fwd - bwd) > std::max(opt.kink_floor, opt.kink_ratio * 0.5 * (std::abs(fwd) + std::abs(bwd)))) {
        report.non_comparable.push_back({p, i});
        continue;
      }
      // Fourth-order central stencil.
      const double numeric = (8.0 * (fp - fm) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
      const double err = relative_error(static_cast<double>(grads[p]->grad[i]), numeric, opt.magnitude_floor);
      ++report.compared;
      if (err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst = {p, i};
      }
    }
    ++p;
  });
  return report;
}

// Random weights at unit-ish scale so gradients are well above rounding.
inline Model<double> probe_model(std::uint64_t seed) {
  Model<double> m = Model<double>::initialized(probe_config(), seed);
  m.for_each_parameter([](const std::string& name, Tensor<double>& t) {
    if (name.find("norm") != std::string::npos) return;
    for (double& x : t.data) x *= 10.0;
  });
  return m;
}

}  // namespace e2llm::testing

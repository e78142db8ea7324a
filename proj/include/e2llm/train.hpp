#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "e2llm/augment.hpp"
#include "e2llm/autograd.hpp"
#include "e2llm/error.hpp"
#include "e2llm/model.hpp"
#include "e2llm/optim.hpp"

namespace e2llm {

enum class Phase { pretrain, extend };

inline std::string_view to_string(Phase p) { return p == Phase::pretrain ? "pretrain" : "extend"; }

inline Phase parse_phase(std::string_view s) {
  if (s == "pretrain") return Phase::pretrain;
  if (s == "extend") return Phase::extend;
  throw ConfigError("unknown phase '" + std::string(s) + "' (expected pretrain|extend)");
}

struct TrainConfig {
  Phase phase = Phase::pretrain;
  std::int64_t steps = 2000;
  std::int64_t batch_size = 8;
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.1;
  double epsilon = 1e-8;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
  std::int64_t trained_window = 128;
  AugmentPolicy policy;
  std::int64_t checkpoint_every = 0;
  std::int64_t log_every = 1;
  // Wall time makes telemetry nondeterministic; disable for reproducible logs.
  bool record_wall_time = true;

  // The policy actually sampled from: pretraining always uses standard RoPE.
  AugmentPolicy effective_policy() const {
    if (phase == Phase::pretrain) return AugmentPolicy::standard(policy.base_window, trained_window);
    AugmentPolicy p = policy;
    p.trained_window = trained_window;
    return p;
  }

  AdamWHyper optimizer() const { return {learning_rate, beta1, beta2, weight_decay, epsilon}; }
};

struct TrainRecord {
  std::int64_t step = 0;
  double loss = 0.0;
  std::int64_t g = 1;
  std::int64_t t = 0;
  std::int64_t tokens = 0;
  std::int64_t wall_ms = 0;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::int64_t last_good_step)
      : std::runtime_error(what), last_good_step_(last_good_step) {}
  std::int64_t last_good_step() const { return last_good_step_; }

 private:
  std::int64_t last_good_step_;
};

// Cuts the corpus into exact R-token windows and serves them in a
// seed-dependent order, wrapping around at the end.
class WindowBatcher {
 public:
  WindowBatcher(std::span<const std::int32_t> corpus, std::size_t window, std::uint64_t seed)
      : corpus_(corpus), window_(window) {
    if (window == 0 || corpus.size() < window) {
      throw DataError("corpus of " + std::to_string(corpus.size()) + " tokens is shorter than one window of " +
                      std::to_string(window));
    }
    order_.resize(corpus.size() / window);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    Rng rng = derived_rng(seed, 0, 0xba7c);
    std::shuffle(order_.begin(), order_.end(), rng);
  }

  std::size_t windows() const { return order_.size(); }

  // Concatenated batch for a step: batch·R tokens.
  std::vector<std::int32_t> batch(std::int64_t step, std::int64_t batch_size) const {
    std::vector<std::int32_t> out;
    out.reserve(static_cast<std::size_t>(batch_size) * window_);
    for (std::int64_t b = 0; b < batch_size; ++b) {
      const std::size_t k = static_cast<std::size_t>(step * batch_size + b) % order_.size();
      const auto first = corpus_.begin() + static_cast<std::ptrdiff_t>(order_[k] * window_);
      out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(window_));
    }
    return out;
  }

 private:
  std::span<const std::int32_t> corpus_;
  std::size_t window_;
  std::vector<std::size_t> order_;
};

// Next-token targets for concatenated segments; the last position of each
// segment has no target.
inline std::vector<std::int32_t> next_token_targets(std::span<const std::int32_t> tokens, std::size_t seg_len) {
  std::vector<std::int32_t> targets(tokens.size(), kIgnoreTarget);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if ((i + 1) % seg_len != 0) targets[i] = tokens[i + 1];
  }
  return targets;
}

// Rotation table for a batch where sequence b uses plans[b].
template <typename T>
RotaryTable<T> batch_rotary_table(std::span<const IterationPlan> plans, std::size_t seg_len,
                                  std::size_t head_dim, double base) {
  RotaryTable<T> table;
  for (const IterationPlan& plan : plans) append_rotary_rows(table, plan.rope(head_dim, base), seg_len);
  return table;
}

template <typename T>
double batch_loss(Model<T>& model, std::span<const std::int32_t> tokens, std::size_t seg_len,
                  std::span<const IterationPlan> plans) {
  const ModelConfig& cfg = model.config();
  Tape<T> tape(Recording::off);
  const auto table = batch_rotary_table<T>(plans, seg_len, cfg.head_dim, cfg.rope_base);
  const auto targets = next_token_targets(tokens, seg_len);
  return static_cast<double>(tape.value(cross_entropy(tape, model.forward(tape, tokens, seg_len, table),
                                                      std::span<const std::int32_t>(targets)))
                                 .data[0]);
}

// One forward/backward/clip/AdamW step on a batch of R-length sequences.
template <typename T>
TrainRecord train_step(Model<T>& model, std::span<const std::int32_t> tokens, std::size_t seg_len,
                       std::span<const IterationPlan> plans, AdamWState<T>& state, double clip_norm) {
  const ModelConfig& cfg = model.config();
  if (tokens.size() != plans.size() * seg_len) {
    throw DimensionError("train_step: " + std::to_string(tokens.size()) + " tokens for " +
                         std::to_string(plans.size()) + " sequences of " + std::to_string(seg_len));
  }
  model.zero_grad();
  Tape<T> tape;
  const auto table = batch_rotary_table<T>(plans, seg_len, cfg.head_dim, cfg.rope_base);
  const auto targets = next_token_targets(tokens, seg_len);
  Var loss = cross_entropy(tape, model.forward(tape, tokens, seg_len, table), std::span<const std::int32_t>(targets));
  const double value = static_cast<double>(tape.value(loss).data[0]);
  if (!std::isfinite(value)) throw NonFiniteError("non-finite training loss");
  tape.backward(loss);

  std::vector<std::span<T>> params, grads;
  model.for_each_parameter([&](const std::string&, Tensor<T>& p) {
    params.emplace_back(p.data);
    grads.emplace_back(p.grad);
  });
  clip_grad_norm<T>(grads, clip_norm);
  std::vector<std::span<const T>> cgrads(grads.begin(), grads.end());
  adamw_step<T>(params, cgrads, state);

  TrainRecord rec;
  rec.loss = value;
  rec.g = plans.front().scale;
  rec.t = plans.front().body_offset;
  rec.tokens = static_cast<std::int64_t>(tokens.size());
  return rec;
}

template <typename T>
AdamWState<T> make_optimizer(Model<T>& model, const AdamWHyper& hyper) {
  std::vector<std::size_t> lengths;
  model.for_each_parameter([&](const std::string&, Tensor<T>& p) { lengths.push_back(p.size()); });
  return AdamWState<T>(hyper, lengths);
}

struct TrainHooks {
  std::function<void(const TrainRecord&)> on_record;
  // Called every checkpoint_every steps and after the final step.
  std::function<void(std::int64_t step)> on_checkpoint;
};

// Algorithm loop: each iteration draws (g_i, t_i), rebuilds the rotary
// table, and takes one optimizer step on R-length windows.
template <typename T>
std::vector<TrainRecord> run_training(Model<T>& model, const TrainConfig& cfg,
                                      std::span<const std::int32_t> corpus, const TrainHooks& hooks = {}) {
  const ModelConfig& mcfg = model.config();
  if (cfg.steps < 1 || cfg.batch_size < 1) throw ConfigError("train.steps and train.batch_size must be >= 1");
  if (cfg.phase == Phase::pretrain && cfg.trained_window > static_cast<std::int64_t>(mcfg.base_window)) {
    throw ConfigError("pretraining window " + std::to_string(cfg.trained_window) + " exceeds model.base_window " +
                      std::to_string(mcfg.base_window));
  }
  const AugmentPolicy policy = cfg.effective_policy();
  policy.validate();
  if (policy.base_window != static_cast<std::int64_t>(mcfg.base_window)) {
    throw ConfigError("policy.base_window differs from model.base_window");
  }
  const auto seg = static_cast<std::size_t>(cfg.trained_window);
  WindowBatcher batcher(corpus, seg, cfg.seed);
  model.enable_grad();
  AdamWState<T> state = make_optimizer(model, cfg.optimizer());

  std::vector<TrainRecord> log;
  std::int64_t tokens_seen = 0;
  std::int64_t last_checkpoint = -1;
  const auto start = std::chrono::steady_clock::now();
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    Rng rng = derived_rng(cfg.seed, static_cast<std::uint64_t>(step), 1);
    const auto plans = build_batch_plans(policy, rng, static_cast<std::size_t>(cfg.batch_size));
    const auto tokens = batcher.batch(step, cfg.batch_size);
    TrainRecord rec;
    try {
      rec = train_step<T>(model, tokens, seg, plans, state, cfg.clip_norm);
    } catch (const NonFiniteError& e) {
      throw TrainingError(std::string(e.what()) + " at step " + std::to_string(step) +
                              "; last good checkpoint step " + std::to_string(last_checkpoint),
                          last_checkpoint);
    }
    tokens_seen += rec.tokens;
    rec.step = step;
    rec.tokens = tokens_seen;
    if (cfg.record_wall_time) {
      rec.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start)
                        .count();
    }
    if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) {
      log.push_back(rec);
      if (hooks.on_record) hooks.on_record(rec);
    }
    const bool last = step + 1 == cfg.steps;
    if (hooks.on_checkpoint && (last || (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0))) {
      hooks.on_checkpoint(step + 1);
      last_checkpoint = step + 1;
    }
  }
  return log;
}

}  // namespace e2llm

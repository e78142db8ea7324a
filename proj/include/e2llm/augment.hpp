#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "e2llm/error.hpp"
#include "e2llm/rope.hpp"

namespace e2llm {

enum class ScaleDistribution { uniform, fixed };
enum class OffsetDistribution { uniform, zero };
enum class Granularity { iteration, sample };

inline std::string_view to_string(ScaleDistribution d) {
  return d == ScaleDistribution::uniform ? "uniform" : "fixed";
}
inline std::string_view to_string(OffsetDistribution d) {
  return d == OffsetDistribution::uniform ? "uniform" : "zero";
}
inline std::string_view to_string(Granularity g) {
  return g == Granularity::iteration ? "iteration" : "sample";
}

inline ScaleDistribution parse_scale_distribution(std::string_view s) {
  if (s == "uniform") return ScaleDistribution::uniform;
  if (s == "fixed") return ScaleDistribution::fixed;
  throw ConfigError("unknown scale distribution '" + std::string(s) + "' (expected uniform|fixed)");
}
inline OffsetDistribution parse_offset_distribution(std::string_view s) {
  if (s == "uniform") return OffsetDistribution::uniform;
  if (s == "zero") return OffsetDistribution::zero;
  throw ConfigError("unknown offset distribution '" + std::string(s) + "' (expected uniform|zero)");
}
inline Granularity parse_granularity(std::string_view s) {
  if (s == "iteration") return Granularity::iteration;
  if (s == "sample") return Granularity::sample;
  throw ConfigError("unknown augmentation granularity '" + std::string(s) + "' (expected iteration|sample)");
}

// Training-time samplers for the interpolation scale and position offset.
//
// Scales are drawn from {g_min, ..., g_max} where g_min is the smallest
// integer scale whose interpolated window g·L still covers the trained
// window R (g_min == 1 whenever R <= L). `fixed` always yields g_max;
// `zero` disables the offset augmentation.
struct AugmentPolicy {
  std::int64_t g_max = 20;
  ScaleDistribution scale_distribution = ScaleDistribution::uniform;
  OffsetDistribution offset_distribution = OffsetDistribution::uniform;
  std::int64_t sink_count = 4;
  std::int64_t base_window = 128;
  std::int64_t trained_window = 128;
  Granularity granularity = Granularity::iteration;

  std::int64_t g_min() const { return (trained_window + base_window - 1) / base_window; }

  void validate() const {
    if (g_max < 1) throw ConfigError("policy.g_max must be >= 1");
    if (sink_count < 0) throw ConfigError("policy.sink_count must be >= 0");
    if (base_window < 1) throw ConfigError("policy.base_window must be >= 1");
    if (trained_window < 1) throw ConfigError("policy.trained_window must be >= 1");
    if (trained_window > g_max * base_window) {
      throw ConfigError("train.trained_window (" + std::to_string(trained_window) +
                        ") exceeds policy.g_max * model.base_window (" +
                        std::to_string(g_max * base_window) + ")");
    }
  }

  // Standard RoPE: every plan is (g=1, t=0).
  static AugmentPolicy standard(std::int64_t base_window, std::int64_t trained_window) {
    AugmentPolicy p;
    p.g_max = 1;
    p.base_window = base_window;
    p.trained_window = trained_window;
    return p;
  }
};

struct IterationPlan {
  std::int64_t scale = 1;
  std::int64_t body_offset = 0;
  std::vector<std::int64_t> offsets;

  RopeParams rope(std::size_t head_dim, double base) const {
    RopeParams p = RopeParams::standard(head_dim, base);
    p.scale = static_cast<double>(scale);
    p.offsets = offsets;
    p.tail_offset = body_offset;
    return p;
  }
};

using Rng = std::mt19937_64;

// Independent stream for one (seed, iteration) pair.
inline Rng derived_rng(std::uint64_t seed, std::uint64_t index, std::uint64_t salt = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                    static_cast<std::uint32_t>(salt)};
  return Rng(seq);
}

inline std::int64_t sample_scale(const AugmentPolicy& policy, Rng& rng) {
  const std::int64_t lo = std::min(policy.g_min(), policy.g_max);
  switch (policy.scale_distribution) {
    case ScaleDistribution::uniform:
      return std::uniform_int_distribution<std::int64_t>(lo, policy.g_max)(rng);
    case ScaleDistribution::fixed:
      return policy.g_max;
  }
  throw ConfigError("unknown scale distribution");
}

// Interpolated window g·L minus the trained window R, floored at 0.
inline std::int64_t max_offset(std::int64_t scale, const AugmentPolicy& policy) {
  return std::max<std::int64_t>(0, scale * policy.base_window - policy.trained_window);
}

inline std::int64_t sample_offset(const AugmentPolicy& policy, std::int64_t t_max, Rng& rng) {
  if (t_max < 0) throw ConfigError("sample_offset: t_max must be >= 0");
  switch (policy.offset_distribution) {
    case OffsetDistribution::uniform:
      return std::uniform_int_distribution<std::int64_t>(0, t_max)(rng);
    case OffsetDistribution::zero:
      return 0;
  }
  throw ConfigError("unknown offset distribution");
}

inline IterationPlan build_iteration_plan(const AugmentPolicy& policy, Rng& rng) {
  IterationPlan plan;
  plan.scale = sample_scale(policy, rng);
  plan.body_offset = sample_offset(policy, max_offset(plan.scale, policy), rng);
  plan.offsets.assign(static_cast<std::size_t>(policy.trained_window), plan.body_offset);
  const auto sinks = std::min<std::int64_t>(policy.sink_count, policy.trained_window);
  std::fill_n(plan.offsets.begin(), sinks, 0);
  return plan;
}

// One plan per sequence of the batch; identical plans unless the policy
// asks for per-sample draws.
inline std::vector<IterationPlan> build_batch_plans(const AugmentPolicy& policy, Rng& rng,
                                                    std::size_t batch) {
  std::vector<IterationPlan> plans;
  plans.push_back(build_iteration_plan(policy, rng));
  for (std::size_t b = 1; b < batch; ++b) {
    plans.push_back(policy.granularity == Granularity::sample ? build_iteration_plan(policy, rng)
                                                              : plans.front());
  }
  return plans;
}

}  // namespace e2llm

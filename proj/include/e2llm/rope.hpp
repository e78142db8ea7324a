#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "e2llm/autograd.hpp"
#include "e2llm/error.hpp"

namespace e2llm {

// Rotary embedding with interpolation scale and per-position offsets.
// Position m is rotated as if it sat at (m + offset(m)) / scale.
// Positions beyond `offsets` use `tail_offset`.
struct RopeParams {
  std::size_t head_dim = 32;
  double base = 10000.0;
  double scale = 1.0;
  std::vector<std::int64_t> offsets;
  std::int64_t tail_offset = 0;

  std::int64_t offset(std::size_t m) const {
    return m < offsets.size() ? offsets[m] : tail_offset;
  }

  void validate() const {
    if (head_dim == 0 || head_dim % 2 != 0) {
      throw ConfigError("rope head_dim must be even and positive, got " + std::to_string(head_dim));
    }
    if (!(base > 0.0)) throw ConfigError("rope base must be positive");
    if (!(scale >= 1.0) || !std::isfinite(scale)) {
      throw ConfigError("rope scale must be >= 1, got " + std::to_string(scale));
    }
    if (tail_offset < 0) throw ConfigError("rope offsets must be non-negative");
    for (std::int64_t t : offsets) {
      if (t < 0) throw ConfigError("rope offsets must be non-negative");
    }
  }

  static RopeParams standard(std::size_t head_dim, double base = 10000.0) {
    RopeParams p;
    p.head_dim = head_dim;
    p.base = base;
    return p;
  }

  static RopeParams interpolated(std::size_t head_dim, double scale, double base = 10000.0) {
    RopeParams p = standard(head_dim, base);
    p.scale = scale;
    return p;
  }
};

inline double effective_position(std::int64_t m, double scale, std::int64_t offset) {
  return static_cast<double>(m + offset) / scale;
}

// θ_j = base^(−2j/d)
inline double rope_frequency(const RopeParams& params, std::size_t j) {
  return std::pow(params.base, -2.0 * static_cast<double>(j) / static_cast<double>(params.head_dim));
}

struct RopeAngles {
  std::vector<double> cos;
  std::vector<double> sin;
};

inline RopeAngles rope_angles(const RopeParams& params, double position) {
  const std::size_t half = params.head_dim / 2;
  RopeAngles out{std::vector<double>(half), std::vector<double>(half)};
  for (std::size_t j = 0; j < half; ++j) {
    const double angle = position * rope_frequency(params, j);
    out.cos[j] = std::cos(angle);
    out.sin[j] = std::sin(angle);
  }
  return out;
}

template <typename T>
std::vector<T> apply_rope(std::span<const T> x, std::int64_t m, const RopeParams& params) {
  if (x.size() != params.head_dim) {
    throw DimensionError("apply_rope: vector of length " + std::to_string(x.size()) +
                         " for head_dim " + std::to_string(params.head_dim));
  }
  const double p = effective_position(m, params.scale, params.offset(static_cast<std::size_t>(m)));
  const RopeAngles a = rope_angles(params, p);
  std::vector<T> y(x.size());
  for (std::size_t j = 0; j < a.cos.size(); ++j) {
    const double x0 = static_cast<double>(x[2 * j]);
    const double x1 = static_cast<double>(x[2 * j + 1]);
    y[2 * j] = static_cast<T>(x0 * a.cos[j] - x1 * a.sin[j]);
    y[2 * j + 1] = static_cast<T>(x0 * a.sin[j] + x1 * a.cos[j]);
  }
  return y;
}

// Real inner product of the rotated query at m and rotated key at n.
template <typename T>
double attention_score_probe(std::span<const T> q, std::span<const T> k, std::int64_t m, std::int64_t n,
                             const RopeParams& params) {
  if (q.size() != k.size()) {
    throw DimensionError("attention_score_probe: q has " + std::to_string(q.size()) + " entries, k has " +
                         std::to_string(k.size()));
  }
  const std::vector<T> rq = apply_rope(q, m, params);
  const std::vector<T> rk = apply_rope(k, n, params);
  return detail::dot(rq.data(), rk.data(), rq.size());
}

template <typename T>
std::vector<T> apply_rope(const std::vector<T>& x, std::int64_t m, const RopeParams& params) {
  return apply_rope(std::span<const T>(x), m, params);
}

template <typename T>
double attention_score_probe(const std::vector<T>& q, const std::vector<T>& k, std::int64_t m,
                             std::int64_t n, const RopeParams& params) {
  return attention_score_probe(std::span<const T>(q), std::span<const T>(k), m, n, params);
}

// Rotation table for positions first..first+count-1 under `params`.
template <typename T>
void append_rotary_rows(RotaryTable<T>& table, const RopeParams& params, std::size_t count,
                        std::size_t first = 0) {
  const std::size_t half = params.head_dim / 2;
  if (table.rows == 0) table.half = half;
  if (table.half != half) throw DimensionError("rotary table head_dim changed between segments");
  std::vector<double> freq(half);
  for (std::size_t j = 0; j < half; ++j) freq[j] = rope_frequency(params, j);
  for (std::size_t m = first; m < first + count; ++m) {
    const double p = effective_position(static_cast<std::int64_t>(m), params.scale, params.offset(m));
    for (std::size_t j = 0; j < half; ++j) {
      const double angle = p * freq[j];
      table.cos.push_back(static_cast<T>(std::cos(angle)));
      table.sin.push_back(static_cast<T>(std::sin(angle)));
    }
  }
  table.rows += count;
}

template <typename T>
RotaryTable<T> rotary_table(const RopeParams& params, std::size_t count) {
  RotaryTable<T> table;
  append_rotary_rows(table, params, count);
  return table;
}

}  // namespace e2llm

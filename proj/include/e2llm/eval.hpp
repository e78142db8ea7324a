#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "e2llm/augment.hpp"
#include "e2llm/error.hpp"
#include "e2llm/model.hpp"
#include "e2llm/rope.hpp"
#include "e2llm/text.hpp"

namespace e2llm {

struct EvalReport {
  std::int64_t context_window = 0;
  double scale = 1.0;
  std::int64_t stride = 0;
  std::int64_t token_count = 0;
  double mean_nll = 0.0;
  double perplexity = 0.0;
};

// Interpolation scale that maps a target window onto the base window.
inline double scale_for_window(std::int64_t target, std::int64_t base) {
  if (base < 1) throw ConfigError("base window must be >= 1");
  if (target < base) {
    throw ConfigError("target window " + std::to_string(target) + " is smaller than the base window " +
                      std::to_string(base) + "; downscaling is unsupported");
  }
  return static_cast<double>(target) / static_cast<double>(base);
}

// Negative log-likelihood of `target` under the logits row, in double.
template <typename T>
double token_nll(std::span<const T> row, std::int32_t target) {
  const T mx = *std::max_element(row.begin(), row.end());
  double z = 0.0;
  for (T x : row) z += std::exp(static_cast<double>(x - mx));
  return std::log(z) - static_cast<double>(row[static_cast<std::size_t>(target)] - mx);
}

// Slides a W-token window by S. Each window scores only its final S tokens
// (its first token cannot be scored, so a window scores min(S, W-1)).
// Trailing tokens that do not fill a whole window are not evaluated.
template <typename T>
EvalReport sliding_window_perplexity(Model<T>& model, std::span<const std::int32_t> tokens, std::size_t window,
                                     std::size_t stride, const RopeParams& rope) {
  if (window < 2) throw ConfigError("evaluation window must be >= 2");
  if (stride == 0 || stride > window) {
    throw ConfigError("stride " + std::to_string(stride) + " must be in [1, window=" + std::to_string(window) + "]");
  }
  if (tokens.size() < window) {
    throw DataError("perplexity at window " + std::to_string(window) + " needs at least " +
                    std::to_string(window) + " tokens, got " + std::to_string(tokens.size()));
  }
  const std::size_t scored = std::min(stride, window - 1);
  const std::size_t vocab = model.config().vocab_size;
  double total = 0.0;
  std::int64_t count = 0;
  for (std::size_t start = 0; start + window <= tokens.size(); start += stride) {
    const auto win = tokens.subspan(start, window);
    const Tensor<T> logits = model.logits(win, rope, scored + 1);
    for (std::size_t r = 0; r < scored; ++r) {
      const std::int32_t target = win[window - scored + r];
      total += token_nll(std::span<const T>(logits.data.data() + r * vocab, vocab), target);
      ++count;
    }
  }
  EvalReport rep;
  rep.context_window = static_cast<std::int64_t>(window);
  rep.scale = rope.scale;
  rep.stride = static_cast<std::int64_t>(stride);
  rep.token_count = count;
  rep.mean_nll = total / static_cast<double>(count);
  rep.perplexity = std::exp(rep.mean_nll);
  return rep;
}

// Interpolated evaluation at window W with g = W / L and no offsets.
template <typename T>
EvalReport interpolated_perplexity(Model<T>& model, std::span<const std::int32_t> tokens, std::size_t window,
                                   std::size_t stride) {
  const ModelConfig& cfg = model.config();
  const double g = scale_for_window(static_cast<std::int64_t>(window), static_cast<std::int64_t>(cfg.base_window));
  return sliding_window_perplexity(model, tokens, window, stride,
                                   RopeParams::interpolated(cfg.head_dim, g, cfg.rope_base));
}

// Unmodified positions (g = 1) at a window that may exceed the base window.
template <typename T>
EvalReport direct_extrapolation_probe(Model<T>& model, std::span<const std::int32_t> tokens, std::size_t window,
                                      std::size_t stride) {
  const ModelConfig& cfg = model.config();
  return sliding_window_perplexity(model, tokens, window, stride, RopeParams::standard(cfg.head_dim, cfg.rope_base));
}

// One report per scale at window min(|tokens|, round(scale·L)).
template <typename T>
std::vector<EvalReport> unseen_scale_sweep(Model<T>& model, std::span<const std::int32_t> tokens,
                                           std::span<const double> scales, std::size_t stride) {
  const ModelConfig& cfg = model.config();
  std::vector<EvalReport> out;
  for (double g : scales) {
    const auto w = static_cast<std::size_t>(std::llround(g * static_cast<double>(cfg.base_window)));
    const std::size_t window = std::min(tokens.size(), w);
    out.push_back(sliding_window_perplexity(model, tokens, window, std::min(stride, window),
                                            RopeParams::interpolated(cfg.head_dim, g, cfg.rope_base)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Key/value retrieval

inline constexpr std::string_view kKvInstruction =
    "Extract the value corresponding to the specified key in the JSON object below.\n";

struct KvCase {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::string question_key;
  std::string answer;
  std::string prompt;
  // Half-open byte (= token) interval of the answer value inside `prompt`.
  std::size_t value_begin = 0;
  std::size_t value_end = 0;

  std::vector<std::int32_t> tokens() const {
    return std::vector<std::int32_t>(prompt.begin(), prompt.end());
  }
};

inline std::size_t count_occurrences(std::string_view hay, std::string_view needle) {
  std::size_t n = 0;
  for (std::size_t pos = hay.find(needle); pos != std::string_view::npos; pos = hay.find(needle, pos + 1)) ++n;
  return n;
}

// Instruction, filler prose with `n_pairs` "key": "value" lines inserted at
// random depths, and a closing question about one key. The prompt is exactly
// `target_len` bytes.
inline KvCase kv_generate(std::size_t n_pairs, std::size_t target_len, Rng& rng) {
  if (n_pairs == 0) throw DataError("kv_generate needs at least one pair");
  for (int attempt = 0; attempt < 64; ++attempt) {
    KvCase c;
    std::set<std::string> seen;
    while (c.pairs.size() < n_pairs) {
      std::string k = text::uuid(rng);
      std::string v = text::uuid(rng);
      if (k == v || seen.count(k) || seen.count(v)) continue;
      seen.insert(k);
      seen.insert(v);
      c.pairs.emplace_back(std::move(k), std::move(v));
    }
    const auto pick = std::uniform_int_distribution<std::size_t>(0, n_pairs - 1)(rng);
    c.question_key = c.pairs[pick].first;
    c.answer = c.pairs[pick].second;
    const std::string question = text::kv_question(c.question_key);

    std::vector<std::string> pieces;
    std::size_t fixed = kKvInstruction.size() + question.size();
    for (const auto& [k, v] : c.pairs) {
      pieces.push_back(text::kv_pair(k, v) + "\n");
      fixed += pieces.back().size();
    }
    if (fixed > target_len) {
      throw DataError("kv_generate: target length " + std::to_string(target_len) + " cannot hold " +
                      std::to_string(n_pairs) + " pairs and the question (" + std::to_string(fixed) + " bytes)");
    }
    const std::size_t filler_len = target_len - fixed;
    std::string filler = text::prose(rng, filler_len);
    std::vector<std::size_t> depths;
    for (std::size_t i = 0; i < n_pairs; ++i) {
      depths.push_back(std::uniform_int_distribution<std::size_t>(0, filler_len)(rng));
    }
    std::sort(depths.begin(), depths.end());

    std::string body;
    std::size_t prev = 0;
    for (std::size_t i = 0; i < n_pairs; ++i) {
      body += filler.substr(prev, depths[i] - prev);
      if (!body.empty() && body.back() != '\n') body += '\n';
      body += pieces[i];
      prev = depths[i];
    }
    body += filler.substr(prev);
    // Newlines added around pairs may overshoot; trim filler from the tail.
    const std::size_t budget = target_len - kKvInstruction.size() - question.size();
    if (body.size() > budget) body.resize(budget);
    if (!body.empty() && body.back() != '\n') body.back() = '\n';

    c.prompt = std::string(kKvInstruction) + body + question;
    const std::size_t at = c.prompt.find(c.answer);
    if (c.prompt.size() != target_len || at == std::string::npos || count_occurrences(c.prompt, c.answer) != 1 ||
        count_occurrences(c.prompt, "\"" + c.question_key + "\": ") != 1) {
      continue;
    }
    c.value_begin = at;
    c.value_end = at + c.answer.size();
    return c;
  }
  throw DataError("kv_generate: could not place pairs without collisions");
}

// Greedy continuation of `prompt`, stopping early once `stop` appears.
template <typename T>
std::string greedy_generate(const Model<T>& model, std::span<const std::int32_t> prompt, const RopeParams& rope,
                            std::size_t max_new, std::string_view stop = {}) {
  Decoder<T> dec(model, rope);
  std::vector<T> logits;
  for (std::int32_t tok : prompt) logits = dec.step(tok);
  std::string out;
  for (std::size_t i = 0; i < max_new; ++i) {
    const auto next = static_cast<std::int32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    out.push_back(static_cast<char>(static_cast<unsigned char>(next)));
    if (!stop.empty() && out.find(stop) != std::string::npos) break;
    if (i + 1 < max_new) logits = dec.step(next);
  }
  return out;
}

struct KvOutcome {
  std::size_t case_id = 0;
  bool correct = false;
  // Offset of the answer inside the continuation, or -1.
  std::int64_t answer_found_at = -1;
  std::string continuation;
  std::string error;
};

struct KvResult {
  double accuracy = 0.0;
  std::vector<KvOutcome> outcomes;
};

using Generator = std::function<std::string(const KvCase&, std::size_t max_new)>;

inline KvResult kv_score(std::span<const KvCase> cases, std::size_t window, std::size_t max_new,
                         const Generator& generate) {
  KvResult res;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    KvOutcome o;
    o.case_id = i;
    if (cases[i].prompt.size() > window) {
      o.error = "prompt of " + std::to_string(cases[i].prompt.size()) + " tokens exceeds window " +
                std::to_string(window);
    } else {
      o.continuation = generate(cases[i], max_new);
      const std::size_t at = o.continuation.find(cases[i].answer);
      o.correct = at != std::string::npos;
      o.answer_found_at = o.correct ? static_cast<std::int64_t>(at) : -1;
    }
    hits += o.correct ? 1 : 0;
    res.outcomes.push_back(std::move(o));
  }
  res.accuracy = cases.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(cases.size());
  return res;
}

template <typename T>
KvResult kv_eval(const Model<T>& model, std::span<const KvCase> cases, const RopeParams& rope, std::size_t window,
                 std::size_t max_new) {
  return kv_score(cases, window, max_new, [&](const KvCase& c, std::size_t n) {
    const auto toks = c.tokens();
    return greedy_generate(model, toks, rope, n, c.answer);
  });
}

// ---------------------------------------------------------------------------
// Attention dumps

struct AttentionDump {
  std::size_t layer = 0;
  std::size_t rows = 0;  // generated tokens
  std::size_t cols = 0;  // prompt tokens
  std::vector<double> weights;
  std::vector<std::size_t> argmax;  // per row
  std::size_t value_begin = 0;
  std::size_t value_end = 0;

  double at(std::size_t r, std::size_t c) const { return weights[r * cols + c]; }

  // Mean over rows of the mass inside [value_begin, value_end).
  double span_mass() const {
    double m = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = value_begin; c < value_end; ++c) m += at(r, c);
    }
    return rows ? m / static_cast<double>(rows) : 0.0;
  }

  // Mass a span of the same length would hold if each row spread its
  // prompt mass uniformly.
  double mean_span_mass() const {
    double total = 0.0;
    for (double w : weights) total += w;
    if (rows == 0 || cols == 0) return 0.0;
    return total / static_cast<double>(rows) * static_cast<double>(value_end - value_begin) /
           static_cast<double>(cols);
  }
};

// Generates greedily, then re-runs the full sequence to read the attention
// of every generating position over the prompt, averaged over heads.
template <typename T>
std::vector<AttentionDump> dump_attention(Model<T>& model, const KvCase& c, const RopeParams& rope,
                                          std::span<const std::size_t> layers, std::size_t max_new,
                                          std::string* continuation = nullptr) {
  const ModelConfig& cfg = model.config();
  for (std::size_t l : layers) {
    if (l >= cfg.n_layers) throw IndexError("layer " + std::to_string(l) + " outside model");
  }
  const auto prompt = c.tokens();
  const std::string gen = greedy_generate(model, prompt, rope, max_new, c.answer);
  if (continuation) *continuation = gen;
  std::vector<std::int32_t> seq = prompt;
  for (std::size_t i = 0; i + 1 < gen.size(); ++i) seq.push_back(static_cast<std::uint8_t>(gen[i]));
  const auto maps = model.attention_maps(seq, rope);

  const std::size_t P = prompt.size();
  const std::size_t rows = gen.size();
  std::vector<AttentionDump> out;
  for (std::size_t l : layers) {
    AttentionDump d;
    d.layer = l;
    d.rows = rows;
    d.cols = P;
    d.weights.assign(rows * P, 0.0);
    d.value_begin = c.value_begin;
    d.value_end = c.value_end;
    for (const auto& m : maps) {
      if (m.layer != l) continue;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t col = 0; col < P; ++col) {
          d.weights[r * P + col] += static_cast<double>(m.at(P - 1 + r, col)) / static_cast<double>(cfg.n_heads);
        }
      }
    }
    for (std::size_t r = 0; r < rows; ++r) {
      const auto first = d.weights.begin() + static_cast<std::ptrdiff_t>(r * P);
      d.argmax.push_back(static_cast<std::size_t>(std::max_element(first, first + static_cast<std::ptrdiff_t>(P)) - first));
    }
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace e2llm

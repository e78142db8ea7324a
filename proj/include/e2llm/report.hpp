#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>

#include "e2llm/eval.hpp"
#include "e2llm/io.hpp"
#include "e2llm/train.hpp"

namespace e2llm {

inline std::string ppl_csv(std::span<const EvalReport> reports) {
  std::string out = "window,scale,stride,tokens,mean_nll,perplexity\n";
  for (const EvalReport& r : reports) {
    out += std::to_string(r.context_window) + "," + csv_number(r.scale) + "," + std::to_string(r.stride) + "," +
           std::to_string(r.token_count) + "," + csv_number(r.mean_nll) + "," + csv_number(r.perplexity) + "\n";
  }
  return out;
}

inline std::string telemetry_csv(std::span<const TrainRecord> records) {
  std::string out = "step,loss,g,t,tokens,wall_ms\n";
  for (const TrainRecord& r : records) {
    out += std::to_string(r.step) + "," + csv_number(r.loss) + "," + std::to_string(r.g) + "," +
           std::to_string(r.t) + "," + std::to_string(r.tokens) + "," + std::to_string(r.wall_ms) + "\n";
  }
  return out;
}

inline std::string kv_csv(std::span<const KvOutcome> outcomes, std::int64_t window, double scale) {
  std::string out = "case_id,window,scale,correct,answer_found_at\n";
  for (const KvOutcome& o : outcomes) {
    out += std::to_string(o.case_id) + "," + std::to_string(window) + "," + csv_number(scale) + "," +
           (o.correct ? "1" : "0") + "," + std::to_string(o.answer_found_at) + "\n";
  }
  return out;
}

// ASCII graymap, each row scaled to 0..255 by its own maximum.
inline std::string heatmap_pgm(const AttentionDump& d) {
  std::string out = "P2\n# layer " + std::to_string(d.layer) + " value_span " + std::to_string(d.value_begin) +
                    " " + std::to_string(d.value_end) + "\n" + std::to_string(d.cols) + " " +
                    std::to_string(d.rows) + "\n255\n";
  for (std::size_t r = 0; r < d.rows; ++r) {
    const auto first = d.weights.begin() + static_cast<std::ptrdiff_t>(r * d.cols);
    const double mx = d.cols ? *std::max_element(first, first + static_cast<std::ptrdiff_t>(d.cols)) : 0.0;
    for (std::size_t c = 0; c < d.cols; ++c) {
      const int level = mx > 0.0 ? static_cast<int>(std::lround(255.0 * d.at(r, c) / mx)) : 0;
      out += (c ? " " : "") + std::to_string(level);
    }
    out += "\n";
  }
  return out;
}

inline std::string heatmap_csv(const AttentionDump& d) {
  std::string out;
  for (std::size_t r = 0; r < d.rows; ++r) {
    for (std::size_t c = 0; c < d.cols; ++c) out += (c ? "," : "") + csv_number(d.at(r, c));
    out += "\n";
  }
  return out;
}

// Per generated row: argmax column, whether it falls in the value span,
// and the row's mass inside the span.
inline std::string heatmap_summary_csv(const AttentionDump& d) {
  std::string out = "row,argmax,in_value_span,span_mass,value_begin,value_end\n";
  for (std::size_t r = 0; r < d.rows; ++r) {
    double mass = 0.0;
    for (std::size_t c = d.value_begin; c < d.value_end && c < d.cols; ++c) mass += d.at(r, c);
    const bool inside = d.argmax[r] >= d.value_begin && d.argmax[r] < d.value_end;
    out += std::to_string(r) + "," + std::to_string(d.argmax[r]) + "," + (inside ? "1" : "0") + "," +
           csv_number(mass) + "," + std::to_string(d.value_begin) + "," + std::to_string(d.value_end) + "\n";
  }
  return out;
}

}  // namespace e2llm

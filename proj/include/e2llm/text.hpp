#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace e2llm {

// Deterministic synthetic byte text: prose built from a small word list
// interleaved with short retrieval drills (key/value lookups and repeated
// identifiers) that reward attending back within the window.
namespace text {

inline constexpr std::array<std::string_view, 96> kWords = {
    "the",    "of",     "and",    "a",      "to",     "in",     "is",     "was",    "that",   "for",
    "it",     "with",   "as",     "on",     "be",     "at",     "by",     "this",   "had",    "not",
    "are",    "but",    "from",   "or",     "have",   "an",     "they",   "which",  "one",    "you",
    "were",   "all",    "we",     "her",    "she",    "there",  "would",  "their",  "will",   "when",
    "who",    "him",    "been",   "has",    "more",   "if",     "no",     "out",    "so",     "said",
    "what",   "up",     "its",    "about",  "into",   "than",   "them",   "can",    "only",   "other",
    "river",  "stone",  "window", "market", "signal", "letter", "garden", "engine", "winter", "harbor",
    "silver", "mirror", "forest", "bridge", "candle", "ledger", "orchard", "valley", "thunder", "compass",
    "lantern", "meadow", "quarry", "saddle", "timber", "voyage", "whistle", "anchor", "beacon", "copper",
    "drift",  "ember",  "falcon", "glacier", "hollow", "island"};

template <typename Rng>
std::size_t zipf_index(Rng& rng, std::size_t n) {
  // Inverse-square-root weighting approximated by squaring a uniform draw.
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double r = u(rng);
  return static_cast<std::size_t>(r * r * static_cast<double>(n)) % n;
}

template <typename Rng>
std::string hex(Rng& rng, std::size_t n) {
  static constexpr char digits[] = "0123456789abcdef";
  std::uniform_int_distribution<int> d(0, 15);
  std::string s(n, '0');
  for (char& c : s) c = digits[d(rng)];
  return s;
}

// 8-4-4-4-12 lowercase hex identifier.
template <typename Rng>
std::string uuid(Rng& rng) {
  return hex(rng, 8) + "-" + hex(rng, 4) + "-" + hex(rng, 4) + "-" + hex(rng, 4) + "-" + hex(rng, 12);
}

template <typename Rng>
std::string sentence(Rng& rng) {
  std::uniform_int_distribution<int> len(4, 12);
  const int n = len(rng);
  std::string s;
  for (int i = 0; i < n; ++i) {
    std::string w(kWords[zipf_index(rng, kWords.size())]);
    if (i == 0) w[0] = static_cast<char>(w[0] - 'a' + 'A');
    if (i) s += ' ';
    s += w;
  }
  s += (std::uniform_int_distribution<int>(0, 5)(rng) == 0) ? "? " : ". ";
  return s;
}

template <typename Rng>
std::string paragraph(Rng& rng) {
  std::uniform_int_distribution<int> count(2, 6);
  std::string p;
  for (int i = count(rng); i > 0; --i) p += sentence(rng);
  p.back() = '\n';
  return p;
}

inline std::string kv_pair(std::string_view key, std::string_view value) {
  return "\"" + std::string(key) + "\": \"" + std::string(value) + "\"";
}

inline std::string kv_question(std::string_view key) {
  return "What is the value of key \"" + std::string(key) + "\"?\n";
}

// Short lookup drill that fits a 128-byte window.
template <typename Rng>
std::string lookup_drill(Rng& rng) {
  std::uniform_int_distribution<int> pairs(1, 2);
  const int n = pairs(rng);
  std::vector<std::string> keys, values;
  for (int i = 0; i < n; ++i) {
    keys.push_back(hex(rng, 6));
    values.push_back(hex(rng, 6));
  }
  std::string s = "{";
  for (int i = 0; i < n; ++i) {
    if (i) s += ", ";
    s += kv_pair(keys[static_cast<std::size_t>(i)], values[static_cast<std::size_t>(i)]);
  }
  s += "}\n";
  const auto pick = static_cast<std::size_t>(std::uniform_int_distribution<int>(0, n - 1)(rng));
  s += kv_question(keys[pick]);
  s += kv_pair(keys[pick], values[pick]) + "\n";
  return s;
}

// An identifier repeated after a short gap.
template <typename Rng>
std::string copy_drill(Rng& rng) {
  const std::string id = uuid(rng);
  std::string s = "id " + id + " ";
  std::uniform_int_distribution<int> gap(0, 2);
  for (int i = gap(rng); i > 0; --i) s += std::string(kWords[zipf_index(rng, 60)]) + " ";
  s += "ok " + id + "\n";
  return s;
}

template <typename Rng>
std::string prose(Rng& rng, std::size_t bytes) {
  std::string out;
  while (out.size() < bytes) out += paragraph(rng);
  out.resize(bytes);
  return out;
}

// `drill_fraction` of documents are drills, the rest prose paragraphs.
template <typename Rng>
std::string corpus(Rng& rng, std::size_t bytes, double drill_fraction = 0.3) {
  std::string out;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  while (out.size() < bytes) {
    const double r = u(rng);
    if (r < drill_fraction * 0.5) {
      out += lookup_drill(rng);
    } else if (r < drill_fraction) {
      out += copy_drill(rng);
    } else {
      out += paragraph(rng);
    }
  }
  out.resize(bytes);
  return out;
}

}  // namespace text

}  // namespace e2llm

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "e2llm/error.hpp"

namespace e2llm {

// Writes to a sibling temporary file and renames it over `path`, so
// readers never observe a partial file.
inline void write_file_atomic(const std::string& path, std::string_view content) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::runtime_error("short write to '" + tmp.string() + "'");
  }
  fs::rename(tmp, target);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// Byte-level tokens: each byte is its own id in [0, 255].
inline std::vector<std::int32_t> tokenize(std::string_view bytes) {
  std::vector<std::int32_t> out(bytes.size());
  std::transform(bytes.begin(), bytes.end(), out.begin(),
                 [](char c) { return static_cast<std::int32_t>(static_cast<unsigned char>(c)); });
  return out;
}

inline std::string detokenize(std::span<const std::int32_t> tokens) {
  std::string out(tokens.size(), '\0');
  std::transform(tokens.begin(), tokens.end(), out.begin(),
                 [](std::int32_t t) { return static_cast<char>(static_cast<unsigned char>(t)); });
  return out;
}

inline std::vector<std::int32_t> ingest_corpus(const std::string& path) {
  const std::string bytes = read_file(path);
  if (bytes.empty()) throw DataError("corpus '" + path + "' is empty");
  return tokenize(bytes);
}

// Six significant digits, C locale.
inline std::string csv_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace e2llm

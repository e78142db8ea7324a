#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "e2llm/augment.hpp"
#include "e2llm/io.hpp"
#include "e2llm/model.hpp"
#include "e2llm/train.hpp"

namespace e2llm {

inline constexpr std::array<char, 8> kCheckpointMagic = {'E', '2', 'L', 'L', 'M', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { io, magic, checksum, version, shape };

  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct Checkpoint {
  ModelConfig model_config;
  Phase phase = Phase::pretrain;
  std::uint64_t step = 0;
  // Policy the weights were trained with; g_max tells inference which scales
  // were seen.
  AugmentPolicy policy;
  Model<float> model;
};

// FNV-1a, 64-bit.
inline std::uint64_t checksum64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

namespace detail {

class ByteWriter {
 public:
  template <typename U>
  void put(U v) {
    static_assert(std::is_integral_v<U> || std::is_floating_point_v<U>);
    if constexpr (std::is_floating_point_v<U>) {
      using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>;
      put(std::bit_cast<Bits>(v));
    } else {
      auto u = static_cast<std::make_unsigned_t<U>>(v);
      for (std::size_t i = 0; i < sizeof(U); ++i) {
        bytes_.push_back(static_cast<std::uint8_t>(u & 0xffu));
        u = static_cast<decltype(u)>(u >> 8);
      }
    }
  }
  void put_bytes(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename U>
  U get() {
    if constexpr (std::is_floating_point_v<U>) {
      using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>;
      return std::bit_cast<U>(get<Bits>());
    } else {
      need(sizeof(U));
      std::make_unsigned_t<U> u = 0;
      for (std::size_t i = 0; i < sizeof(U); ++i) {
        u = static_cast<decltype(u)>(u | (static_cast<decltype(u)>(bytes_[pos_ + i]) << (8 * i)));
      }
      pos_ += sizeof(U);
      return static_cast<U>(u);
    }
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw CheckpointError(CheckpointError::Kind::shape, "checkpoint record truncated");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  detail::ByteWriter w;
  w.put_bytes(std::string_view(kCheckpointMagic.data(), kCheckpointMagic.size()));
  w.put<std::uint32_t>(kCheckpointVersion);

  const ModelConfig& m = ckpt.model_config;
  for (std::size_t v : {m.vocab_size, m.d_model, m.n_layers, m.n_heads, m.head_dim, m.ffn_mult, m.base_window,
                        m.max_sequence}) {
    w.put<std::uint64_t>(v);
  }
  w.put<double>(m.rope_base);

  w.put<std::uint8_t>(static_cast<std::uint8_t>(ckpt.phase));
  w.put<std::uint64_t>(ckpt.step);

  const AugmentPolicy& p = ckpt.policy;
  w.put<std::int64_t>(p.g_max);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(p.scale_distribution));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(p.offset_distribution));
  w.put<std::int64_t>(p.sink_count);
  w.put<std::int64_t>(p.base_window);
  w.put<std::int64_t>(p.trained_window);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(p.granularity));

  std::uint32_t count = 0;
  ckpt.model.for_each_parameter([&count](const std::string&, const Tensor<float>&) { ++count; });
  w.put<std::uint32_t>(count);
  ckpt.model.for_each_parameter([&w](const std::string& name, const Tensor<float>& t) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.put_bytes(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) w.put<std::uint64_t>(d);
    for (float x : t.data) w.put<float>(x);
  });
  const std::uint64_t sum = checksum64(w.bytes());
  w.put<std::uint64_t>(sum);
  return std::move(w.bytes());
}

// Validates magic, checksum, version and every parameter shape before
// returning a model.
inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  using Kind = CheckpointError::Kind;
  if (bytes.size() < kCheckpointMagic.size() ||
      std::memcmp(bytes.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0) {
    throw CheckpointError(Kind::magic, "not a checkpoint: missing E2LLMCKP magic");
  }
  if (bytes.size() < kCheckpointMagic.size() + 4 + 8) {
    throw CheckpointError(Kind::checksum, "checkpoint checksum mismatch: file truncated");
  }
  const auto body = bytes.first(bytes.size() - 8);
  detail::ByteReader tail(bytes.last(8));
  if (tail.get<std::uint64_t>() != checksum64(body)) {
    throw CheckpointError(Kind::checksum, "checkpoint checksum mismatch: file truncated or corrupted");
  }

  detail::ByteReader r(body.subspan(kCheckpointMagic.size()));
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::version, "unsupported checkpoint format version " + std::to_string(version) +
                                             " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ckpt;
  ModelConfig& m = ckpt.model_config;
  for (std::size_t* v : {&m.vocab_size, &m.d_model, &m.n_layers, &m.n_heads, &m.head_dim, &m.ffn_mult,
                         &m.base_window, &m.max_sequence}) {
    *v = static_cast<std::size_t>(r.get<std::uint64_t>());
  }
  m.rope_base = r.get<double>();
  try {
    m.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(Kind::shape, std::string("checkpoint model config invalid: ") + e.what());
  }
  const auto phase = r.get<std::uint8_t>();
  if (phase > 1) throw CheckpointError(Kind::shape, "checkpoint phase tag invalid");
  ckpt.phase = static_cast<Phase>(phase);
  ckpt.step = r.get<std::uint64_t>();

  AugmentPolicy& p = ckpt.policy;
  p.g_max = r.get<std::int64_t>();
  p.scale_distribution = static_cast<ScaleDistribution>(r.get<std::uint8_t>() & 1u);
  p.offset_distribution = static_cast<OffsetDistribution>(r.get<std::uint8_t>() & 1u);
  p.sink_count = r.get<std::int64_t>();
  p.base_window = r.get<std::int64_t>();
  p.trained_window = r.get<std::int64_t>();
  p.granularity = static_cast<Granularity>(r.get<std::uint8_t>() & 1u);

  Model<float> model(m);
  std::vector<std::pair<std::string, Tensor<float>*>> expected;
  model.for_each_parameter([&expected](const std::string& name, Tensor<float>& t) { expected.emplace_back(name, &t); });
  const auto count = r.get<std::uint32_t>();
  if (count != expected.size()) {
    throw CheckpointError(Kind::shape, "checkpoint holds " + std::to_string(count) + " parameters, config expects " +
                                           std::to_string(expected.size()));
  }
  for (auto& [name, tensor] : expected) {
    const std::string stored = r.get_string(r.get<std::uint32_t>());
    if (stored != name) {
      throw CheckpointError(Kind::shape, "checkpoint parameter '" + stored + "' where '" + name + "' was expected");
    }
    Shape shape(r.get<std::uint32_t>());
    for (std::size_t& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    if (shape != tensor->shape) {
      throw CheckpointError(Kind::shape, "checkpoint parameter '" + name + "' has shape " + shape_str(shape) +
                                             ", config expects " + shape_str(tensor->shape));
    }
    for (float& x : tensor->data) x = r.get<float>();
  }
  if (r.remaining() != 0) throw CheckpointError(Kind::shape, "checkpoint has trailing bytes");
  ckpt.model = std::move(model);
  return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::io, "cannot open checkpoint '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace e2llm

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "e2llm/autograd.hpp"
#include "e2llm/error.hpp"
#include "e2llm/rope.hpp"
#include "e2llm/tensor.hpp"

namespace e2llm {

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 128;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t head_dim = 32;
  std::size_t ffn_mult = 4;
  std::size_t base_window = 128;
  double rope_base = 10000.0;
  // Longest sequence a single forward call accepts.
  std::size_t max_sequence = 4096;

  std::size_t ffn_hidden() const { return ffn_mult * d_model; }

  void validate() const {
    if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || ffn_mult == 0 ||
        base_window == 0 || max_sequence == 0) {
      throw ConfigError("model sizes must all be positive");
    }
    if (head_dim == 0 || head_dim % 2 != 0) {
      throw ConfigError("model.head_dim must be even, got " + std::to_string(head_dim));
    }
    if (d_model != n_heads * head_dim) {
      throw ConfigError("model.d_model (" + std::to_string(d_model) + ") != model.n_heads * model.head_dim (" +
                        std::to_string(n_heads * head_dim) + ")");
    }
    if (!(rope_base > 0.0)) throw ConfigError("model.rope_base must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

// Post-softmax attention weights of one head, [query × key] row-major.
template <typename T>
struct AttentionMap {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t size = 0;
  std::vector<T> weights;

  T at(std::size_t query, std::size_t key) const { return weights[query * size + key]; }
};

// Pre-norm decoder-only transformer: RMS norm, rotary causal attention,
// SiLU-gated feed-forward, untied unembedding.
template <typename T>
class Model {
 public:
  struct Layer {
    Tensor<T> attn_norm, wq, wk, wv, wo;
    Tensor<T> ffn_norm, w_gate, w_up, w_down;
  };

  Model() = default;

  // All matrices zero and all gains one: every position predicts the
  // uniform distribution.
  explicit Model(ModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t d = cfg_.d_model;
    const std::size_t h = cfg_.ffn_hidden();
    embed_ = Tensor<T>({cfg_.vocab_size, d});
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      Layer layer;
      layer.attn_norm = Tensor<T>({d}, T{1});
      layer.wq = Tensor<T>({d, d});
      layer.wk = Tensor<T>({d, d});
      layer.wv = Tensor<T>({d, d});
      layer.wo = Tensor<T>({d, d});
      layer.ffn_norm = Tensor<T>({d}, T{1});
      layer.w_gate = Tensor<T>({d, h});
      layer.w_up = Tensor<T>({d, h});
      layer.w_down = Tensor<T>({h, d});
      layers_.push_back(std::move(layer));
    }
    final_norm_ = Tensor<T>({d}, T{1});
    unembed_ = Tensor<T>({d, cfg_.vocab_size});
  }

  static Model initialized(const ModelConfig& cfg, std::uint64_t seed) {
    Model m(cfg);
    std::mt19937_64 rng(seed);
    const double std_in = 0.02;
    const double std_out = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
    auto fill = [&rng](Tensor<T>& t, double stddev) {
      std::normal_distribution<double> dist(0.0, stddev);
      for (T& x : t.data) x = static_cast<T>(dist(rng));
    };
    m.for_each_parameter([&](const std::string& name, Tensor<T>& p) {
      if (name.find("norm") != std::string::npos) return;
      const bool residual_out = name.ends_with(".wo") || name.ends_with(".w_down");
      fill(p, residual_out ? std_out : std_in);
    });
    return m;
  }

  const ModelConfig& config() const { return cfg_; }

  // Visits parameters in a fixed order with stable names.
  template <typename F>
  void for_each_parameter(F&& fn) {
    fn(std::string("embed"), embed_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      Layer& L = layers_[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      fn(p + "attn_norm", L.attn_norm);
      fn(p + "wq", L.wq);
      fn(p + "wk", L.wk);
      fn(p + "wv", L.wv);
      fn(p + "wo", L.wo);
      fn(p + "ffn_norm", L.ffn_norm);
      fn(p + "w_gate", L.w_gate);
      fn(p + "w_up", L.w_up);
      fn(p + "w_down", L.w_down);
    }
    fn(std::string("final_norm"), final_norm_);
    fn(std::string("unembed"), unembed_);
  }

  template <typename F>
  void for_each_parameter(F&& fn) const {
    const_cast<Model*>(this)->for_each_parameter(
        [&fn](const std::string& name, Tensor<T>& p) { fn(name, static_cast<const Tensor<T>&>(p)); });
  }

  std::vector<Tensor<T>*> parameters() {
    std::vector<Tensor<T>*> out;
    for_each_parameter([&out](const std::string&, Tensor<T>& p) { out.push_back(&p); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_parameter([&n](const std::string&, const Tensor<T>& p) { n += p.size(); });
    return n;
  }

  void enable_grad() {
    for_each_parameter([](const std::string&, Tensor<T>& p) { p.enable_grad(); });
  }

  void zero_grad() {
    for_each_parameter([](const std::string&, Tensor<T>& p) { p.zero_grad(); });
  }

  template <typename U>
  Model<U> cast() const {
    Model<U> out(cfg_);
    std::vector<const Tensor<T>*> src;
    for_each_parameter([&src](const std::string&, const Tensor<T>& p) { src.push_back(&p); });
    std::size_t i = 0;
    out.for_each_parameter([&](const std::string&, Tensor<U>& p) { p = src[i++]->template cast<U>(); });
    return out;
  }

  // Logits for `tokens`, treated as consecutive segments of `seg_len`
  // tokens, each rotated by its rows of `table`. When `tail_rows` > 0 (one
  // segment only) logits are produced for the last `tail_rows` positions.
  Var forward(Tape<T>& tape, std::span<const std::int32_t> tokens, std::size_t seg_len,
              const RotaryTable<T>& table, std::size_t tail_rows = 0,
              std::vector<std::vector<T>>* attention = nullptr) {
    if (tokens.empty() || seg_len == 0 || tokens.size() % seg_len != 0) {
      throw DimensionError("forward: " + std::to_string(tokens.size()) + " tokens in segments of " +
                           std::to_string(seg_len));
    }
    if (seg_len > cfg_.max_sequence) {
      throw DimensionError("forward: sequence of " + std::to_string(seg_len) +
                           " tokens exceeds the maximum buffer of " + std::to_string(cfg_.max_sequence));
    }
    if (tail_rows > 0 && (tail_rows > seg_len || tokens.size() != seg_len)) {
      throw DimensionError("forward: tail_rows needs a single segment of at least that length");
    }
    Var x = embedding(tape, tape.parameter(embed_), tokens);
    if (attention) attention->assign(layers_.size(), {});
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      Layer& L = layers_[l];
      Var h = rms_norm(tape, x, tape.parameter(L.attn_norm));
      Var q = rotary(tape, matmul(tape, h, tape.parameter(L.wq)), cfg_.n_heads, table);
      Var k = rotary(tape, matmul(tape, h, tape.parameter(L.wk)), cfg_.n_heads, table);
      Var v = matmul(tape, h, tape.parameter(L.wv));
      Var a = causal_attention(tape, q, k, v, cfg_.n_heads, seg_len, attention ? &(*attention)[l] : nullptr);
      x = add(tape, x, matmul(tape, a, tape.parameter(L.wo)));
      Var f = rms_norm(tape, x, tape.parameter(L.ffn_norm));
      Var gate = silu(tape, matmul(tape, f, tape.parameter(L.w_gate)));
      Var up = matmul(tape, f, tape.parameter(L.w_up));
      x = add(tape, x, matmul(tape, mul(tape, gate, up), tape.parameter(L.w_down)));
    }
    if (tail_rows > 0 && tail_rows < seg_len) x = slice_rows(tape, x, seg_len - tail_rows, seg_len);
    x = rms_norm(tape, x, tape.parameter(final_norm_));
    return matmul(tape, x, tape.parameter(unembed_));
  }

  // Single-sequence inference.
  Tensor<T> logits(std::span<const std::int32_t> tokens, const RopeParams& rope, std::size_t tail_rows = 0) {
    Tape<T> tape(Recording::off);
    const RotaryTable<T> table = rotary_table<T>(checked_rope(rope), tokens.size());
    return tape.value(forward(tape, tokens, tokens.size(), table, tail_rows));
  }

  std::vector<AttentionMap<T>> attention_maps(std::span<const std::int32_t> tokens, const RopeParams& rope) {
    Tape<T> tape(Recording::off);
    const RotaryTable<T> table = rotary_table<T>(checked_rope(rope), tokens.size());
    std::vector<std::vector<T>> probs;
    forward(tape, tokens, tokens.size(), table, 0, &probs);
    const std::size_t n = tokens.size();
    std::vector<AttentionMap<T>> maps;
    for (std::size_t l = 0; l < probs.size(); ++l) {
      for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
        AttentionMap<T> m{l, h, n, {}};
        m.weights.assign(probs[l].begin() + static_cast<std::ptrdiff_t>(h * n * n),
                         probs[l].begin() + static_cast<std::ptrdiff_t>((h + 1) * n * n));
        maps.push_back(std::move(m));
      }
    }
    return maps;
  }

  const RopeParams& checked_rope(const RopeParams& rope) const {
    rope.validate();
    if (rope.head_dim != cfg_.head_dim) {
      throw DimensionError("rope head_dim " + std::to_string(rope.head_dim) + " vs model head_dim " +
                           std::to_string(cfg_.head_dim));
    }
    return rope;
  }

  const Tensor<T>& embed() const { return embed_; }
  const Tensor<T>& unembed() const { return unembed_; }
  const Tensor<T>& final_norm() const { return final_norm_; }
  const std::vector<Layer>& layers() const { return layers_; }

 private:
  ModelConfig cfg_;
  Tensor<T> embed_;
  std::vector<Layer> layers_;
  Tensor<T> final_norm_;
  Tensor<T> unembed_;
};

// Incremental decoder with a per-layer key/value cache. Each appended
// token costs one row of every projection; results match Model::forward on
// the full prefix.
template <typename T>
class Decoder {
 public:
  Decoder(const Model<T>& model, RopeParams rope) : model_(&model), rope_(std::move(rope)) {
    model.checked_rope(rope_);
    const std::size_t layers = model.config().n_layers;
    keys_.resize(layers);
    values_.resize(layers);
    for (std::size_t j = 0; j < rope_.head_dim / 2; ++j) freq_.push_back(rope_frequency(rope_, j));
  }

  std::size_t length() const { return length_; }

  // Appends one token and returns next-token logits.
  std::vector<T> step(std::int32_t token) {
    const ModelConfig& cfg = model_->config();
    if (token < 0 || static_cast<std::size_t>(token) >= cfg.vocab_size) {
      throw IndexError("token id " + std::to_string(token) + " outside vocabulary of " +
                       std::to_string(cfg.vocab_size));
    }
    if (length_ >= cfg.max_sequence) {
      throw DimensionError("decoder exceeded the maximum buffer of " + std::to_string(cfg.max_sequence));
    }
    const std::size_t d = cfg.d_model;
    const std::size_t hd = cfg.head_dim;
    const std::size_t half = hd / 2;
    const std::size_t m = length_;
    const double p = effective_position(static_cast<std::int64_t>(m), rope_.scale, rope_.offset(m));
    std::vector<T> c(half), s(half);
    for (std::size_t j = 0; j < half; ++j) {
      c[j] = static_cast<T>(std::cos(p * freq_[j]));
      s[j] = static_cast<T>(std::sin(p * freq_[j]));
    }

    std::vector<T> x(model_->embed().data.begin() + static_cast<std::ptrdiff_t>(token * d),
                     model_->embed().data.begin() + static_cast<std::ptrdiff_t>((token + 1) * d));
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<T> scores;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const auto& L = model_->layers()[l];
      std::vector<T> h = norm(x, L.attn_norm);
      std::vector<T> q = matvec(h, L.wq);
      std::vector<T> k = matvec(h, L.wk);
      std::vector<T> v = matvec(h, L.wv);
      rotate(q, c, s, cfg.n_heads);
      rotate(k, c, s, cfg.n_heads);
      keys_[l].insert(keys_[l].end(), k.begin(), k.end());
      values_[l].insert(values_[l].end(), v.begin(), v.end());

      std::vector<T> a(d);
      scores.resize(m + 1);
      for (std::size_t head = 0; head < cfg.n_heads; ++head) {
        const T* qh = q.data() + head * hd;
        for (std::size_t j = 0; j <= m; ++j) {
          scores[j] = static_cast<T>(detail::dot(qh, keys_[l].data() + j * d + head * hd, hd) * inv_sqrt);
        }
        detail::softmax_inplace(std::span<T>(scores.data(), m + 1));
        for (std::size_t e = 0; e < hd; ++e) {
          double acc = 0.0;
          for (std::size_t j = 0; j <= m; ++j) {
            acc += static_cast<double>(scores[j]) * static_cast<double>(values_[l][j * d + head * hd + e]);
          }
          a[head * hd + e] = static_cast<T>(acc);
        }
      }
      std::vector<T> o = matvec(a, L.wo);
      for (std::size_t i = 0; i < d; ++i) x[i] += o[i];

      std::vector<T> f = norm(x, L.ffn_norm);
      std::vector<T> gate = matvec(f, L.w_gate);
      std::vector<T> up = matvec(f, L.w_up);
      for (std::size_t i = 0; i < gate.size(); ++i) gate[i] = gate[i] / (T{1} + std::exp(-gate[i])) * up[i];
      std::vector<T> down = matvec(gate, L.w_down);
      for (std::size_t i = 0; i < d; ++i) x[i] += down[i];
    }
    ++length_;
    return matvec(norm(x, model_->final_norm()), model_->unembed());
  }

 private:
  static std::vector<T> matvec(const std::vector<T>& x, const Tensor<T>& w) {
    const auto rows = static_cast<Eigen::Index>(w.shape[0]);
    const auto cols = static_cast<Eigen::Index>(w.shape[1]);
    std::vector<T> y(w.shape[1]);
    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(y.data(), cols).noalias() =
        Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(x.data(), rows) *
        detail::MapConst<T>(w.data.data(), rows, cols);
    return y;
  }

  static std::vector<T> norm(const std::vector<T>& x, const Tensor<T>& gain) {
    const double ms = detail::dot(x.data(), x.data(), x.size()) / static_cast<double>(x.size());
    const T r = static_cast<T>(1.0 / std::sqrt(ms + static_cast<double>(static_cast<T>(1e-5))));
    std::vector<T> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * r * gain.data[i];
    return y;
  }

  static void rotate(std::vector<T>& v, const std::vector<T>& c, const std::vector<T>& s, std::size_t heads) {
    const std::size_t half = c.size();
    for (std::size_t h = 0; h < heads; ++h) {
      T* x = v.data() + h * half * 2;
      for (std::size_t j = 0; j < half; ++j) {
        const T x0 = x[2 * j];
        const T x1 = x[2 * j + 1];
        x[2 * j] = x0 * c[j] - x1 * s[j];
        x[2 * j + 1] = x0 * s[j] + x1 * c[j];
      }
    }
  }

  const Model<T>* model_;
  RopeParams rope_;
  std::vector<double> freq_;
  std::vector<std::vector<T>> keys_;
  std::vector<std::vector<T>> values_;
  std::size_t length_ = 0;
};

}  // namespace e2llm

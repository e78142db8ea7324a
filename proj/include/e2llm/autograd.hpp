#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "e2llm/tensor.hpp"

namespace e2llm {

// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

enum class Recording { on, off };

// Wengert list for reverse-mode differentiation. Nodes are appended in
// evaluation order, so reverse iteration is a valid topological order.
// Parameter leaves alias caller-owned tensors and accumulate into their
// `grad` buffers directly.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, Var)>;

  explicit Tape(Recording mode = Recording::on) : recording_(mode == Recording::on) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  Var constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

  // `param` must outlive the tape.
  Var parameter(Tensor<T>& param) {
    Node node;
    node.external = &param;
    node.needs_grad = recording_ && param.requires_grad;
    if (node.needs_grad && param.grad.size() != param.data.size()) {
      param.grad.assign(param.data.size(), T{0});
    }
    nodes_.push_back(std::move(node));
    return Var{nodes_.size() - 1};
  }

  Var push(Tensor<T> value, bool needs_grad, BackwardFn backward) {
    Node node;
    node.own = std::move(value);
    node.needs_grad = recording_ && needs_grad;
    if (node.needs_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var{nodes_.size() - 1};
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.external ? *n.external : n.own;
  }

  const Shape& shape(Var v) const { return value(v).shape; }

  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }

  // Gradient buffer of `v`, zero-allocated on first use.
  std::vector<T>& grad(Var v) {
    Node& n = nodes_.at(v.id);
    std::vector<T>& g = n.external ? n.external->grad : n.own.grad;
    const std::size_t len = value(v).size();
    if (g.size() != len) g.assign(len, T{0});
    return g;
  }

  void backward(Var loss) {
    if (value(loss).size() != 1) {
      throw DimensionError("backward needs a scalar, got " + shape_str(shape(loss)));
    }
    if (!needs_grad(loss)) return;
    grad(loss)[0] += T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || !n.backward || n.own.grad.empty()) continue;
      n.backward(*this, Var{i});
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> own;
    Tensor<T>* external = nullptr;
    bool needs_grad = false;
    BackwardFn backward;
  };

  bool recording_;
  std::vector<Node> nodes_;
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using MapConst = Eigen::Map<const RowMat<T>>;

template <typename T>
using MapMut = Eigen::Map<RowMat<T>>;

inline void require_rank2(const Shape& s, const char* op) {
  if (s.size() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got " + shape_str(s));
  }
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + " shape mismatch: " + shape_str(a) + " vs " +
                         shape_str(b));
  }
}

// Stable in-place softmax.
template <typename T>
void softmax_inplace(std::span<T> row) {
  if (row.empty()) return;
  const T mx = *std::max_element(row.begin(), row.end());
  double sum = 0.0;
  for (T& x : row) {
    x = std::exp(x - mx);
    sum += static_cast<double>(x);
  }
  const T inv = static_cast<T>(1.0 / sum);
  for (T& x : row) x *= inv;
}

template <typename T>
double dot(const T* a, const T* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

template <typename T>
bool any_needs_grad(const Tape<T>& tape, std::initializer_list<Var> vars) {
  for (Var v : vars) {
    if (tape.needs_grad(v)) return true;
  }
  return false;
}

}  // namespace detail

// C = A·B for A [m×k], B [k×n].
template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& A = tape.value(a);
  const Tensor<T>& B = tape.value(b);
  detail::require_rank2(A.shape, "matmul");
  detail::require_rank2(B.shape, "matmul");
  if (A.shape[1] != B.shape[0]) {
    throw DimensionError("matmul inner dimensions disagree: " + shape_str(A.shape) + " · " +
                         shape_str(B.shape));
  }
  const auto m = static_cast<Eigen::Index>(A.shape[0]);
  const auto k = static_cast<Eigen::Index>(A.shape[1]);
  const auto n = static_cast<Eigen::Index>(B.shape[1]);
  Tensor<T> C({A.shape[0], B.shape[1]});
  detail::MapMut<T>(C.data.data(), m, n).noalias() =
      detail::MapConst<T>(A.data.data(), m, k) * detail::MapConst<T>(B.data.data(), k, n);
  return tape.push(std::move(C), detail::any_needs_grad(tape, {a, b}),
                   [a, b, m, k, n](Tape<T>& t, Var self) {
                     detail::MapConst<T> dC(t.grad(self).data(), m, n);
                     if (t.needs_grad(a)) {
                       detail::MapMut<T>(t.grad(a).data(), m, k).noalias() +=
                           dC * detail::MapConst<T>(t.value(b).data.data(), k, n).transpose();
                     }
                     if (t.needs_grad(b)) {
                       detail::MapMut<T>(t.grad(b).data(), k, n).noalias() +=
                           detail::MapConst<T>(t.value(a).data.data(), m, k).transpose() * dC;
                     }
                   });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& A = tape.value(a);
  const Tensor<T>& B = tape.value(b);
  detail::require_same(A.shape, B.shape, "add");
  Tensor<T> C = A;
  C.grad.clear();
  C.requires_grad = false;
  for (std::size_t i = 0; i < C.size(); ++i) C.data[i] += B.data[i];
  return tape.push(std::move(C), detail::any_needs_grad(tape, {a, b}), [a, b](Tape<T>& t, Var self) {
    const std::vector<T>& g = t.grad(self);
    for (Var p : {a, b}) {
      if (!t.needs_grad(p)) continue;
      std::vector<T>& gp = t.grad(p);
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
    }
  });
}

// Elementwise product.
template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& A = tape.value(a);
  const Tensor<T>& B = tape.value(b);
  detail::require_same(A.shape, B.shape, "mul");
  Tensor<T> C(A.shape);
  for (std::size_t i = 0; i < C.size(); ++i) C.data[i] = A.data[i] * B.data[i];
  return tape.push(std::move(C), detail::any_needs_grad(tape, {a, b}), [a, b](Tape<T>& t, Var self) {
    const std::vector<T>& g = t.grad(self);
    if (t.needs_grad(a)) {
      std::vector<T>& ga = t.grad(a);
      const auto& vb = t.value(b).data;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
    }
    if (t.needs_grad(b)) {
      std::vector<T>& gb = t.grad(b);
      const auto& va = t.value(a).data;
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
    }
  });
}

template <typename T>
Var scale(Tape<T>& tape, Var a, T s) {
  Tensor<T> C(tape.shape(a));
  const auto& va = tape.value(a).data;
  for (std::size_t i = 0; i < C.size(); ++i) C.data[i] = va[i] * s;
  return tape.push(std::move(C), tape.needs_grad(a), [a, s](Tape<T>& t, Var self) {
    const std::vector<T>& g = t.grad(self);
    std::vector<T>& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

// Sum of all elements as a [1] tensor.
template <typename T>
Var sum(Tape<T>& tape, Var a) {
  double acc = 0.0;
  for (T x : tape.value(a).data) acc += static_cast<double>(x);
  return tape.push(Tensor<T>({1}, static_cast<T>(acc)), tape.needs_grad(a), [a](Tape<T>& t, Var self) {
    const T g = t.grad(self)[0];
    for (T& x : t.grad(a)) x += g;
  });
}

// |x| elementwise; the derivative at exactly 0 is taken as 0.
template <typename T>
Var abs(Tape<T>& tape, Var a) {
  Tensor<T> C(tape.shape(a));
  const auto& va = tape.value(a).data;
  for (std::size_t i = 0; i < C.size(); ++i) C.data[i] = std::abs(va[i]);
  return tape.push(std::move(C), tape.needs_grad(a), [a](Tape<T>& t, Var self) {
    const std::vector<T>& g = t.grad(self);
    const auto& va = t.value(a).data;
    std::vector<T>& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i] * static_cast<T>((va[i] > 0) - (va[i] < 0));
    }
  });
}

// x·sigmoid(x)
template <typename T>
Var silu(Tape<T>& tape, Var a) {
  Tensor<T> C(tape.shape(a));
  const auto& va = tape.value(a).data;
  for (std::size_t i = 0; i < C.size(); ++i) C.data[i] = va[i] / (T{1} + std::exp(-va[i]));
  return tape.push(std::move(C), tape.needs_grad(a), [a](Tape<T>& t, Var self) {
    const std::vector<T>& g = t.grad(self);
    const auto& va = t.value(a).data;
    std::vector<T>& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = T{1} / (T{1} + std::exp(-va[i]));
      ga[i] += g[i] * s * (T{1} + va[i] * (T{1} - s));
    }
  });
}

// Rows [begin, end) of a matrix.
template <typename T>
Var slice_rows(Tape<T>& tape, Var a, std::size_t begin, std::size_t end) {
  const Tensor<T>& A = tape.value(a);
  detail::require_rank2(A.shape, "slice_rows");
  if (begin > end || end > A.shape[0]) {
    throw IndexError("slice_rows [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") outside " + shape_str(A.shape));
  }
  const std::size_t cols = A.shape[1];
  Tensor<T> C({end - begin, cols});
  std::copy(A.data.begin() + static_cast<std::ptrdiff_t>(begin * cols),
            A.data.begin() + static_cast<std::ptrdiff_t>(end * cols), C.data.begin());
  return tape.push(std::move(C), tape.needs_grad(a), [a, begin, cols](Tape<T>& t, Var self) {
    const std::vector<T>& g = t.grad(self);
    std::vector<T>& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[begin * cols + i] += g[i];
  });
}

// Row-wise softmax with max subtraction.
template <typename T>
Var softmax_rows(Tape<T>& tape, Var x) {
  const Tensor<T>& X = tape.value(x);
  detail::require_rank2(X.shape, "softmax_rows");
  const std::size_t r = X.shape[0];
  const std::size_t c = X.shape[1];
  Tensor<T> Y = X;
  Y.grad.clear();
  Y.requires_grad = false;
  for (std::size_t i = 0; i < r; ++i) detail::softmax_inplace(std::span<T>(Y.data.data() + i * c, c));
  return tape.push(std::move(Y), tape.needs_grad(x), [x, r, c](Tape<T>& t, Var self) {
    const std::vector<T>& g = t.grad(self);
    const std::vector<T>& y = t.value(self).data;
    std::vector<T>& gx = t.grad(x);
    for (std::size_t i = 0; i < r; ++i) {
      const double d = detail::dot(g.data() + i * c, y.data() + i * c, c);
      for (std::size_t j = 0; j < c; ++j) {
        gx[i * c + j] += y[i * c + j] * (g[i * c + j] - static_cast<T>(d));
      }
    }
  });
}

// y = x / rms(x) · gain, per row.
template <typename T>
Var rms_norm(Tape<T>& tape, Var x, Var gain, T eps = static_cast<T>(1e-5)) {
  const Tensor<T>& X = tape.value(x);
  const Tensor<T>& G = tape.value(gain);
  detail::require_rank2(X.shape, "rms_norm");
  const std::size_t n = X.shape[0];
  const std::size_t d = X.shape[1];
  if (G.size() != d) {
    throw DimensionError("rms_norm gain " + shape_str(G.shape) + " vs input " + shape_str(X.shape));
  }
  Tensor<T> Y(X.shape);
  std::vector<T> inv_rms(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = X.data.data() + i * d;
    const double ms = detail::dot(row, row, d) / static_cast<double>(d);
    inv_rms[i] = static_cast<T>(1.0 / std::sqrt(ms + static_cast<double>(eps)));
    for (std::size_t j = 0; j < d; ++j) Y.data[i * d + j] = row[j] * inv_rms[i] * G.data[j];
  }
  return tape.push(std::move(Y), detail::any_needs_grad(tape, {x, gain}),
                   [x, gain, n, d, inv_rms = std::move(inv_rms)](Tape<T>& t, Var self) {
                     const std::vector<T>& g = t.grad(self);
                     const auto& xv = t.value(x).data;
                     const auto& gv = t.value(gain).data;
                     const bool want_x = t.needs_grad(x);
                     const bool want_g = t.needs_grad(gain);
                     std::vector<T> dxhat(d);
                     for (std::size_t i = 0; i < n; ++i) {
                       const T r = inv_rms[i];
                       double proj = 0.0;
                       for (std::size_t j = 0; j < d; ++j) {
                         const T xhat = xv[i * d + j] * r;
                         dxhat[j] = g[i * d + j] * gv[j];
                         proj += static_cast<double>(dxhat[j]) * static_cast<double>(xhat);
                         if (want_g) t.grad(gain)[j] += g[i * d + j] * xhat;
                       }
                       if (!want_x) continue;
                       std::vector<T>& gx = t.grad(x);
                       const T mean_proj = static_cast<T>(proj / static_cast<double>(d));
                       for (std::size_t j = 0; j < d; ++j) {
                         const T xhat = xv[i * d + j] * r;
                         gx[i * d + j] += r * (dxhat[j] - xhat * mean_proj);
                       }
                     }
                   });
}

// Rows of `table` [V×d] selected by `ids`.
template <typename T>
Var embedding(Tape<T>& tape, Var table, std::span<const std::int32_t> ids) {
  const Tensor<T>& E = tape.value(table);
  detail::require_rank2(E.shape, "embedding");
  const std::size_t vocab = E.shape[0];
  const std::size_t d = E.shape[1];
  Tensor<T> Y({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    std::copy_n(E.data.data() + static_cast<std::size_t>(ids[i]) * d, d, Y.data.data() + i * d);
  }
  std::vector<std::int32_t> kept(ids.begin(), ids.end());
  return tape.push(std::move(Y), tape.needs_grad(table),
                   [table, d, kept = std::move(kept)](Tape<T>& t, Var self) {
                     const std::vector<T>& g = t.grad(self);
                     std::vector<T>& ge = t.grad(table);
                     for (std::size_t i = 0; i < kept.size(); ++i) {
                       T* dst = ge.data() + static_cast<std::size_t>(kept[i]) * d;
                       for (std::size_t j = 0; j < d; ++j) dst[j] += g[i * d + j];
                     }
                   });
}

// Per-row rotation coefficients: cos/sin are [rows × head_dim/2].
template <typename T>
struct RotaryTable {
  std::size_t rows = 0;
  std::size_t half = 0;
  std::vector<T> cos;
  std::vector<T> sin;
};

// Rotates each interleaved pair (x[2j], x[2j+1]) of every head in `x`
// [rows × n_heads·head_dim] by the row's angle for frequency j.
template <typename T>
Var rotary(Tape<T>& tape, Var x, std::size_t n_heads, const RotaryTable<T>& table) {
  const Tensor<T>& X = tape.value(x);
  detail::require_rank2(X.shape, "rotary");
  const std::size_t rows = X.shape[0];
  const std::size_t width = X.shape[1];
  const std::size_t half = table.half;
  if (table.rows != rows || n_heads * half * 2 != width) {
    throw DimensionError("rotary table [" + std::to_string(table.rows) + "x" + std::to_string(half) +
                         "] does not fit input " + shape_str(X.shape));
  }
  Tensor<T> Y(X.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* c = table.cos.data() + r * half;
    const T* s = table.sin.data() + r * half;
    for (std::size_t h = 0; h < n_heads; ++h) {
      const T* in = X.data.data() + r * width + h * half * 2;
      T* out = Y.data.data() + r * width + h * half * 2;
      for (std::size_t j = 0; j < half; ++j) {
        const T x0 = in[2 * j];
        const T x1 = in[2 * j + 1];
        out[2 * j] = x0 * c[j] - x1 * s[j];
        out[2 * j + 1] = x0 * s[j] + x1 * c[j];
      }
    }
  }
  return tape.push(std::move(Y), tape.needs_grad(x),
                   [x, n_heads, rows, width, half, table](Tape<T>& t, Var self) {
                     const std::vector<T>& g = t.grad(self);
                     std::vector<T>& gx = t.grad(x);
                     for (std::size_t r = 0; r < rows; ++r) {
                       const T* c = table.cos.data() + r * half;
                       const T* s = table.sin.data() + r * half;
                       for (std::size_t h = 0; h < n_heads; ++h) {
                         const T* gin = g.data() + r * width + h * half * 2;
                         T* gout = gx.data() + r * width + h * half * 2;
                         for (std::size_t j = 0; j < half; ++j) {
                           gout[2 * j] += gin[2 * j] * c[j] + gin[2 * j + 1] * s[j];
                           gout[2 * j + 1] += -gin[2 * j] * s[j] + gin[2 * j + 1] * c[j];
                         }
                       }
                     }
                   });
}

// Causal multi-head attention over independent segments of `seg_len` rows.
// q, k, v are [segments·seg_len × n_heads·head_dim]. When `probs_out` is
// given it receives the post-softmax weights laid out as
// [segment][head][query][key].
template <typename T>
Var causal_attention(Tape<T>& tape, Var q, Var k, Var v, std::size_t n_heads, std::size_t seg_len,
                     std::vector<T>* probs_out = nullptr) {
  const Tensor<T>& Q = tape.value(q);
  const Tensor<T>& K = tape.value(k);
  const Tensor<T>& V = tape.value(v);
  detail::require_rank2(Q.shape, "causal_attention");
  detail::require_same(Q.shape, K.shape, "causal_attention");
  detail::require_same(Q.shape, V.shape, "causal_attention");
  const std::size_t rows = Q.shape[0];
  const std::size_t width = Q.shape[1];
  if (seg_len == 0 || rows % seg_len != 0 || n_heads == 0 || width % n_heads != 0) {
    throw DimensionError("causal_attention cannot split " + shape_str(Q.shape) + " into " +
                         std::to_string(n_heads) + " heads of segments of " + std::to_string(seg_len));
  }
  const std::size_t segments = rows / seg_len;
  const std::size_t hd = width / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const bool keep = tape.recording() && detail::any_needs_grad(tape, {q, k, v});

  Tensor<T> Y({rows, width});
  std::vector<T> probs;
  if (keep || probs_out) probs.assign(segments * n_heads * seg_len * seg_len, T{0});
  std::vector<T> row(seg_len);
  std::vector<double> acc(hd);
  for (std::size_t s = 0; s < segments; ++s) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      for (std::size_t i = 0; i < seg_len; ++i) {
        const T* qi = Q.data.data() + (s * seg_len + i) * width + h * hd;
        for (std::size_t j = 0; j <= i; ++j) {
          const T* kj = K.data.data() + (s * seg_len + j) * width + h * hd;
          row[j] = static_cast<T>(detail::dot(qi, kj, hd) * inv_sqrt);
        }
        detail::softmax_inplace(std::span<T>(row.data(), i + 1));
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t j = 0; j <= i; ++j) {
          const T* vj = V.data.data() + (s * seg_len + j) * width + h * hd;
          const double p = static_cast<double>(row[j]);
          for (std::size_t e = 0; e < hd; ++e) acc[e] += p * static_cast<double>(vj[e]);
        }
        T* yi = Y.data.data() + (s * seg_len + i) * width + h * hd;
        for (std::size_t e = 0; e < hd; ++e) yi[e] = static_cast<T>(acc[e]);
        if (!probs.empty()) {
          std::copy_n(row.data(), i + 1,
                      probs.data() + ((s * n_heads + h) * seg_len + i) * seg_len);
        }
      }
    }
  }
  if (probs_out) *probs_out = probs;
  if (!keep) probs.clear();

  return tape.push(
      std::move(Y), keep,
      [q, k, v, n_heads, seg_len, segments, hd, width, inv_sqrt, probs = std::move(probs)](Tape<T>& t,
                                                                                            Var self) {
        const std::vector<T>& g = t.grad(self);
        const auto& Qd = t.value(q).data;
        const auto& Kd = t.value(k).data;
        const auto& Vd = t.value(v).data;
        const bool want_q = t.needs_grad(q);
        const bool want_k = t.needs_grad(k);
        const bool want_v = t.needs_grad(v);
        std::vector<T> dummy;
        std::vector<T>& gq = want_q ? t.grad(q) : dummy;
        std::vector<T>& gk = want_k ? t.grad(k) : dummy;
        std::vector<T>& gv = want_v ? t.grad(v) : dummy;
        std::vector<double> dscore(seg_len);
        for (std::size_t s = 0; s < segments; ++s) {
          for (std::size_t h = 0; h < n_heads; ++h) {
            for (std::size_t i = 0; i < seg_len; ++i) {
              const T* p = probs.data() + ((s * n_heads + h) * seg_len + i) * seg_len;
              const T* gi = g.data() + (s * seg_len + i) * width + h * hd;
              double weighted = 0.0;
              for (std::size_t j = 0; j <= i; ++j) {
                const T* vj = Vd.data() + (s * seg_len + j) * width + h * hd;
                dscore[j] = detail::dot(gi, vj, hd);
                weighted += static_cast<double>(p[j]) * dscore[j];
                if (want_v) {
                  T* gvj = gv.data() + (s * seg_len + j) * width + h * hd;
                  for (std::size_t e = 0; e < hd; ++e) gvj[e] += p[j] * gi[e];
                }
              }
              const T* qi = Qd.data() + (s * seg_len + i) * width + h * hd;
              T* gqi = want_q ? gq.data() + (s * seg_len + i) * width + h * hd : nullptr;
              for (std::size_t j = 0; j <= i; ++j) {
                const T ds = static_cast<T>(static_cast<double>(p[j]) * (dscore[j] - weighted) * inv_sqrt);
                if (ds == T{0}) continue;
                const T* kj = Kd.data() + (s * seg_len + j) * width + h * hd;
                if (gqi) {
                  for (std::size_t e = 0; e < hd; ++e) gqi[e] += ds * kj[e];
                }
                if (want_k) {
                  T* gkj = gk.data() + (s * seg_len + j) * width + h * hd;
                  for (std::size_t e = 0; e < hd; ++e) gkj[e] += ds * qi[e];
                }
              }
            }
          }
        }
      });
}

inline constexpr std::int32_t kIgnoreTarget = -1;

// Mean negative log-likelihood of targets[i] under softmax(logits row i).
// Rows whose target is kIgnoreTarget do not contribute.
template <typename T>
Var cross_entropy(Tape<T>& tape, Var logits, std::span<const std::int32_t> targets) {
  const Tensor<T>& X = tape.value(logits);
  detail::require_rank2(X.shape, "cross_entropy");
  const std::size_t n = X.shape[0];
  const std::size_t vocab = X.shape[1];
  if (targets.size() != n || n == 0) {
    throw DimensionError("cross_entropy has " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(X.shape));
  }
  std::vector<T> probs(X.data);
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] == kIgnoreTarget) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab) {
      throw IndexError("target id " + std::to_string(targets[i]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    const T* x = X.data.data() + i * vocab;
    const T mx = *std::max_element(x, x + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(static_cast<double>(x[j] - mx));
    total += std::log(z) - static_cast<double>(x[targets[i]] - mx);
    detail::softmax_inplace(std::span<T>(probs.data() + i * vocab, vocab));
    ++counted;
  }
  if (counted == 0) throw DimensionError("cross_entropy: every target is ignored");
  std::vector<std::int32_t> kept(targets.begin(), targets.end());
  const T loss = static_cast<T>(total / static_cast<double>(counted));
  return tape.push(Tensor<T>({1}, loss), tape.needs_grad(logits),
                   [logits, vocab, counted, probs = std::move(probs), kept = std::move(kept)](Tape<T>& t,
                                                                                            Var self) {
                     const T g = t.grad(self)[0] / static_cast<T>(counted);
                     std::vector<T>& gx = t.grad(logits);
                     for (std::size_t i = 0; i < kept.size(); ++i) {
                       if (kept[i] == kIgnoreTarget) continue;
                       for (std::size_t j = 0; j < vocab; ++j) gx[i * vocab + j] += g * probs[i * vocab + j];
                       gx[i * vocab + static_cast<std::size_t>(kept[i])] -= g;
                     }
                   });
}

}  // namespace e2llm

/* Copyright 2026 The skam Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

// Minimal reverse-mode differentiation over dense row-major tensors.
//
// A Tape records every op as it runs (the graph is rebuilt each step) and
// `backward` replays the records in strict reverse order. Storage is T
// (float for training, double for gradient checks); reductions accumulate in
// double either way.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "skam/common.hpp"
#include "skam/rng.hpp"
#include "skam/transforms.hpp"

namespace skam {

template <typename T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, T fill = T(0)) : shape(std::move(s)) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    data.assign(n, fill);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, T fill = T(0)) { return Tensor({rows, cols}, fill); }
  static Tensor scalar(T v) { return Tensor({1}, v); }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  T& at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
  T at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }
  std::span<T> row(std::size_t i) { return {data.data() + i * cols(), cols()}; }
  std::span<const T> row(std::size_t i) const { return {data.data() + i * cols(), cols()}; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

/// Handle to a node recorded on a tape.
struct Var {
  std::size_t id = 0;
};

enum class MaskMode {
  Full,             // row t sees every column
  StrictlyCausal,   // row t sees columns [0, t)
};

template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  explicit Tape(bool record_gradients = true) : record_(record_gradients) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  /// Value that never receives a gradient.
  Var constant(Tensor<T> value) { return push(std::move(value), nullptr, false, false); }

  /// Leaf whose gradient is kept after backward. The tensor is referenced, not
  /// copied, and must outlive the tape.
  Var parameter(const Tensor<T>& value) {
    Node node;
    node.external = &value;
    node.needs_grad = record_;
    node.keep_grad = true;
    nodes_.push_back(std::move(node));
    return {nodes_.size() - 1};
  }

  const Tensor<T>& value(Var v) const { return nodes_[v.id].get(); }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  /// Gradient of a kept node (zeros if backward never reached it).
  Tensor<T> grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.data.empty()) return Tensor<T>(n.get().shape);
    return n.grad;
  }

  /// Records an op output. `backward` runs only if the output needs a gradient.
  Var record(Tensor<T> value, std::initializer_list<Var> inputs, Backward backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
  }

  Var record(Tensor<T> value, std::span<const Var> inputs, Backward backward) {
    bool needs = false;
    if (record_)
      for (Var in : inputs) needs = needs || nodes_[in.id].needs_grad;
    if (check_finite) {
      for (T x : value.data)
        if (!std::isfinite(static_cast<double>(x))) fail(ErrorCode::NumericalError, "non-finite activation");
    }
    return push(std::move(value), needs ? std::move(backward) : Backward{}, needs, false);
  }

  /// Gradient buffer of node `v`, zero-initialized on first use.
  Tensor<T>& grad_buffer(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.data.empty()) n.grad = Tensor<T>(n.get().shape);
    return n.grad;
  }

  /// Gradient flowing into node `id` during backward (must exist).
  const Tensor<T>& upstream(std::size_t id) const { return nodes_[id].grad; }

  void backward(Var loss) {
    require(record_, ErrorCode::InvalidLoss, "tape was created without gradient recording");
    require(value(loss).numel() == 1, ErrorCode::InvalidLoss, "loss must be a scalar");
    grad_buffer(loss).data[0] = T(1);
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.needs_grad || n.grad.data.empty()) continue;
      if (n.backward) n.backward(*this, id);
      if (!n.keep_grad) {
        n.grad = Tensor<T>();
        n.grad.shape.clear();
      }
    }
  }

  /// Order-sensitive digest of the support sets chosen by every sparse
  /// transform on this tape; a change flags a crossed support boundary.
  std::uint64_t support_signature = 0xCBF29CE484222325ULL;
  bool check_finite = false;

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    Backward backward;
    bool needs_grad = false;
    bool keep_grad = false;
    const Tensor<T>& get() const { return external ? *external : owned; }
  };

  Var push(Tensor<T> value, Backward backward, bool needs, bool keep) {
    Node node;
    node.owned = std::move(value);
    node.backward = std::move(backward);
    node.needs_grad = needs;
    node.keep_grad = keep;
    nodes_.push_back(std::move(node));
    return {nodes_.size() - 1};
  }

  bool record_;
  std::vector<Node> nodes_;
};

namespace kernel {

// Float storage, double accumulation; the fixed loop order keeps results
// reproducible.

// C += A B, A is m x k, B is k x n.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const T* __restrict bp = b + p * n;
      double* __restrict row = acc.data();
      for (std::size_t j = 0; j < n; ++j) row[j] += av * static_cast<double>(bp[j]);
    }
    T* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) ci[j] = static_cast<T>(ci[j] + acc[j]);
  }
}

// C += A B^T, A is m x k, B is n x k. Dot products use eight interleaved
// partial sums so the inner loop vectorizes without reassociation flags.
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  constexpr std::size_t kLanes = 8;
  const std::size_t body = k - k % kLanes;
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      double lanes[kLanes] = {};
      for (std::size_t p = 0; p < body; p += kLanes)
        for (std::size_t l = 0; l < kLanes; ++l)
          lanes[l] += static_cast<double>(ai[p + l]) * static_cast<double>(bj[p + l]);
      double s = 0.0;
      for (std::size_t l = 0; l < kLanes; ++l) s += lanes[l];
      for (std::size_t p = body; p < k; ++p) s += static_cast<double>(ai[p]) * static_cast<double>(bj[p]);
      c[i * n + j] = static_cast<T>(c[i * n + j] + s);
    }
  }
}

// C += A^T B, A is k x m, B is k x n.
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> acc(m * n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const T* ap = a + p * m;
    const T* __restrict bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ap[i];
      if (av == 0.0) continue;
      double* __restrict row = acc.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * static_cast<double>(bp[j]);
    }
  }
  for (std::size_t i = 0; i < m * n; ++i) c[i] = static_cast<T>(c[i] + acc[i]);
}

}  // namespace kernel

namespace ad {

namespace detail {

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
  require(t.rank() == 2, ErrorCode::ShapeError, std::string(op) + ": expected a matrix");
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape == b.shape, ErrorCode::ShapeError, std::string(op) + ": shape mismatch");
}

}  // namespace detail

/// (m x k)(k x n) -> m x n
template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b) {
  const auto& A = tape.value(a);
  const auto& B = tape.value(b);
  detail::require_matrix(A, "matmul");
  detail::require_matrix(B, "matmul");
  require(A.cols() == B.rows(), ErrorCode::ShapeError, "matmul: inner dimensions differ");
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  auto C = Tensor<T>::matrix(m, n);
  kernel::gemm_nn(A.data.data(), B.data.data(), C.data.data(), m, k, n);
  return tape.record(std::move(C), {a, b}, [a, b, m, k, n](Tape<T>& t, std::size_t self) {
    const auto& G = t.upstream(self);
    if (t.needs_grad(a))
      kernel::gemm_nt(G.data.data(), t.value(b).data.data(), t.grad_buffer(a).data.data(), m, n, k);
    if (t.needs_grad(b))
      kernel::gemm_tn(t.value(a).data.data(), G.data.data(), t.grad_buffer(b).data.data(), k, m, n);
  });
}

/// (m x k)(n x k)^T -> m x n
template <typename T>
Var matmul_nt(Tape<T>& tape, Var a, Var b) {
  const auto& A = tape.value(a);
  const auto& B = tape.value(b);
  detail::require_matrix(A, "matmul_nt");
  detail::require_matrix(B, "matmul_nt");
  require(A.cols() == B.cols(), ErrorCode::ShapeError, "matmul_nt: inner dimensions differ");
  const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
  auto C = Tensor<T>::matrix(m, n);
  kernel::gemm_nt(A.data.data(), B.data.data(), C.data.data(), m, k, n);
  return tape.record(std::move(C), {a, b}, [a, b, m, k, n](Tape<T>& t, std::size_t self) {
    const auto& G = t.upstream(self);
    // dA = G B, dB = G^T A
    if (t.needs_grad(a))
      kernel::gemm_nn(G.data.data(), t.value(b).data.data(), t.grad_buffer(a).data.data(), m, n, k);
    if (t.needs_grad(b))
      kernel::gemm_tn(G.data.data(), t.value(a).data.data(), t.grad_buffer(b).data.data(), n, m, k);
  });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const auto& A = tape.value(a);
  const auto& B = tape.value(b);
  detail::require_same_shape(A, B, "add");
  Tensor<T> C = A;
  for (std::size_t i = 0; i < C.numel(); ++i) C.data[i] += B.data[i];
  return tape.record(std::move(C), {a, b}, [a, b](Tape<T>& t, std::size_t self) {
    const auto& G = t.upstream(self);
    for (Var v : {a, b}) {
      if (!t.needs_grad(v)) continue;
      auto& D = t.grad_buffer(v);
      for (std::size_t i = 0; i < G.numel(); ++i) D.data[i] += G.data[i];
    }
  });
}

template <typename T>
Var scale(Tape<T>& tape, Var a, double s) {
  Tensor<T> C = tape.value(a);
  for (T& x : C.data) x = static_cast<T>(x * s);
  return tape.record(std::move(C), {a}, [a, s](Tape<T>& t, std::size_t self) {
    const auto& G = t.upstream(self);
    auto& D = t.grad_buffer(a);
    for (std::size_t i = 0; i < G.numel(); ++i) D.data[i] += static_cast<T>(G.data[i] * s);
  });
}

template <typename T>
Var hadamard(Tape<T>& tape, Var a, Var b) {
  const auto& A = tape.value(a);
  const auto& B = tape.value(b);
  detail::require_same_shape(A, B, "hadamard");
  Tensor<T> C = A;
  for (std::size_t i = 0; i < C.numel(); ++i) C.data[i] *= B.data[i];
  return tape.record(std::move(C), {a, b}, [a, b](Tape<T>& t, std::size_t self) {
    const auto& G = t.upstream(self);
    if (t.needs_grad(a)) {
      auto& D = t.grad_buffer(a);
      const auto& Bv = t.value(b);
      for (std::size_t i = 0; i < G.numel(); ++i) D.data[i] += G.data[i] * Bv.data[i];
    }
    if (t.needs_grad(b)) {
      auto& D = t.grad_buffer(b);
      const auto& Av = t.value(a);
      for (std::size_t i = 0; i < G.numel(); ++i) D.data[i] += G.data[i] * Av.data[i];
    }
  });
}

template <typename T>
Var relu(Tape<T>& tape, Var a) {
  Tensor<T> C = tape.value(a);
  for (T& x : C.data) x = std::max(x, T(0));
  return tape.record(std::move(C), {a}, [a](Tape<T>& t, std::size_t self) {
    const auto& G = t.upstream(self);
    const auto& A = t.value(a);
    auto& D = t.grad_buffer(a);
    for (std::size_t i = 0; i < G.numel(); ++i)
      if (A.data[i] > T(0)) D.data[i] += G.data[i];
  });
}

template <typename T>
Var sigmoid(Tape<T>& tape, Var a) {
  Tensor<T> C = tape.value(a);
  for (T& x : C.data) x = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(x))));
  return tape.record(std::move(C), {a}, [a](Tape<T>& t, std::size_t self) {
    const auto& G = t.upstream(self);
    const auto& S = t.value(Var{self});
    auto& D = t.grad_buffer(a);
    for (std::size_t i = 0; i < G.numel(); ++i) D.data[i] += G.data[i] * S.data[i] * (T(1) - S.data[i]);
  });
}

/// Sum of all entries, as a 1-element tensor.
template <typename T>
Var sum(Tape<T>& tape, Var a) {
  const auto& A = tape.value(a);
  double s = 0.0;
  for (T x : A.data) s += x;
  return tape.record(Tensor<T>::scalar(static_cast<T>(s)), {a}, [a](Tape<T>& t, std::size_t self) {
    const T g = t.upstream(self).data[0];
    auto& D = t.grad_buffer(a);
    for (T& x : D.data) x += g;
  });
}

/// Each row x -> x / max(||x||, eps).
template <typename T>
Var row_l2_normalize(Tape<T>& tape, Var a, double eps = 1e-8) {
  const auto& A = tape.value(a);
  detail::require_matrix(A, "row_l2_normalize");
  Tensor<T> C = A;
  std::vector<double> norms(A.rows());
  for (std::size_t i = 0; i < A.rows(); ++i) {
    double s = 0.0;
    for (T x : A.row(i)) s += static_cast<double>(x) * x;
    norms[i] = std::max(std::sqrt(s), eps);
    for (T& x : C.row(i)) x = static_cast<T>(x / norms[i]);
  }
  return tape.record(std::move(C), {a}, [a, norms = std::move(norms), eps](Tape<T>& t, std::size_t self) {
    const auto& G = t.upstream(self);
    const auto& Y = t.value(Var{self});
    auto& D = t.grad_buffer(a);
    for (std::size_t i = 0; i < G.rows(); ++i) {
      const auto g = G.row(i);
      const auto y = Y.row(i);
      auto d = D.row(i);
      if (norms[i] <= eps) {
        for (std::size_t j = 0; j < g.size(); ++j) d[j] += static_cast<T>(g[j] / eps);
        continue;
      }
      double yg = 0.0;
      for (std::size_t j = 0; j < g.size(); ++j) yg += static_cast<double>(y[j]) * g[j];
      for (std::size_t j = 0; j < g.size(); ++j) d[j] += static_cast<T>((g[j] - y[j] * yg) / norms[i]);
    }
  });
}

/// Rows of `table` selected by token id.
template <typename T>
Var embedding_lookup(Tape<T>& tape, Var table, std::span<const std::uint32_t> tokens) {
  const auto& E = tape.value(table);
  detail::require_matrix(E, "embedding_lookup");
  const std::size_t dim = E.cols();
  auto C = Tensor<T>::matrix(tokens.size(), dim);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    require(tokens[t] < E.rows(), ErrorCode::InvalidToken,
            "token " + std::to_string(tokens[t]) + " outside vocabulary of " + std::to_string(E.rows()));
    std::copy_n(E.row(tokens[t]).begin(), dim, C.row(t).begin());
  }
  std::vector<std::uint32_t> ids(tokens.begin(), tokens.end());
  return tape.record(std::move(C), {table}, [table, ids = std::move(ids)](Tape<T>& t, std::size_t self) {
    const auto& G = t.upstream(self);
    auto& D = t.grad_buffer(table);
    for (std::size_t r = 0; r < ids.size(); ++r) {
      auto d = D.row(ids[r]);
      const auto g = G.row(r);
      for (std::size_t j = 0; j < g.size(); ++j) d[j] += g[j];
    }
  });
}

/// Side-by-side concatenation of matrices with equal row counts.
template <typename T>
Var concat_cols(Tape<T>& tape, const std::vector<Var>& parts) {
  require(!parts.empty(), ErrorCode::ShapeError, "concat_cols: nothing to concatenate");
  const std::size_t rows = tape.value(parts[0]).rows();
  std::size_t cols = 0;
  for (Var p : parts) {
    detail::require_matrix(tape.value(p), "concat_cols");
    require(tape.value(p).rows() == rows, ErrorCode::ShapeError, "concat_cols: row counts differ");
    cols += tape.value(p).cols();
  }
  auto C = Tensor<T>::matrix(rows, cols);
  std::size_t offset = 0;
  for (Var p : parts) {
    const auto& P = tape.value(p);
    for (std::size_t i = 0; i < rows; ++i) std::copy_n(P.row(i).begin(), P.cols(), C.row(i).begin() + offset);
    offset += P.cols();
  }
  return tape.record(std::move(C), parts, [parts](Tape<T>& t, std::size_t self) {
    const auto& G = t.upstream(self);
    std::size_t off = 0;
    for (Var p : parts) {
      const std::size_t pc = t.value(p).cols();
      if (t.needs_grad(p)) {
        auto& D = t.grad_buffer(p);
        for (std::size_t i = 0; i < G.rows(); ++i)
          for (std::size_t j = 0; j < pc; ++j) D.at(i, j) += G.at(i, off + j);
      }
      off += pc;
    }
  });
}

/// Leaky running sum over rows: y_0 = x_0, y_t = x_t + lambda y_{t-1}.
template <typename T>
Var leaky_accumulate(Tape<T>& tape, Var x, Var lambda) {
  const auto& X = tape.value(x);
  detail::require_matrix(X, "leaky_accumulate");
  require(tape.value(lambda).numel() == 1, ErrorCode::ShapeError, "leaky_accumulate: lambda must be scalar");
  const double lam = tape.value(lambda).data[0];
  Tensor<T> Y = X;
  for (std::size_t t = 1; t < X.rows(); ++t) {
    auto y = Y.row(t);
    const auto prev = Y.row(t - 1);
    for (std::size_t j = 0; j < y.size(); ++j) y[j] = static_cast<T>(y[j] + lam * prev[j]);
  }
  return tape.record(std::move(Y), {x, lambda}, [x, lambda, lam](Tape<T>& t, std::size_t self) {
    const auto& G = t.upstream(self);
    const auto& Yv = t.value(Var{self});
    const std::size_t rows = G.rows(), cols = G.cols();
    std::vector<double> adj(cols, 0.0);
    double dlam = 0.0;
    Tensor<T>* dx = t.needs_grad(x) ? &t.grad_buffer(x) : nullptr;
    for (std::size_t r = rows; r-- > 0;) {
      for (std::size_t j = 0; j < cols; ++j) adj[j] = G.at(r, j) + lam * adj[j];
      if (dx)
        for (std::size_t j = 0; j < cols; ++j) dx->at(r, j) += static_cast<T>(adj[j]);
      if (r > 0)
        for (std::size_t j = 0; j < cols; ++j) dlam += adj[j] * Yv.at(r - 1, j);
    }
    if (t.needs_grad(lambda)) t.grad_buffer(lambda).data[0] += static_cast<T>(dlam);
  });
}

/// One-step look-ahead mix: y_t = x_t + lambda x_{t+1}, last row unchanged.
template <typename T>
Var lookahead(Tape<T>& tape, Var x, Var lambda) {
  const auto& X = tape.value(x);
  detail::require_matrix(X, "lookahead");
  require(tape.value(lambda).numel() == 1, ErrorCode::ShapeError, "lookahead: lambda must be scalar");
  const double lam = tape.value(lambda).data[0];
  Tensor<T> Y = X;
  for (std::size_t t = 0; t + 1 < X.rows(); ++t) {
    auto y = Y.row(t);
    const auto next = X.row(t + 1);
    for (std::size_t j = 0; j < y.size(); ++j) y[j] = static_cast<T>(y[j] + lam * next[j]);
  }
  return tape.record(std::move(Y), {x, lambda}, [x, lambda, lam](Tape<T>& t, std::size_t self) {
    const auto& G = t.upstream(self);
    const auto& Xv = t.value(x);
    const std::size_t rows = G.rows(), cols = G.cols();
    if (t.needs_grad(x)) {
      auto& D = t.grad_buffer(x);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < cols; ++j) {
          D.at(r, j) += G.at(r, j);
          if (r + 1 < rows) D.at(r + 1, j) += static_cast<T>(lam * G.at(r, j));
        }
    }
    if (t.needs_grad(lambda)) {
      double dlam = 0.0;
      for (std::size_t r = 0; r + 1 < rows; ++r)
        for (std::size_t j = 0; j < cols; ++j) dlam += static_cast<double>(G.at(r, j)) * Xv.at(r + 1, j);
      t.grad_buffer(lambda).data[0] += static_cast<T>(dlam);
    }
  });
}

namespace detail {

/// Rows with fewer than k visible entries keep all of them.
inline TransformSpec clamp_k(TransformSpec spec, std::size_t visible) {
  spec.k = std::min(spec.k, visible);
  return spec;
}

}  // namespace detail

/// Applies an attention transform to every row of a score matrix. Under
/// StrictlyCausal row t only sees columns [0, t); row 0 is then all zeros.
/// The backward pass is the transform's vector-Jacobian product per row.
template <typename T>
Var transform_apply(Tape<T>& tape, Var scores, const TransformSpec& spec, MaskMode mode) {
  const auto& S = tape.value(scores);
  detail::require_matrix(S, "transform_apply");
  spec.validate();
  const std::size_t rows = S.rows(), cols = S.cols();
  auto P = Tensor<T>::matrix(rows, cols);
  std::vector<double> z;
  std::uint64_t sig = tape.support_signature;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t limit = mode == MaskMode::StrictlyCausal ? std::min(r, cols) : cols;
    if (limit == 0) continue;
    z.assign(S.row(r).begin(), S.row(r).begin() + static_cast<std::ptrdiff_t>(limit));
    const auto w = skam::apply_transform(detail::clamp_k(spec, limit), z);
    for (std::size_t j = 0; j < limit; ++j) P.at(r, j) = static_cast<T>(w.weights[j]);
    for (std::size_t j : w.support) sig = (sig ^ (j + 1)) * 0x100000001B3ULL;
    sig = (sig ^ 0xFF) * 0x100000001B3ULL;
  }
  tape.support_signature = sig;
  return tape.record(std::move(P), {scores}, [scores, spec, mode](Tape<T>& t, std::size_t self) {
    const auto& G = t.upstream(self);
    const auto& Sv = t.value(scores);
    auto& D = t.grad_buffer(scores);
    std::vector<double> z, u;
    for (std::size_t r = 0; r < G.rows(); ++r) {
      const std::size_t limit = mode == MaskMode::StrictlyCausal ? std::min(r, G.cols()) : G.cols();
      if (limit == 0) continue;
      z.assign(Sv.row(r).begin(), Sv.row(r).begin() + static_cast<std::ptrdiff_t>(limit));
      u.assign(G.row(r).begin(), G.row(r).begin() + static_cast<std::ptrdiff_t>(limit));
      const auto g = transform_vjp(detail::clamp_k(spec, limit), z, u);
      for (std::size_t j = 0; j < limit; ++j) D.at(r, j) += static_cast<T>(g[j]);
    }
  });
}

/// Sum over rows with mask = 1 of -log softmax(logits_t)[target_t], divided by
/// `normalizer` (the masked row count when normalizer <= 0).
template <typename T>
Var masked_cross_entropy(Tape<T>& tape, Var logits, std::span<const std::uint32_t> targets,
                         std::span<const std::uint8_t> mask, double normalizer = 0.0) {
  const auto& L = tape.value(logits);
  detail::require_matrix(L, "masked_cross_entropy");
  require(targets.size() == L.rows() && mask.size() == L.rows(), ErrorCode::ShapeError,
          "masked_cross_entropy: targets/mask length differs from logits rows");
  if (normalizer <= 0.0) {
    normalizer = 0.0;
    for (auto m : mask) normalizer += m ? 1.0 : 0.0;
  }
  require(normalizer > 0.0, ErrorCode::InvalidLoss, "masked_cross_entropy: empty mask");
  const std::size_t vocab = L.cols();
  auto probs = Tensor<T>::matrix(L.rows(), vocab);
  double loss = 0.0;
  for (std::size_t r = 0; r < L.rows(); ++r) {
    if (!mask[r]) continue;
    require(targets[r] < vocab, ErrorCode::InvalidToken, "target id outside vocabulary");
    const auto row = L.row(r);
    const double m = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (T x : row) z += std::exp(static_cast<double>(x) - m);
    const double lse = m + std::log(z);
    loss += lse - row[targets[r]];
    for (std::size_t j = 0; j < vocab; ++j) probs.at(r, j) = static_cast<T>(std::exp(row[j] - lse));
  }
  std::vector<std::uint32_t> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  return tape.record(Tensor<T>::scalar(static_cast<T>(loss / normalizer)), {logits},
                     [logits, probs = std::move(probs), tgt = std::move(tgt), msk = std::move(msk),
                      normalizer](Tape<T>& t, std::size_t self) {
                       const double g = t.upstream(self).data[0] / normalizer;
                       auto& D = t.grad_buffer(logits);
                       for (std::size_t r = 0; r < msk.size(); ++r) {
                         if (!msk[r]) continue;
                         auto d = D.row(r);
                         const auto p = probs.row(r);
                         for (std::size_t j = 0; j < d.size(); ++j) d[j] += static_cast<T>(g * p[j]);
                         d[tgt[r]] -= static_cast<T>(g);
                       }
                     });
}

}  // namespace ad

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;  // coordinates whose perturbation crossed a support boundary
};

/// Central-difference check of an analytic gradient.
///
/// `loss(params, signature)` evaluates the scalar objective in double and
/// stores the support signature of the evaluation (0 when it has none). A
/// coordinate is excluded when either perturbed evaluation lands on a
/// different support pattern, since the objective is not differentiable across
/// such a boundary. The relative error is |a - n| / max(|a|, |n|, floor).
template <typename LossFn>
GradCheckResult grad_check(LossFn&& loss, std::vector<Tensor<double>>& params,
                           const std::vector<Tensor<double>>& analytic, double eps, std::size_t coordinates,
                           std::uint64_t seed, double floor = 1e-7) {
  require(params.size() == analytic.size(), ErrorCode::ShapeError, "grad_check: gradient count mismatch");
  std::size_t total = 0;
  for (const auto& p : params) total += p.numel();
  require(total > 0, ErrorCode::ShapeError, "grad_check: no parameters");
  GradCheckResult result;
  std::uint64_t base_sig = 0;
  loss(params, base_sig);
  Rng rng(seed);
  for (std::size_t c = 0; c < coordinates; ++c) {
    std::size_t flat = rng.below(total);
    std::size_t which = 0;
    while (flat >= params[which].numel()) flat -= params[which++].numel();
    double& theta = params[which].data[flat];
    const double saved = theta;
    std::uint64_t sig_plus = 0, sig_minus = 0;
    theta = saved + eps;
    const double f_plus = loss(params, sig_plus);
    theta = saved - eps;
    const double f_minus = loss(params, sig_minus);
    theta = saved;
    if (sig_plus != base_sig || sig_minus != base_sig) {
      ++result.excluded;
      continue;
    }
    const double numeric = (f_plus - f_minus) / (2.0 * eps);
    const double a = analytic[which].data[flat];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
    result.max_rel_error = std::max(result.max_rel_error, rel);
    ++result.checked;
  }
  return result;
}

}  // namespace skam

// SPDX-License-Identifier: Apache-2.0
#pragma once

// Tape-based reverse-mode automatic differentiation over dense row-major
// tensors. The tape records one node per operation in execution order, which
// is already a topological order, so a single reverse sweep visits each node
// exactly once. Gradients for registered leaves are accumulated (+=) into the
// external tensor's `grad`, so two backward passes over two losses add up
// exactly like one backward pass over their sum.

#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "pemma/errors.hpp"
#include "pemma/tensor.hpp"

namespace pemma {

// Node handle; valid only for the tape that issued it.
using Id = int;

template <typename T>
class Tape {
 public:
  using Id = pemma::Id;

  // ---- graph construction -------------------------------------------------

  // External leaf; gradients land in t.grad after backward() if requested.
  Id leaf(Tensor<T>& t) {
    Node n;
    n.val = t;  // copy; desk scale keeps this cheap
    n.external = &t;
    n.needs_grad = t.requires_grad;
    return push(std::move(n));
  }

  // Tape-owned constant (no gradient).
  Id constant(Tensor<T> t) {
    Node n;
    n.val = std::move(t);
    return push(std::move(n));
  }

  Id add(Id a, Id b) { return ew(a, b, [](T x, T y) { return x + y; },
                                [](T, T, T g) { return std::pair<T, T>{g, g}; }); }
  Id sub(Id a, Id b) { return ew(a, b, [](T x, T y) { return x - y; },
                                [](T, T, T g) { return std::pair<T, T>{g, -g}; }); }
  Id mul(Id a, Id b) { return ew(a, b, [](T x, T y) { return x * y; },
                                [](T x, T y, T g) { return std::pair<T, T>{g * y, g * x}; }); }
  Id div(Id a, Id b) {
    return ew(a, b, [](T x, T y) { return x / y; },
              [](T x, T y, T g) { return std::pair<T, T>{g / y, -g * x / (y * y)}; });
  }

  Id scale(Id a, T c) {
    return unary(a, [c](T x) { return c * x; }, [c](T, T, T g) { return c * g; });
  }
  Id add_scalar(Id a, T c) {
    return unary(a, [c](T x) { return x + c; }, [](T, T, T g) { return g; });
  }
  Id neg(Id a) { return scale(a, T(-1)); }

  Id log(Id a) {
    return unary(a, [](T x) { return std::log(x); }, [](T x, T, T g) { return g / x; });
  }
  Id exp(Id a) {
    return unary(a, [](T x) { return std::exp(x); }, [](T, T y, T g) { return g * y; });
  }
  Id sqrt(Id a) {
    return unary(a, [](T x) { return std::sqrt(x); },
                 [](T, T y, T g) { return g / (T(2) * y); });
  }
  Id relu(Id a) {
    return unary(a, [](T x) { return x > T(0) ? x : T(0); },
                 [](T x, T, T g) { return x > T(0) ? g : T(0); });
  }
  Id gelu(Id a) {
    static constexpr double kInvSqrt2 = 0.7071067811865475244;
    static constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    return unary(a,
                 [](T x) {
                   return T(0.5) * x * (T(1) + static_cast<T>(std::erf(double(x) * kInvSqrt2)));
                 },
                 [](T x, T, T g) {
                   double cdf = 0.5 * (1.0 + std::erf(double(x) * kInvSqrt2));
                   double pdf = kInvSqrt2Pi * std::exp(-0.5 * double(x) * double(x));
                   return g * static_cast<T>(cdf + double(x) * pdf);
                 });
  }
  Id clamp_min(Id a, T floor) {
    return unary(a, [floor](T x) { return x < floor ? floor : x; },
                 [floor](T x, T, T g) { return x < floor ? T(0) : g; });
  }

  Id matmul(Id a, Id b) {
    const Tensor<T>& A = val(a);
    const Tensor<T>& B = val(b);
    if (A.ndim() > 2 || B.ndim() > 2 || A.cols() != B.rows())
      throw ConfigError("matmul: incompatible shapes " + shape_to_string(A.shape) + " x " +
                        shape_to_string(B.shape));
    const int m = A.rows(), k = A.cols(), n = B.cols();
    Node node;
    node.val = Tensor<T>({m, n});
    const T* pa = A.data.data();
    const T* pb = B.data.data();
    T* pc = node.val.data.data();
    for (int i = 0; i < m; ++i)
      for (int p = 0; p < k; ++p) {
        const T aik = pa[size_t(i) * k + p];
        if (aik == T(0)) continue;
        const T* brow = pb + size_t(p) * n;
        T* crow = pc + size_t(i) * n;
        for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
      }
    node.inputs = {a, b};
    node.back = [a, b, m, k, n](Tape& t, const Node& self) {
      const T* g = self.grad.data();
      const T* pa2 = t.val(a).data.data();
      const T* pb2 = t.val(b).data.data();
      if (t.node(a).needs_grad) {
        T* ga = t.node(a).grad.data();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) {
            const T gij = g[size_t(i) * n + j];
            if (gij == T(0)) continue;
            for (int p = 0; p < k; ++p) ga[size_t(i) * k + p] += gij * pb2[size_t(p) * n + j];
          }
      }
      if (t.node(b).needs_grad) {
        T* gb = t.node(b).grad.data();
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            const T aip = pa2[size_t(i) * k + p];
            if (aip == T(0)) continue;
            const T* grow = g + size_t(i) * n;
            T* brow = gb + size_t(p) * n;
            for (int j = 0; j < n; ++j) brow[j] += aip * grow[j];
          }
      }
    };
    return push_op(std::move(node));
  }

  Id transpose(Id a) {
    const Tensor<T>& A = val(a);
    const int m = A.rows(), n = A.cols();
    Node node;
    node.val = Tensor<T>({n, m});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) node.val.data[size_t(j) * m + i] = A.data[size_t(i) * n + j];
    node.inputs = {a};
    node.back = [a, m, n](Tape& t, const Node& self) {
      if (!t.node(a).needs_grad) return;
      T* ga = t.node(a).grad.data();
      const T* g = self.grad.data();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ga[size_t(i) * n + j] += g[size_t(j) * m + i];
    };
    return push_op(std::move(node));
  }

  Id reshape(Id a, std::vector<int> shape) {
    const Tensor<T>& A = val(a);
    Tensor<T> out(shape);
    if (out.numel() != A.numel())
      throw ConfigError("reshape: element count mismatch " + shape_to_string(A.shape) + " -> " +
                        shape_to_string(shape));
    out.data = A.data;
    Node node;
    node.val = std::move(out);
    node.inputs = {a};
    node.back = [a](Tape& t, const Node& self) {
      if (!t.node(a).needs_grad) return;
      T* ga = t.node(a).grad.data();
      for (size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
    };
    return push_op(std::move(node));
  }

  Id slice_rows(Id a, int r0, int r1) {
    const Tensor<T>& A = val(a);
    const int n = A.cols();
    if (r0 < 0 || r1 > A.rows() || r0 >= r1) throw ConfigError("slice_rows: bad range");
    Node node;
    node.val = Tensor<T>({r1 - r0, n});
    std::copy(A.data.begin() + size_t(r0) * n, A.data.begin() + size_t(r1) * n,
              node.val.data.begin());
    node.inputs = {a};
    node.back = [a, r0, n](Tape& t, const Node& self) {
      if (!t.node(a).needs_grad) return;
      T* ga = t.node(a).grad.data() + size_t(r0) * n;
      for (size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
    };
    return push_op(std::move(node));
  }

  Id slice_cols(Id a, int c0, int c1) {
    const Tensor<T>& A = val(a);
    const int m = A.rows(), n = A.cols(), w = c1 - c0;
    if (c0 < 0 || c1 > n || w <= 0) throw ConfigError("slice_cols: bad range");
    Node node;
    node.val = Tensor<T>({m, w});
    for (int i = 0; i < m; ++i)
      std::copy(A.data.begin() + size_t(i) * n + c0, A.data.begin() + size_t(i) * n + c1,
                node.val.data.begin() + size_t(i) * w);
    node.inputs = {a};
    node.back = [a, c0, n, w](Tape& t, const Node& self) {
      if (!t.node(a).needs_grad) return;
      T* ga = t.node(a).grad.data();
      const int m2 = t.node(a).val.rows();
      for (int i = 0; i < m2; ++i)
        for (int j = 0; j < w; ++j)
          ga[size_t(i) * n + c0 + j] += self.grad[size_t(i) * w + j];
    };
    return push_op(std::move(node));
  }

  Id concat_rows(Id a, Id b) {
    const Tensor<T>& A = val(a);
    const Tensor<T>& B = val(b);
    if (A.cols() != B.cols()) throw ConfigError("concat_rows: column mismatch");
    const int ma = A.rows(), mb = B.rows(), n = A.cols();
    Node node;
    node.val = Tensor<T>({ma + mb, n});
    std::copy(A.data.begin(), A.data.end(), node.val.data.begin());
    std::copy(B.data.begin(), B.data.end(), node.val.data.begin() + size_t(ma) * n);
    node.inputs = {a, b};
    node.back = [a, b, ma, mb, n](Tape& t, const Node& self) {
      if (t.node(a).needs_grad) {
        T* ga = t.node(a).grad.data();
        for (size_t i = 0; i < size_t(ma) * n; ++i) ga[i] += self.grad[i];
      }
      if (t.node(b).needs_grad) {
        T* gb = t.node(b).grad.data();
        for (size_t i = 0; i < size_t(mb) * n; ++i) gb[i] += self.grad[size_t(ma) * n + i];
      }
    };
    return push_op(std::move(node));
  }

  Id concat_cols(Id a, Id b) {
    const Tensor<T>& A = val(a);
    const Tensor<T>& B = val(b);
    if (A.rows() != B.rows()) throw ConfigError("concat_cols: row mismatch");
    const int m = A.rows(), na = A.cols(), nb = B.cols();
    Node node;
    node.val = Tensor<T>({m, na + nb});
    for (int i = 0; i < m; ++i) {
      std::copy(A.data.begin() + size_t(i) * na, A.data.begin() + size_t(i + 1) * na,
                node.val.data.begin() + size_t(i) * (na + nb));
      std::copy(B.data.begin() + size_t(i) * nb, B.data.begin() + size_t(i + 1) * nb,
                node.val.data.begin() + size_t(i) * (na + nb) + na);
    }
    node.inputs = {a, b};
    node.back = [a, b, m, na, nb](Tape& t, const Node& self) {
      for (int i = 0; i < m; ++i) {
        if (t.node(a).needs_grad) {
          T* ga = t.node(a).grad.data();
          for (int j = 0; j < na; ++j)
            ga[size_t(i) * na + j] += self.grad[size_t(i) * (na + nb) + j];
        }
        if (t.node(b).needs_grad) {
          T* gb = t.node(b).grad.data();
          for (int j = 0; j < nb; ++j)
            gb[size_t(i) * nb + j] += self.grad[size_t(i) * (na + nb) + na + j];
        }
      }
    };
    return push_op(std::move(node));
  }

  // Row gather; duplicates allowed. Gradient scatter-adds.
  Id select_rows(Id a, std::vector<int> rows) {
    const Tensor<T>& A = val(a);
    const int n = A.cols();
    for (int r : rows)
      if (r < 0 || r >= A.rows()) throw ConfigError("select_rows: index out of range");
    Node node;
    node.val = Tensor<T>({static_cast<int>(rows.size()), n});
    for (size_t i = 0; i < rows.size(); ++i)
      std::copy(A.data.begin() + size_t(rows[i]) * n, A.data.begin() + size_t(rows[i] + 1) * n,
                node.val.data.begin() + i * n);
    node.inputs = {a};
    node.back = [a, rows, n](Tape& t, const Node& self) {
      if (!t.node(a).needs_grad) return;
      T* ga = t.node(a).grad.data();
      for (size_t i = 0; i < rows.size(); ++i)
        for (int j = 0; j < n; ++j)
          ga[size_t(rows[i]) * n + j] += self.grad[i * n + j];
    };
    return push_op(std::move(node));
  }

  // Element gather at (rows[i], cols[i]) -> column vector {P, 1}.
  Id gather(Id a, std::vector<int> rows, std::vector<int> cols) {
    const Tensor<T>& A = val(a);
    if (rows.size() != cols.size()) throw ConfigError("gather: index length mismatch");
    const int n = A.cols();
    Node node;
    node.val = Tensor<T>({static_cast<int>(rows.size()), 1});
    for (size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] < 0 || rows[i] >= A.rows() || cols[i] < 0 || cols[i] >= n)
        throw ConfigError("gather: index out of range");
      node.val.data[i] = A.data[size_t(rows[i]) * n + cols[i]];
    }
    node.inputs = {a};
    node.back = [a, rows, cols, n](Tape& t, const Node& self) {
      if (!t.node(a).needs_grad) return;
      T* ga = t.node(a).grad.data();
      for (size_t i = 0; i < rows.size(); ++i)
        ga[size_t(rows[i]) * n + cols[i]] += self.grad[i];
    };
    return push_op(std::move(node));
  }

  Id sum(Id a) {
    const Tensor<T>& A = val(a);
    Node node;
    node.val = Tensor<T>({1});
    T s = T(0);
    for (T v : A.data) s += v;
    node.val.data[0] = s;
    node.inputs = {a};
    node.back = [a](Tape& t, const Node& self) {
      if (!t.node(a).needs_grad) return;
      T* ga = t.node(a).grad.data();
      const T g = self.grad[0];
      for (size_t i = 0; i < t.node(a).grad.size(); ++i) ga[i] += g;
    };
    return push_op(std::move(node));
  }

  Id mean(Id a) { return scale(sum(a), T(1) / static_cast<T>(val(a).numel())); }

  // Sum over columns of each row: (m x n) -> (m x 1).
  Id sum_rows(Id a) {
    const Tensor<T>& A = val(a);
    const int m = A.rows(), n = A.cols();
    Node node;
    node.val = Tensor<T>({m, 1});
    for (int i = 0; i < m; ++i) {
      T s = T(0);
      for (int j = 0; j < n; ++j) s += A.data[size_t(i) * n + j];
      node.val.data[i] = s;
    }
    node.inputs = {a};
    node.back = [a, m, n](Tape& t, const Node& self) {
      if (!t.node(a).needs_grad) return;
      T* ga = t.node(a).grad.data();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ga[size_t(i) * n + j] += self.grad[i];
    };
    return push_op(std::move(node));
  }

  // Sum over rows of each column: (m x n) -> (1 x n).
  Id sum_cols(Id a) {
    const Tensor<T>& A = val(a);
    const int m = A.rows(), n = A.cols();
    Node node;
    node.val = Tensor<T>({1, n});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) node.val.data[j] += A.data[size_t(i) * n + j];
    node.inputs = {a};
    node.back = [a, m, n](Tape& t, const Node& self) {
      if (!t.node(a).needs_grad) return;
      T* ga = t.node(a).grad.data();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ga[size_t(i) * n + j] += self.grad[j];
    };
    return push_op(std::move(node));
  }

  Id broadcast_rows(Id row, int m) {
    const Tensor<T>& R = val(row);
    if (R.rows() != 1) throw ConfigError("broadcast_rows: expected a single row");
    const int n = R.cols();
    Node node;
    node.val = Tensor<T>({m, n});
    for (int i = 0; i < m; ++i)
      std::copy(R.data.begin(), R.data.end(), node.val.data.begin() + size_t(i) * n);
    node.inputs = {row};
    node.back = [row, m, n](Tape& t, const Node& self) {
      if (!t.node(row).needs_grad) return;
      T* gr = t.node(row).grad.data();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) gr[j] += self.grad[size_t(i) * n + j];
    };
    return push_op(std::move(node));
  }

  Id broadcast_cols(Id col, int n) {
    const Tensor<T>& C = val(col);
    if (C.cols() != 1) throw ConfigError("broadcast_cols: expected a single column");
    const int m = C.rows();
    Node node;
    node.val = Tensor<T>({m, n});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) node.val.data[size_t(i) * n + j] = C.data[i];
    node.inputs = {col};
    node.back = [col, m, n](Tape& t, const Node& self) {
      if (!t.node(col).needs_grad) return;
      T* gc = t.node(col).grad.data();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) gc[i] += self.grad[size_t(i) * n + j];
    };
    return push_op(std::move(node));
  }

  // Bias add: row vector broadcast over every row of a.
  Id add_rowvec(Id a, Id row) {
    const Tensor<T>& A = val(a);
    return add(a, broadcast_rows(row, A.rows()));
  }

  // Numerically stable softmax along `axis` (rank-1: axis 0; rank-2: 0 or 1).
  Id softmax(Id a, int axis) {
    const Tensor<T>& A = val(a);
    if (A.ndim() == 1) {
      if (axis != 0) throw ConfigError("softmax: axis out of range for rank-1 tensor");
      return softmax_rows(a);
    }
    if (A.ndim() != 2) throw ConfigError("softmax: rank-2 tensor expected");
    if (axis == 1) return softmax_rows(a);
    if (axis == 0) return transpose(softmax_rows(transpose(a)));
    throw ConfigError("softmax: axis out of range");
  }

  Id softmax_rows(Id a) {
    const Tensor<T>& A = val(a);
    const int m = A.rows(), n = A.cols();
    Node node;
    node.val = Tensor<T>({m, n});
    if (A.ndim() == 1) node.val = Tensor<T>({n});
    for (int i = 0; i < m; ++i) {
      const T* x = A.data.data() + size_t(i) * n;
      T* y = node.val.data.data() + size_t(i) * n;
      T mx = x[0];
      for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
      T s = T(0);
      for (int j = 0; j < n; ++j) {
        y[j] = std::exp(x[j] - mx);
        s += y[j];
      }
      for (int j = 0; j < n; ++j) y[j] /= s;
    }
    node.inputs = {a};
    node.back = [a, m, n](Tape& t, const Node& self) {
      if (!t.node(a).needs_grad) return;
      T* ga = t.node(a).grad.data();
      for (int i = 0; i < m; ++i) {
        const T* y = self.val.data.data() + size_t(i) * n;
        const T* g = self.grad.data() + size_t(i) * n;
        T dot = T(0);
        for (int j = 0; j < n; ++j) dot += y[j] * g[j];
        for (int j = 0; j < n; ++j) ga[size_t(i) * n + j] += y[j] * (g[j] - dot);
      }
    };
    return push_op(std::move(node));
  }

  // log(sum(exp(row))) per row: (m x n) -> (m x 1). Stable via row max.
  Id logsumexp_rows(Id a) {
    const Tensor<T>& A = val(a);
    const int m = A.rows(), n = A.cols();
    Node node;
    node.val = Tensor<T>({m, 1});
    for (int i = 0; i < m; ++i) {
      const T* x = A.data.data() + size_t(i) * n;
      T mx = x[0];
      for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
      T s = T(0);
      for (int j = 0; j < n; ++j) s += std::exp(x[j] - mx);
      node.val.data[i] = mx + std::log(s);
    }
    node.inputs = {a};
    node.back = [a, m, n](Tape& t, const Node& self) {
      if (!t.node(a).needs_grad) return;
      const Tensor<T>& A2 = t.val(a);
      T* ga = t.node(a).grad.data();
      for (int i = 0; i < m; ++i) {
        const T lse = self.val.data[i];
        const T g = self.grad[i];
        for (int j = 0; j < n; ++j)
          ga[size_t(i) * n + j] += g * std::exp(A2.data[size_t(i) * n + j] - lse);
      }
    };
    return push_op(std::move(node));
  }

  // Row-wise layer normalisation with learned gain/offset.
  Id layer_norm(Id x, Id gamma, Id beta, T eps) {
    const Tensor<T>& X = val(x);
    const int m = X.rows(), n = X.cols();
    if (val(gamma).numel() != n || val(beta).numel() != n)
      throw ConfigError("layer_norm: gain/offset length mismatch");
    Node node;
    node.val = Tensor<T>(X.shape);
    const T* gam = val(gamma).data.data();
    const T* bet = val(beta).data.data();
    for (int i = 0; i < m; ++i) {
      const T* px = X.data.data() + size_t(i) * n;
      T* py = node.val.data.data() + size_t(i) * n;
      T mu = T(0);
      for (int j = 0; j < n; ++j) mu += px[j];
      mu /= static_cast<T>(n);
      T var = T(0);
      for (int j = 0; j < n; ++j) var += (px[j] - mu) * (px[j] - mu);
      var /= static_cast<T>(n);
      const T inv = T(1) / std::sqrt(var + eps);
      for (int j = 0; j < n; ++j) py[j] = gam[j] * ((px[j] - mu) * inv) + bet[j];
    }
    node.inputs = {x, gamma, beta};
    node.back = [x, gamma, beta, eps, m, n](Tape& t, const Node& self) {
      const Tensor<T>& X2 = t.val(x);
      const T* gam = t.val(gamma).data.data();
      for (int i = 0; i < m; ++i) {
        const T* px = X2.data.data() + size_t(i) * n;
        const T* g = self.grad.data() + size_t(i) * n;
        T mu = T(0);
        for (int j = 0; j < n; ++j) mu += px[j];
        mu /= static_cast<T>(n);
        T var = T(0);
        for (int j = 0; j < n; ++j) var += (px[j] - mu) * (px[j] - mu);
        var /= static_cast<T>(n);
        const T inv = T(1) / std::sqrt(var + eps);
        // xhat_j and the two row means reused by the input gradient
        T mean_gh = T(0), mean_ghx = T(0);
        for (int j = 0; j < n; ++j) {
          const T xh = (px[j] - mu) * inv;
          const T gh = g[j] * gam[j];
          mean_gh += gh;
          mean_ghx += gh * xh;
        }
        mean_gh /= static_cast<T>(n);
        mean_ghx /= static_cast<T>(n);
        if (t.node(x).needs_grad) {
          T* gx = t.node(x).grad.data() + size_t(i) * n;
          for (int j = 0; j < n; ++j) {
            const T xh = (px[j] - mu) * inv;
            const T gh = g[j] * gam[j];
            gx[j] += inv * (gh - mean_gh - xh * mean_ghx);
          }
        }
        if (t.node(gamma).needs_grad) {
          T* gg = t.node(gamma).grad.data();
          for (int j = 0; j < n; ++j) gg[j] += g[j] * ((px[j] - mu) * inv);
        }
        if (t.node(beta).needs_grad) {
          T* gb = t.node(beta).grad.data();
          for (int j = 0; j < n; ++j) gb[j] += g[j];
        }
      }
    };
    return push_op(std::move(node));
  }

  // Arbitrary element gather: out.data[k] = in.data[map[k]]. Covers layout
  // rearrangements (patchify, nearest-neighbour upsampling) with an exact
  // scatter-add gradient. Duplicate source indices are allowed.
  Id reindex(Id a, std::shared_ptr<const std::vector<size_t>> map, std::vector<int> out_shape) {
    const Tensor<T>& A = val(a);
    Node node;
    node.val = Tensor<T>(std::move(out_shape));
    if (node.val.numel() != static_cast<long long>(map->size()))
      throw ConfigError("reindex: map size does not match output shape");
    const size_t limit = A.data.size();
    for (size_t k = 0; k < map->size(); ++k) {
      const size_t src = (*map)[k];
      if (src >= limit) throw ConfigError("reindex: source index out of range");
      node.val.data[k] = A.data[src];
    }
    node.inputs = {a};
    node.back = [a, map](Tape& t, const Node& self) {
      if (!t.node(a).needs_grad) return;
      T* ga = t.node(a).grad.data();
      for (size_t k = 0; k < map->size(); ++k) ga[(*map)[k]] += self.grad[k];
    };
    return push_op(std::move(node));
  }

  // Per-row running prefix sum; gradient is the reversed prefix sum.
  Id cumsum_rows(Id a) {
    const Tensor<T>& A = val(a);
    const int m = A.rows(), n = A.cols();
    Node node;
    node.val = Tensor<T>(A.shape);
    for (int i = 0; i < m; ++i) {
      T s = T(0);
      for (int j = 0; j < n; ++j) {
        s += A.data[size_t(i) * n + j];
        node.val.data[size_t(i) * n + j] = s;
      }
    }
    node.inputs = {a};
    node.back = [a, m, n](Tape& t, const Node& self) {
      if (!t.node(a).needs_grad) return;
      T* ga = t.node(a).grad.data();
      for (int i = 0; i < m; ++i) {
        T s = T(0);
        for (int j = n - 1; j >= 0; --j) {
          s += self.grad[size_t(i) * n + j];
          ga[size_t(i) * n + j] += s;
        }
      }
    };
    return push_op(std::move(node));
  }

  // ---- execution -----------------------------------------------------------

  const Tensor<T>& val(Id id) const { return check(id).val; }

  const std::vector<T>& grad_of(Id id) const { return check(id).grad; }

  void backward(Id loss) {
    const Node& ln = check(loss);
    if (ln.val.numel() != 1) throw ConfigError("backward: loss must be a scalar");
    if (backward_done_) throw ConfigError("backward: tape already differentiated");
    backward_done_ = true;
    nodes_[loss].grad[0] = T(1);
    std::vector<char> reached(nodes_.size(), 0);
    reached[loss] = 1;
    for (Id i = loss; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!reached[i] || !n.needs_grad) continue;
      for (Id in : n.inputs) reached[in] = 1;
      if (n.back) n.back(*this, n);
    }
    for (Node& n : nodes_)
      if (n.external && n.external->requires_grad) {
        n.external->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) n.external->grad[i] += n.grad[i];
      }
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> val;
    std::vector<T> grad;
    Tensor<T>* external = nullptr;
    bool needs_grad = false;
    std::vector<Id> inputs;
    std::function<void(Tape&, const Node&)> back;
  };

  Node& node(Id id) { return nodes_[id]; }

  const Node& check(Id id) const {
    if (id < 0 || id >= static_cast<Id>(nodes_.size()))
      throw ConfigError("tape: id not on tape");
    return nodes_[id];
  }

  Id push(Node n) {
    n.grad.assign(n.val.data.size(), T(0));
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
  }

  Id push_op(Node n) {
    for (Id in : n.inputs)
      if (nodes_[in].needs_grad) n.needs_grad = true;
    return push(std::move(n));
  }

  template <typename F, typename B>
  Id unary(Id a, F fwd, B bwd) {
    const Tensor<T>& A = val(a);
    Node node;
    node.val = Tensor<T>(A.shape);
    for (size_t i = 0; i < A.data.size(); ++i) node.val.data[i] = fwd(A.data[i]);
    node.inputs = {a};
    node.back = [a, bwd](Tape& t, const Node& self) {
      if (!t.node(a).needs_grad) return;
      const Tensor<T>& A2 = t.val(a);
      T* ga = t.node(a).grad.data();
      for (size_t i = 0; i < A2.data.size(); ++i)
        ga[i] += bwd(A2.data[i], self.val.data[i], self.grad[i]);
    };
    return push_op(std::move(node));
  }

  template <typename F, typename B>
  Id ew(Id a, Id b, F fwd, B bwd) {
    const Tensor<T>& A = val(a);
    const Tensor<T>& B_ = val(b);
    if (A.shape != B_.shape)
      throw ConfigError("elementwise: shape mismatch " + shape_to_string(A.shape) + " vs " +
                        shape_to_string(B_.shape));
    Node node;
    node.val = Tensor<T>(A.shape);
    for (size_t i = 0; i < A.data.size(); ++i) node.val.data[i] = fwd(A.data[i], B_.data[i]);
    node.inputs = {a, b};
    node.back = [a, b, bwd](Tape& t, const Node& self) {
      const Tensor<T>& A2 = t.val(a);
      const Tensor<T>& B2 = t.val(b);
      const bool na = t.node(a).needs_grad, nb = t.node(b).needs_grad;
      T* ga = na ? t.node(a).grad.data() : nullptr;
      T* gb = nb ? t.node(b).grad.data() : nullptr;
      for (size_t i = 0; i < A2.data.size(); ++i) {
        auto [da, db] = bwd(A2.data[i], B2.data[i], self.grad[i]);
        if (na) ga[i] += da;
        if (nb) gb[i] += db;
      }
    };
    return push_op(std::move(node));
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// ---- gradient verification -------------------------------------------------

// Central-difference check of d(loss)/d(x) against the tape gradient.
// `build` must construct the loss from the given leaf id on the given tape.
// Returns the worst guarded relative error over all components. Throws
// NumericError if any evaluation produces a non-finite value.
template <typename T>
double finite_difference_check(
    const std::function<typename Tape<T>::Id(Tape<T>&, typename Tape<T>::Id)>& build,
    Tensor<T> x, T eps = T(1e-5)) {
  auto eval = [&](Tensor<T>& v) -> double {
    Tape<T> tape;
    v.requires_grad = false;
    auto loss = build(tape, tape.leaf(v));
    double out = static_cast<double>(tape.val(loss).data[0]);
    if (!std::isfinite(out)) throw NumericError("finite_difference_check: non-finite loss");
    return out;
  };

  Tensor<T> xa = x;
  xa.requires_grad = true;
  xa.zero_grad();
  Tape<T> tape;
  auto loss = build(tape, tape.leaf(xa));
  tape.backward(loss);
  for (T g : xa.grad)
    if (!std::isfinite(static_cast<double>(g)))
      throw NumericError("finite_difference_check: non-finite gradient");

  double worst = 0.0;
  Tensor<T> xp = x;
  for (size_t i = 0; i < x.data.size(); ++i) {
    const T keep = xp.data[i];
    xp.data[i] = keep + eps;
    const double up = eval(xp);
    xp.data[i] = keep - eps;
    const double dn = eval(xp);
    xp.data[i] = keep;
    const double numeric = (up - dn) / (2.0 * static_cast<double>(eps));
    const double analytic = static_cast<double>(xa.grad[i]);
    const double denom = std::max({std::fabs(numeric), std::fabs(analytic), 1e-3});
    worst = std::max(worst, std::fabs(numeric - analytic) / denom);
  }
  return worst;
}

// Same check for a loss over several persistent parameter tensors (e.g. a
// model). `build` must register the parameters as leaves itself and return
// the loss id. Gradients are read from the tensors' own grad buffers.
template <typename T>
double finite_difference_check_params(const std::function<typename Tape<T>::Id(Tape<T>&)>& build,
                                      const std::vector<Tensor<T>*>& params, T eps = T(1e-5)) {
  auto eval = [&]() -> double {
    Tape<T> tape;
    auto loss = build(tape);
    double out = static_cast<double>(tape.val(loss).data[0]);
    if (!std::isfinite(out)) throw NumericError("finite_difference_check: non-finite loss");
    return out;
  };

  for (Tensor<T>* p : params) {
    p->requires_grad = true;
    p->zero_grad();
  }
  {
    Tape<T> tape;
    auto loss = build(tape);
    tape.backward(loss);
  }

  double worst = 0.0;
  for (Tensor<T>* p : params) {
    for (size_t i = 0; i < p->data.size(); ++i) {
      const T keep = p->data[i];
      p->data[i] = keep + eps;
      const double up = eval();
      p->data[i] = keep - eps;
      const double dn = eval();
      p->data[i] = keep;
      const double numeric = (up - dn) / (2.0 * static_cast<double>(eps));
      const double analytic = static_cast<double>(p->grad[i]);
      const double denom = std::max({std::fabs(numeric), std::fabs(analytic), 1e-3});
      worst = std::max(worst, std::fabs(numeric - analytic) / denom);
    }
  }
  return worst;
}

}  // namespace pemma

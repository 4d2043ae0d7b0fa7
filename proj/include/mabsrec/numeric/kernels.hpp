#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mabsrec/error.hpp"
#include "mabsrec/numeric/rng.hpp"
#include "mabsrec/numeric/tape.hpp"
#include "mabsrec/numeric/tensor.hpp"

// Differentiable kernel vocabulary. Every kernel computes its forward value
// eagerly and records a backward rule on the tape of its first argument.

namespace mabsrec::numeric {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

inline ConstMap view(const Tensor& t) {
  return ConstMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
inline MutMap view(Tensor& t) {
  return MutMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

/// out += op(a) * op(b)
inline void gemm_acc(const Tensor& a, bool ta, const Tensor& b, bool tb, Tensor& out) {
  auto A = view(a);
  auto B = view(b);
  auto C = view(out);
  if (!ta && !tb) C.noalias() += A * B;
  else if (ta && !tb) C.noalias() += A.transpose() * B;
  else if (!ta && tb) C.noalias() += A * B.transpose();
  else C.noalias() += A.transpose() * B.transpose();
}

inline std::string dims(const Tensor& t) {
  return std::to_string(t.rows()) + "x" + std::to_string(t.cols());
}

inline Tape& tape_of(Var v) {
  if (!v.valid()) throw InvalidArgument("kernel called with an empty variable");
  return *v.tape();
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) throw ShapeError(std::string(op) + ": shape mismatch " + dims(a) + " vs " + dims(b));
}

}  // namespace detail

/// op(a) * op(b), where op transposes when the flag is set.
inline Var matmul(Var a, Var b, bool transpose_a = false, bool transpose_b = false) {
  Tape& tape = detail::tape_of(a);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const std::size_t m = transpose_a ? A.cols() : A.rows();
  const std::size_t k = transpose_a ? A.rows() : A.cols();
  const std::size_t k2 = transpose_b ? B.cols() : B.rows();
  const std::size_t n = transpose_b ? B.rows() : B.cols();
  if (k != k2) throw ShapeError("matmul: inner dimensions differ (" + detail::dims(A) + " * " + detail::dims(B) + ")");
  Tensor out = Tensor::matrix(m, n);
  detail::gemm_acc(A, transpose_a, B, transpose_b, out);
  return tape.record(std::move(out), {a, b}, [a, b, transpose_a, transpose_b](Tape& t, const Tensor& g) {
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    if (t.needs_grad(a)) {
      Tensor& ga = t.grad(a);
      if (!transpose_a) detail::gemm_acc(g, false, B, !transpose_b, ga);
      else detail::gemm_acc(B, transpose_b, g, true, ga);
    }
    if (t.needs_grad(b)) {
      Tensor& gb = t.grad(b);
      if (!transpose_b) detail::gemm_acc(A, !transpose_a, g, false, gb);
      else detail::gemm_acc(g, true, A, transpose_a, gb);
    }
  });
}

inline Var transpose(Var a) {
  Tape& tape = detail::tape_of(a);
  const Tensor& A = a.value();
  Tensor out = Tensor::matrix(A.cols(), A.rows());
  for (std::size_t r = 0; r < A.rows(); ++r)
    for (std::size_t c = 0; c < A.cols(); ++c) out(c, r) = A(r, c);
  return tape.record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (std::size_t r = 0; r < ga.rows(); ++r)
      for (std::size_t c = 0; c < ga.cols(); ++c) ga(r, c) += g(c, r);
  });
}

inline Var add(Var a, Var b) {
  Tape& tape = detail::tape_of(a);
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out += b.value();
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.needs_grad(a)) t.grad(a) += g;
    if (t.needs_grad(b)) t.grad(b) += g;
  });
}

/// Adds a length-cols bias row to every row of `a`.
inline Var add_bias(Var a, Var bias) {
  Tape& tape = detail::tape_of(a);
  const Tensor& A = a.value();
  const Tensor& b = bias.value();
  if (b.size() != A.cols()) throw ShapeError("add_bias: bias of size " + std::to_string(b.size()) + " for " + detail::dims(A));
  Tensor out = A;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += b[c];
  return tape.record(std::move(out), {a, bias}, [a, bias](Tape& t, const Tensor& g) {
    if (t.needs_grad(a)) t.grad(a) += g;
    if (t.needs_grad(bias)) {
      Tensor& gb = t.grad(bias);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g(r, c);
    }
  });
}

inline Var scale(Var a, double factor) {
  Tape& tape = detail::tape_of(a);
  Tensor out = a.value();
  for (double& v : out.values()) v *= factor;
  return tape.record(std::move(out), {a}, [a, factor](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  Tape& tape = detail::tape_of(a);
  detail::require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    if (t.needs_grad(a)) {
      Tensor& ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    }
    if (t.needs_grad(b)) {
      Tensor& gb = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
    }
  });
}

/// Arithmetic mean of same-shaped inputs: (x_1 + ... + x_n) / n, summed left to right.
inline Var mean_of(const std::vector<Var>& xs) {
  if (xs.empty()) throw InvalidArgument("mean_of: no inputs");
  Tape& tape = detail::tape_of(xs.front());
  Tensor out = xs.front().value();
  for (std::size_t k = 1; k < xs.size(); ++k) {
    detail::require_same_shape(out, xs[k].value(), "mean_of");
    out += xs[k].value();
  }
  const double n = static_cast<double>(xs.size());
  for (double& v : out.values()) v /= n;
  return tape.record(std::move(out), xs, [xs, n](Tape& t, const Tensor& g) {
    for (const Var& x : xs) {
      if (!t.needs_grad(x)) continue;
      Tensor& gx = t.grad(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / n;
    }
  });
}

/// Multiplies row r of `a` by the constant mask[r].
inline Var mask_rows(Var a, std::vector<double> mask) {
  Tape& tape = detail::tape_of(a);
  const Tensor& A = a.value();
  if (mask.size() != A.rows()) throw ShapeError("mask_rows: mask length differs from row count");
  Tensor out = A;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (double& v : out.row(r)) v *= mask[r];
  return tape.record(std::move(out), {a}, [a, mask = std::move(mask)](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) += mask[r] * g(r, c);
  });
}

/// Scales row r of `a` (n x d) by s[r], where `s` is an n x 1 variable.
inline Var scale_rows(Var a, Var s) {
  Tape& tape = detail::tape_of(a);
  const Tensor& A = a.value();
  const Tensor& S = s.value();
  if (S.size() != A.rows()) throw ShapeError("scale_rows: " + detail::dims(S) + " scaling " + detail::dims(A));
  Tensor out = A;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (double& v : out.row(r)) v *= S[r];
  return tape.record(std::move(out), {a, s}, [a, s](Tape& t, const Tensor& g) {
    const Tensor& A = t.value(a);
    const Tensor& S = t.value(s);
    if (t.needs_grad(a)) {
      Tensor& ga = t.grad(a);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) += S[r] * g(r, c);
    }
    if (t.needs_grad(s)) {
      Tensor& gs = t.grad(s);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < g.cols(); ++c) acc += A(r, c) * g(r, c);
        gs[r] += acc;
      }
    }
  });
}

inline Var slice_cols(Var a, std::size_t start, std::size_t count) {
  Tape& tape = detail::tape_of(a);
  const Tensor& A = a.value();
  if (start + count > A.cols()) throw ShapeError("slice_cols: range exceeds " + detail::dims(A));
  Tensor out = Tensor::matrix(A.rows(), count);
  for (std::size_t r = 0; r < A.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = A(r, start + c);
  return tape.record(std::move(out), {a}, [a, start, count](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < count; ++c) ga(r, start + c) += g(r, c);
  });
}

inline Var slice_rows(Var a, std::size_t start, std::size_t count) {
  Tape& tape = detail::tape_of(a);
  const Tensor& A = a.value();
  if (start + count > A.rows()) throw ShapeError("slice_rows: range exceeds " + detail::dims(A));
  const std::size_t d = A.cols();
  Tensor out = Tensor::matrix(count, d);
  std::copy(A.data() + start * d, A.data() + (start + count) * d, out.data());
  return tape.record(std::move(out), {a}, [a, start, count, d](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < count * d; ++i) ga[start * d + i] += g[i];
  });
}

inline Var concat_cols(const std::vector<Var>& xs) {
  if (xs.empty()) throw InvalidArgument("concat_cols: no inputs");
  Tape& tape = detail::tape_of(xs.front());
  const std::size_t rows = xs.front().value().rows();
  std::size_t cols = 0;
  for (const Var& x : xs) {
    if (x.value().rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += x.value().cols();
  }
  Tensor out = Tensor::matrix(rows, cols);
  std::size_t offset = 0;
  for (const Var& x : xs) {
    const Tensor& X = x.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < X.cols(); ++c) out(r, offset + c) = X(r, c);
    offset += X.cols();
  }
  return tape.record(std::move(out), xs, [xs](Tape& t, const Tensor& g) {
    std::size_t offset = 0;
    for (const Var& x : xs) {
      const std::size_t w = t.value(x).cols();
      if (t.needs_grad(x)) {
        Tensor& gx = t.grad(x);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < w; ++c) gx(r, c) += g(r, offset + c);
      }
      offset += w;
    }
  });
}

inline Var concat_rows(const std::vector<Var>& xs) {
  if (xs.empty()) throw InvalidArgument("concat_rows: no inputs");
  Tape& tape = detail::tape_of(xs.front());
  const std::size_t cols = xs.front().value().cols();
  std::size_t rows = 0;
  for (const Var& x : xs) {
    if (x.value().cols() != cols) throw ShapeError("concat_rows: column counts differ");
    rows += x.value().rows();
  }
  Tensor out = Tensor::matrix(rows, cols);
  std::size_t offset = 0;
  for (const Var& x : xs) {
    const Tensor& X = x.value();
    std::copy(X.data(), X.data() + X.size(), out.data() + offset);
    offset += X.size();
  }
  return tape.record(std::move(out), xs, [xs](Tape& t, const Tensor& g) {
    std::size_t offset = 0;
    for (const Var& x : xs) {
      const std::size_t n = t.value(x).size();
      if (t.needs_grad(x)) {
        Tensor& gx = t.grad(x);
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[offset + i];
      }
      offset += n;
    }
  });
}

inline constexpr std::size_t kNoPadding = std::numeric_limits<std::size_t>::max();

/// Embedding lookup: out row k = table row indices[k]. Indices equal to
/// `padding_index` produce a zero row and route no gradient to the table.
inline Var gather_rows(Var table, std::vector<std::size_t> indices, std::size_t padding_index = kNoPadding) {
  Tape& tape = detail::tape_of(table);
  const Tensor& T = table.value();
  const std::size_t d = T.cols();
  Tensor out = Tensor::matrix(indices.size(), d);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t idx = indices[k];
    if (idx == padding_index) continue;
    if (idx >= T.rows()) throw ShapeError("gather_rows: index " + std::to_string(idx) + " out of range for " + detail::dims(T));
    std::copy(T.data() + idx * d, T.data() + (idx + 1) * d, out.data() + k * d);
  }
  return tape.record(std::move(out), {table},
                     [table, indices = std::move(indices), padding_index, d](Tape& t, const Tensor& g) {
                       Tensor& gt = t.grad(table);
                       for (std::size_t k = 0; k < indices.size(); ++k) {
                         if (indices[k] == padding_index) continue;
                         double* dst = gt.data() + indices[k] * d;
                         const double* src = g.data() + k * d;
                         for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                       }
                     });
}

inline Var softmax_rows(Var a) {
  Tape& tape = detail::tape_of(a);
  Tensor out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : row) mx = std::max(mx, v);
    double sum = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (double& v : row) v /= sum;
  }
  return tape.record(std::move(out), {a}, [a, out_id = tape.size()](Tape& t, const Tensor& g) {
    const Tensor& Y = t.value(Var(&t, out_id));
    Tensor& ga = t.grad(a);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < g.cols(); ++c) dot += g(r, c) * Y(r, c);
      for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) += Y(r, c) * (g(r, c) - dot);
    }
  });
}

/// Row-wise layer normalization with affine gamma/beta (each of length cols).
inline Var layer_norm(Var a, Var gamma, Var beta, double eps = 1e-8) {
  Tape& tape = detail::tape_of(a);
  const Tensor& A = a.value();
  const Tensor& G = gamma.value();
  const Tensor& B = beta.value();
  const std::size_t n = A.cols();
  if (G.size() != n || B.size() != n) throw ShapeError("layer_norm: affine parameters must have length " + std::to_string(n));
  auto normalized = std::make_shared<Tensor>(Tensor::matrix(A.rows(), n));
  auto inv_std = std::make_shared<std::vector<double>>(A.rows());
  Tensor out = Tensor::matrix(A.rows(), n);
  for (std::size_t r = 0; r < A.rows(); ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < n; ++c) mean += A(r, c);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (A(r, c) - mean) * (A(r, c) - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      const double xh = (A(r, c) - mean) * is;
      (*normalized)(r, c) = xh;
      out(r, c) = xh * G[c] + B[c];
    }
  }
  return tape.record(std::move(out), {a, gamma, beta}, [a, gamma, beta, normalized, inv_std](Tape& t, const Tensor& g) {
    const Tensor& G = t.value(gamma);
    const Tensor& xh = *normalized;
    const std::size_t n = g.cols();
    if (t.needs_grad(gamma) || t.needs_grad(beta)) {
      for (std::size_t r = 0; r < g.rows(); ++r) {
        for (std::size_t c = 0; c < n; ++c) {
          if (t.needs_grad(gamma)) t.grad(gamma)[c] += g(r, c) * xh(r, c);
          if (t.needs_grad(beta)) t.grad(beta)[c] += g(r, c);
        }
      }
    }
    if (t.needs_grad(a)) {
      Tensor& ga = t.grad(a);
      std::vector<double> dxh(n);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        double sum = 0.0;
        double sum_xh = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
          dxh[c] = g(r, c) * G[c];
          sum += dxh[c];
          sum_xh += dxh[c] * xh(r, c);
        }
        const double k = (*inv_std)[r] / static_cast<double>(n);
        for (std::size_t c = 0; c < n; ++c) {
          ga(r, c) += k * (static_cast<double>(n) * dxh[c] - sum - xh(r, c) * sum_xh);
        }
      }
    }
  });
}

namespace detail {

template <class Fwd, class Deriv>
Var elementwise(Var a, Fwd fwd, Deriv deriv) {
  Tape& tape = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.values()) v = fwd(v);
  return tape.record(std::move(out), {a}, [a, deriv](Tape& t, const Tensor& g) {
    const Tensor& A = t.value(a);
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(A[i]);
  });
}

inline constexpr double kGeluC = 0.044715;
inline const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);

}  // namespace detail

inline double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::tanh(detail::kSqrt2OverPi * (x + detail::kGeluC * x * x * x)));
}

inline double gelu_derivative(double x) {
  const double u = detail::kSqrt2OverPi * (x + detail::kGeluC * x * x * x);
  const double th = std::tanh(u);
  const double du = detail::kSqrt2OverPi * (1.0 + 3.0 * detail::kGeluC * x * x);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

inline double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// GELU, tanh approximation.
inline Var gelu(Var a) { return detail::elementwise(a, gelu_value, gelu_derivative); }

inline Var relu(Var a) {
  return detail::elementwise(a, [](double x) { return x > 0.0 ? x : 0.0; },
                             [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var sigmoid(Var a) {
  return detail::elementwise(a, sigmoid_value, [](double x) {
    const double s = sigmoid_value(x);
    return s * (1.0 - s);
  });
}

/// Inverted dropout. Identity (no node recorded) when `train` is false.
inline Var dropout(Var a, double rate, bool train, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw InvalidArgument("dropout rate must lie in [0,1), got " + std::to_string(rate));
  if (!train || rate == 0.0) return a;
  Tape& tape = detail::tape_of(a);
  const double keep_scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(a.value().size());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng.uniform() < rate ? 0.0 : keep_scale;
    out[i] *= (*mask)[i];
  }
  return tape.record(std::move(out), {a}, [a, mask](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*mask)[i];
  });
}

/// Mean over rows of -log softmax(logits)[target]. One target column per row.
inline Var cross_entropy_with_logits(Var logits, std::vector<std::size_t> targets) {
  Tape& tape = detail::tape_of(logits);
  const Tensor& Z = logits.value();
  if (targets.size() != Z.rows()) throw ShapeError("cross_entropy_with_logits: one target per row required");
  auto probs = std::make_shared<Tensor>(Tensor::matrix(Z.rows(), Z.cols()));
  double total = 0.0;
  for (std::size_t r = 0; r < Z.rows(); ++r) {
    if (targets[r] >= Z.cols()) throw InvalidArgument("cross_entropy_with_logits: target " + std::to_string(targets[r]) + " out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : Z.row(r)) mx = std::max(mx, v);
    double sum = 0.0;
    for (std::size_t c = 0; c < Z.cols(); ++c) {
      (*probs)(r, c) = std::exp(Z(r, c) - mx);
      sum += (*probs)(r, c);
    }
    for (std::size_t c = 0; c < Z.cols(); ++c) (*probs)(r, c) /= sum;
    total += (mx + std::log(sum)) - Z(r, targets[r]);
  }
  const double rows = static_cast<double>(Z.rows());
  return tape.record(Tensor::scalar(total / rows), {logits},
                     [logits, probs, targets = std::move(targets), rows](Tape& t, const Tensor& g) {
                       Tensor& gz = t.grad(logits);
                       const double s = g[0] / rows;
                       for (std::size_t r = 0; r < gz.rows(); ++r) {
                         for (std::size_t c = 0; c < gz.cols(); ++c) gz(r, c) += s * (*probs)(r, c);
                         gz(r, targets[r]) -= s;
                       }
                     });
}

inline Var sum(Var a) {
  Tape& tape = detail::tape_of(a);
  double total = 0.0;
  for (double v : a.value().values()) total += v;
  return tape.record(Tensor::scalar(total), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (double& v : ga.values()) v += g[0];
  });
}

/// Sparse-dense product S * x.
inline Var spmm(std::shared_ptr<const SparseMatrix> s, Var x) {
  Tape& tape = detail::tape_of(x);
  const Tensor& X = x.value();
  if (s->cols != X.rows()) throw ShapeError("spmm: sparse " + std::to_string(s->rows) + "x" + std::to_string(s->cols) + " times " + detail::dims(X));
  const std::size_t d = X.cols();
  Tensor out = Tensor::matrix(s->rows, d);
  for (std::size_t r = 0; r < s->rows; ++r) {
    double* dst = out.data() + r * d;
    for (std::size_t k = s->row_ptr[r]; k < s->row_ptr[r + 1]; ++k) {
      const double w = s->values[k];
      const double* src = X.data() + s->col_idx[k] * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += w * src[c];
    }
  }
  return tape.record(std::move(out), {x}, [s, x, d](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(x);
    for (std::size_t r = 0; r < s->rows; ++r) {
      const double* src = g.data() + r * d;
      for (std::size_t k = s->row_ptr[r]; k < s->row_ptr[r + 1]; ++k) {
        const double w = s->values[k];
        double* dst = gx.data() + s->col_idx[k] * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] += w * src[c];
      }
    }
  });
}

struct AttentionOptions {
  std::size_t seq_len = 1;
  std::size_t heads = 1;
  bool causal = true;
  /// Per-row flag (length = rows of q); when non-empty, keys flagged true are excluded.
  std::vector<bool> masked_keys;
  double dropout_rate = 0.0;
  bool train = false;
};

/// Multi-head scaled dot-product attention over consecutive blocks of
/// `seq_len` rows. Head k reads columns [k*dh, (k+1)*dh) of q, k and v, with
/// dh = cols / heads, and writes the same columns of the output. Weights are
/// softmax(q k^T / sqrt(dh)) over the allowed keys; a query with no allowed key
/// gets an all-zero weight row.
inline Var attention(Var q, Var k, Var v, AttentionOptions opt, Rng& rng) {
  Tape& tape = detail::tape_of(q);
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  if (!Q.same_shape(K) || !Q.same_shape(V)) throw ShapeError("attention: q, k, v shapes differ");
  const std::size_t L = opt.seq_len;
  const std::size_t H = opt.heads;
  const std::size_t d = Q.cols();
  if (L == 0 || Q.rows() % L != 0) throw ShapeError("attention: row count is not a multiple of seq_len");
  if (H == 0 || d % H != 0) throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(H) + " heads");
  if (!opt.masked_keys.empty() && opt.masked_keys.size() != Q.rows()) throw ShapeError("attention: key mask length differs from row count");
  if (!(opt.dropout_rate >= 0.0 && opt.dropout_rate < 1.0)) throw InvalidArgument("attention dropout rate must lie in [0,1)");
  const std::size_t S = Q.rows() / L;
  const std::size_t dh = d / H;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool use_dropout = opt.train && opt.dropout_rate > 0.0;
  const double keep_scale = use_dropout ? 1.0 / (1.0 - opt.dropout_rate) : 1.0;

  // weights[(s*H + h)*L*L + i*L + j]; drop holds the dropout multiplier.
  auto weights = std::make_shared<std::vector<double>>(S * H * L * L, 0.0);
  auto drop = std::make_shared<std::vector<double>>(use_dropout ? S * H * L * L : 0, 1.0);
  Tensor out = Tensor::matrix(Q.rows(), d);
  std::vector<double> logits(L);
  std::vector<bool> allowed(L);
  for (std::size_t s = 0; s < S; ++s) {
    const std::size_t base = s * L;
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      double* W = weights->data() + (s * H + h) * L * L;
      for (std::size_t i = 0; i < L; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < L; ++j) {
          allowed[j] = !(opt.causal && j > i) && (opt.masked_keys.empty() || !opt.masked_keys[base + j]);
          if (!allowed[j]) continue;
          double dot = 0.0;
          const double* qi = Q.data() + (base + i) * d + off;
          const double* kj = K.data() + (base + j) * d + off;
          for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
          logits[j] = dot * inv_scale;
          mx = std::max(mx, logits[j]);
          any = true;
        }
        if (!any) continue;
        double total = 0.0;
        for (std::size_t j = 0; j < L; ++j) {
          if (!allowed[j]) continue;
          W[i * L + j] = std::exp(logits[j] - mx);
          total += W[i * L + j];
        }
        for (std::size_t j = 0; j < L; ++j) W[i * L + j] /= total;
        double* oi = out.data() + (base + i) * d + off;
        for (std::size_t j = 0; j < L; ++j) {
          double w = W[i * L + j];
          if (use_dropout) {
            double& m = (*drop)[(s * H + h) * L * L + i * L + j];
            m = rng.uniform() < opt.dropout_rate ? 0.0 : keep_scale;
            w *= m;
          }
          if (w == 0.0) continue;
          const double* vj = V.data() + (base + j) * d + off;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
        }
      }
    }
  }
  return tape.record(std::move(out), {q, k, v},
                     [q, k, v, weights, drop, S, H, L, d, dh, inv_scale, use_dropout](Tape& t, const Tensor& g) {
                       const Tensor& Q = t.value(q);
                       const Tensor& K = t.value(k);
                       const Tensor& V = t.value(v);
                       Tensor* gq = t.needs_grad(q) ? &t.grad(q) : nullptr;
                       Tensor* gk = t.needs_grad(k) ? &t.grad(k) : nullptr;
                       Tensor* gv = t.needs_grad(v) ? &t.grad(v) : nullptr;
                       std::vector<double> dw(L);
                       for (std::size_t s = 0; s < S; ++s) {
                         const std::size_t base = s * L;
                         for (std::size_t h = 0; h < H; ++h) {
                           const std::size_t off = h * dh;
                           const std::size_t blk = (s * H + h) * L * L;
                           const double* W = weights->data() + blk;
                           for (std::size_t i = 0; i < L; ++i) {
                             const double* gi = g.data() + (base + i) * d + off;
                             // dW_ij = <g_i, v_j> * dropout multiplier
                             double dot_wd = 0.0;
                             for (std::size_t j = 0; j < L; ++j) {
                               const double w = W[i * L + j];
                               if (w == 0.0) {
                                 dw[j] = 0.0;
                                 continue;
                               }
                               const double m = use_dropout ? (*drop)[blk + i * L + j] : 1.0;
                               const double* vj = V.data() + (base + j) * d + off;
                               double acc = 0.0;
                               for (std::size_t c = 0; c < dh; ++c) acc += gi[c] * vj[c];
                               dw[j] = acc * m;
                               dot_wd += w * dw[j];
                               if (gv != nullptr && m != 0.0) {
                                 double* gvj = gv->data() + (base + j) * d + off;
                                 for (std::size_t c = 0; c < dh; ++c) gvj[c] += w * m * gi[c];
                               }
                             }
                             for (std::size_t j = 0; j < L; ++j) {
                               const double w = W[i * L + j];
                               if (w == 0.0) continue;
                               const double dscore = w * (dw[j] - dot_wd) * inv_scale;
                               if (gq != nullptr) {
                                 double* gqi = gq->data() + (base + i) * d + off;
                                 const double* kj = K.data() + (base + j) * d + off;
                                 for (std::size_t c = 0; c < dh; ++c) gqi[c] += dscore * kj[c];
                               }
                               if (gk != nullptr) {
                                 double* gkj = gk->data() + (base + j) * d + off;
                                 const double* qi = Q.data() + (base + i) * d + off;
                                 for (std::size_t c = 0; c < dh; ++c) gkj[c] += dscore * qi[c];
                               }
                             }
                           }
                         }
                       }
                     });
}

}  // namespace mabsrec::numeric

#pragma once

#include <algorithm>
#include <cmath>

#include "vqim/tape.hpp"

namespace vqim {
namespace kernel {

// C[M,N] = A[M,K] * B[K,N], optionally accumulating into C.
template <typename T, bool Accumulate = false>
void matmul_nn(const T* a, const T* b, T* c, int M, int K, int N) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < M; ++i) {
    T* crow = c + static_cast<size_t>(i) * N;
    if constexpr (!Accumulate)
      for (int j = 0; j < N; ++j) crow[j] = T(0);
    const T* arow = a + static_cast<size_t>(i) * K;
    for (int k = 0; k < K; ++k) {
      const T av = arow[k];
      const T* brow = b + static_cast<size_t>(k) * N;
      for (int j = 0; j < N; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void matmul_nt_acc(const T* a, const T* b, T* c, int M, int K, int N) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < M; ++i) {
    const T* arow = a + static_cast<size_t>(i) * K;
    T* crow = c + static_cast<size_t>(i) * N;
    for (int j = 0; j < N; ++j) {
      const T* brow = b + static_cast<size_t>(j) * K;
      T acc = T(0);
      for (int k = 0; k < K; ++k) acc += arow[k] * brow[k];
      crow[j] += acc;
    }
  }
}

// C[K,N] += A[M,K]^T * B[M,N]
template <typename T>
void matmul_tn_acc(const T* a, const T* b, T* c, int M, int K, int N) {
#pragma omp parallel for schedule(static)
  for (int k = 0; k < K; ++k) {
    T* crow = c + static_cast<size_t>(k) * N;
    for (int m = 0; m < M; ++m) {
      const T av = a[static_cast<size_t>(m) * K + k];
      const T* brow = b + static_cast<size_t>(m) * N;
      for (int j = 0; j < N; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace kernel

// ---------------------------------------------------------------------------
// matmul / linear / transpose
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> matmul(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const int M = a.dim(0), K = a.dim(1), N = b.dim(1);
  auto out = TensorT<T>::zeros({M, N});
  kernel::matmul_nn<T>(a.data(), b.data(), out.data(), M, K, N);
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    TensorT<T> ac = a, bc = b, oc = out;
    tape->record([ac, bc, oc, M, K, N]() mutable {
      if (ac.requires_grad()) kernel::matmul_nt_acc<T>(oc.grad(), bc.data(), ac.grad(), M, N, K);
      if (bc.requires_grad()) kernel::matmul_tn_acc<T>(ac.data(), oc.grad(), bc.grad(), M, K, N);
    });
  }
  return out;
}

// x[..., K] * w[K, N] (+ bias[N]); leading dims flatten row-major.
template <typename T>
TensorT<T> linear(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& w,
                  const TensorT<T>* bias = nullptr) {
  if (x.rank() < 1 || w.rank() != 2 || x.dim(x.rank() - 1) != w.dim(0))
    throw ShapeError("linear shape mismatch: " + shape_str(x.shape()) + " x " +
                     shape_str(w.shape()));
  const int K = w.dim(0), N = w.dim(1);
  const int M = static_cast<int>(x.size() / K);
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  out_shape.push_back(N);
  auto out = TensorT<T>::zeros(out_shape);
  kernel::matmul_nn<T>(x.data(), w.data(), out.data(), M, K, N);
  if (bias) {
    if (bias->rank() != 1 || bias->dim(0) != N)
      throw ShapeError("linear bias shape " + shape_str(bias->shape()));
    T* o = out.data();
    const T* bv = bias->data();
    for (int i = 0; i < M; ++i)
      for (int j = 0; j < N; ++j) o[static_cast<size_t>(i) * N + j] += bv[j];
  }
  const bool rec = bias ? track(tape, {&x, &w, bias}) : track(tape, {&x, &w});
  if (rec) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, wc = w, oc = out;
    TensorT<T> bc = bias ? *bias : TensorT<T>();
    tape->record([xc, wc, bc, oc, M, K, N]() mutable {
      if (xc.requires_grad()) kernel::matmul_nt_acc<T>(oc.grad(), wc.data(), xc.grad(), M, N, K);
      if (wc.requires_grad()) kernel::matmul_tn_acc<T>(xc.data(), oc.grad(), wc.grad(), M, K, N);
      if (bc.defined() && bc.requires_grad()) {
        const T* g = oc.grad();
        T* bg = bc.grad();
        for (int i = 0; i < M; ++i)
          for (int j = 0; j < N; ++j) bg[j] += g[static_cast<size_t>(i) * N + j];
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> transpose(TapeT<T>* tape, const TensorT<T>& x) {
  if (x.rank() != 2) throw ShapeError("transpose expects rank-2, got " + shape_str(x.shape()));
  const int M = x.dim(0), N = x.dim(1);
  auto out = TensorT<T>::zeros({N, M});
  const T* xv = x.data();
  T* o = out.data();
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) o[static_cast<size_t>(j) * M + i] = xv[static_cast<size_t>(i) * N + j];
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    tape->record([xc, oc, M, N]() mutable {
      const T* g = oc.grad();
      T* xg = xc.grad();
      for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j)
          xg[static_cast<size_t>(i) * N + j] += g[static_cast<size_t>(j) * M + i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise suite
// ---------------------------------------------------------------------------

namespace detail {

// b broadcasts into a when b.shape is a trailing suffix of a.shape (or b is
// scalar); the result takes a's shape and grad(b) reduces over leading dims.
template <typename T>
void check_broadcast(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
  if (b.size() == 1) return;
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (bs.size() > as.size() ||
      !std::equal(bs.rbegin(), bs.rend(), as.rbegin()))
    throw ShapeError(std::string(op) + " shapes not broadcast-compatible: " +
                     shape_str(as) + " vs " + shape_str(bs));
}

template <typename T, typename FwdFn, typename BwdFn>
TensorT<T> binary_broadcast(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b,
                            const char* name, FwdFn fwd, BwdFn bwd) {
  check_broadcast(a, b, name);
  const int64_t n = a.size(), bn = b.size();
  auto out = TensorT<T>::zeros(a.shape());
  const T* av = a.data();
  const T* bv = b.data();
  T* o = out.data();
  for (int64_t i = 0; i < n; ++i) o[i] = fwd(av[i], bv[i % bn]);
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    TensorT<T> ac = a, bc = b, oc = out;
    tape->record([ac, bc, oc, n, bn, bwd]() mutable {
      const T* g = oc.grad();
      const T* av = ac.data();
      const T* bv = bc.data();
      T* ag = ac.requires_grad() ? ac.grad() : nullptr;
      T* bg = bc.requires_grad() ? bc.grad() : nullptr;
      for (int64_t i = 0; i < n; ++i) {
        T da, db;
        bwd(av[i], bv[i % bn], da, db);
        if (ag) ag[i] += g[i] * da;
        if (bg) bg[i % bn] += g[i] * db;
      }
    });
  }
  return out;
}

template <typename T, typename FwdFn, typename BwdFn>
TensorT<T> unary(TapeT<T>* tape, const TensorT<T>& x, FwdFn fwd, BwdFn bwd) {
  const int64_t n = x.size();
  auto out = TensorT<T>::zeros(x.shape());
  const T* xv = x.data();
  T* o = out.data();
  for (int64_t i = 0; i < n; ++i) o[i] = fwd(xv[i]);
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    tape->record([xc, oc, n, bwd]() mutable {
      const T* g = oc.grad();
      const T* xv = xc.data();
      const T* ov = oc.data();
      T* xg = xc.grad();
      for (int64_t i = 0; i < n; ++i) xg[i] += g[i] * bwd(xv[i], ov[i]);
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
TensorT<T> add(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  return detail::binary_broadcast(
      tape, a, b, "add", [](T x, T y) { return x + y; },
      [](T, T, T& da, T& db) { da = T(1); db = T(1); });
}

template <typename T>
TensorT<T> sub(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  return detail::binary_broadcast(
      tape, a, b, "sub", [](T x, T y) { return x - y; },
      [](T, T, T& da, T& db) { da = T(1); db = T(-1); });
}

template <typename T>
TensorT<T> mul(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  return detail::binary_broadcast(
      tape, a, b, "mul", [](T x, T y) { return x * y; },
      [](T x, T y, T& da, T& db) { da = y; db = x; });
}

template <typename T>
TensorT<T> scale(TapeT<T>* tape, const TensorT<T>& x, T s) {
  return detail::unary(
      tape, x, [s](T v) { return s * v; }, [s](T, T) { return s; });
}

template <typename T>
TensorT<T> tanh_op(TapeT<T>* tape, const TensorT<T>& x) {
  return detail::unary(
      tape, x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

// Exact-erf gelu; the tanh approximation would blur the gradcheck oracle.
template <typename T>
TensorT<T> gelu(TapeT<T>* tape, const TensorT<T>& x) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
  return detail::unary(
      tape, x,
      [](T v) { return v * T(0.5) * (T(1) + std::erf(v * kInvSqrt2)); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * kInvSqrt2));
        const T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * v * v);
        return cdf + v * pdf;
      });
}

template <typename T>
TensorT<T> exp_op(TapeT<T>* tape, const TensorT<T>& x) {
  return detail::unary(
      tape, x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
TensorT<T> log_op(TapeT<T>* tape, const TensorT<T>& x) {
  for (int64_t i = 0; i < x.size(); ++i)
    if (!(x.data()[i] > T(0)))
      throw NumericError("log of non-positive value " + std::to_string(x.data()[i]));
  return detail::unary(
      tape, x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

// Subgradient 0 at exactly 0 (the logit-laplace |.| term relies on this).
template <typename T>
TensorT<T> abs_op(TapeT<T>* tape, const TensorT<T>& x) {
  return detail::unary(
      tape, x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
TensorT<T> sigmoid(TapeT<T>* tape, const TensorT<T>& x) {
  return detail::unary(
      tape, x,
      [](T v) { return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
TensorT<T> relu(TapeT<T>* tape, const TensorT<T>& x) {
  return detail::unary(
      tape, x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
TensorT<T> clamp01(TapeT<T>* tape, const TensorT<T>& x) {
  return detail::unary(
      tape, x, [](T v) { return std::min(T(1), std::max(T(0), v)); },
      [](T v, T) { return (v >= T(0) && v <= T(1)) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// softmax / layernorm
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> softmax(TapeT<T>* tape, const TensorT<T>& x, int axis = -1) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("softmax axis out of range");
  for (int64_t i = 0; i < x.size(); ++i)
    if (std::isnan(x.data()[i])) throw NumericError("softmax input contains NaN");
  int64_t outer = 1, inner = 1;
  const int C = x.dim(axis);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);

  auto out = TensorT<T>::zeros(x.shape());
  const T* xv = x.data();
  T* o = out.data();
  for (int64_t om = 0; om < outer; ++om) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = om * C * inner + in;
      T m = xv[base];
      for (int c = 1; c < C; ++c) m = std::max(m, xv[base + c * inner]);
      T z = T(0);
      for (int c = 0; c < C; ++c) {
        const T e = std::exp(xv[base + c * inner] - m);
        o[base + c * inner] = e;
        z += e;
      }
      const T invz = T(1) / z;
      for (int c = 0; c < C; ++c) o[base + c * inner] *= invz;
    }
  }
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    tape->record([xc, oc, outer, inner, C]() mutable {
      const T* g = oc.grad();
      const T* p = oc.data();
      T* xg = xc.grad();
      for (int64_t om = 0; om < outer; ++om) {
        for (int64_t in = 0; in < inner; ++in) {
          const int64_t base = om * C * inner + in;
          T dot = T(0);
          for (int c = 0; c < C; ++c) dot += g[base + c * inner] * p[base + c * inner];
          for (int c = 0; c < C; ++c) {
            const int64_t k = base + c * inner;
            xg[k] += p[k] * (g[k] - dot);
          }
        }
      }
    });
  }
  return out;
}

// Normalizes the last dimension to zero mean / unit variance, then applies
// the gamma/beta affine.
template <typename T>
TensorT<T> layernorm(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& gamma,
                     const TensorT<T>& beta, T eps = T(1e-5)) {
  const int D = x.dim(x.rank() - 1);
  if (gamma.size() != D || beta.size() != D)
    throw ShapeError("layernorm affine params must have length " + std::to_string(D));
  if (eps <= T(0)) throw ShapeError("layernorm eps must be positive");
  const int64_t rows = x.size() / D;
  auto out = TensorT<T>::zeros(x.shape());
  std::vector<T> xhat(static_cast<size_t>(x.size()));
  std::vector<T> invstd(static_cast<size_t>(rows));
  const T* xv = x.data();
  const T* gv = gamma.data();
  const T* bv = beta.data();
  T* o = out.data();
  for (int64_t rIdx = 0; rIdx < rows; ++rIdx) {
    const T* row = xv + rIdx * D;
    T mean = T(0);
    for (int j = 0; j < D; ++j) mean += row[j];
    mean /= T(D);
    T var = T(0);
    for (int j = 0; j < D; ++j) {
      const T d = row[j] - mean;
      var += d * d;
    }
    var /= T(D);
    const T is = T(1) / std::sqrt(var + eps);
    invstd[static_cast<size_t>(rIdx)] = is;
    for (int j = 0; j < D; ++j) {
      const T xh = (row[j] - mean) * is;
      xhat[static_cast<size_t>(rIdx * D + j)] = xh;
      o[rIdx * D + j] = xh * gv[j] + bv[j];
    }
  }
  if (track(tape, {&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, gc = gamma, bc = beta, oc = out;
    tape->record([xc, gc, bc, oc, rows, D, xhat = std::move(xhat),
                  invstd = std::move(invstd)]() mutable {
      const T* g = oc.grad();
      const T* gv = gc.data();
      T* xg = xc.requires_grad() ? xc.grad() : nullptr;
      T* gg = gc.requires_grad() ? gc.grad() : nullptr;
      T* bg = bc.requires_grad() ? bc.grad() : nullptr;
      for (int64_t rIdx = 0; rIdx < rows; ++rIdx) {
        const T* grow = g + rIdx * D;
        const T* xh = xhat.data() + rIdx * D;
        if (gg || bg) {
          for (int j = 0; j < D; ++j) {
            if (gg) gg[j] += grow[j] * xh[j];
            if (bg) bg[j] += grow[j];
          }
        }
        if (xg) {
          T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
          for (int j = 0; j < D; ++j) {
            const T dxh = grow[j] * gv[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[j];
          }
          mean_dxhat /= T(D);
          mean_dxhat_xhat /= T(D);
          const T is = invstd[static_cast<size_t>(rIdx)];
          for (int j = 0; j < D; ++j) {
            const T dxh = grow[j] * gv[j];
            xg[rIdx * D + j] += is * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// gather / loss
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> embedding_lookup(TapeT<T>* tape, const TensorT<T>& table,
                            const std::vector<int>& ids) {
  if (table.rank() != 2) throw ShapeError("embedding table must be rank-2");
  const int V = table.dim(0), D = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= V)
      throw IndexError("embedding id " + std::to_string(id) + " out of range [0, " +
                       std::to_string(V) + ")");
  const int N = static_cast<int>(ids.size());
  auto out = TensorT<T>::zeros({N, D});
  const T* tv = table.data();
  T* o = out.data();
  for (int i = 0; i < N; ++i)
    std::copy_n(tv + static_cast<size_t>(ids[static_cast<size_t>(i)]) * D, D,
                o + static_cast<size_t>(i) * D);
  if (track(tape, {&table})) {
    out.set_requires_grad(true);
    TensorT<T> tc = table, oc = out;
    tape->record([tc, oc, ids, D]() mutable {
      const T* g = oc.grad();
      T* tg = tc.grad();
      for (size_t i = 0; i < ids.size(); ++i) {
        T* dst = tg + static_cast<size_t>(ids[i]) * D;
        const T* src = g + i * D;
        for (int j = 0; j < D; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// Mean over rows of -log softmax(logits)[target], fused via log-sum-exp.
template <typename T>
TensorT<T> cross_entropy_from_logits(TapeT<T>* tape, const TensorT<T>& logits,
                                     const std::vector<int>& targets) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy expects rank-2 logits");
  const int N = logits.dim(0), C = logits.dim(1);
  if (static_cast<int>(targets.size()) != N)
    throw ShapeError("cross_entropy targets length " + std::to_string(targets.size()) +
                     " != rows " + std::to_string(N));
  for (int t : targets)
    if (t < 0 || t >= C)
      throw IndexError("cross_entropy target " + std::to_string(t) + " out of range [0, " +
                       std::to_string(C) + ")");
  std::vector<T> probs(static_cast<size_t>(logits.size()));
  const T* lv = logits.data();
  T acc = T(0);
  for (int i = 0; i < N; ++i) {
    const T* row = lv + static_cast<size_t>(i) * C;
    T m = row[0];
    for (int c = 1; c < C; ++c) m = std::max(m, row[c]);
    T z = T(0);
    for (int c = 0; c < C; ++c) {
      const T e = std::exp(row[c] - m);
      probs[static_cast<size_t>(i) * C + c] = e;
      z += e;
    }
    const T invz = T(1) / z;
    for (int c = 0; c < C; ++c) probs[static_cast<size_t>(i) * C + c] *= invz;
    acc += m + std::log(z) - row[targets[static_cast<size_t>(i)]];
  }
  auto out = TensorT<T>::scalar(acc / T(N));
  if (track(tape, {&logits})) {
    out.set_requires_grad(true);
    TensorT<T> lc = logits, oc = out;
    tape->record([lc, oc, targets, N, C, probs = std::move(probs)]() mutable {
      const T g = oc.grad()[0] / T(N);
      T* lg = lc.grad();
      for (int i = 0; i < N; ++i) {
        for (int c = 0; c < C; ++c) {
          const size_t k = static_cast<size_t>(i) * C + c;
          T d = probs[k];
          if (c == targets[static_cast<size_t>(i)]) d -= T(1);
          lg[k] += g * d;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions / reshaping
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> sum_all(TapeT<T>* tape, const TensorT<T>& x) {
  T acc = T(0);
  for (int64_t i = 0; i < x.size(); ++i) acc += x.data()[i];
  auto out = TensorT<T>::scalar(acc);
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    tape->record([xc, oc]() mutable {
      const T g = oc.grad()[0];
      T* xg = xc.grad();
      for (int64_t i = 0; i < xc.size(); ++i) xg[i] += g;
    });
  }
  return out;
}

template <typename T>
TensorT<T> mean_all(TapeT<T>* tape, const TensorT<T>& x) {
  return scale(tape, sum_all(tape, x), T(1) / T(x.size()));
}

template <typename T>
TensorT<T> reshape(TapeT<T>* tape, const TensorT<T>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.size())
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(new_shape));
  auto out = TensorT<T>::from(std::move(new_shape), x.values());
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    tape->record([xc, oc]() mutable {
      const T* g = oc.grad();
      T* xg = xc.grad();
      for (int64_t i = 0; i < xc.size(); ++i) xg[i] += g[i];
    });
  }
  return out;
}

template <typename T>
TensorT<T> slice_rows(TapeT<T>* tape, const TensorT<T>& x, int begin, int end) {
  if (x.rank() < 1 || begin < 0 || end > x.dim(0) || begin >= end)
    throw ShapeError("slice_rows [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + shape_str(x.shape()));
  const int64_t stride = x.size() / x.dim(0);
  Shape s = x.shape();
  s[0] = end - begin;
  auto out = TensorT<T>::zeros(s);
  std::copy_n(x.data() + begin * stride, (end - begin) * stride, out.data());
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    tape->record([xc, oc, begin, stride]() mutable {
      const T* g = oc.grad();
      T* xg = xc.grad() + begin * stride;
      for (int64_t i = 0; i < oc.size(); ++i) xg[i] += g[i];
    });
  }
  return out;
}

template <typename T>
TensorT<T> concat_rows(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != b.rank() ||
      !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1))
    throw ShapeError("concat_rows trailing dims differ: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Shape s = a.shape();
  s[0] += b.dim(0);
  auto out = TensorT<T>::zeros(s);
  std::copy_n(a.data(), a.size(), out.data());
  std::copy_n(b.data(), b.size(), out.data() + a.size());
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    TensorT<T> ac = a, bc = b, oc = out;
    tape->record([ac, bc, oc]() mutable {
      const T* g = oc.grad();
      if (ac.requires_grad()) {
        T* ag = ac.grad();
        for (int64_t i = 0; i < ac.size(); ++i) ag[i] += g[i];
      }
      if (bc.requires_grad()) {
        T* bg = bc.grad();
        const T* gb = g + ac.size();
        for (int64_t i = 0; i < bc.size(); ++i) bg[i] += gb[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// row normalization (codebook matching space)
// ---------------------------------------------------------------------------

// Unit-normalizes each row (last dim). Rows with norm below 1e-12 map to the
// fixed unit vector e0 with zero gradient; their indices are reported via
// zero_rows when provided.
template <typename T>
TensorT<T> l2_normalize_rows(TapeT<T>* tape, const TensorT<T>& x,
                             std::vector<int64_t>* zero_rows = nullptr) {
  const int D = x.dim(x.rank() - 1);
  const int64_t rows = x.size() / D;
  auto out = TensorT<T>::zeros(x.shape());
  std::vector<T> inv_norm(static_cast<size_t>(rows));
  const T* xv = x.data();
  T* o = out.data();
  for (int64_t rIdx = 0; rIdx < rows; ++rIdx) {
    const T* row = xv + rIdx * D;
    T sq = T(0);
    for (int j = 0; j < D; ++j) sq += row[j] * row[j];
    const T norm = std::sqrt(sq);
    if (norm < T(1e-12)) {
      o[rIdx * D] = T(1);
      inv_norm[static_cast<size_t>(rIdx)] = T(0);  // marks a dead row
      if (zero_rows) zero_rows->push_back(rIdx);
      continue;
    }
    const T inv = T(1) / norm;
    inv_norm[static_cast<size_t>(rIdx)] = inv;
    for (int j = 0; j < D; ++j) o[rIdx * D + j] = row[j] * inv;
  }
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    tape->record([xc, oc, rows, D, inv_norm = std::move(inv_norm)]() mutable {
      const T* g = oc.grad();
      const T* u = oc.data();
      T* xg = xc.grad();
      for (int64_t rIdx = 0; rIdx < rows; ++rIdx) {
        const T inv = inv_norm[static_cast<size_t>(rIdx)];
        if (inv == T(0)) continue;
        const T* grow = g + rIdx * D;
        const T* urow = u + rIdx * D;
        T dot = T(0);
        for (int j = 0; j < D; ++j) dot += grow[j] * urow[j];
        for (int j = 0; j < D; ++j) xg[rIdx * D + j] += inv * (grow[j] - urow[j] * dot);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// dropout
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> dropout(TapeT<T>* tape, const TensorT<T>& x, T rate, Rng& rng, bool train) {
  if (rate < T(0) || rate >= T(1)) throw ConfigError("dropout rate must be in [0, 1)");
  if (!train || rate == T(0)) return x;
  const int64_t n = x.size();
  const T keep = T(1) - rate;
  const T inv_keep = T(1) / keep;
  std::vector<uint8_t> mask(static_cast<size_t>(n));
  auto out = TensorT<T>::zeros(x.shape());
  const T* xv = x.data();
  T* o = out.data();
  for (int64_t i = 0; i < n; ++i) {
    mask[static_cast<size_t>(i)] = rng.uniform() < static_cast<double>(keep) ? 1 : 0;
    o[i] = mask[static_cast<size_t>(i)] ? xv[i] * inv_keep : T(0);
  }
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    tape->record([xc, oc, n, inv_keep, mask = std::move(mask)]() mutable {
      const T* g = oc.grad();
      T* xg = xc.grad();
      for (int64_t i = 0; i < n; ++i)
        if (mask[static_cast<size_t>(i)]) xg[i] += g[i] * inv_keep;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// fused multi-head self-attention
// ---------------------------------------------------------------------------

// qkv: [B*S, 3*d] with columns [Q | K | V], head h owning contiguous dh
// columns inside each third. Output [B*S, d]. Causal mask keeps j <= i.
template <typename T>
TensorT<T> multihead_attention(TapeT<T>* tape, const TensorT<T>& qkv, int batch, int seq,
                               int heads, bool causal, T attn_dropout = T(0),
                               Rng* rng = nullptr, bool train = false) {
  if (qkv.rank() != 2 || qkv.dim(0) != batch * seq || qkv.dim(1) % 3 != 0)
    throw ShapeError("multihead_attention qkv shape " + shape_str(qkv.shape()));
  const int d = qkv.dim(1) / 3;
  if (d % heads != 0) throw ShapeError("heads must divide d_model");
  const int dh = d / heads;
  const T inv_sqrt_dh = T(1) / std::sqrt(T(dh));

  auto out = TensorT<T>::zeros({batch * seq, d});
  const int64_t probs_per_bh = static_cast<int64_t>(seq) * seq;
  std::vector<T> probs(static_cast<size_t>(batch) * heads * probs_per_bh, T(0));

  // Dropout masks are drawn on the calling thread so the RNG stream stays
  // deterministic regardless of worker count.
  std::vector<uint8_t> mask;
  const bool use_drop = train && attn_dropout > T(0);
  const T keep = T(1) - attn_dropout;
  if (use_drop) {
    mask.resize(probs.size());
    for (auto& m : mask) m = rng->uniform() < static_cast<double>(keep) ? 1 : 0;
  }

  const T* x = qkv.data();
  T* o = out.data();
  const int ld = 3 * d;

#pragma omp parallel for schedule(static) collapse(2)
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      const T* base = x + static_cast<size_t>(b) * seq * ld;
      T* p = probs.data() + (static_cast<size_t>(b) * heads + h) * probs_per_bh;
      const int qo = h * dh, ko = d + h * dh, vo = 2 * d + h * dh;
      for (int i = 0; i < seq; ++i) {
        const T* qi = base + static_cast<size_t>(i) * ld + qo;
        const int jmax = causal ? i + 1 : seq;
        T* prow = p + static_cast<size_t>(i) * seq;
        T m = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < jmax; ++j) {
          const T* kj = base + static_cast<size_t>(j) * ld + ko;
          T s = T(0);
          for (int t = 0; t < dh; ++t) s += qi[t] * kj[t];
          s *= inv_sqrt_dh;
          prow[j] = s;
          m = std::max(m, s);
        }
        T z = T(0);
        for (int j = 0; j < jmax; ++j) {
          const T e = std::exp(prow[j] - m);
          prow[j] = e;
          z += e;
        }
        const T invz = T(1) / z;
        for (int j = 0; j < jmax; ++j) prow[j] *= invz;

        // attention output (with optional inverted dropout on probs)
        T* orow = o + (static_cast<size_t>(b) * seq + i) * d + h * dh;
        for (int t = 0; t < dh; ++t) orow[t] = T(0);
        const uint8_t* mrow =
            use_drop ? mask.data() + (static_cast<size_t>(b) * heads + h) * probs_per_bh +
                           static_cast<size_t>(i) * seq
                     : nullptr;
        for (int j = 0; j < jmax; ++j) {
          T w = prow[j];
          if (use_drop) w = mrow[j] ? w / keep : T(0);
          if (w == T(0)) continue;
          const T* vj = base + static_cast<size_t>(j) * ld + vo;
          for (int t = 0; t < dh; ++t) orow[t] += w * vj[t];
        }
      }
    }
  }

  if (track(tape, {&qkv})) {
    out.set_requires_grad(true);
    TensorT<T> qc = qkv, oc = out;
    tape->record([qc, oc, batch, seq, heads, causal, d, dh, ld, inv_sqrt_dh, use_drop, keep,
                  probs = std::move(probs), mask = std::move(mask), probs_per_bh]() mutable {
      const T* x = qc.data();
      const T* go = oc.grad();
      T* gx = qc.grad();
#pragma omp parallel for schedule(static) collapse(2)
      for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
          const T* base = x + static_cast<size_t>(b) * seq * ld;
          T* gbase = gx + static_cast<size_t>(b) * seq * ld;
          const T* p = probs.data() + (static_cast<size_t>(b) * heads + h) * probs_per_bh;
          const uint8_t* mk =
              use_drop ? mask.data() + (static_cast<size_t>(b) * heads + h) * probs_per_bh
                       : nullptr;
          const int qo = h * dh, ko = d + h * dh, vo = 2 * d + h * dh;
          std::vector<T> dp(static_cast<size_t>(seq));
          for (int i = 0; i < seq; ++i) {
            const int jmax = causal ? i + 1 : seq;
            const T* prow = p + static_cast<size_t>(i) * seq;
            const T* grow = go + (static_cast<size_t>(b) * seq + i) * d + h * dh;
            // dV and dP
            for (int j = 0; j < jmax; ++j) {
              const T* vj = base + static_cast<size_t>(j) * ld + vo;
              T acc = T(0);
              for (int t = 0; t < dh; ++t) acc += grow[t] * vj[t];
              T w = prow[j];
              T dw = acc;
              if (use_drop) {
                const uint8_t keep_bit = mk[static_cast<size_t>(i) * seq + j];
                dw = keep_bit ? dw / keep : T(0);
                w = keep_bit ? prow[j] / keep : T(0);
              }
              dp[static_cast<size_t>(j)] = dw;
              if (w != T(0)) {
                T* gv = gbase + static_cast<size_t>(j) * ld + vo;
                for (int t = 0; t < dh; ++t) gv[t] += w * grow[t];
              }
            }
            // softmax backward: ds = p .* (dp - sum(dp .* p))
            T dot = T(0);
            for (int j = 0; j < jmax; ++j) dot += dp[static_cast<size_t>(j)] * prow[j];
            const T* qi = base + static_cast<size_t>(i) * ld + qo;
            T* gq = gbase + static_cast<size_t>(i) * ld + qo;
            for (int j = 0; j < jmax; ++j) {
              const T ds = prow[j] * (dp[static_cast<size_t>(j)] - dot) * inv_sqrt_dh;
              if (ds == T(0)) continue;
              const T* kj = base + static_cast<size_t>(j) * ld + ko;
              T* gk = gbase + static_cast<size_t>(j) * ld + ko;
              for (int t = 0; t < dh; ++t) {
                gq[t] += ds * kj[t];
                gk[t] += ds * qi[t];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// patch <-> image permutations
// ---------------------------------------------------------------------------

// [B,H,W,C] -> [B, N, p*p*C]: non-overlapping raster-order patches, each
// flattened row-major (row, col, channel).
template <typename T>
TensorT<T> patchify(TapeT<T>* tape, const TensorT<T>& img, int patch) {
  if (img.rank() != 4) throw ShapeError("patchify expects [B,H,W,C], got " + shape_str(img.shape()));
  const int B = img.dim(0), H = img.dim(1), W = img.dim(2), C = img.dim(3);
  if (H % patch != 0 || W % patch != 0)
    throw ShapeError("image " + std::to_string(H) + "x" + std::to_string(W) +
                     " not divisible by patch " + std::to_string(patch));
  const int gh = H / patch, gw = W / patch, N = gh * gw, P = patch * patch * C;
  auto out = TensorT<T>::zeros({B, N, P});
  const T* iv = img.data();
  T* o = out.data();
  for (int b = 0; b < B; ++b)
    for (int n = 0; n < N; ++n) {
      const int pr = n / gw, pc = n % gw;
      T* dst = o + (static_cast<size_t>(b) * N + n) * P;
      for (int r = 0; r < patch; ++r)
        for (int c = 0; c < patch; ++c) {
          const T* src = iv + ((static_cast<size_t>(b) * H + pr * patch + r) * W +
                               pc * patch + c) * C;
          for (int ch = 0; ch < C; ++ch) dst[(r * patch + c) * C + ch] = src[ch];
        }
    }
  if (track(tape, {&img})) {
    out.set_requires_grad(true);
    TensorT<T> ic = img, oc = out;
    tape->record([ic, oc, B, H, W, C, patch, gh, gw, N, P]() mutable {
      (void)gh;
      const T* g = oc.grad();
      T* ig = ic.grad();
      for (int b = 0; b < B; ++b)
        for (int n = 0; n < N; ++n) {
          const int pr = n / gw, pc = n % gw;
          const T* src = g + (static_cast<size_t>(b) * N + n) * P;
          for (int r = 0; r < patch; ++r)
            for (int c = 0; c < patch; ++c) {
              T* dst = ig + ((static_cast<size_t>(b) * H + pr * patch + r) * W +
                             pc * patch + c) * C;
              for (int ch = 0; ch < C; ++ch) dst[ch] += src[(r * patch + c) * C + ch];
            }
        }
    });
  }
  return out;
}

// Inverse of patchify: [B, N, p*p*C] -> [B,H,W,C].
template <typename T>
TensorT<T> unpatchify(TapeT<T>* tape, const TensorT<T>& x, int H, int W, int C, int patch) {
  if (x.rank() != 3) throw ShapeError("unpatchify expects [B,N,P], got " + shape_str(x.shape()));
  const int B = x.dim(0), N = x.dim(1), P = x.dim(2);
  const int gh = H / patch, gw = W / patch;
  if (H % patch != 0 || W % patch != 0 || N != gh * gw || P != patch * patch * C)
    throw ShapeError("unpatchify geometry mismatch for " + shape_str(x.shape()));
  auto out = TensorT<T>::zeros({B, H, W, C});
  const T* xv = x.data();
  T* o = out.data();
  for (int b = 0; b < B; ++b)
    for (int n = 0; n < N; ++n) {
      const int pr = n / gw, pc = n % gw;
      const T* src = xv + (static_cast<size_t>(b) * N + n) * P;
      for (int r = 0; r < patch; ++r)
        for (int c = 0; c < patch; ++c) {
          T* dst = o + ((static_cast<size_t>(b) * H + pr * patch + r) * W + pc * patch + c) * C;
          for (int ch = 0; ch < C; ++ch) dst[ch] = src[(r * patch + c) * C + ch];
        }
    }
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    tape->record([xc, oc, B, H, W, C, patch, gw, N, P]() mutable {
      const T* g = oc.grad();
      T* xg = xc.grad();
      for (int b = 0; b < B; ++b)
        for (int n = 0; n < N; ++n) {
          const int pr = n / gw, pc = n % gw;
          T* dst = xg + (static_cast<size_t>(b) * N + n) * P;
          for (int r = 0; r < patch; ++r)
            for (int c = 0; c < patch; ++c) {
              const T* src = g + ((static_cast<size_t>(b) * H + pr * patch + r) * W +
                                  pc * patch + c) * C;
              for (int ch = 0; ch < C; ++ch) dst[(r * patch + c) * C + ch] += src[ch];
            }
        }
    });
  }
  return out;
}

}  // namespace vqim

#pragma once

// Differentiable primitives on TapeT. Every op appends one backward record;
// gradients are accumulated, so shared subexpressions are handled naturally.

#include <cmath>
#include <memory>
#include <vector>

#include "ptk/tape.hpp"

namespace ptk {

namespace detail {

template <typename T, typename FwdFn, typename BwdFn>
VarT<T> unary_op(VarT<T> a, FwdFn fwd, BwdFn dydx) {
  TapeT<T>& tp = *a.tape;
  const TensorT<T>& av = tp.value(a);
  TensorT<T> out = av;
  for (auto& x : out.data) x = fwd(x);
  VarT<T> o = tp.make(std::move(out), tp.needs_grad(a));
  if (tp.needs_grad(a)) {
    tp.record([a, o, dydx](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const TensorT<T>& g = t.grad_ref(o);
      const TensorT<T>& x = t.value(a);
      const TensorT<T>& y = t.value(o);
      TensorT<T> dx = TensorT<T>::zeros(x.shape);
      for (std::size_t i = 0; i < dx.data.size(); ++i)
        dx.data[i] = g.data[i] * dydx(x.data[i], y.data[i]);
      t.accum(a, dx);
    });
  }
  return o;
}

}  // namespace detail

// ---------------------------------------------------------------- arithmetic

template <typename T>
VarT<T> add(VarT<T> a, VarT<T> b) {
  TapeT<T>& tp = *a.tape;
  const auto& av = tp.value(a);
  const auto& bv = tp.value(b);
  PTK_CHECK(av.shape == bv.shape, "add: shape mismatch");
  TensorT<T> out = av;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
  VarT<T> o = tp.make(std::move(out), tp.needs_grad(a) || tp.needs_grad(b));
  if (tp.needs_grad(o)) {
    tp.record([a, b, o](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      if (t.needs_grad(a)) t.accum(a, g);
      if (t.needs_grad(b)) t.accum(b, g);
    });
  }
  return o;
}

template <typename T>
VarT<T> sub(VarT<T> a, VarT<T> b) {
  TapeT<T>& tp = *a.tape;
  const auto& av = tp.value(a);
  const auto& bv = tp.value(b);
  PTK_CHECK(av.shape == bv.shape, "sub: shape mismatch");
  TensorT<T> out = av;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv.data[i];
  VarT<T> o = tp.make(std::move(out), tp.needs_grad(a) || tp.needs_grad(b));
  if (tp.needs_grad(o)) {
    tp.record([a, b, o](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      if (t.needs_grad(a)) t.accum(a, g);
      if (t.needs_grad(b)) {
        TensorT<T> ng = g;
        for (auto& x : ng.data) x = -x;
        t.accum(b, ng);
      }
    });
  }
  return o;
}

template <typename T>
VarT<T> mul(VarT<T> a, VarT<T> b) {
  TapeT<T>& tp = *a.tape;
  const auto& av = tp.value(a);
  const auto& bv = tp.value(b);
  PTK_CHECK(av.shape == bv.shape, "mul: shape mismatch");
  TensorT<T> out = av;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
  VarT<T> o = tp.make(std::move(out), tp.needs_grad(a) || tp.needs_grad(b));
  if (tp.needs_grad(o)) {
    tp.record([a, b, o](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      if (t.needs_grad(a)) {
        TensorT<T> da = g;
        const auto& bvv = t.value(b);
        for (std::size_t i = 0; i < da.data.size(); ++i) da.data[i] *= bvv.data[i];
        t.accum(a, da);
      }
      if (t.needs_grad(b)) {
        TensorT<T> db = g;
        const auto& avv = t.value(a);
        for (std::size_t i = 0; i < db.data.size(); ++i) db.data[i] *= avv.data[i];
        t.accum(b, db);
      }
    });
  }
  return o;
}

template <typename T>
VarT<T> mul_scalar(VarT<T> a, double c) {
  return detail::unary_op(
      a, [c](T x) { return T(double(x) * c); },
      [c](T, T) { return T(c); });
}

template <typename T>
VarT<T> add_scalar(VarT<T> a, double c) {
  return detail::unary_op(
      a, [c](T x) { return T(double(x) + c); },
      [](T, T) { return T(1); });
}

template <typename T>
VarT<T> neg(VarT<T> a) {
  return mul_scalar(a, -1.0);
}

// x scaled by a scalar variable (e.g. a learnable inverse temperature).
template <typename T>
VarT<T> scale_by(VarT<T> x, VarT<T> s) {
  TapeT<T>& tp = *x.tape;
  PTK_CHECK(tp.value(s).numel() == 1, "scale_by: scale must be a scalar");
  const T sv = tp.value(s).data[0];
  TensorT<T> out = tp.value(x);
  for (auto& v : out.data) v *= sv;
  VarT<T> o = tp.make(std::move(out), tp.needs_grad(x) || tp.needs_grad(s));
  if (tp.needs_grad(o)) {
    tp.record([x, s, o, sv](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      if (t.needs_grad(x)) {
        TensorT<T> dx = g;
        for (auto& v : dx.data) v *= sv;
        t.accum(x, dx);
      }
      if (t.needs_grad(s)) {
        const auto& xv = t.value(x);
        double ds = 0;
        for (std::size_t i = 0; i < g.data.size(); ++i)
          ds += double(g.data[i]) * double(xv.data[i]);
        t.accum(s, TensorT<T>::scalar(T(ds)));
      }
    });
  }
  return o;
}

// -------------------------------------------------------------- nonlinearity

template <typename T>
VarT<T> relu(VarT<T> a) {
  return detail::unary_op(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
VarT<T> gelu(VarT<T> a) {
  return detail::unary_op(
      a,
      [](T x) {
        const double xd = double(x);
        return T(0.5 * xd * (1.0 + std::erf(xd / std::sqrt(2.0))));
      },
      [](T x, T) {
        const double xd = double(x);
        const double cdf = 0.5 * (1.0 + std::erf(xd / std::sqrt(2.0)));
        const double pdf = std::exp(-0.5 * xd * xd) / std::sqrt(2.0 * M_PI);
        return T(cdf + xd * pdf);
      });
}

template <typename T>
VarT<T> sigmoid(VarT<T> a) {
  return detail::unary_op(
      a, [](T x) { return T(1.0 / (1.0 + std::exp(-double(x)))); },
      [](T, T y) { return T(double(y) * (1.0 - double(y))); });
}

template <typename T>
VarT<T> tanh_op(VarT<T> a) {
  return detail::unary_op(
      a, [](T x) { return T(std::tanh(double(x))); },
      [](T, T y) { return T(1.0 - double(y) * double(y)); });
}

template <typename T>
VarT<T> exp_op(VarT<T> a) {
  return detail::unary_op(
      a, [](T x) { return T(std::exp(double(x))); },
      [](T, T y) { return y; });
}

template <typename T>
VarT<T> log_op(VarT<T> a) {
  return detail::unary_op(
      a, [](T x) { return T(std::log(double(x))); },
      [](T x, T) { return T(1.0 / double(x)); });
}

template <typename T>
VarT<T> recip(VarT<T> a) {
  return detail::unary_op(
      a, [](T x) { return T(1.0 / double(x)); },
      [](T, T y) { return T(-double(y) * double(y)); });
}

// --------------------------------------------------------------- reductions

template <typename T>
VarT<T> sum(VarT<T> a) {
  TapeT<T>& tp = *a.tape;
  double s = 0;
  for (T v : tp.value(a).data) s += double(v);
  VarT<T> o = tp.make(TensorT<T>::scalar(T(s)), tp.needs_grad(a));
  if (tp.needs_grad(a)) {
    tp.record([a, o](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const T g = t.grad_ref(o).data[0];
      TensorT<T> dx = TensorT<T>::full(t.value(a).shape, g);
      t.accum(a, dx);
    });
  }
  return o;
}

template <typename T>
VarT<T> mean(VarT<T> a) {
  const i64 n = a.numel();
  PTK_CHECK(n > 0, "mean: empty tensor");
  return mul_scalar(sum(a), 1.0 / double(n));
}

// Row-wise dot product of two [N,D] matrices -> [N].
template <typename T>
VarT<T> rows_dot(VarT<T> a, VarT<T> b) {
  TapeT<T>& tp = *a.tape;
  const auto& av = tp.value(a);
  const auto& bv = tp.value(b);
  PTK_CHECK(av.rank() == 2 && av.shape == bv.shape, "rows_dot: want equal [N,D]");
  const i64 n = av.shape[0], d = av.shape[1];
  TensorT<T> out({n});
  for (i64 i = 0; i < n; ++i) {
    double s = 0;
    for (i64 j = 0; j < d; ++j) s += double(av.at2(i, j)) * double(bv.at2(i, j));
    out[i] = T(s);
  }
  VarT<T> o = tp.make(std::move(out), tp.needs_grad(a) || tp.needs_grad(b));
  if (tp.needs_grad(o)) {
    tp.record([a, b, o, n, d](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      if (t.needs_grad(a)) {
        TensorT<T> da = TensorT<T>::zeros(t.value(a).shape);
        const auto& bvv = t.value(b);
        for (i64 i = 0; i < n; ++i)
          for (i64 j = 0; j < d; ++j) da.at2(i, j) = g[i] * bvv.at2(i, j);
        t.accum(a, da);
      }
      if (t.needs_grad(b)) {
        TensorT<T> db = TensorT<T>::zeros(t.value(b).shape);
        const auto& avv = t.value(a);
        for (i64 i = 0; i < n; ++i)
          for (i64 j = 0; j < d; ++j) db.at2(i, j) = g[i] * avv.at2(i, j);
        t.accum(b, db);
      }
    });
  }
  return o;
}

// Mean over axis 1 of [N,T,D] -> [N,D].
template <typename T>
VarT<T> mean_axis1(VarT<T> a) {
  TapeT<T>& tp = *a.tape;
  const auto& av = tp.value(a);
  PTK_CHECK(av.rank() == 3, "mean_axis1: want [N,T,D]");
  const i64 n = av.shape[0], tt = av.shape[1], d = av.shape[2];
  TensorT<T> out({n, d});
  for (i64 i = 0; i < n; ++i)
    for (i64 k = 0; k < d; ++k) {
      double s = 0;
      for (i64 j = 0; j < tt; ++j) s += double(av.at3(i, j, k));
      out.at2(i, k) = T(s / double(tt));
    }
  VarT<T> o = tp.make(std::move(out), tp.needs_grad(a));
  if (tp.needs_grad(a)) {
    tp.record([a, o, n, tt, d](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      TensorT<T> dx = TensorT<T>::zeros(t.value(a).shape);
      for (i64 i = 0; i < n; ++i)
        for (i64 j = 0; j < tt; ++j)
          for (i64 k = 0; k < d; ++k)
            dx.at3(i, j, k) = g.at2(i, k) / T(tt);
      t.accum(a, dx);
    });
  }
  return o;
}

// ------------------------------------------------------------ linear algebra

template <typename T>
VarT<T> matmul(VarT<T> a, VarT<T> b) {
  TapeT<T>& tp = *a.tape;
  const auto& av = tp.value(a);
  const auto& bv = tp.value(b);
  PTK_CHECK(av.rank() == 2 && bv.rank() == 2 && av.shape[1] == bv.shape[0],
            "matmul: incompatible shapes");
  const i64 m = av.shape[0], k = av.shape[1], n = bv.shape[1];
  TensorT<T> out({m, n});
  for (i64 i = 0; i < m; ++i)
    for (i64 p = 0; p < k; ++p) {
      const T aip = av.at2(i, p);
      if (aip == T(0)) continue;
      for (i64 j = 0; j < n; ++j) out.at2(i, j) += aip * bv.at2(p, j);
    }
  VarT<T> o = tp.make(std::move(out), tp.needs_grad(a) || tp.needs_grad(b));
  if (tp.needs_grad(o)) {
    tp.record([a, b, o, m, k, n](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      if (t.needs_grad(a)) {
        TensorT<T> da({m, k});
        const auto& bvv = t.value(b);
        for (i64 i = 0; i < m; ++i)
          for (i64 j = 0; j < n; ++j) {
            const T gij = g.at2(i, j);
            if (gij == T(0)) continue;
            for (i64 p = 0; p < k; ++p) da.at2(i, p) += gij * bvv.at2(p, j);
          }
        t.accum(a, da);
      }
      if (t.needs_grad(b)) {
        TensorT<T> db({k, n});
        const auto& avv = t.value(a);
        for (i64 i = 0; i < m; ++i)
          for (i64 p = 0; p < k; ++p) {
            const T aip = avv.at2(i, p);
            if (aip == T(0)) continue;
            for (i64 j = 0; j < n; ++j) db.at2(p, j) += aip * g.at2(i, j);
          }
        t.accum(b, db);
      }
    });
  }
  return o;
}

template <typename T>
VarT<T> transpose(VarT<T> a) {
  TapeT<T>& tp = *a.tape;
  const auto& av = tp.value(a);
  PTK_CHECK(av.rank() == 2, "transpose: want 2-d");
  const i64 m = av.shape[0], n = av.shape[1];
  TensorT<T> out({n, m});
  for (i64 i = 0; i < m; ++i)
    for (i64 j = 0; j < n; ++j) out.at2(j, i) = av.at2(i, j);
  VarT<T> o = tp.make(std::move(out), tp.needs_grad(a));
  if (tp.needs_grad(a)) {
    tp.record([a, o, m, n](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      TensorT<T> dx({m, n});
      for (i64 i = 0; i < m; ++i)
        for (i64 j = 0; j < n; ++j) dx.at2(i, j) = g.at2(j, i);
      t.accum(a, dx);
    });
  }
  return o;
}

// y = x W + b with x:[N,D], W:[D,M], b:[M].
template <typename T>
VarT<T> linear(VarT<T> x, VarT<T> w, VarT<T> b) {
  TapeT<T>& tp = *x.tape;
  PTK_CHECK(tp.value(b).rank() == 1 && tp.value(b).shape[0] == tp.value(w).shape[1],
            "linear: bias shape");
  VarT<T> y = matmul(x, w);
  const auto& bv = tp.value(b);
  // broadcast bias over rows
  const i64 n = tp.value(y).shape[0], m = tp.value(y).shape[1];
  TensorT<T> out = tp.value(y);
  for (i64 i = 0; i < n; ++i)
    for (i64 j = 0; j < m; ++j) out.at2(i, j) += bv[j];
  VarT<T> o = tp.make(std::move(out), tp.needs_grad(y) || tp.needs_grad(b));
  if (tp.needs_grad(o)) {
    tp.record([y, b, o, n, m](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      if (t.needs_grad(y)) t.accum(y, g);
      if (t.needs_grad(b)) {
        TensorT<T> db({m});
        for (i64 i = 0; i < n; ++i)
          for (i64 j = 0; j < m; ++j) db[j] += g.at2(i, j);
        t.accum(b, db);
      }
    });
  }
  return o;
}

// Batched matmul on 3-d tensors: a:[B,M,K], b:[B,K,N] (or [B,N,K] with
// transpose_b), output [B,M,N].
template <typename T>
VarT<T> batched_matmul(VarT<T> a, VarT<T> b, bool transpose_b = false) {
  TapeT<T>& tp = *a.tape;
  const auto& av = tp.value(a);
  const auto& bv = tp.value(b);
  PTK_CHECK(av.rank() == 3 && bv.rank() == 3 && av.shape[0] == bv.shape[0],
            "batched_matmul: want matching 3-d");
  const i64 bsz = av.shape[0], m = av.shape[1], k = av.shape[2];
  const i64 n = transpose_b ? bv.shape[1] : bv.shape[2];
  PTK_CHECK((transpose_b ? bv.shape[2] : bv.shape[1]) == k, "batched_matmul: inner dim");
  TensorT<T> out({bsz, m, n});
  for (i64 q = 0; q < bsz; ++q)
    for (i64 i = 0; i < m; ++i)
      for (i64 j = 0; j < n; ++j) {
        double s = 0;
        for (i64 p = 0; p < k; ++p) {
          const T bval = transpose_b ? bv.at3(q, j, p) : bv.at3(q, p, j);
          s += double(av.at3(q, i, p)) * double(bval);
        }
        out.at3(q, i, j) = T(s);
      }
  VarT<T> o = tp.make(std::move(out), tp.needs_grad(a) || tp.needs_grad(b));
  if (tp.needs_grad(o)) {
    tp.record([a, b, o, bsz, m, k, n, transpose_b](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      if (t.needs_grad(a)) {
        TensorT<T> da = TensorT<T>::zeros(t.value(a).shape);
        const auto& bvv = t.value(b);
        for (i64 q = 0; q < bsz; ++q)
          for (i64 i = 0; i < m; ++i)
            for (i64 p = 0; p < k; ++p) {
              double s = 0;
              for (i64 j = 0; j < n; ++j) {
                const T bval = transpose_b ? bvv.at3(q, j, p) : bvv.at3(q, p, j);
                s += double(g.at3(q, i, j)) * double(bval);
              }
              da.at3(q, i, p) = T(s);
            }
        t.accum(a, da);
      }
      if (t.needs_grad(b)) {
        TensorT<T> db = TensorT<T>::zeros(t.value(b).shape);
        const auto& avv = t.value(a);
        for (i64 q = 0; q < bsz; ++q)
          for (i64 p = 0; p < k; ++p)
            for (i64 j = 0; j < n; ++j) {
              double s = 0;
              for (i64 i = 0; i < m; ++i)
                s += double(avv.at3(q, i, p)) * double(g.at3(q, i, j));
              if (transpose_b)
                db.at3(q, j, p) += T(s);
              else
                db.at3(q, p, j) += T(s);
            }
        t.accum(b, db);
      }
    });
  }
  return o;
}

// ------------------------------------------------------- shape manipulation

template <typename T>
VarT<T> reshape(VarT<T> a, std::vector<i64> shape) {
  TapeT<T>& tp = *a.tape;
  TensorT<T> out = tp.value(a).reshaped(shape);
  VarT<T> o = tp.make(std::move(out), tp.needs_grad(a));
  if (tp.needs_grad(a)) {
    tp.record([a, o](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      t.accum(a, t.grad_ref(o).reshaped(t.value(a).shape));
    });
  }
  return o;
}

// Generic bijective reindex: out.data[i] = in.data[index[i]].
template <typename T>
VarT<T> gather_permute(VarT<T> a, std::vector<i64> out_shape, std::vector<i64> index) {
  TapeT<T>& tp = *a.tape;
  const auto& av = tp.value(a);
  PTK_CHECK(i64(index.size()) == TensorT<T>::numel_of(out_shape),
            "gather_permute: index size");
  TensorT<T> out(std::move(out_shape));
  for (std::size_t i = 0; i < index.size(); ++i) out.data[i] = av.data[std::size_t(index[i])];
  VarT<T> o = tp.make(std::move(out), tp.needs_grad(a));
  if (tp.needs_grad(a)) {
    auto idx = std::make_shared<std::vector<i64>>(std::move(index));
    tp.record([a, o, idx](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      TensorT<T> dx = TensorT<T>::zeros(t.value(a).shape);
      for (std::size_t i = 0; i < idx->size(); ++i)
        dx.data[std::size_t((*idx)[i])] += g.data[i];
      t.accum(a, dx);
    });
  }
  return o;
}

// Rows of a 2-d matrix by (possibly repeated) indices -> [M,D].
template <typename T>
VarT<T> gather_rows(VarT<T> a, const std::vector<i64>& rows) {
  const auto& av = a.tape->value(a);
  PTK_CHECK(av.rank() == 2, "gather_rows: want 2-d");
  const i64 d = av.shape[1];
  std::vector<i64> index;
  index.reserve(rows.size() * std::size_t(d));
  for (i64 r : rows) {
    PTK_CHECK(r >= 0 && r < av.shape[0], "gather_rows: row out of range");
    for (i64 j = 0; j < d; ++j) index.push_back(r * d + j);
  }
  return gather_permute(a, {i64(rows.size()), d}, std::move(index));
}

// Contiguous slice along dim 0 (any rank).
template <typename T>
VarT<T> slice_dim0(VarT<T> a, i64 n0, i64 n1) {
  TapeT<T>& tp = *a.tape;
  const auto& av = tp.value(a);
  PTK_CHECK(0 <= n0 && n0 < n1 && n1 <= av.shape[0], "slice_dim0: bad range");
  i64 inner = 1;
  for (int i = 1; i < av.rank(); ++i) inner *= av.shape[i];
  std::vector<i64> shape = av.shape;
  shape[0] = n1 - n0;
  TensorT<T> out(shape);
  std::copy(av.data.begin() + n0 * inner, av.data.begin() + n1 * inner, out.data.begin());
  VarT<T> o = tp.make(std::move(out), tp.needs_grad(a));
  if (tp.needs_grad(a)) {
    tp.record([a, o, n0, inner](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      TensorT<T> dx = TensorT<T>::zeros(t.value(a).shape);
      std::copy(g.data.begin(), g.data.end(), dx.data.begin() + n0 * inner);
      t.accum(a, dx);
    });
  }
  return o;
}

// Concatenate along dim 0 (all trailing dims must match).
template <typename T>
VarT<T> concat_dim0(const std::vector<VarT<T>>& xs) {
  PTK_CHECK(!xs.empty(), "concat_dim0: empty input");
  TapeT<T>& tp = *xs[0].tape;
  std::vector<i64> shape = tp.value(xs[0]).shape;
  i64 total = 0;
  bool req = false;
  for (const auto& x : xs) {
    const auto& v = tp.value(x);
    for (int i = 1; i < int(shape.size()); ++i)
      PTK_CHECK(v.shape[i] == shape[std::size_t(i)], "concat_dim0: trailing dims differ");
    total += v.shape[0];
    req = req || tp.needs_grad(x);
  }
  shape[0] = total;
  TensorT<T> out(shape);
  i64 off = 0;
  for (const auto& x : xs) {
    const auto& v = tp.value(x);
    std::copy(v.data.begin(), v.data.end(), out.data.begin() + off);
    off += v.numel();
  }
  VarT<T> o = tp.make(std::move(out), req);
  if (req) {
    auto parts = std::make_shared<std::vector<VarT<T>>>(xs);
    tp.record([parts, o](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      i64 off2 = 0;
      for (const auto& x : *parts) {
        const i64 n = t.value(x).numel();
        if (t.needs_grad(x)) {
          TensorT<T> dx = TensorT<T>::zeros(t.value(x).shape);
          std::copy(g.data.begin() + off2, g.data.begin() + off2 + n, dx.data.begin());
          t.accum(x, dx);
        }
        off2 += n;
      }
    });
  }
  return o;
}

// Add a [T,D] parameter to every batch slice of a [N,T,D] tensor.
template <typename T>
VarT<T> add_bcast_batch(VarT<T> x, VarT<T> p) {
  TapeT<T>& tp = *x.tape;
  const auto& xv = tp.value(x);
  const auto& pv = tp.value(p);
  PTK_CHECK(xv.rank() == 3 && pv.rank() == 2 && xv.shape[1] == pv.shape[0] &&
                xv.shape[2] == pv.shape[1],
            "add_bcast_batch: shape mismatch");
  const i64 n = xv.shape[0], inner = pv.numel();
  TensorT<T> out = xv;
  for (i64 i = 0; i < n; ++i)
    for (i64 j = 0; j < inner; ++j) out.data[std::size_t(i * inner + j)] += pv.data[std::size_t(j)];
  VarT<T> o = tp.make(std::move(out), tp.needs_grad(x) || tp.needs_grad(p));
  if (tp.needs_grad(o)) {
    tp.record([x, p, o, n, inner](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      if (t.needs_grad(x)) t.accum(x, g);
      if (t.needs_grad(p)) {
        TensorT<T> dp = TensorT<T>::zeros(t.value(p).shape);
        for (i64 i = 0; i < n; ++i)
          for (i64 j = 0; j < inner; ++j) dp.data[std::size_t(j)] += g.data[std::size_t(i * inner + j)];
        t.accum(p, dp);
      }
    });
  }
  return o;
}

// -------------------------------------------------------- softmax and losses

// Softmax over the last dimension, any rank.
template <typename T>
VarT<T> softmax_lastdim(VarT<T> a) {
  TapeT<T>& tp = *a.tape;
  const auto& av = tp.value(a);
  PTK_CHECK(av.rank() >= 1, "softmax: want rank >= 1");
  const i64 d = av.shape.back();
  const i64 rows = av.numel() / d;
  TensorT<T> out = av;
  for (i64 r = 0; r < rows; ++r) {
    T* p = out.data.data() + r * d;
    double mx = -1e300;
    for (i64 j = 0; j < d; ++j) mx = std::max(mx, double(p[j]));
    double z = 0;
    for (i64 j = 0; j < d; ++j) z += std::exp(double(p[j]) - mx);
    for (i64 j = 0; j < d; ++j) p[j] = T(std::exp(double(p[j]) - mx) / z);
  }
  VarT<T> o = tp.make(std::move(out), tp.needs_grad(a));
  if (tp.needs_grad(a)) {
    tp.record([a, o, rows, d](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      const auto& y = t.value(o);
      TensorT<T> dx = TensorT<T>::zeros(t.value(a).shape);
      for (i64 r = 0; r < rows; ++r) {
        const T* yp = y.data.data() + r * d;
        const T* gp = g.data.data() + r * d;
        double dot = 0;
        for (i64 j = 0; j < d; ++j) dot += double(yp[j]) * double(gp[j]);
        T* dp = dx.data.data() + r * d;
        for (i64 j = 0; j < d; ++j)
          dp[j] = T(double(yp[j]) * (double(gp[j]) - dot));
      }
      t.accum(a, dx);
    });
  }
  return o;
}

// Mean cross-entropy of logits [N,C] against integer labels. Rows with
// label < 0 are ignored (contribute nothing); the mean is over counted rows.
template <typename T>
VarT<T> cross_entropy(VarT<T> logits, const std::vector<i64>& labels) {
  TapeT<T>& tp = *logits.tape;
  const auto& lv = tp.value(logits);
  PTK_CHECK(lv.rank() == 2, "cross_entropy: want [N,C]");
  const i64 n = lv.shape[0], c = lv.shape[1];
  PTK_CHECK(i64(labels.size()) == n, "cross_entropy: labels size");
  i64 counted = 0;
  double loss = 0;
  std::vector<double> logz(std::size_t(n), 0.0), mx(std::size_t(n), 0.0);
  for (i64 i = 0; i < n; ++i) {
    double m = -1e300;
    for (i64 j = 0; j < c; ++j) m = std::max(m, double(lv.at2(i, j)));
    double z = 0;
    for (i64 j = 0; j < c; ++j) z += std::exp(double(lv.at2(i, j)) - m);
    mx[std::size_t(i)] = m;
    logz[std::size_t(i)] = std::log(z) + m;
    if (labels[std::size_t(i)] >= 0) {
      PTK_CHECK(labels[std::size_t(i)] < c, "cross_entropy: label out of range");
      loss += logz[std::size_t(i)] - double(lv.at2(i, labels[std::size_t(i)]));
      ++counted;
    }
  }
  const double denom = counted > 0 ? double(counted) : 1.0;
  VarT<T> o = tp.make(TensorT<T>::scalar(T(loss / denom)), tp.needs_grad(logits));
  if (tp.needs_grad(logits)) {
    auto labs = std::make_shared<std::vector<i64>>(labels);
    tp.record([logits, o, labs, n, c, denom](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const T g = t.grad_ref(o).data[0];
      const auto& lvv = t.value(logits);
      TensorT<T> dx = TensorT<T>::zeros(lvv.shape);
      for (i64 i = 0; i < n; ++i) {
        const i64 y = (*labs)[std::size_t(i)];
        if (y < 0) continue;
        double m = -1e300;
        for (i64 j = 0; j < c; ++j) m = std::max(m, double(lvv.at2(i, j)));
        double z = 0;
        for (i64 j = 0; j < c; ++j) z += std::exp(double(lvv.at2(i, j)) - m);
        for (i64 j = 0; j < c; ++j) {
          double p = std::exp(double(lvv.at2(i, j)) - m) / z;
          dx.at2(i, j) = T(double(g) * (p - (j == y ? 1.0 : 0.0)) / denom);
        }
      }
      t.accum(logits, dx);
    });
  }
  return o;
}

// ------------------------------------------------------------- normalization

// Row-wise L2 normalization of [N,D].
template <typename T>
VarT<T> l2_normalize_rows(VarT<T> a, double eps = 1e-12) {
  TapeT<T>& tp = *a.tape;
  const auto& av = tp.value(a);
  PTK_CHECK(av.rank() == 2, "l2_normalize_rows: want [N,D]");
  const i64 n = av.shape[0], d = av.shape[1];
  TensorT<T> out = av;
  std::vector<double> norms(std::size_t(n), 0.0);
  for (i64 i = 0; i < n; ++i) {
    double s = 0;
    for (i64 j = 0; j < d; ++j) s += double(av.at2(i, j)) * double(av.at2(i, j));
    const double r = std::sqrt(s) + eps;
    norms[std::size_t(i)] = r;
    for (i64 j = 0; j < d; ++j) out.at2(i, j) = T(double(av.at2(i, j)) / r);
  }
  VarT<T> o = tp.make(std::move(out), tp.needs_grad(a));
  if (tp.needs_grad(a)) {
    auto nr = std::make_shared<std::vector<double>>(std::move(norms));
    tp.record([a, o, nr, n, d](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      const auto& y = t.value(o);
      TensorT<T> dx = TensorT<T>::zeros(t.value(a).shape);
      for (i64 i = 0; i < n; ++i) {
        double dot = 0;
        for (i64 j = 0; j < d; ++j) dot += double(g.at2(i, j)) * double(y.at2(i, j));
        const double r = (*nr)[std::size_t(i)];
        for (i64 j = 0; j < d; ++j)
          dx.at2(i, j) = T((double(g.at2(i, j)) - dot * double(y.at2(i, j))) / r);
      }
      t.accum(a, dx);
    });
  }
  return o;
}

// Layer normalization over the last dim of [N,D] with affine parameters.
template <typename T>
VarT<T> layernorm(VarT<T> x, VarT<T> gamma, VarT<T> beta, double eps = 1e-5) {
  TapeT<T>& tp = *x.tape;
  const auto& xv = tp.value(x);
  PTK_CHECK(xv.rank() >= 2, "layernorm: want rank >= 2");
  const i64 d = xv.shape.back();
  const i64 rows = xv.numel() / d;
  const auto& gv = tp.value(gamma);
  PTK_CHECK(gv.numel() == d && tp.value(beta).numel() == d, "layernorm: affine shape");
  TensorT<T> out = xv;
  std::vector<double> mu(std::size_t(rows), 0.0), inv(std::size_t(rows), 0.0);
  for (i64 r = 0; r < rows; ++r) {
    const T* p = xv.data.data() + r * d;
    double m = 0;
    for (i64 j = 0; j < d; ++j) m += double(p[j]);
    m /= double(d);
    double v = 0;
    for (i64 j = 0; j < d; ++j) v += (double(p[j]) - m) * (double(p[j]) - m);
    v /= double(d);
    const double istd = 1.0 / std::sqrt(v + eps);
    mu[std::size_t(r)] = m;
    inv[std::size_t(r)] = istd;
    T* q = out.data.data() + r * d;
    const auto& bv = tp.value(beta);
    for (i64 j = 0; j < d; ++j)
      q[j] = T((double(p[j]) - m) * istd * double(gv[j]) + double(bv[j]));
  }
  const bool req = tp.needs_grad(x) || tp.needs_grad(gamma) || tp.needs_grad(beta);
  VarT<T> o = tp.make(std::move(out), req);
  if (req) {
    auto mus = std::make_shared<std::vector<double>>(std::move(mu));
    auto invs = std::make_shared<std::vector<double>>(std::move(inv));
    tp.record([x, gamma, beta, o, mus, invs, rows, d](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      const auto& xvv = t.value(x);
      const auto& gvv = t.value(gamma);
      TensorT<T> dgamma = TensorT<T>::zeros(t.value(gamma).shape);
      TensorT<T> dbeta = TensorT<T>::zeros(t.value(beta).shape);
      TensorT<T> dx = TensorT<T>::zeros(xvv.shape);
      for (i64 r = 0; r < rows; ++r) {
        const double m = (*mus)[std::size_t(r)], istd = (*invs)[std::size_t(r)];
        const T* xp = xvv.data.data() + r * d;
        const T* gp = g.data.data() + r * d;
        double sum_gh = 0, sum_ghx = 0;
        for (i64 j = 0; j < d; ++j) {
          const double xhat = (double(xp[j]) - m) * istd;
          const double gh = double(gp[j]) * double(gvv[j]);
          sum_gh += gh;
          sum_ghx += gh * xhat;
          dgamma[j] += T(double(gp[j]) * xhat);
          dbeta[j] += gp[j];
        }
        T* dp = dx.data.data() + r * d;
        for (i64 j = 0; j < d; ++j) {
          const double xhat = (double(xp[j]) - m) * istd;
          const double gh = double(gp[j]) * double(gvv[j]);
          dp[j] = T(istd * (gh - sum_gh / double(d) - xhat * sum_ghx / double(d)));
        }
      }
      if (t.needs_grad(x)) t.accum(x, dx);
      if (t.needs_grad(gamma)) t.accum(gamma, dgamma);
      if (t.needs_grad(beta)) t.accum(beta, dbeta);
    });
  }
  return o;
}

// ---------------------------------------------------------------- utilities

// Cut the gradient path: a fresh non-grad leaf carrying a copy of the value.
template <typename T>
VarT<T> detach(VarT<T> a) {
  return a.tape->constant(a.tape->value(a));
}

// Mean cosine similarity over matched rows (both sides [N,D]).
template <typename T>
VarT<T> cosine_rows(VarT<T> a, VarT<T> b) {
  return rows_dot(l2_normalize_rows(a), l2_normalize_rows(b));
}

template <typename T>
VarT<T> mse_loss(VarT<T> a, VarT<T> b) {
  VarT<T> d = sub(a, b);
  return mean(mul(d, d));
}

}  // namespace ptk

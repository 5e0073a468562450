#pragma once

// Convolution, pooling, batch-norm, spatial permutations and RoI alignment.

#include <array>

#include "ptk/ops.hpp"

namespace ptk {

namespace detail {
inline i64 conv_out(i64 in, i64 k, i64 s, i64 p) { return (in + 2 * p - k) / s + 1; }

// output index range [lo, hi) for which the input index i*stride - pad + off
// stays inside [0, extent)
inline void conv_span(i64 out_extent, i64 in_extent, i64 stride, i64 pad, i64 off, i64* lo,
                      i64* hi) {
  i64 l = 0;
  if (pad - off > 0) l = (pad - off + stride - 1) / stride;
  i64 h = out_extent;
  const i64 max_i = in_extent - 1 - off + pad;
  if (max_i < 0)
    h = 0;
  else
    h = std::min<i64>(out_extent, max_i / stride + 1);
  *lo = l;
  *hi = std::max(l, h);
}
}

// x:[N,Cin,H,W], w:[Cout,Cin,kh,kw].
template <typename T>
VarT<T> conv2d(VarT<T> x, VarT<T> w, i64 stride = 1, i64 pad = 0) {
  TapeT<T>& tp = *x.tape;
  const auto& xv = tp.value(x);
  const auto& wv = tp.value(w);
  PTK_CHECK(xv.rank() == 4 && wv.rank() == 4, "conv2d: want 4-d tensors");
  PTK_CHECK(xv.shape[1] == wv.shape[1], "conv2d: channel mismatch");
  const i64 n = xv.shape[0], cin = xv.shape[1], h = xv.shape[2], wd = xv.shape[3];
  const i64 cout = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3];
  const i64 oh = detail::conv_out(h, kh, stride, pad), ow = detail::conv_out(wd, kw, stride, pad);
  PTK_CHECK(oh > 0 && ow > 0, "conv2d: output collapses to zero");
  TensorT<T> out({n, cout, oh, ow});
  // tap-hoisted accumulation over contiguous output rows
  for (i64 b = 0; b < n; ++b)
    for (i64 co = 0; co < cout; ++co)
      for (i64 ci = 0; ci < cin; ++ci) {
        const T* xc = xv.data.data() + (b * cin + ci) * h * wd;
        T* oc = out.data.data() + (b * cout + co) * oh * ow;
        const T* wc = wv.data.data() + (co * cin + ci) * kh * kw;
        for (i64 u = 0; u < kh; ++u) {
          i64 ilo, ihi;
          detail::conv_span(oh, h, stride, pad, u, &ilo, &ihi);
          for (i64 v = 0; v < kw; ++v) {
            const T wtap = wc[u * kw + v];
            if (wtap == T(0)) continue;
            i64 jlo, jhi;
            detail::conv_span(ow, wd, stride, pad, v, &jlo, &jhi);
            for (i64 i = ilo; i < ihi; ++i) {
              const T* xrow = xc + (i * stride - pad + u) * wd - pad + v;
              T* orow = oc + i * ow;
              if (stride == 1)
                for (i64 j = jlo; j < jhi; ++j) orow[j] += wtap * xrow[j];
              else
                for (i64 j = jlo; j < jhi; ++j) orow[j] += wtap * xrow[j * stride];
            }
          }
        }
      }
  VarT<T> o = tp.make(std::move(out), tp.needs_grad(x) || tp.needs_grad(w));
  if (tp.needs_grad(o)) {
    tp.record([x, w, o, n, cin, h, wd, cout, kh, kw, oh, ow, stride, pad](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      const auto& xvv = t.value(x);
      const auto& wvv = t.value(w);
      TensorT<T> dx = TensorT<T>::zeros(xvv.shape);
      TensorT<T> dw = TensorT<T>::zeros(wvv.shape);
      for (i64 b = 0; b < n; ++b)
        for (i64 co = 0; co < cout; ++co)
          for (i64 ci = 0; ci < cin; ++ci) {
            const T* xc = xvv.data.data() + (b * cin + ci) * h * wd;
            T* dxc = dx.data.data() + (b * cin + ci) * h * wd;
            const T* gc = g.data.data() + (b * cout + co) * oh * ow;
            const T* wc = wvv.data.data() + (co * cin + ci) * kh * kw;
            T* dwc = dw.data.data() + (co * cin + ci) * kh * kw;
            for (i64 u = 0; u < kh; ++u) {
              i64 ilo, ihi;
              detail::conv_span(oh, h, stride, pad, u, &ilo, &ihi);
              for (i64 v = 0; v < kw; ++v) {
                const T wtap = wc[u * kw + v];
                i64 jlo, jhi;
                detail::conv_span(ow, wd, stride, pad, v, &jlo, &jhi);
                double dw_acc = 0;
                for (i64 i = ilo; i < ihi; ++i) {
                  const T* grow = gc + i * ow;
                  const i64 base = (i * stride - pad + u) * wd - pad + v;
                  const T* xrow = xc + base;
                  T* dxrow = dxc + base;
                  if (stride == 1) {
                    for (i64 j = jlo; j < jhi; ++j) {
                      dxrow[j] += wtap * grow[j];
                      dw_acc += double(xrow[j]) * double(grow[j]);
                    }
                  } else {
                    for (i64 j = jlo; j < jhi; ++j) {
                      dxrow[j * stride] += wtap * grow[j];
                      dw_acc += double(xrow[j * stride]) * double(grow[j]);
                    }
                  }
                }
                dwc[u * kw + v] += T(dw_acc);
              }
            }
          }
      if (t.needs_grad(x)) t.accum(x, dx);
      if (t.needs_grad(w)) t.accum(w, dw);
    });
  }
  return o;
}

// Depthwise: w:[C,1,kh,kw], one filter per channel.
template <typename T>
VarT<T> depthwise_conv2d(VarT<T> x, VarT<T> w, i64 stride = 1, i64 pad = 0) {
  TapeT<T>& tp = *x.tape;
  const auto& xv = tp.value(x);
  const auto& wv = tp.value(w);
  PTK_CHECK(xv.rank() == 4 && wv.rank() == 4 && wv.shape[1] == 1, "dwconv: want [C,1,k,k]");
  PTK_CHECK(xv.shape[1] == wv.shape[0], "dwconv: channel mismatch");
  const i64 n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], wd = xv.shape[3];
  const i64 kh = wv.shape[2], kw = wv.shape[3];
  const i64 oh = detail::conv_out(h, kh, stride, pad), ow = detail::conv_out(wd, kw, stride, pad);
  PTK_CHECK(oh > 0 && ow > 0, "dwconv: output collapses to zero");
  TensorT<T> out({n, c, oh, ow});
  for (i64 b = 0; b < n; ++b)
    for (i64 ch = 0; ch < c; ++ch) {
      const T* xc = xv.data.data() + (b * c + ch) * h * wd;
      T* oc = out.data.data() + (b * c + ch) * oh * ow;
      const T* wc = wv.data.data() + ch * kh * kw;
      for (i64 u = 0; u < kh; ++u) {
        i64 ilo, ihi;
        detail::conv_span(oh, h, stride, pad, u, &ilo, &ihi);
        for (i64 v = 0; v < kw; ++v) {
          const T wtap = wc[u * kw + v];
          if (wtap == T(0)) continue;
          i64 jlo, jhi;
          detail::conv_span(ow, wd, stride, pad, v, &jlo, &jhi);
          for (i64 i = ilo; i < ihi; ++i) {
            const T* xrow = xc + (i * stride - pad + u) * wd - pad + v;
            T* orow = oc + i * ow;
            if (stride == 1)
              for (i64 j = jlo; j < jhi; ++j) orow[j] += wtap * xrow[j];
            else
              for (i64 j = jlo; j < jhi; ++j) orow[j] += wtap * xrow[j * stride];
          }
        }
      }
    }
  VarT<T> o = tp.make(std::move(out), tp.needs_grad(x) || tp.needs_grad(w));
  if (tp.needs_grad(o)) {
    tp.record([x, w, o, n, c, h, wd, kh, kw, oh, ow, stride, pad](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      const auto& xvv = t.value(x);
      const auto& wvv = t.value(w);
      TensorT<T> dx = TensorT<T>::zeros(xvv.shape);
      TensorT<T> dw = TensorT<T>::zeros(wvv.shape);
      for (i64 b = 0; b < n; ++b)
        for (i64 ch = 0; ch < c; ++ch) {
          const T* xc = xvv.data.data() + (b * c + ch) * h * wd;
          T* dxc = dx.data.data() + (b * c + ch) * h * wd;
          const T* gc = g.data.data() + (b * c + ch) * oh * ow;
          const T* wc = wvv.data.data() + ch * kh * kw;
          T* dwc = dw.data.data() + ch * kh * kw;
          for (i64 u = 0; u < kh; ++u) {
            i64 ilo, ihi;
            detail::conv_span(oh, h, stride, pad, u, &ilo, &ihi);
            for (i64 v = 0; v < kw; ++v) {
              const T wtap = wc[u * kw + v];
              i64 jlo, jhi;
              detail::conv_span(ow, wd, stride, pad, v, &jlo, &jhi);
              double dw_acc = 0;
              for (i64 i = ilo; i < ihi; ++i) {
                const T* grow = gc + i * ow;
                const i64 base = (i * stride - pad + u) * wd - pad + v;
                const T* xrow = xc + base;
                T* dxrow = dxc + base;
                if (stride == 1) {
                  for (i64 j = jlo; j < jhi; ++j) {
                    dxrow[j] += wtap * grow[j];
                    dw_acc += double(xrow[j]) * double(grow[j]);
                  }
                } else {
                  for (i64 j = jlo; j < jhi; ++j) {
                    dxrow[j * stride] += wtap * grow[j];
                    dw_acc += double(xrow[j * stride]) * double(grow[j]);
                  }
                }
              }
              dwc[u * kw + v] += T(dw_acc);
            }
          }
        }
      if (t.needs_grad(x)) t.accum(x, dx);
      if (t.needs_grad(w)) t.accum(w, dw);
    });
  }
  return o;
}

// Per-channel bias on [N,C,H,W].
template <typename T>
VarT<T> add_channel_bias(VarT<T> x, VarT<T> b) {
  TapeT<T>& tp = *x.tape;
  const auto& xv = tp.value(x);
  const auto& bv = tp.value(b);
  PTK_CHECK(xv.rank() == 4 && bv.numel() == xv.shape[1], "add_channel_bias: shapes");
  const i64 n = xv.shape[0], c = xv.shape[1], hw = xv.shape[2] * xv.shape[3];
  TensorT<T> out = xv;
  for (i64 bb = 0; bb < n; ++bb)
    for (i64 ch = 0; ch < c; ++ch) {
      T* p = out.data.data() + (bb * c + ch) * hw;
      for (i64 i = 0; i < hw; ++i) p[i] += bv[ch];
    }
  VarT<T> o = tp.make(std::move(out), tp.needs_grad(x) || tp.needs_grad(b));
  if (tp.needs_grad(o)) {
    tp.record([x, b, o, n, c, hw](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      if (t.needs_grad(x)) t.accum(x, g);
      if (t.needs_grad(b)) {
        TensorT<T> db = TensorT<T>::zeros(t.value(b).shape);
        for (i64 bb = 0; bb < n; ++bb)
          for (i64 ch = 0; ch < c; ++ch) {
            const T* p = g.data.data() + (bb * c + ch) * hw;
            double s = 0;
            for (i64 i = 0; i < hw; ++i) s += double(p[i]);
            db[ch] += T(s);
          }
        t.accum(b, db);
      }
    });
  }
  return o;
}

// Scale each channel of x:[N,C,H,W] by s:[N,C] (squeeze-excite gating).
template <typename T>
VarT<T> channel_scale(VarT<T> x, VarT<T> s) {
  TapeT<T>& tp = *x.tape;
  const auto& xv = tp.value(x);
  const auto& sv = tp.value(s);
  PTK_CHECK(xv.rank() == 4 && sv.rank() == 2 && sv.shape[0] == xv.shape[0] &&
                sv.shape[1] == xv.shape[1],
            "channel_scale: shapes");
  const i64 n = xv.shape[0], c = xv.shape[1], hw = xv.shape[2] * xv.shape[3];
  TensorT<T> out = xv;
  for (i64 b = 0; b < n; ++b)
    for (i64 ch = 0; ch < c; ++ch) {
      const T sc = sv.at2(b, ch);
      T* p = out.data.data() + (b * c + ch) * hw;
      for (i64 i = 0; i < hw; ++i) p[i] *= sc;
    }
  VarT<T> o = tp.make(std::move(out), tp.needs_grad(x) || tp.needs_grad(s));
  if (tp.needs_grad(o)) {
    tp.record([x, s, o, n, c, hw](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      const auto& xvv = t.value(x);
      const auto& svv = t.value(s);
      if (t.needs_grad(x)) {
        TensorT<T> dx = TensorT<T>::zeros(xvv.shape);
        for (i64 b = 0; b < n; ++b)
          for (i64 ch = 0; ch < c; ++ch) {
            const T sc = svv.at2(b, ch);
            const T* gp = g.data.data() + (b * c + ch) * hw;
            T* dp = dx.data.data() + (b * c + ch) * hw;
            for (i64 i = 0; i < hw; ++i) dp[i] = gp[i] * sc;
          }
        t.accum(x, dx);
      }
      if (t.needs_grad(s)) {
        TensorT<T> ds = TensorT<T>::zeros(svv.shape);
        for (i64 b = 0; b < n; ++b)
          for (i64 ch = 0; ch < c; ++ch) {
            const T* gp = g.data.data() + (b * c + ch) * hw;
            const T* xp = xvv.data.data() + (b * c + ch) * hw;
            double acc = 0;
            for (i64 i = 0; i < hw; ++i) acc += double(gp[i]) * double(xp[i]);
            ds.at2(b, ch) = T(acc);
          }
        t.accum(s, ds);
      }
    });
  }
  return o;
}

// ------------------------------------------------------------------- pooling

template <typename T>
VarT<T> avg_pool2d(VarT<T> x, i64 k, i64 s) {
  TapeT<T>& tp = *x.tape;
  const auto& xv = tp.value(x);
  PTK_CHECK(xv.rank() == 4, "avg_pool2d: want 4-d");
  const i64 n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
  const i64 oh = (h - k) / s + 1, ow = (w - k) / s + 1;
  PTK_CHECK(oh > 0 && ow > 0, "avg_pool2d: output collapses");
  TensorT<T> out({n, c, oh, ow});
  for (i64 b = 0; b < n; ++b)
    for (i64 ch = 0; ch < c; ++ch)
      for (i64 i = 0; i < oh; ++i)
        for (i64 j = 0; j < ow; ++j) {
          double acc = 0;
          for (i64 u = 0; u < k; ++u)
            for (i64 v = 0; v < k; ++v) acc += double(xv.at4(b, ch, i * s + u, j * s + v));
          out.at4(b, ch, i, j) = T(acc / double(k * k));
        }
  VarT<T> o = tp.make(std::move(out), tp.needs_grad(x));
  if (tp.needs_grad(x)) {
    tp.record([x, o, n, c, oh, ow, k, s](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      TensorT<T> dx = TensorT<T>::zeros(t.value(x).shape);
      for (i64 b = 0; b < n; ++b)
        for (i64 ch = 0; ch < c; ++ch)
          for (i64 i = 0; i < oh; ++i)
            for (i64 j = 0; j < ow; ++j) {
              const T go = T(double(g.at4(b, ch, i, j)) / double(k * k));
              for (i64 u = 0; u < k; ++u)
                for (i64 v = 0; v < k; ++v) dx.at4(b, ch, i * s + u, j * s + v) += go;
            }
      t.accum(x, dx);
    });
  }
  return o;
}

template <typename T>
VarT<T> max_pool2d(VarT<T> x, i64 k, i64 s) {
  TapeT<T>& tp = *x.tape;
  const auto& xv = tp.value(x);
  PTK_CHECK(xv.rank() == 4, "max_pool2d: want 4-d");
  const i64 n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
  const i64 oh = (h - k) / s + 1, ow = (w - k) / s + 1;
  PTK_CHECK(oh > 0 && ow > 0, "max_pool2d: output collapses");
  TensorT<T> out({n, c, oh, ow});
  auto argmax = std::make_shared<std::vector<i64>>(std::size_t(n * c * oh * ow));
  i64 idx = 0;
  for (i64 b = 0; b < n; ++b)
    for (i64 ch = 0; ch < c; ++ch)
      for (i64 i = 0; i < oh; ++i)
        for (i64 j = 0; j < ow; ++j, ++idx) {
          T best = xv.at4(b, ch, i * s, j * s);
          i64 bi = i * s, bj = j * s;
          for (i64 u = 0; u < k; ++u)
            for (i64 v = 0; v < k; ++v) {
              const T val = xv.at4(b, ch, i * s + u, j * s + v);
              if (val > best) {
                best = val;
                bi = i * s + u;
                bj = j * s + v;
              }
            }
          out.at4(b, ch, i, j) = best;
          (*argmax)[std::size_t(idx)] = ((b * c + ch) * h + bi) * w + bj;
        }
  VarT<T> o = tp.make(std::move(out), tp.needs_grad(x));
  if (tp.needs_grad(x)) {
    tp.record([x, o, argmax](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      TensorT<T> dx = TensorT<T>::zeros(t.value(x).shape);
      for (std::size_t i = 0; i < argmax->size(); ++i)
        dx.data[std::size_t((*argmax)[i])] += g.data[i];
      t.accum(x, dx);
    });
  }
  return o;
}

// [N,C,H,W] -> [N,C].
template <typename T>
VarT<T> global_avg_pool(VarT<T> x) {
  TapeT<T>& tp = *x.tape;
  const auto& xv = tp.value(x);
  PTK_CHECK(xv.rank() == 4, "global_avg_pool: want 4-d");
  const i64 n = xv.shape[0], c = xv.shape[1], hw = xv.shape[2] * xv.shape[3];
  TensorT<T> out({n, c});
  for (i64 b = 0; b < n; ++b)
    for (i64 ch = 0; ch < c; ++ch) {
      const T* p = xv.data.data() + (b * c + ch) * hw;
      double acc = 0;
      for (i64 i = 0; i < hw; ++i) acc += double(p[i]);
      out.at2(b, ch) = T(acc / double(hw));
    }
  VarT<T> o = tp.make(std::move(out), tp.needs_grad(x));
  if (tp.needs_grad(x)) {
    tp.record([x, o, n, c, hw](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      TensorT<T> dx = TensorT<T>::zeros(t.value(x).shape);
      for (i64 b = 0; b < n; ++b)
        for (i64 ch = 0; ch < c; ++ch) {
          const T go = T(double(g.at2(b, ch)) / double(hw));
          T* p = dx.data.data() + (b * c + ch) * hw;
          for (i64 i = 0; i < hw; ++i) p[i] = go;
        }
      t.accum(x, dx);
    });
  }
  return o;
}

template <typename T>
VarT<T> upsample_nearest2x(VarT<T> x) {
  TapeT<T>& tp = *x.tape;
  const auto& xv = tp.value(x);
  PTK_CHECK(xv.rank() == 4, "upsample_nearest2x: want 4-d");
  const i64 n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
  std::vector<i64> index;
  index.reserve(std::size_t(n * c * 4 * h * w));
  for (i64 b = 0; b < n; ++b)
    for (i64 ch = 0; ch < c; ++ch)
      for (i64 i = 0; i < 2 * h; ++i)
        for (i64 j = 0; j < 2 * w; ++j)
          index.push_back(((b * c + ch) * h + i / 2) * w + j / 2);
  return gather_permute(x, {n, c, 2 * h, 2 * w}, std::move(index));
}

// ---------------------------------------------------------------- batch norm

// Training-mode batch normalization over (N,H,W) per channel; batch statistics
// are reported through *batch_mean / *batch_var (biased variance).
template <typename T>
VarT<T> batchnorm2d_train(VarT<T> x, VarT<T> gamma, VarT<T> beta, double eps,
                          std::vector<double>* batch_mean = nullptr,
                          std::vector<double>* batch_var = nullptr) {
  TapeT<T>& tp = *x.tape;
  const auto& xv = tp.value(x);
  PTK_CHECK(xv.rank() == 4, "batchnorm2d: want 4-d");
  const i64 n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
  const i64 m = n * h * w;
  PTK_CHECK(m > 0, "batchnorm2d: empty batch union");
  const auto& gv = tp.value(gamma);
  const auto& bv = tp.value(beta);
  PTK_CHECK(gv.numel() == c && bv.numel() == c, "batchnorm2d: affine shape");
  auto mu = std::make_shared<std::vector<double>>(std::size_t(c));
  auto istd = std::make_shared<std::vector<double>>(std::size_t(c));
  TensorT<T> out = xv;
  for (i64 ch = 0; ch < c; ++ch) {
    double s = 0;
    for (i64 b = 0; b < n; ++b) {
      const T* p = xv.data.data() + (b * c + ch) * h * w;
      for (i64 i = 0; i < h * w; ++i) s += double(p[i]);
    }
    const double mean_c = s / double(m);
    double v = 0;
    for (i64 b = 0; b < n; ++b) {
      const T* p = xv.data.data() + (b * c + ch) * h * w;
      for (i64 i = 0; i < h * w; ++i) v += (double(p[i]) - mean_c) * (double(p[i]) - mean_c);
    }
    const double var_c = v / double(m);
    (*mu)[std::size_t(ch)] = mean_c;
    (*istd)[std::size_t(ch)] = 1.0 / std::sqrt(var_c + eps);
    if (batch_mean) (*batch_mean)[std::size_t(ch)] = mean_c;
    if (batch_var) (*batch_var)[std::size_t(ch)] = var_c;
    for (i64 b = 0; b < n; ++b) {
      T* q = out.data.data() + (b * c + ch) * h * w;
      for (i64 i = 0; i < h * w; ++i)
        q[i] = T((double(q[i]) - mean_c) * (*istd)[std::size_t(ch)] * double(gv[ch]) +
                 double(bv[ch]));
    }
  }
  const bool req = tp.needs_grad(x) || tp.needs_grad(gamma) || tp.needs_grad(beta);
  VarT<T> o = tp.make(std::move(out), req);
  if (req) {
    tp.record([x, gamma, beta, o, mu, istd, n, c, h, w, m](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      const auto& xvv = t.value(x);
      const auto& gvv = t.value(gamma);
      TensorT<T> dx = TensorT<T>::zeros(xvv.shape);
      TensorT<T> dgamma = TensorT<T>::zeros(t.value(gamma).shape);
      TensorT<T> dbeta = TensorT<T>::zeros(t.value(beta).shape);
      for (i64 ch = 0; ch < c; ++ch) {
        const double mc = (*mu)[std::size_t(ch)], ic = (*istd)[std::size_t(ch)];
        double sum_g = 0, sum_gx = 0;
        for (i64 b = 0; b < n; ++b) {
          const T* gp = g.data.data() + (b * c + ch) * h * w;
          const T* xp = xvv.data.data() + (b * c + ch) * h * w;
          for (i64 i = 0; i < h * w; ++i) {
            const double xhat = (double(xp[i]) - mc) * ic;
            sum_g += double(gp[i]);
            sum_gx += double(gp[i]) * xhat;
          }
        }
        dgamma[ch] = T(sum_gx);
        dbeta[ch] = T(sum_g);
        const double gm = double(gvv[ch]);
        for (i64 b = 0; b < n; ++b) {
          const T* gp = g.data.data() + (b * c + ch) * h * w;
          const T* xp = xvv.data.data() + (b * c + ch) * h * w;
          T* dp = dx.data.data() + (b * c + ch) * h * w;
          for (i64 i = 0; i < h * w; ++i) {
            const double xhat = (double(xp[i]) - mc) * ic;
            dp[i] = T(gm * ic *
                      (double(gp[i]) - sum_g / double(m) - xhat * sum_gx / double(m)));
          }
        }
      }
      if (t.needs_grad(x)) t.accum(x, dx);
      if (t.needs_grad(gamma)) t.accum(gamma, dgamma);
      if (t.needs_grad(beta)) t.accum(beta, dbeta);
    });
  }
  return o;
}

// Inference-mode batch normalization with fixed statistics.
template <typename T>
VarT<T> batchnorm2d_eval(VarT<T> x, VarT<T> gamma, VarT<T> beta,
                         const std::vector<double>& running_mean,
                         const std::vector<double>& running_var, double eps) {
  TapeT<T>& tp = *x.tape;
  const auto& xv = tp.value(x);
  PTK_CHECK(xv.rank() == 4, "batchnorm2d_eval: want 4-d");
  const i64 n = xv.shape[0], c = xv.shape[1], hw = xv.shape[2] * xv.shape[3];
  const auto& gv = tp.value(gamma);
  const auto& bv = tp.value(beta);
  auto scale = std::make_shared<std::vector<double>>(std::size_t(c));
  TensorT<T> out = xv;
  for (i64 ch = 0; ch < c; ++ch) {
    const double ic = 1.0 / std::sqrt(running_var[std::size_t(ch)] + eps);
    (*scale)[std::size_t(ch)] = ic * double(gv[ch]);
    for (i64 b = 0; b < n; ++b) {
      T* q = out.data.data() + (b * c + ch) * hw;
      for (i64 i = 0; i < hw; ++i)
        q[i] = T((double(q[i]) - running_mean[std::size_t(ch)]) * (*scale)[std::size_t(ch)] +
                 double(bv[ch]));
    }
  }
  const bool req = tp.needs_grad(x) || tp.needs_grad(gamma) || tp.needs_grad(beta);
  VarT<T> o = tp.make(std::move(out), req);
  if (req) {
    auto rm = std::make_shared<std::vector<double>>(running_mean);
    auto rv = std::make_shared<std::vector<double>>(running_var);
    tp.record([x, gamma, beta, o, scale, rm, rv, n, c, hw, eps](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      const auto& xvv = t.value(x);
      if (t.needs_grad(x)) {
        TensorT<T> dx = TensorT<T>::zeros(xvv.shape);
        for (i64 ch = 0; ch < c; ++ch)
          for (i64 b = 0; b < n; ++b) {
            const T* gp = g.data.data() + (b * c + ch) * hw;
            T* dp = dx.data.data() + (b * c + ch) * hw;
            for (i64 i = 0; i < hw; ++i) dp[i] = T(double(gp[i]) * (*scale)[std::size_t(ch)]);
          }
        t.accum(x, dx);
      }
      if (t.needs_grad(gamma) || t.needs_grad(beta)) {
        TensorT<T> dgamma = TensorT<T>::zeros(t.value(gamma).shape);
        TensorT<T> dbeta = TensorT<T>::zeros(t.value(beta).shape);
        for (i64 ch = 0; ch < c; ++ch) {
          const double ic = 1.0 / std::sqrt((*rv)[std::size_t(ch)] + eps);
          for (i64 b = 0; b < n; ++b) {
            const T* gp = g.data.data() + (b * c + ch) * hw;
            const T* xp = xvv.data.data() + (b * c + ch) * hw;
            for (i64 i = 0; i < hw; ++i) {
              dgamma[ch] += T(double(gp[i]) * (double(xp[i]) - (*rm)[std::size_t(ch)]) * ic);
              dbeta[ch] += gp[i];
            }
          }
        }
        if (t.needs_grad(gamma)) t.accum(gamma, dgamma);
        if (t.needs_grad(beta)) t.accum(beta, dbeta);
      }
    });
  }
  return o;
}

// ------------------------------------------------------- channel concat/slice

template <typename T>
VarT<T> concat_channels(const std::vector<VarT<T>>& xs) {
  PTK_CHECK(!xs.empty(), "concat_channels: empty input");
  TapeT<T>& tp = *xs[0].tape;
  const auto& first = tp.value(xs[0]);
  PTK_CHECK(first.rank() == 4, "concat_channels: want 4-d");
  const i64 n = first.shape[0], h = first.shape[2], w = first.shape[3];
  i64 ctotal = 0;
  bool req = false;
  for (const auto& x : xs) {
    const auto& v = tp.value(x);
    PTK_CHECK(v.shape[0] == n && v.shape[2] == h && v.shape[3] == w,
              "concat_channels: spatial/batch mismatch");
    ctotal += v.shape[1];
    req = req || tp.needs_grad(x);
  }
  TensorT<T> out({n, ctotal, h, w});
  i64 coff = 0;
  for (const auto& x : xs) {
    const auto& v = tp.value(x);
    const i64 c = v.shape[1];
    for (i64 b = 0; b < n; ++b)
      std::copy(v.data.begin() + b * c * h * w, v.data.begin() + (b + 1) * c * h * w,
                out.data.begin() + (b * ctotal + coff) * h * w);
    coff += c;
  }
  VarT<T> o = tp.make(std::move(out), req);
  if (req) {
    auto parts = std::make_shared<std::vector<VarT<T>>>(xs);
    tp.record([parts, o, n, ctotal, h, w](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      i64 coff2 = 0;
      for (const auto& x : *parts) {
        const i64 c = t.value(x).shape[1];
        if (t.needs_grad(x)) {
          TensorT<T> dx = TensorT<T>::zeros(t.value(x).shape);
          for (i64 b = 0; b < n; ++b)
            std::copy(g.data.begin() + (b * ctotal + coff2) * h * w,
                      g.data.begin() + (b * ctotal + coff2 + c) * h * w,
                      dx.data.begin() + b * c * h * w);
          t.accum(x, dx);
        }
        coff2 += c;
      }
    });
  }
  return o;
}

// -------------------------------------------------- attention-layout helpers

// [N,C,H,W] -> [N,H*W,C]
template <typename T>
VarT<T> nchw_to_ntc(VarT<T> x) {
  const auto& v = x.tape->value(x);
  PTK_CHECK(v.rank() == 4, "nchw_to_ntc: want 4-d");
  const i64 n = v.shape[0], c = v.shape[1], h = v.shape[2], w = v.shape[3];
  std::vector<i64> index;
  index.reserve(std::size_t(v.numel()));
  for (i64 b = 0; b < n; ++b)
    for (i64 t = 0; t < h * w; ++t)
      for (i64 ch = 0; ch < c; ++ch) index.push_back(((b * c + ch) * h * w) + t);
  return gather_permute(x, {n, h * w, c}, std::move(index));
}

// [N,T,C] -> [N,C,H,W] with T == H*W
template <typename T>
VarT<T> ntc_to_nchw(VarT<T> x, i64 h, i64 w) {
  const auto& v = x.tape->value(x);
  PTK_CHECK(v.rank() == 3 && v.shape[1] == h * w, "ntc_to_nchw: token count mismatch");
  const i64 n = v.shape[0], c = v.shape[2];
  std::vector<i64> index;
  index.reserve(std::size_t(v.numel()));
  for (i64 b = 0; b < n; ++b)
    for (i64 ch = 0; ch < c; ++ch)
      for (i64 t = 0; t < h * w; ++t) index.push_back((b * h * w + t) * c + ch);
  return gather_permute(x, {n, c, h, w}, std::move(index));
}

// [N,T,C] -> [N*heads,T,C/heads]
template <typename T>
VarT<T> split_heads(VarT<T> x, i64 heads) {
  const auto& v = x.tape->value(x);
  PTK_CHECK(v.rank() == 3 && v.shape[2] % heads == 0, "split_heads: C % heads != 0");
  const i64 n = v.shape[0], t = v.shape[1], c = v.shape[2], dh = c / heads;
  std::vector<i64> index;
  index.reserve(std::size_t(v.numel()));
  for (i64 b = 0; b < n; ++b)
    for (i64 hd = 0; hd < heads; ++hd)
      for (i64 tt = 0; tt < t; ++tt)
        for (i64 j = 0; j < dh; ++j) index.push_back((b * t + tt) * c + hd * dh + j);
  return gather_permute(x, {n * heads, t, dh}, std::move(index));
}

// Inverse of split_heads.
template <typename T>
VarT<T> merge_heads(VarT<T> x, i64 heads) {
  const auto& v = x.tape->value(x);
  PTK_CHECK(v.rank() == 3 && v.shape[0] % heads == 0, "merge_heads: batch % heads != 0");
  const i64 n = v.shape[0] / heads, t = v.shape[1], dh = v.shape[2], c = heads * dh;
  std::vector<i64> index;
  index.reserve(std::size_t(v.numel()));
  for (i64 b = 0; b < n; ++b)
    for (i64 tt = 0; tt < t; ++tt)
      for (i64 hd = 0; hd < heads; ++hd)
        for (i64 j = 0; j < dh; ++j)
          index.push_back(((b * heads + hd) * t + tt) * dh + j);
  return gather_permute(x, {n, t, c}, std::move(index));
}

// Non-overlapping square windows: [N,C,H,W] -> [N*nw,C,win,win].
template <typename T>
VarT<T> window_partition(VarT<T> x, i64 win) {
  const auto& v = x.tape->value(x);
  PTK_CHECK(v.rank() == 4, "window_partition: want 4-d");
  const i64 n = v.shape[0], c = v.shape[1], h = v.shape[2], w = v.shape[3];
  PTK_CHECK(h % win == 0 && w % win == 0, "window does not divide spatial extent");
  const i64 gh = h / win, gw = w / win;
  std::vector<i64> index;
  index.reserve(std::size_t(v.numel()));
  for (i64 b = 0; b < n; ++b)
    for (i64 gy = 0; gy < gh; ++gy)
      for (i64 gx = 0; gx < gw; ++gx)
        for (i64 ch = 0; ch < c; ++ch)
          for (i64 i = 0; i < win; ++i)
            for (i64 j = 0; j < win; ++j)
              index.push_back(((b * c + ch) * h + gy * win + i) * w + gx * win + j);
  return gather_permute(x, {n * gh * gw, c, win, win}, std::move(index));
}

template <typename T>
VarT<T> window_unpartition(VarT<T> x, i64 win, i64 n, i64 h, i64 w) {
  const auto& v = x.tape->value(x);
  const i64 c = v.shape[1];
  const i64 gh = h / win, gw = w / win;
  PTK_CHECK(v.shape[0] == n * gh * gw, "window_unpartition: window count mismatch");
  std::vector<i64> index;
  index.reserve(std::size_t(n * c * h * w));
  for (i64 b = 0; b < n; ++b)
    for (i64 ch = 0; ch < c; ++ch)
      for (i64 i = 0; i < h; ++i)
        for (i64 j = 0; j < w; ++j) {
          const i64 gy = i / win, gx = j / win;
          const i64 wb = (b * gh + gy) * gw + gx;
          index.push_back(((wb * c + ch) * win + i % win) * win + j % win);
        }
  return gather_permute(x, {n, c, h, w}, std::move(index));
}

// --------------------------------------------------------------- RoI align

struct Roi {
  i64 batch = 0;
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;  // in feature-map coordinates
};

// Bilinear crop of each RoI to out x out cells, one sample at each bin center.
template <typename T>
VarT<T> roi_align(VarT<T> feat, const std::vector<Roi>& rois, i64 out = 7) {
  TapeT<T>& tp = *feat.tape;
  const auto& fv = tp.value(feat);
  PTK_CHECK(fv.rank() == 4, "roi_align: want 4-d features");
  const i64 n = fv.shape[0], c = fv.shape[1], h = fv.shape[2], w = fv.shape[3];
  const i64 r = i64(rois.size());
  for (const Roi& roi : rois) {
    PTK_CHECK(roi.batch >= 0 && roi.batch < n, "roi_align: batch index");
    PTK_CHECK(roi.x2 > roi.x1 && roi.y2 > roi.y1, "roi_align: degenerate box");
  }
  // Each sample contributes to at most 4 input cells; remember the weights.
  struct Tap {
    i64 src;
    double wgt;
  };
  auto taps = std::make_shared<std::vector<std::array<Tap, 4>>>();
  taps->resize(std::size_t(r * out * out));
  TensorT<T> outv({r, c, out, out});
  for (i64 q = 0; q < r; ++q) {
    const Roi& roi = rois[std::size_t(q)];
    const double bh = (roi.y2 - roi.y1) / double(out);
    const double bw = (roi.x2 - roi.x1) / double(out);
    for (i64 i = 0; i < out; ++i)
      for (i64 j = 0; j < out; ++j) {
        // continuous sample point at the bin center, pixel-center convention
        const double sy = roi.y1 + (double(i) + 0.5) * bh - 0.5;
        const double sx = roi.x1 + (double(j) + 0.5) * bw - 0.5;
        const double yc = std::min(std::max(sy, 0.0), double(h - 1));
        const double xc = std::min(std::max(sx, 0.0), double(w - 1));
        const i64 y0 = i64(std::floor(yc)), x0 = i64(std::floor(xc));
        const i64 y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
        const double fy = yc - double(y0), fx = xc - double(x0);
        auto& tap = (*taps)[std::size_t((q * out + i) * out + j)];
        tap[0] = {(roi.batch * c * h + y0) * w + x0, (1 - fy) * (1 - fx)};
        tap[1] = {(roi.batch * c * h + y0) * w + x1, (1 - fy) * fx};
        tap[2] = {(roi.batch * c * h + y1) * w + x0, fy * (1 - fx)};
        tap[3] = {(roi.batch * c * h + y1) * w + x1, fy * fx};
        for (i64 ch = 0; ch < c; ++ch) {
          double acc = 0;
          for (const Tap& tpv : tap) acc += tpv.wgt * double(fv.data[std::size_t(tpv.src + ch * h * w)]);
          outv.at4(q, ch, i, j) = T(acc);
        }
      }
  }
  VarT<T> o = tp.make(std::move(outv), tp.needs_grad(feat));
  if (tp.needs_grad(feat)) {
    tp.record([feat, o, taps, c, h, w, out](TapeT<T>& t) {
      if (!t.has_grad(o)) return;
      const auto& g = t.grad_ref(o);
      TensorT<T> dx = TensorT<T>::zeros(t.value(feat).shape);
      const i64 r = g.shape[0];
      for (i64 q = 0; q < r; ++q)
        for (i64 i = 0; i < out; ++i)
          for (i64 j = 0; j < out; ++j) {
            const auto& tap = (*taps)[std::size_t((q * out + i) * out + j)];
            for (i64 ch = 0; ch < c; ++ch) {
              const T go = g.at4(q, ch, i, j);
              if (go == T(0)) continue;
              for (const auto& tpv : tap)
                dx.data[std::size_t(tpv.src + ch * h * w)] += T(tpv.wgt * double(go));
            }
          }
      t.accum(feat, dx);
    });
  }
  return o;
}

}  // namespace ptk

#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "ptk/common.hpp"
#include "ptk/rng.hpp"

namespace ptk {

// Dense row-major n-d array. Rank in practice is 1..4:
// [D], [N,D], [B,T,D] and [N,C,H,W].
template <typename T>
struct TensorT {
  std::vector<i64> shape;
  std::vector<T> data;

  TensorT() = default;
  explicit TensorT(std::vector<i64> s) : shape(std::move(s)) {
    data.assign(std::size_t(numel_of(shape)), T(0));
  }
  TensorT(std::vector<i64> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    PTK_CHECK(i64(data.size()) == numel_of(shape), "tensor: buffer length != product(shape)");
  }

  static i64 numel_of(const std::vector<i64>& s) {
    i64 n = 1;
    for (i64 e : s) {
      PTK_CHECK(e >= 0, "tensor: negative extent");
      n *= e;
    }
    return n;
  }

  static TensorT zeros(std::vector<i64> s) { return TensorT(std::move(s)); }

  static TensorT full(std::vector<i64> s, T v) {
    TensorT t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static TensorT scalar(T v) { return TensorT({1}, {v}); }

  static TensorT randn(std::vector<i64> s, Rng& rng, double stddev = 1.0) {
    TensorT t(std::move(s));
    for (auto& x : t.data) x = T(rng.normal(0.0, stddev));
    return t;
  }

  i64 numel() const { return i64(data.size()); }
  int rank() const { return int(shape.size()); }
  i64 dim(int i) const { return shape[std::size_t(i)]; }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  T& operator[](i64 i) { return data[std::size_t(i)]; }
  const T& operator[](i64 i) const { return data[std::size_t(i)]; }

  // 2-d and 4-d indexing helpers.
  T& at2(i64 r, i64 c) { return data[std::size_t(r * shape[1] + c)]; }
  const T& at2(i64 r, i64 c) const { return data[std::size_t(r * shape[1] + c)]; }
  T& at3(i64 b, i64 t, i64 d) {
    return data[std::size_t((b * shape[1] + t) * shape[2] + d)];
  }
  const T& at3(i64 b, i64 t, i64 d) const {
    return data[std::size_t((b * shape[1] + t) * shape[2] + d)];
  }
  T& at4(i64 n, i64 c, i64 h, i64 w) {
    return data[std::size_t(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
  }
  const T& at4(i64 n, i64 c, i64 h, i64 w) const {
    return data[std::size_t(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
  }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

  double abs_max() const {
    double m = 0;
    for (T v : data) m = std::max(m, std::abs(double(v)));
    return m;
  }

  TensorT<T> reshaped(std::vector<i64> s) const {
    PTK_CHECK(numel_of(s) == numel(), "reshape: element count mismatch");
    return TensorT<T>(std::move(s), data);
  }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
    return out;
  }
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

template <typename T>
inline bool bit_equal(const TensorT<T>& a, const TensorT<T>& b) {
  return a.shape == b.shape && a.data == b.data;
}

template <typename T>
inline double max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
  PTK_CHECK(a.shape == b.shape, "max_abs_diff: shape mismatch");
  double m = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(double(a.data[i]) - double(b.data[i])));
  return m;
}

}  // namespace ptk

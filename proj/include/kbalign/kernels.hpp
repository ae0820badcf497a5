#pragma once

// Dense kernels shared by the model, the alignment objective and the
// analysis tools. `serial` is the reference; `parallel` distributes whole
// output elements across OpenMP threads, so both produce bitwise-identical
// results for any thread count.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>

namespace kbalign {

template <class T>
struct MatrixView {
  T* data = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;

  T* row(std::size_t i) const noexcept { return data + i * cols; }
  T& operator()(std::size_t i, std::size_t j) const noexcept { return data[i * cols + j]; }
  std::size_t size() const noexcept { return rows * cols; }
  bool empty() const noexcept { return data == nullptr || rows == 0; }

  operator MatrixView<const T>() const noexcept { return {data, rows, cols}; }
};

template <class T>
using ConstMatrixView = MatrixView<const T>;

namespace kernels {

template <class T>
inline T dot(const T* a, const T* b, std::size_t n) noexcept {
  T s = 0;
  for (std::size_t k = 0; k < n; ++k) s += a[k] * b[k];
  return s;
}

template <class T>
inline void axpy(T alpha, const T* x, T* y, std::size_t n) noexcept {
  for (std::size_t k = 0; k < n; ++k) y[k] += alpha * x[k];
}

namespace detail {

template <class T>
inline double dot_wide(const T* a, const T* b, std::size_t n) noexcept {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += double(a[i]) * double(b[i]);
  return s;
}

// Accumulated in double so parallel rows tie exactly.
template <class T>
inline T cosine_distance(const T* row, const T* query, std::size_t n, double qq) noexcept {
  const double denom = std::sqrt(dot_wide(row, row, n) * qq);
  return denom > 0.0 ? T(1.0 - dot_wide(row, query, n) / denom) : T(1);
}

}  // namespace detail

namespace serial {

// y = x w^T + bias, with w stored [out x in].
template <class T>
void linear_forward(ConstMatrixView<T> x, ConstMatrixView<T> w, const T* bias, MatrixView<T> y) {
  for (std::size_t i = 0; i < x.rows; ++i) {
    const T* xi = x.row(i);
    T* yi = y.row(i);
    for (std::size_t o = 0; o < w.rows; ++o) {
      yi[o] = (bias ? bias[o] : T(0)) + dot(xi, w.row(o), x.cols);
    }
  }
}

// dx += dy w, dw += dy^T x, dbias += column sums of dy. dx and dbias may be null.
template <class T>
void linear_backward(ConstMatrixView<T> x, ConstMatrixView<T> w, ConstMatrixView<T> dy,
                     MatrixView<T> dx, MatrixView<T> dw, T* dbias) {
  for (std::size_t i = 0; i < x.rows; ++i) {
    const T* dyi = dy.row(i);
    const T* xi = x.row(i);
    for (std::size_t o = 0; o < w.rows; ++o) {
      if (dyi[o] == T(0)) continue;
      axpy(dyi[o], xi, dw.row(o), x.cols);
      if (dx.data) axpy(dyi[o], w.row(o), dx.row(i), x.cols);
      if (dbias) dbias[o] += dyi[o];
    }
  }
}

// out[r] = squared L2 distance between table row r and query.
template <class T>
void squared_distances(ConstMatrixView<T> table, std::span<const T> query, std::span<T> out) {
  for (std::size_t r = 0; r < table.rows; ++r) {
    const T* row = table.row(r);
    T s = 0;
    for (std::size_t k = 0; k < table.cols; ++k) {
      const T d = row[k] - query[k];
      s += d * d;
    }
    out[r] = s;
  }
}

// out[r] = 1 - cos(table row r, query); zero rows give distance 1.
template <class T>
void cosine_distances(ConstMatrixView<T> table, std::span<const T> query, std::span<T> out) {
  const double qq = detail::dot_wide(query.data(), query.data(), query.size());
  for (std::size_t r = 0; r < table.rows; ++r) out[r] = detail::cosine_distance(table.row(r), query.data(), table.cols, qq);
}

}  // namespace serial

namespace parallel {

template <class T>
void linear_forward(ConstMatrixView<T> x, ConstMatrixView<T> w, const T* bias, MatrixView<T> y) {
  const auto n = static_cast<std::int64_t>(x.rows);
#pragma omp parallel for schedule(static)
  for (std::int64_t ii = 0; ii < n; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const T* xi = x.row(i);
    T* yi = y.row(i);
    for (std::size_t o = 0; o < w.rows; ++o) {
      yi[o] = (bias ? bias[o] : T(0)) + dot(xi, w.row(o), x.cols);
    }
  }
}

template <class T>
void linear_backward(ConstMatrixView<T> x, ConstMatrixView<T> w, ConstMatrixView<T> dy,
                     MatrixView<T> dx, MatrixView<T> dw, T* dbias) {
  const auto n_out = static_cast<std::int64_t>(w.rows);
  const auto n_rows = static_cast<std::int64_t>(x.rows);
#pragma omp parallel
  {
#pragma omp for schedule(static)
    for (std::int64_t oo = 0; oo < n_out; ++oo) {
      const auto o = static_cast<std::size_t>(oo);
      for (std::size_t i = 0; i < x.rows; ++i) {
        const T g = dy(i, o);
        if (g == T(0)) continue;
        axpy(g, x.row(i), dw.row(o), x.cols);
        if (dbias) dbias[o] += g;
      }
    }
    if (dx.data) {
#pragma omp for schedule(static)
      for (std::int64_t ii = 0; ii < n_rows; ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        const T* dyi = dy.row(i);
        for (std::size_t o = 0; o < w.rows; ++o) {
          if (dyi[o] == T(0)) continue;
          axpy(dyi[o], w.row(o), dx.row(i), x.cols);
        }
      }
    }
  }
}

template <class T>
void squared_distances(ConstMatrixView<T> table, std::span<const T> query, std::span<T> out) {
  const auto n = static_cast<std::int64_t>(table.rows);
#pragma omp parallel for schedule(static)
  for (std::int64_t rr = 0; rr < n; ++rr) {
    const auto r = static_cast<std::size_t>(rr);
    const T* row = table.row(r);
    T s = 0;
    for (std::size_t k = 0; k < table.cols; ++k) {
      const T d = row[k] - query[k];
      s += d * d;
    }
    out[r] = s;
  }
}

template <class T>
void cosine_distances(ConstMatrixView<T> table, std::span<const T> query, std::span<T> out) {
  const double qq = detail::dot_wide(query.data(), query.data(), query.size());
  const auto n = static_cast<std::int64_t>(table.rows);
#pragma omp parallel for schedule(static)
  for (std::int64_t rr = 0; rr < n; ++rr) {
    const auto r = static_cast<std::size_t>(rr);
    out[r] = detail::cosine_distance(table.row(r), query.data(), table.cols, qq);
  }
}

}  // namespace parallel

}  // namespace kernels
}  // namespace kbalign

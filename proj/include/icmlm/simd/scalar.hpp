#pragma once

// Portable reference kernels. Every SIMD variant is tested against these.

#include <cstddef>
#include <vector>

namespace icmlm::simd::scalar {

// C = beta * C + alpha * op(A) * op(B), row-major.
// op(A) is m x k, op(B) is k x n. Each output element accumulates in
// ascending k order.
template <class T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda,
          const T* b, int ldb, T beta, T* c, int ldc) {
  std::vector<T> acc(static_cast<std::size_t>(n));
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) acc[j] = T(0);
    for (int p = 0; p < k; ++p) {
      const T av = trans_a ? a[static_cast<std::size_t>(p) * lda + i]
                           : a[static_cast<std::size_t>(i) * lda + p];
      if (trans_b) {
        for (int j = 0; j < n; ++j) acc[j] += av * b[static_cast<std::size_t>(j) * ldb + p];
      } else {
        const T* brow = b + static_cast<std::size_t>(p) * ldb;
        for (int j = 0; j < n; ++j) acc[j] += av * brow[j];
      }
    }
    T* crow = c + static_cast<std::size_t>(i) * ldc;
    if (beta == T(0)) {
      for (int j = 0; j < n; ++j) crow[j] = alpha * acc[j];
    } else {
      for (int j = 0; j < n; ++j) crow[j] = beta * crow[j] + alpha * acc[j];
    }
  }
}

template <class T>
T dot(const T* x, const T* y, std::size_t n) {
  T s = T(0);
  for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

// y += alpha * x
template <class T>
void axpy(std::size_t n, T alpha, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class T>
void scale(std::size_t n, T alpha, T* x) {
  for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

}  // namespace icmlm::simd::scalar

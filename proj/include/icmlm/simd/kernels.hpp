#pragma once

// Dense arithmetic kernels with a scalar reference path and SIMD variants
// chosen once at runtime from CPU features. float routes through the
// dispatch table; double always takes the scalar reference path (it is
// only used for 64-bit gradient verification).

#include <cstddef>
#include <string_view>
#include <type_traits>

#include "icmlm/simd/scalar.hpp"

namespace icmlm::simd {

enum class Isa { scalar, avx2 };

std::string_view isa_name(Isa isa);

// Best ISA supported by both the build and the running CPU.
Isa detect_isa();

// ISA currently used by the float kernels. Initialized from detect_isa()
// unless ICMLM_SIMD=scalar is set in the environment.
Isa active_isa();

// Overrides the dispatch (tests use this to compare variants). Requests for
// an unavailable ISA fall back to scalar; the effective ISA is returned.
Isa set_active_isa(Isa isa);

struct FloatKernels {
  void (*gemm)(bool, bool, int, int, int, float, const float*, int, const float*, int, float,
               float*, int);
  float (*dot)(const float*, const float*, std::size_t);
  void (*axpy)(std::size_t, float, const float*, float*);
  void (*scale)(std::size_t, float, float*);
};

const FloatKernels& float_kernels();

template <class T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda,
          const T* b, int ldb, T beta, T* c, int ldc) {
  if (m <= 0 || n <= 0) return;
  if constexpr (std::is_same_v<T, float>) {
    float_kernels().gemm(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  } else {
    scalar::gemm<T>(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  }
}

template <class T>
T dot(const T* x, const T* y, std::size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    return float_kernels().dot(x, y, n);
  } else {
    return scalar::dot<T>(x, y, n);
  }
}

template <class T>
void axpy(std::size_t n, T alpha, const T* x, T* y) {
  if constexpr (std::is_same_v<T, float>) {
    float_kernels().axpy(n, alpha, x, y);
  } else {
    scalar::axpy<T>(n, alpha, x, y);
  }
}

template <class T>
void scale(std::size_t n, T alpha, T* x) {
  if constexpr (std::is_same_v<T, float>) {
    float_kernels().scale(n, alpha, x);
  } else {
    scalar::scale<T>(n, alpha, x);
  }
}

}  // namespace icmlm::simd

#pragma once

#include <cstddef>

namespace icmlm::simd::avx2 {

// Only callable when the CPU reports AVX2 and FMA.
void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
           const float* b, int ldb, float beta, float* c, int ldc);
float sdot(const float* x, const float* y, std::size_t n);
void saxpy(std::size_t n, float alpha, const float* x, float* y);
void sscale(std::size_t n, float alpha, float* x);

}  // namespace icmlm::simd::avx2

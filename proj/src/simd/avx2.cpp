// Compiled with -mavx2 -mfma. Nothing in this translation unit may be called
// unless detect_isa() reported Isa::avx2.

#include "avx2.hpp"

#include <immintrin.h>

#include <algorithm>
#include <cstdint>
#include <vector>

namespace icmlm::simd::avx2 {
namespace {

constexpr int kCols = 16;
constexpr int kMaxRows = 6;

inline __m256i lane_mask(int valid) {
  alignas(32) static const std::int32_t table[16] = {-1, -1, -1, -1, -1, -1, -1, -1,
                                                     0,  0,  0,  0,  0,  0,  0,  0};
  if (valid <= 0) return _mm256_setzero_si256();
  if (valid >= 8) return _mm256_set1_epi32(-1);
  return _mm256_loadu_si256(reinterpret_cast<const __m256i*>(table + 8 - valid));
}

constexpr int kDepth = 256;

// 6 packed rows of A times a packed 16-column panel of B, both kc deep.
// Only `rows` x `width` results are written back.
void micro_kernel(int kc, const float* a, const float* b, float* c, int ldc, int rows, int width, float alpha,
                  float beta) {
  // Named accumulators keep all twelve in registers; arrays get spilled.
  __m256 c00 = _mm256_setzero_ps(), c01 = _mm256_setzero_ps();
  __m256 c10 = _mm256_setzero_ps(), c11 = _mm256_setzero_ps();
  __m256 c20 = _mm256_setzero_ps(), c21 = _mm256_setzero_ps();
  __m256 c30 = _mm256_setzero_ps(), c31 = _mm256_setzero_ps();
  __m256 c40 = _mm256_setzero_ps(), c41 = _mm256_setzero_ps();
  __m256 c50 = _mm256_setzero_ps(), c51 = _mm256_setzero_ps();
  for (int p = 0; p < kc; ++p) {
    const __m256 b0 = _mm256_loadu_ps(b + static_cast<std::size_t>(p) * kCols);
    const __m256 b1 = _mm256_loadu_ps(b + static_cast<std::size_t>(p) * kCols + 8);
    const float* ap = a + static_cast<std::size_t>(p) * kMaxRows;
    __m256 av = _mm256_broadcast_ss(ap);
    c00 = _mm256_fmadd_ps(av, b0, c00);
    c01 = _mm256_fmadd_ps(av, b1, c01);
    av = _mm256_broadcast_ss(ap + 1);
    c10 = _mm256_fmadd_ps(av, b0, c10);
    c11 = _mm256_fmadd_ps(av, b1, c11);
    av = _mm256_broadcast_ss(ap + 2);
    c20 = _mm256_fmadd_ps(av, b0, c20);
    c21 = _mm256_fmadd_ps(av, b1, c21);
    av = _mm256_broadcast_ss(ap + 3);
    c30 = _mm256_fmadd_ps(av, b0, c30);
    c31 = _mm256_fmadd_ps(av, b1, c31);
    av = _mm256_broadcast_ss(ap + 4);
    c40 = _mm256_fmadd_ps(av, b0, c40);
    c41 = _mm256_fmadd_ps(av, b1, c41);
    av = _mm256_broadcast_ss(ap + 5);
    c50 = _mm256_fmadd_ps(av, b0, c50);
    c51 = _mm256_fmadd_ps(av, b1, c51);
  }
  const __m256 acc0[kMaxRows] = {c00, c10, c20, c30, c40, c50};
  const __m256 acc1[kMaxRows] = {c01, c11, c21, c31, c41, c51};

  const __m256 va = _mm256_set1_ps(alpha);
  const __m256 vb = _mm256_set1_ps(beta);
  const __m256i m0 = lane_mask(width);
  const __m256i m1 = lane_mask(width - 8);
  for (int r = 0; r < rows; ++r) {
    float* cr = c + static_cast<std::size_t>(r) * ldc;
    __m256 o0 = _mm256_mul_ps(va, acc0[r]);
    __m256 o1 = _mm256_mul_ps(va, acc1[r]);
    if (beta != 0.0f) {
      o0 = _mm256_add_ps(_mm256_mul_ps(vb, _mm256_maskload_ps(cr, m0)), o0);
      o1 = _mm256_add_ps(_mm256_mul_ps(vb, _mm256_maskload_ps(cr + 8, m1)), o1);
    }
    if (width == kCols) {
      _mm256_storeu_ps(cr, o0);
      _mm256_storeu_ps(cr + 8, o1);
    } else {
      _mm256_maskstore_ps(cr, m0, o0);
      _mm256_maskstore_ps(cr + 8, m1, o1);
    }
  }
}

// Skinny products: no packing, rows of C built from axpy or dot.
void small_gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
                const float* b, int ldb, float beta, float* c, int ldc) {
  thread_local std::vector<float> arow;
  thread_local std::vector<float> bcol;
  arow.resize(static_cast<std::size_t>(k));
  for (int i = 0; i < m; ++i) {
    const float* ai = a + static_cast<std::size_t>(i) * lda;
    if (trans_a) {
      for (int p = 0; p < k; ++p) arow[static_cast<std::size_t>(p)] = a[static_cast<std::size_t>(p) * lda + i];
      ai = arow.data();
    }
    float* ci = c + static_cast<std::size_t>(i) * ldc;
    if (trans_b) {
      for (int j = 0; j < n; ++j) {
        const float v = alpha * sdot(ai, b + static_cast<std::size_t>(j) * ldb, static_cast<std::size_t>(k));
        ci[j] = beta == 0.0f ? v : v + beta * ci[j];
      }
    } else if (n < 8) {
      bcol.resize(static_cast<std::size_t>(k));
      for (int j = 0; j < n; ++j) {
        for (int p = 0; p < k; ++p) bcol[static_cast<std::size_t>(p)] = b[static_cast<std::size_t>(p) * ldb + j];
        const float v = alpha * sdot(ai, bcol.data(), static_cast<std::size_t>(k));
        ci[j] = beta == 0.0f ? v : v + beta * ci[j];
      }
    } else {
      if (beta == 0.0f) {
        std::fill(ci, ci + n, 0.0f);
      } else if (beta != 1.0f) {
        sscale(static_cast<std::size_t>(n), beta, ci);
      }
      for (int p = 0; p < k; ++p) {
        saxpy(static_cast<std::size_t>(n), alpha * ai[p], b + static_cast<std::size_t>(p) * ldb, ci);
      }
    }
  }
}

}  // namespace

void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
           const float* b, int ldb, float beta, float* c, int ldc) {
  if (m <= 0 || n <= 0) return;
  if (k <= 0) {
    for (int i = 0; i < m; ++i) {
      float* cr = c + static_cast<std::size_t>(i) * ldc;
      for (int j = 0; j < n; ++j) cr[j] = beta == 0.0f ? 0.0f : beta * cr[j];
    }
    return;
  }
  if (m < kMaxRows || n < 8) {
    small_gemm(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
    return;
  }
  thread_local std::vector<float> apack;
  thread_local std::vector<float> bpack;
  const int row_blocks = (m + kMaxRows - 1) / kMaxRows;

  for (int pc = 0; pc < k; pc += kDepth) {
    const int kc = k - pc < kDepth ? k - pc : kDepth;
    const float beta_eff = pc == 0 ? beta : 1.0f;

    // A panels: block i holds rows [6i, 6i+6) as kc groups of 6, zero padded.
    apack.resize(static_cast<std::size_t>(row_blocks) * kMaxRows * kc);
    if (m % kMaxRows != 0) {
      float* last = apack.data() + static_cast<std::size_t>(row_blocks - 1) * kMaxRows * kc;
      std::fill(last, last + static_cast<std::size_t>(kMaxRows) * kc, 0.0f);
    }
    for (int i = 0; i < m; ++i) {
      float* dst = apack.data() + static_cast<std::size_t>(i / kMaxRows) * kMaxRows * kc + i % kMaxRows;
      if (trans_a) {
        for (int p = 0; p < kc; ++p) dst[static_cast<std::size_t>(p) * kMaxRows] = a[static_cast<std::size_t>(pc + p) * lda + i];
      } else {
        const float* src = a + static_cast<std::size_t>(i) * lda + pc;
        for (int p = 0; p < kc; ++p) dst[static_cast<std::size_t>(p) * kMaxRows] = src[p];
      }
    }

    bpack.resize(static_cast<std::size_t>(kc) * kCols);
    for (int j0 = 0; j0 < n; j0 += kCols) {
      const int width = n - j0 < kCols ? n - j0 : kCols;
      for (int p = 0; p < kc; ++p) {
        float* dst = bpack.data() + static_cast<std::size_t>(p) * kCols;
        if (trans_b) {
          for (int j = 0; j < width; ++j) dst[j] = b[static_cast<std::size_t>(j0 + j) * ldb + pc + p];
        } else {
          const float* src = b + static_cast<std::size_t>(pc + p) * ldb + j0;
          for (int j = 0; j < width; ++j) dst[j] = src[j];
        }
        for (int j = width; j < kCols; ++j) dst[j] = 0.0f;
      }
      for (int ib = 0; ib < row_blocks; ++ib) {
        const int i0 = ib * kMaxRows;
        const int rows = m - i0 < kMaxRows ? m - i0 : kMaxRows;
        micro_kernel(kc, apack.data() + static_cast<std::size_t>(ib) * kMaxRows * kc, bpack.data(),
                     c + static_cast<std::size_t>(i0) * ldc + j0, ldc, rows, width, alpha, beta_eff);
      }
    }
  }
}

float sdot(const float* x, const float* y, std::size_t n) {
  __m256 s0 = _mm256_setzero_ps();
  __m256 s1 = _mm256_setzero_ps();
  __m256 s2 = _mm256_setzero_ps();
  __m256 s3 = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 32 <= n; i += 32) {
    s0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), s0);
    s1 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i + 8), _mm256_loadu_ps(y + i + 8), s1);
    s2 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i + 16), _mm256_loadu_ps(y + i + 16), s2);
    s3 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i + 24), _mm256_loadu_ps(y + i + 24), s3);
  }
  for (; i + 8 <= n; i += 8) {
    s0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), s0);
  }
  const __m256 s = _mm256_add_ps(_mm256_add_ps(s0, s1), _mm256_add_ps(s2, s3));
  __m128 lo = _mm_add_ps(_mm256_castps256_ps128(s), _mm256_extractf128_ps(s, 1));
  lo = _mm_hadd_ps(lo, lo);
  lo = _mm_hadd_ps(lo, lo);
  float total = _mm_cvtss_f32(lo);
  for (; i < n; ++i) total += x[i] * y[i];
  return total;
}

void saxpy(std::size_t n, float alpha, const float* x, float* y) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void sscale(std::size_t n, float alpha, float* x) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(x + i, _mm256_mul_ps(va, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) x[i] *= alpha;
}

}  // namespace icmlm::simd::avx2

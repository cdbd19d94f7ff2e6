#include <atomic>
#include <cstdlib>
#include <cstring>

#include "icmlm/simd/kernels.hpp"

#if defined(ICMLM_HAVE_AVX2)
#include "avx2.hpp"
#endif

namespace icmlm::simd {
namespace {

void scalar_sgemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda,
                  const float* b, int ldb, float beta, float* c, int ldc) {
  scalar::gemm<float>(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}
float scalar_sdot(const float* x, const float* y, std::size_t n) { return scalar::dot<float>(x, y, n); }
void scalar_saxpy(std::size_t n, float alpha, const float* x, float* y) {
  scalar::axpy<float>(n, alpha, x, y);
}
void scalar_sscale(std::size_t n, float alpha, float* x) { scalar::scale<float>(n, alpha, x); }

constexpr FloatKernels kScalar{scalar_sgemm, scalar_sdot, scalar_saxpy, scalar_sscale};
#if defined(ICMLM_HAVE_AVX2)
constexpr FloatKernels kAvx2{avx2::sgemm, avx2::sdot, avx2::saxpy, avx2::sscale};
#endif

Isa initial_isa() {
  const char* env = std::getenv("ICMLM_SIMD");
  if (env != nullptr && std::strcmp(env, "scalar") == 0) return Isa::scalar;
  return detect_isa();
}

std::atomic<Isa>& current() {
  static std::atomic<Isa> isa{initial_isa()};
  return isa;
}

}  // namespace

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return "scalar";
    case Isa::avx2:
      return "avx2";
  }
  return "unknown";
}

Isa detect_isa() {
#if defined(ICMLM_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
  __builtin_cpu_init();
  if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) return Isa::avx2;
#endif
  return Isa::scalar;
}

Isa active_isa() { return current().load(std::memory_order_relaxed); }

Isa set_active_isa(Isa isa) {
  if (isa == Isa::avx2 && detect_isa() != Isa::avx2) isa = Isa::scalar;
  current().store(isa, std::memory_order_relaxed);
  return isa;
}

const FloatKernels& float_kernels() {
#if defined(ICMLM_HAVE_AVX2)
  if (active_isa() == Isa::avx2) return kAvx2;
#endif
  return kScalar;
}

}  // namespace icmlm::simd

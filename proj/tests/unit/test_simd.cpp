#include <cmath>
#include <vector>

#include "doctest.h"
#include "icmlm/rng.hpp"
#include "icmlm/simd/kernels.hpp"

using namespace icmlm;

namespace {

std::vector<float> random_vec(std::size_t n, Rng& rng) {
  std::vector<float> v(n);
  for (float& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  return v;
}

struct IsaGuard {
  simd::Isa saved = simd::active_isa();
  ~IsaGuard() { simd::set_active_isa(saved); }
};

}  // namespace

TEST_CASE("dispatch reports a usable ISA") {
  const simd::Isa isa = simd::detect_isa();
  CHECK((isa == simd::Isa::scalar || isa == simd::Isa::avx2));
  IsaGuard guard;
  CHECK(simd::set_active_isa(simd::Isa::scalar) == simd::Isa::scalar);
  CHECK(simd::active_isa() == simd::Isa::scalar);
}

TEST_CASE("sgemm SIMD variant matches the scalar reference across shapes and transposes") {
  if (simd::detect_isa() != simd::Isa::avx2) {
    MESSAGE("AVX2 unavailable; equivalence check skipped");
    return;
  }
  IsaGuard guard;
  Rng rng(11);
  const int shapes[][3] = {{1, 1, 1},  {3, 5, 7},    {6, 16, 9},  {7, 17, 33},
                           {13, 31, 4}, {64, 64, 64}, {5, 100, 1}, {128, 70, 576}};
  for (const auto& s : shapes) {
    const int m = s[0], n = s[1], k = s[2];
    for (int ta = 0; ta < 2; ++ta) {
      for (int tb = 0; tb < 2; ++tb) {
        for (float beta : {0.0f, 0.5f}) {
          const auto a = random_vec(static_cast<std::size_t>(m) * k, rng);
          const auto b = random_vec(static_cast<std::size_t>(k) * n, rng);
          const auto c0 = random_vec(static_cast<std::size_t>(m) * n, rng);
          const int lda = ta ? m : k;
          const int ldb = tb ? k : n;
          std::vector<float> ref = c0, fast = c0;
          simd::set_active_isa(simd::Isa::scalar);
          simd::gemm<float>(ta, tb, m, n, k, 1.5f, a.data(), lda, b.data(), ldb, beta, ref.data(), n);
          simd::set_active_isa(simd::Isa::avx2);
          simd::gemm<float>(ta, tb, m, n, k, 1.5f, a.data(), lda, b.data(), ldb, beta, fast.data(), n);
          for (std::size_t i = 0; i < ref.size(); ++i) {
            REQUIRE(std::fabs(ref[i] - fast[i]) <= 1e-5f * (1.0f + std::sqrt(static_cast<float>(k))));
          }
        }
      }
    }
  }
}

TEST_CASE("sgemm honours leading dimensions for strided sub-matrices") {
  IsaGuard guard;
  Rng rng(5);
  // 4x3 block inside a 4x8 buffer times 3x2 block inside a 3x5 buffer.
  const auto a = random_vec(32, rng);
  const auto b = random_vec(15, rng);
  for (simd::Isa isa : {simd::Isa::scalar, simd::Isa::avx2}) {
    simd::set_active_isa(isa);
    std::vector<float> c(4 * 6, -7.0f);
    simd::gemm<float>(false, false, 4, 2, 3, 1.0f, a.data() + 2, 8, b.data() + 1, 5, 0.0f, c.data() + 1, 6);
    for (int i = 0; i < 4; ++i) {
      CHECK(c[i * 6] == -7.0f);
      for (int j = 0; j < 2; ++j) {
        double expect = 0.0;
        for (int p = 0; p < 3; ++p) expect += double(a[i * 8 + 2 + p]) * b[p * 5 + 1 + j];
        CHECK(c[i * 6 + 1 + j] == doctest::Approx(expect).epsilon(1e-5));
      }
      for (int j = 3; j < 6; ++j) CHECK(c[i * 6 + j] == -7.0f);
    }
  }
}

TEST_CASE("dot/axpy/scale SIMD variants match scalar references") {
  if (simd::detect_isa() != simd::Isa::avx2) return;
  IsaGuard guard;
  Rng rng(3);
  for (std::size_t n : {0u, 1u, 7u, 8u, 9u, 31u, 32u, 33u, 1000u}) {
    const auto x = random_vec(n, rng);
    auto y = random_vec(n, rng);
    simd::set_active_isa(simd::Isa::scalar);
    const float d_ref = simd::dot<float>(x.data(), y.data(), n);
    auto y_ref = y;
    simd::axpy<float>(n, 0.3f, x.data(), y_ref.data());
    simd::scale<float>(n, -2.0f, y_ref.data());
    simd::set_active_isa(simd::Isa::avx2);
    const float d_fast = simd::dot<float>(x.data(), y.data(), n);
    simd::axpy<float>(n, 0.3f, x.data(), y.data());
    simd::scale<float>(n, -2.0f, y.data());
    CHECK(d_fast == doctest::Approx(d_ref).epsilon(1e-5));
    for (std::size_t i = 0; i < n; ++i) CHECK(y[i] == doctest::Approx(y_ref[i]).epsilon(1e-6));
  }
}

TEST_CASE("gemm results are reproducible run to run") {
  Rng rng(9);
  const auto a = random_vec(40 * 50, rng);
  const auto b = random_vec(50 * 30, rng);
  std::vector<float> c1(40 * 30), c2(40 * 30);
  simd::gemm<float>(false, false, 40, 30, 50, 1.0f, a.data(), 50, b.data(), 30, 0.0f, c1.data(), 30);
  simd::gemm<float>(false, false, 40, 30, 50, 1.0f, a.data(), 50, b.data(), 30, 0.0f, c2.data(), 30);
  CHECK(c1 == c2);
}

#include "f2x/kernels.hpp"

#include <cstring>

#if defined(__AVX2__)
#include <immintrin.h>

namespace f2x::kernels::avx2 {

bool available() { return true; }

// Elementwise kernels process 4 lanes at a time in the same order as the
// scalar path; mul followed by add (no FMA) keeps rounding identical.

void vadd(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void vmul(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void vscale(const double* x, double s, double* out, std::size_t n) {
  const __m256d vs = _mm256_set1_pd(s);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_mul_pd(vs, _mm256_loadu_pd(x + i)));
  }
  for (; i < n; ++i) out[i] = s * x[i];
}

void vaxpy(double* y, double a, const double* x, std::size_t n) {
  const __m256d va = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d p = _mm256_mul_pd(va, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), p));
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

static inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(lo, _mm_unpackhi_pd(lo, lo)));
}

double vsum(const double* x, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = _mm256_add_pd(acc, _mm256_loadu_pd(x + i));
  double s = hsum(acc);
  for (; i < n; ++i) s += x[i];
  return s;
}

double vdot(const double* a, const double* b, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc = _mm256_add_pd(acc, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  double s = hsum(acc);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void matmul_nn(const double* A, const double* B, double* C,
               std::size_t M, std::size_t K, std::size_t N, bool acc) {
  for (std::size_t i = 0; i < M; ++i) {
    double* c = C + i * N;
    if (!acc) std::memset(c, 0, N * sizeof(double));
    const double* a = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const __m256d va = _mm256_set1_pd(a[k]);
      const double* b = B + k * N;
      std::size_t j = 0;
      for (; j + 4 <= N; j += 4) {
        __m256d p = _mm256_mul_pd(va, _mm256_loadu_pd(b + j));
        _mm256_storeu_pd(c + j, _mm256_add_pd(_mm256_loadu_pd(c + j), p));
      }
      for (; j < N; ++j) c[j] += a[k] * b[j];
    }
  }
}

void matmul_nt(const double* A, const double* B, double* C,
               std::size_t M, std::size_t K, std::size_t N, bool acc) {
  for (std::size_t i = 0; i < M; ++i) {
    const double* a = A + i * K;
    double* c = C + i * N;
    for (std::size_t j = 0; j < N; ++j) {
      double s = vdot(a, B + j * K, K);
      c[j] = acc ? c[j] + s : s;
    }
  }
}

void matmul_tn(const double* A, const double* G, double* C,
               std::size_t M, std::size_t K, std::size_t N, bool acc) {
  if (!acc) std::memset(C, 0, K * N * sizeof(double));
  for (std::size_t i = 0; i < M; ++i) {
    const double* a = A + i * K;
    const double* g = G + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const __m256d va = _mm256_set1_pd(a[k]);
      double* c = C + k * N;
      std::size_t j = 0;
      for (; j + 4 <= N; j += 4) {
        __m256d p = _mm256_mul_pd(va, _mm256_loadu_pd(g + j));
        _mm256_storeu_pd(c + j, _mm256_add_pd(_mm256_loadu_pd(c + j), p));
      }
      for (; j < N; ++j) c[j] += a[k] * g[j];
    }
  }
}

}  // namespace f2x::kernels::avx2

#else  // !__AVX2__

namespace f2x::kernels::avx2 {
bool available() { return false; }
void vadd(const double*, const double*, double*, std::size_t) {}
void vmul(const double*, const double*, double*, std::size_t) {}
void vscale(const double*, double, double*, std::size_t) {}
void vaxpy(double*, double, const double*, std::size_t) {}
double vsum(const double*, std::size_t) { return 0.0; }
double vdot(const double*, const double*, std::size_t) { return 0.0; }
void matmul_nn(const double*, const double*, double*, std::size_t, std::size_t, std::size_t, bool) {}
void matmul_nt(const double*, const double*, double*, std::size_t, std::size_t, std::size_t, bool) {}
void matmul_tn(const double*, const double*, double*, std::size_t, std::size_t, std::size_t, bool) {}
}  // namespace f2x::kernels::avx2

#endif

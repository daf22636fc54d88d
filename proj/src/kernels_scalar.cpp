#include "f2x/kernels.hpp"

#include <cstring>

namespace f2x::kernels::scalar {

void vadd(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void vmul(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void vscale(const double* x, double s, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = s * x[i];
}

void vaxpy(double* y, double a, const double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

double vsum(const double* x, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i];
  return s;
}

double vdot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void matmul_nn(const double* A, const double* B, double* C,
               std::size_t M, std::size_t K, std::size_t N, bool acc) {
  for (std::size_t i = 0; i < M; ++i) {
    double* c = C + i * N;
    if (!acc) std::memset(c, 0, N * sizeof(double));
    const double* a = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const double aik = a[k];
      const double* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += aik * b[j];
    }
  }
}

void matmul_nt(const double* A, const double* B, double* C,
               std::size_t M, std::size_t K, std::size_t N, bool acc) {
  for (std::size_t i = 0; i < M; ++i) {
    const double* a = A + i * K;
    double* c = C + i * N;
    for (std::size_t j = 0; j < N; ++j) {
      double s = 0.0;
      const double* b = B + j * K;
      for (std::size_t k = 0; k < K; ++k) s += a[k] * b[k];
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
      const double aik = a[k];
      double* c = C + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += aik * g[j];
    }
  }
}

}  // namespace f2x::kernels::scalar

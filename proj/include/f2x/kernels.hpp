#pragma once

#include <cstddef>

// Dense f64 inner loops. Every kernel has a scalar reference implementation
// and (on x86-64) an AVX2 variant selected at runtime. Elementwise kernels
// and the nn/tn matmuls accumulate in the same order on both paths and are
// bit-identical; vsum/vdot/matmul_nt use lane-partial sums on the SIMD path
// and agree with the scalar path only up to rounding.
namespace f2x::kernels {

enum class Backend { Auto, Scalar, Avx2 };

// Auto resolves via CPUID (overridable with the F2XD_SIMD env var:
// "scalar" or "avx2"). set_backend(Avx2) on a machine without AVX2 throws.
void set_backend(Backend b);
Backend active_backend();
const char* backend_name();

// out[i] = a[i] + b[i]
void vadd(const double* a, const double* b, double* out, std::size_t n);
// out[i] = a[i] * b[i]
void vmul(const double* a, const double* b, double* out, std::size_t n);
// out[i] = s * x[i]
void vscale(const double* x, double s, double* out, std::size_t n);
// y[i] += a * x[i]
void vaxpy(double* y, double a, const double* x, std::size_t n);
double vsum(const double* x, std::size_t n);
double vdot(const double* a, const double* b, std::size_t n);

// C[M,N] = A[M,K] * B[K,N]; accumulates into C when acc is set.
void matmul_nn(const double* A, const double* B, double* C,
               std::size_t M, std::size_t K, std::size_t N, bool acc);
// C[M,N] = A[M,K] * B^T where B is [N,K].
void matmul_nt(const double* A, const double* B, double* C,
               std::size_t M, std::size_t K, std::size_t N, bool acc);
// C[K,N] = A^T * G where A is [M,K], G is [M,N].
void matmul_tn(const double* A, const double* G, double* C,
               std::size_t M, std::size_t K, std::size_t N, bool acc);

}  // namespace f2x::kernels

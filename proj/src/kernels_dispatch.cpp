#include "f2x/kernels.hpp"

#include <cstdlib>
#include <cstring>
#include <stdexcept>

namespace f2x::kernels {

namespace scalar {
void vadd(const double*, const double*, double*, std::size_t);
void vmul(const double*, const double*, double*, std::size_t);
void vscale(const double*, double, double*, std::size_t);
void vaxpy(double*, double, const double*, std::size_t);
double vsum(const double*, std::size_t);
double vdot(const double*, const double*, std::size_t);
void matmul_nn(const double*, const double*, double*, std::size_t, std::size_t, std::size_t, bool);
void matmul_nt(const double*, const double*, double*, std::size_t, std::size_t, std::size_t, bool);
void matmul_tn(const double*, const double*, double*, std::size_t, std::size_t, std::size_t, bool);
}  // namespace scalar

namespace avx2 {
bool available();
void vadd(const double*, const double*, double*, std::size_t);
void vmul(const double*, const double*, double*, std::size_t);
void vscale(const double*, double, double*, std::size_t);
void vaxpy(double*, double, const double*, std::size_t);
double vsum(const double*, std::size_t);
double vdot(const double*, const double*, std::size_t);
void matmul_nn(const double*, const double*, double*, std::size_t, std::size_t, std::size_t, bool);
void matmul_nt(const double*, const double*, double*, std::size_t, std::size_t, std::size_t, bool);
void matmul_tn(const double*, const double*, double*, std::size_t, std::size_t, std::size_t, bool);
}  // namespace avx2

namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  return avx2::available() && __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

Backend resolve_auto() {
  if (const char* env = std::getenv("F2XD_SIMD")) {
    if (std::strcmp(env, "scalar") == 0) return Backend::Scalar;
    if (std::strcmp(env, "avx2") == 0) return Backend::Avx2;
  }
  return cpu_has_avx2() ? Backend::Avx2 : Backend::Scalar;
}

Backend g_backend = Backend::Auto;

inline bool use_avx2() {
  if (g_backend == Backend::Auto) g_backend = resolve_auto();
  return g_backend == Backend::Avx2;
}

}  // namespace

void set_backend(Backend b) {
  if (b == Backend::Avx2 && !cpu_has_avx2()) {
    throw std::runtime_error("kernels: AVX2 backend requested but not supported on this CPU");
  }
  g_backend = b;
}

Backend active_backend() {
  if (g_backend == Backend::Auto) g_backend = resolve_auto();
  return g_backend;
}

const char* backend_name() {
  return active_backend() == Backend::Avx2 ? "avx2" : "scalar";
}

void vadd(const double* a, const double* b, double* out, std::size_t n) {
  use_avx2() ? avx2::vadd(a, b, out, n) : scalar::vadd(a, b, out, n);
}
void vmul(const double* a, const double* b, double* out, std::size_t n) {
  use_avx2() ? avx2::vmul(a, b, out, n) : scalar::vmul(a, b, out, n);
}
void vscale(const double* x, double s, double* out, std::size_t n) {
  use_avx2() ? avx2::vscale(x, s, out, n) : scalar::vscale(x, s, out, n);
}
void vaxpy(double* y, double a, const double* x, std::size_t n) {
  use_avx2() ? avx2::vaxpy(y, a, x, n) : scalar::vaxpy(y, a, x, n);
}
double vsum(const double* x, std::size_t n) {
  return use_avx2() ? avx2::vsum(x, n) : scalar::vsum(x, n);
}
double vdot(const double* a, const double* b, std::size_t n) {
  return use_avx2() ? avx2::vdot(a, b, n) : scalar::vdot(a, b, n);
}
void matmul_nn(const double* A, const double* B, double* C,
               std::size_t M, std::size_t K, std::size_t N, bool acc) {
  use_avx2() ? avx2::matmul_nn(A, B, C, M, K, N, acc) : scalar::matmul_nn(A, B, C, M, K, N, acc);
}
void matmul_nt(const double* A, const double* B, double* C,
               std::size_t M, std::size_t K, std::size_t N, bool acc) {
  use_avx2() ? avx2::matmul_nt(A, B, C, M, K, N, acc) : scalar::matmul_nt(A, B, C, M, K, N, acc);
}
void matmul_tn(const double* A, const double* G, double* C,
               std::size_t M, std::size_t K, std::size_t N, bool acc) {
  use_avx2() ? avx2::matmul_tn(A, G, C, M, K, N, acc) : scalar::matmul_tn(A, G, C, M, K, N, acc);
}

}  // namespace f2x::kernels

#pragma once

// Arithmetic inner loops shared by the tensor core. Every kernel has a
// scalar reference implementation (kern::ref) and a dispatched front that
// selects an AVX2 variant at runtime when the CPU supports it. Reductions
// accumulate in 64-bit regardless of the element type.

#include <cstddef>

namespace cxr::kern {

bool avx2_available();

// Force the scalar path globally (used by equivalence tests).
void set_force_scalar(bool on);
bool force_scalar();

namespace ref {

double dot_f32(const float* a, const float* b, std::size_t n);
double dot_f64(const double* a, const double* b, std::size_t n);

void add_f32(const float* a, const float* b, float* out, std::size_t n);
void mul_f32(const float* a, const float* b, float* out, std::size_t n);
void axpy_f32(float alpha, const float* x, float* y, std::size_t n);
void scale_f32(float alpha, float* x, std::size_t n);
void relu_f32(const float* x, float* out, std::size_t n);

// Row-major, contiguous. C is overwritten.
// nn: C[m x n] = A[m x k] * B[k x n]
// nt: C[m x n] = A[m x k] * B[n x k]^T
// tn: C[m x n] = A[k x m]^T * B[k x n]
void gemm_nn_f32(std::size_t m, std::size_t n, std::size_t k,
                 const float* a, const float* b, float* c);
void gemm_nt_f32(std::size_t m, std::size_t n, std::size_t k,
                 const float* a, const float* b, float* c);
void gemm_tn_f32(std::size_t m, std::size_t n, std::size_t k,
                 const float* a, const float* b, float* c);

void gemm_nn_f64(std::size_t m, std::size_t n, std::size_t k,
                 const double* a, const double* b, double* c);
void gemm_nt_f64(std::size_t m, std::size_t n, std::size_t k,
                 const double* a, const double* b, double* c);
void gemm_tn_f64(std::size_t m, std::size_t n, std::size_t k,
                 const double* a, const double* b, double* c);

}  // namespace ref

#ifdef __x86_64__
namespace avx2 {

double dot_f32(const float* a, const float* b, std::size_t n);
void add_f32(const float* a, const float* b, float* out, std::size_t n);
void mul_f32(const float* a, const float* b, float* out, std::size_t n);
void axpy_f32(float alpha, const float* x, float* y, std::size_t n);
void scale_f32(float alpha, float* x, std::size_t n);
void relu_f32(const float* x, float* out, std::size_t n);
void gemm_nn_f32(std::size_t m, std::size_t n, std::size_t k,
                 const float* a, const float* b, float* c);
void gemm_nt_f32(std::size_t m, std::size_t n, std::size_t k,
                 const float* a, const float* b, float* c);
void gemm_tn_f32(std::size_t m, std::size_t n, std::size_t k,
                 const float* a, const float* b, float* c);

}  // namespace avx2
#endif

// Dispatched fronts.
double dot(const float* a, const float* b, std::size_t n);
double dot(const double* a, const double* b, std::size_t n);

void add(const float* a, const float* b, float* out, std::size_t n);
void mul(const float* a, const float* b, float* out, std::size_t n);
void axpy(float alpha, const float* x, float* y, std::size_t n);
void scale(float alpha, float* x, std::size_t n);
void relu(const float* x, float* out, std::size_t n);

void gemm_nn(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c);

void gemm_nn(std::size_t m, std::size_t n, std::size_t k,
             const double* a, const double* b, double* c);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k,
             const double* a, const double* b, double* c);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k,
             const double* a, const double* b, double* c);

// Double fallbacks for generic code paths.
inline void add(const double* a, const double* b, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}
inline void mul(const double* a, const double* b, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}
inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}
inline void scale(double alpha, double* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}
inline void relu(const double* x, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
}

}  // namespace cxr::kern

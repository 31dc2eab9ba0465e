// AVX2/FMA variants. Compiled with -mavx2 -mfma; callers guard with
// avx2_available() before dispatching here. Reductions widen lanes to
// double so the accumulation order matches the 64-bit scalar contract
// up to reassociation.

#ifdef __x86_64__

#include <immintrin.h>

#include <cstddef>
#include <vector>

#include "cxr/kernels.hpp"

namespace cxr::kern::avx2 {

namespace {

// Horizontal sum of 4 doubles.
inline double hsum_pd(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d sh = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

}  // namespace

double dot_f32(const float* a, const float* b, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 av = _mm256_loadu_ps(a + i);
        __m256 bv = _mm256_loadu_ps(b + i);
        __m256d alo = _mm256_cvtps_pd(_mm256_castps256_ps128(av));
        __m256d ahi = _mm256_cvtps_pd(_mm256_extractf128_ps(av, 1));
        __m256d blo = _mm256_cvtps_pd(_mm256_castps256_ps128(bv));
        __m256d bhi = _mm256_cvtps_pd(_mm256_extractf128_ps(bv, 1));
        acc0 = _mm256_fmadd_pd(alo, blo, acc0);
        acc1 = _mm256_fmadd_pd(ahi, bhi, acc1);
    }
    double acc = hsum_pd(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) acc += static_cast<double>(a[i]) * b[i];
    return acc;
}

void add_f32(const float* a, const float* b, float* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

void mul_f32(const float* a, const float* b, float* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

void axpy_f32(float alpha, const float* x, float* y, std::size_t n) {
    const __m256 av = _mm256_set1_ps(alpha);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(y + i, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_f32(float alpha, float* x, std::size_t n) {
    const __m256 av = _mm256_set1_ps(alpha);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(x + i, _mm256_mul_ps(av, _mm256_loadu_ps(x + i)));
    for (; i < n; ++i) x[i] *= alpha;
}

void relu_f32(const float* x, float* out, std::size_t n) {
    const __m256 zero = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(out + i, _mm256_max_ps(zero, _mm256_loadu_ps(x + i)));
    for (; i < n; ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

namespace {

// acc[0..n) += s * row[0..n), double lanes.
inline void accum_row_pd(double* acc, double s, const float* row, std::size_t n) {
    const __m256d sv = _mm256_set1_pd(s);
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
        __m256d rv = _mm256_cvtps_pd(_mm_loadu_ps(row + j));
        __m256d av = _mm256_loadu_pd(acc + j);
        _mm256_storeu_pd(acc + j, _mm256_fmadd_pd(sv, rv, av));
    }
    for (; j < n; ++j) acc[j] += s * row[j];
}

}  // namespace

void gemm_nn_f32(std::size_t m, std::size_t n, std::size_t k,
                 const float* a, const float* b, float* c) {
    std::vector<double> acc(n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) acc[j] = 0.0;
        for (std::size_t p = 0; p < k; ++p)
            accum_row_pd(acc.data(), static_cast<double>(a[i * k + p]), b + p * n, n);
        for (std::size_t j = 0; j < n; ++j) c[i * n + j] = static_cast<float>(acc[j]);
    }
}

void gemm_nt_f32(std::size_t m, std::size_t n, std::size_t k,
                 const float* a, const float* b, float* c) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            c[i * n + j] = static_cast<float>(dot_f32(a + i * k, b + j * k, k));
}

void gemm_tn_f32(std::size_t m, std::size_t n, std::size_t k,
                 const float* a, const float* b, float* c) {
    std::vector<double> acc(m * n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
        const float* arow = a + p * m;
        const float* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i)
            accum_row_pd(acc.data() + i * n, static_cast<double>(arow[i]), brow, n);
    }
    for (std::size_t i = 0; i < m * n; ++i) c[i] = static_cast<float>(acc[i]);
}

}  // namespace cxr::kern::avx2

#endif  // __x86_64__

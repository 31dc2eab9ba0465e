#include "cxr/kernels.hpp"

#include <atomic>
#include <vector>

namespace cxr::kern {

namespace {
std::atomic<bool> g_force_scalar{false};
}

void set_force_scalar(bool on) { g_force_scalar.store(on); }
bool force_scalar() { return g_force_scalar.load(); }

bool avx2_available() {
#ifdef __x86_64__
    static const bool ok = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
    return ok;
#else
    return false;
#endif
}

namespace {
inline bool use_avx2() { return avx2_available() && !force_scalar(); }
}

namespace ref {

double dot_f32(const float* a, const float* b, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(a[i]) * b[i];
    return acc;
}

double dot_f64(const double* a, const double* b, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

void add_f32(const float* a, const float* b, float* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void mul_f32(const float* a, const float* b, float* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void axpy_f32(float alpha, const float* x, float* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale_f32(float alpha, float* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

void relu_f32(const float* x, float* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void gemm_nn_f32(std::size_t m, std::size_t n, std::size_t k,
                 const float* a, const float* b, float* c) {
    std::vector<double> acc(n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) acc[j] = 0.0;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            const float* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) acc[j] += aip * brow[j];
        }
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
        for (std::size_t i = 0; i < m; ++i) {
            const double api = arow[i];
            double* crow = acc.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
        }
    }
    for (std::size_t i = 0; i < m * n; ++i) c[i] = static_cast<float>(acc[i]);
}

void gemm_nn_f64(std::size_t m, std::size_t n, std::size_t k,
                 const double* a, const double* b, double* c) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

void gemm_nt_f64(std::size_t m, std::size_t n, std::size_t k,
                 const double* a, const double* b, double* c) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            c[i * n + j] = dot_f64(a + i * k, b + j * k, k);
}

void gemm_tn_f64(std::size_t m, std::size_t n, std::size_t k,
                 const double* a, const double* b, double* c) {
    for (std::size_t i = 0; i < m * n; ++i) c[i] = 0.0;
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double api = arow[i];
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
        }
    }
}

}  // namespace ref

#ifdef __x86_64__
#define CXR_DISPATCH(fn, ...) \
    do { if (use_avx2()) return avx2::fn(__VA_ARGS__); return ref::fn(__VA_ARGS__); } while (0)
#else
#define CXR_DISPATCH(fn, ...) return ref::fn(__VA_ARGS__)
#endif

double dot(const float* a, const float* b, std::size_t n) { CXR_DISPATCH(dot_f32, a, b, n); }
double dot(const double* a, const double* b, std::size_t n) { return ref::dot_f64(a, b, n); }

void add(const float* a, const float* b, float* out, std::size_t n) { CXR_DISPATCH(add_f32, a, b, out, n); }
void mul(const float* a, const float* b, float* out, std::size_t n) { CXR_DISPATCH(mul_f32, a, b, out, n); }
void axpy(float alpha, const float* x, float* y, std::size_t n) { CXR_DISPATCH(axpy_f32, alpha, x, y, n); }
void scale(float alpha, float* x, std::size_t n) { CXR_DISPATCH(scale_f32, alpha, x, n); }
void relu(const float* x, float* out, std::size_t n) { CXR_DISPATCH(relu_f32, x, out, n); }

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c) {
    CXR_DISPATCH(gemm_nn_f32, m, n, k, a, b, c);
}
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c) {
    CXR_DISPATCH(gemm_nt_f32, m, n, k, a, b, c);
}
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c) {
    CXR_DISPATCH(gemm_tn_f32, m, n, k, a, b, c);
}

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
    ref::gemm_nn_f64(m, n, k, a, b, c);
}
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
    ref::gemm_nt_f64(m, n, k, a, b, c);
}
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
    ref::gemm_tn_f64(m, n, k, a, b, c);
}

#undef CXR_DISPATCH

}  // namespace cxr::kern

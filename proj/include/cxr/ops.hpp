#pragma once

// Differentiable tensor operations. Forward paths run through the
// kernels layer; backward closures capture whatever forward state the
// gradient rule needs (argmax indices, softmax probabilities, im2col
// buffers) behind shared_ptrs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include "cxr/kernels.hpp"
#include "cxr/tensor.hpp"

namespace cxr {

namespace opdetail {

template <class T>
using NodePtr = typename Tensor<T>::NodePtr;
template <class T>
using GradMap = typename Tensor<T>::GradMap;

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

}  // namespace opdetail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    opdetail::check_same_shape(a, b, "add");
    std::vector<T> out(a.size());
    kern::add(a.data().data(), b.data().data(), out.data(), a.size());
    auto pa = a.node_ptr();
    auto pb = b.node_ptr();
    return Tensor<T>::make_op(
        a.shape(), std::move(out), {pa, pb},
        [pa, pb](auto&, const std::vector<T>& go, auto& gm) {
            if (pa->requires_grad) kern::axpy(T(1), go.data(), Tensor<T>::acc(gm, pa).data(), go.size());
            if (pb->requires_grad) kern::axpy(T(1), go.data(), Tensor<T>::acc(gm, pb).data(), go.size());
        });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    opdetail::check_same_shape(a, b, "sub");
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    auto pa = a.node_ptr();
    auto pb = b.node_ptr();
    return Tensor<T>::make_op(
        a.shape(), std::move(out), {pa, pb},
        [pa, pb](auto&, const std::vector<T>& go, auto& gm) {
            if (pa->requires_grad) kern::axpy(T(1), go.data(), Tensor<T>::acc(gm, pa).data(), go.size());
            if (pb->requires_grad) kern::axpy(T(-1), go.data(), Tensor<T>::acc(gm, pb).data(), go.size());
        });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    opdetail::check_same_shape(a, b, "mul");
    std::vector<T> out(a.size());
    kern::mul(a.data().data(), b.data().data(), out.data(), a.size());
    auto pa = a.node_ptr();
    auto pb = b.node_ptr();
    return Tensor<T>::make_op(
        a.shape(), std::move(out), {pa, pb},
        [pa, pb](auto&, const std::vector<T>& go, auto& gm) {
            if (pa->requires_grad) {
                auto& g = Tensor<T>::acc(gm, pa);
                for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * pb->data[i];
            }
            if (pb->requires_grad) {
                auto& g = Tensor<T>::acc(gm, pb);
                for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * pa->data[i];
            }
        });
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
    std::vector<T> out = a.data();
    kern::scale(s, out.data(), out.size());
    auto pa = a.node_ptr();
    return Tensor<T>::make_op(
        a.shape(), std::move(out), {pa},
        [pa, s](auto&, const std::vector<T>& go, auto& gm) {
            if (pa->requires_grad) kern::axpy(s, go.data(), Tensor<T>::acc(gm, pa).data(), go.size());
        });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    std::vector<T> out = a.data();
    for (auto& v : out) v += s;
    auto pa = a.node_ptr();
    return Tensor<T>::make_op(
        a.shape(), std::move(out), {pa},
        [pa](auto&, const std::vector<T>& go, auto& gm) {
            if (pa->requires_grad) kern::axpy(T(1), go.data(), Tensor<T>::acc(gm, pa).data(), go.size());
        });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i];
    auto pa = a.node_ptr();
    return Tensor<T>::make_op(
        {1}, {static_cast<T>(acc)}, {pa},
        [pa](auto&, const std::vector<T>& go, auto& gm) {
            if (!pa->requires_grad) return;
            auto& g = Tensor<T>::acc(gm, pa);
            for (auto& v : g) v += go[0];
        });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
    return mul_scalar(sum(a), static_cast<T>(1.0 / static_cast<double>(a.size())));
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.size());
    kern::relu(a.data().data(), out.data(), a.size());
    auto pa = a.node_ptr();
    return Tensor<T>::make_op(
        a.shape(), std::move(out), {pa},
        [pa](auto&, const std::vector<T>& go, auto& gm) {
            if (!pa->requires_grad) return;
            auto& g = Tensor<T>::acc(gm, pa);
            for (std::size_t i = 0; i < go.size(); ++i)
                if (pa->data[i] > T(0)) g[i] += go[i];  // relu'(0) := 0
        });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    auto out = std::make_shared<std::vector<T>>(a.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        (*out)[i] = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(a[i]))));
    auto pa = a.node_ptr();
    return Tensor<T>::make_op(
        a.shape(), *out, {pa},
        [pa, out](auto&, const std::vector<T>& go, auto& gm) {
            if (!pa->requires_grad) return;
            auto& g = Tensor<T>::acc(gm, pa);
            for (std::size_t i = 0; i < go.size(); ++i) {
                T s = (*out)[i];
                g[i] += go[i] * s * (T(1) - s);
            }
        });
}

// tanh-approximation gelu.
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        double x = a[i];
        out[i] = static_cast<T>(0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x))));
    }
    auto pa = a.node_ptr();
    return Tensor<T>::make_op(
        a.shape(), std::move(out), {pa},
        [pa](auto&, const std::vector<T>& go, auto& gm) {
            if (!pa->requires_grad) return;
            auto& g = Tensor<T>::acc(gm, pa);
            for (std::size_t i = 0; i < go.size(); ++i) {
                double x = pa->data[i];
                double th = std::tanh(kC * (x + kA * x * x * x));
                double d = 0.5 * (1.0 + th) +
                           0.5 * x * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * x * x);
                g[i] += go[i] * static_cast<T>(d);
            }
        });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<std::size_t> new_shape) {
    if (Tensor<T>::numel(new_shape) != a.size())
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                             shape_str(new_shape));
    auto pa = a.node_ptr();
    return Tensor<T>::make_op(
        std::move(new_shape), a.data(), {pa},
        [pa](auto&, const std::vector<T>& go, auto& gm) {
            if (pa->requires_grad) kern::axpy(T(1), go.data(), Tensor<T>::acc(gm, pa).data(), go.size());
        });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ContractError("concat: empty input list");
    const auto& s0 = parts[0].shape();
    if (axis >= s0.size()) throw DimensionError("concat: axis out of range");
    std::size_t axis_total = 0;
    for (const auto& p : parts) {
        const auto& s = p.shape();
        if (s.size() != s0.size()) throw DimensionError("concat: rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i)
            if (i != axis && s[i] != s0[i])
                throw DimensionError("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(s0));
        axis_total += s[axis];
    }
    std::vector<std::size_t> out_shape = s0;
    out_shape[axis] = axis_total;

    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
    for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];

    std::vector<T> out(outer * axis_total * inner);
    std::vector<std::size_t> axis_sizes;
    std::vector<opdetail::NodePtr<T>> parents;
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t an = p.shape()[axis];
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(p.data().data() + o * an * inner, an * inner,
                        out.data() + (o * axis_total + off) * inner);
        axis_sizes.push_back(an);
        parents.push_back(p.node_ptr());
        off += an;
    }

    auto ps = parents;
    return Tensor<T>::make_op(
        std::move(out_shape), std::move(out), std::move(parents),
        [ps, axis_sizes, outer, inner, axis_total](auto&, const std::vector<T>& go, auto& gm) {
            std::size_t off2 = 0;
            for (std::size_t pi = 0; pi < ps.size(); ++pi) {
                const std::size_t an = axis_sizes[pi];
                if (ps[pi]->requires_grad) {
                    auto& g = Tensor<T>::acc(gm, ps[pi]);
                    for (std::size_t o = 0; o < outer; ++o) {
                        const T* src = go.data() + (o * axis_total + off2) * inner;
                        T* dst = g.data() + o * an * inner;
                        for (std::size_t i = 0; i < an * inner; ++i) dst[i] += src[i];
                    }
                }
                off2 += an;
            }
        });
}

template <class T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
    const auto& s = a.shape();
    if (axis >= s.size()) throw DimensionError("slice: axis out of range");
    if (start + len > s[axis]) throw DimensionError("slice: range exceeds axis extent");
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t an = s[axis];

    std::vector<std::size_t> out_shape = s;
    out_shape[axis] = len;
    std::vector<T> out(outer * len * inner);
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(a.data().data() + (o * an + start) * inner, len * inner,
                    out.data() + o * len * inner);

    auto pa = a.node_ptr();
    return Tensor<T>::make_op(
        std::move(out_shape), std::move(out), {pa},
        [pa, outer, inner, an, start, len](auto&, const std::vector<T>& go, auto& gm) {
            if (!pa->requires_grad) return;
            auto& g = Tensor<T>::acc(gm, pa);
            for (std::size_t o = 0; o < outer; ++o) {
                const T* src = go.data() + o * len * inner;
                T* dst = g.data() + (o * an + start) * inner;
                for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        });
}

template <class T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
    const auto& s = a.shape();
    if (s.size() < 2) throw DimensionError("transpose_last2: rank < 2");
    const std::size_t m = s[s.size() - 2], n = s[s.size() - 1];
    std::size_t batch = a.size() / (m * n);
    std::vector<std::size_t> out_shape = s;
    std::swap(out_shape[s.size() - 2], out_shape[s.size() - 1]);
    std::vector<T> out(a.size());
    for (std::size_t b = 0; b < batch; ++b) {
        const T* src = a.data().data() + b * m * n;
        T* dst = out.data() + b * m * n;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
    }
    auto pa = a.node_ptr();
    return Tensor<T>::make_op(
        std::move(out_shape), std::move(out), {pa},
        [pa, batch, m, n](auto&, const std::vector<T>& go, auto& gm) {
            if (!pa->requires_grad) return;
            auto& g = Tensor<T>::acc(gm, pa);
            for (std::size_t b = 0; b < batch; ++b) {
                const T* src = go.data() + b * m * n;  // shape n x m
                T* dst = g.data() + b * m * n;
                for (std::size_t j = 0; j < n; ++j)
                    for (std::size_t i = 0; i < m; ++i) dst[i * n + j] += src[j * m + i];
            }
        });
}

// Adds a 1 x ... parameter to every batch row; backward sums over batch.
template <class T>
Tensor<T> add_bcast0(const Tensor<T>& x, const Tensor<T>& p) {
    const auto& xs = x.shape();
    const auto& ps = p.shape();
    if (ps.empty() || ps[0] != 1 || ps.size() != xs.size())
        throw DimensionError("add_bcast0: parameter must have leading dim 1");
    for (std::size_t i = 1; i < xs.size(); ++i)
        if (xs[i] != ps[i])
            throw DimensionError("add_bcast0: shape mismatch " + shape_str(xs) + " vs " + shape_str(ps));
    const std::size_t batch = xs[0];
    const std::size_t chunk = p.size();
    std::vector<T> out(x.size());
    for (std::size_t b = 0; b < batch; ++b)
        kern::add(x.data().data() + b * chunk, p.data().data(), out.data() + b * chunk, chunk);
    auto px = x.node_ptr();
    auto pp = p.node_ptr();
    return Tensor<T>::make_op(
        xs, std::move(out), {px, pp},
        [px, pp, batch, chunk](auto&, const std::vector<T>& go, auto& gm) {
            if (px->requires_grad)
                kern::axpy(T(1), go.data(), Tensor<T>::acc(gm, px).data(), go.size());
            if (pp->requires_grad) {
                auto& g = Tensor<T>::acc(gm, pp);
                for (std::size_t b = 0; b < batch; ++b)
                    kern::axpy(T(1), go.data() + b * chunk, g.data(), chunk);
            }
        });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw DimensionError("matmul: expected 2-D operands, got " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw DimensionError("matmul: inner dimension mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    std::vector<T> out(m * n);
    kern::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
    auto pa = a.node_ptr();
    auto pb = b.node_ptr();
    return Tensor<T>::make_op(
        {m, n}, std::move(out), {pa, pb},
        [pa, pb, m, n, k](auto&, const std::vector<T>& go, auto& gm) {
            if (pa->requires_grad) {  // dA = dC * B^T
                std::vector<T> da(m * k);
                kern::gemm_nt(m, k, n, go.data(), pb->data.data(), da.data());
                kern::axpy(T(1), da.data(), Tensor<T>::acc(gm, pa).data(), da.size());
            }
            if (pb->requires_grad) {  // dB = A^T * dC
                std::vector<T> db(k * n);
                kern::gemm_tn(k, n, m, pa->data.data(), go.data(), db.data());
                kern::axpy(T(1), db.data(), Tensor<T>::acc(gm, pb).data(), db.size());
            }
        });
}

template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    const std::size_t bn = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    std::vector<T> out(bn * m * n);
    for (std::size_t i = 0; i < bn; ++i)
        kern::gemm_nn(m, n, k, a.data().data() + i * m * k, b.data().data() + i * k * n,
                      out.data() + i * m * n);
    auto pa = a.node_ptr();
    auto pb = b.node_ptr();
    return Tensor<T>::make_op(
        {bn, m, n}, std::move(out), {pa, pb},
        [pa, pb, bn, m, n, k](auto&, const std::vector<T>& go, auto& gm) {
            if (pa->requires_grad) {
                auto& g = Tensor<T>::acc(gm, pa);
                std::vector<T> da(m * k);
                for (std::size_t i = 0; i < bn; ++i) {
                    kern::gemm_nt(m, k, n, go.data() + i * m * n, pb->data.data() + i * k * n,
                                  da.data());
                    kern::axpy(T(1), da.data(), g.data() + i * m * k, da.size());
                }
            }
            if (pb->requires_grad) {
                auto& g = Tensor<T>::acc(gm, pb);
                std::vector<T> db(k * n);
                for (std::size_t i = 0; i < bn; ++i) {
                    kern::gemm_tn(k, n, m, pa->data.data() + i * m * k, go.data() + i * m * n,
                                  db.data());
                    kern::axpy(T(1), db.data(), g.data() + i * k * n, db.size());
                }
            }
        });
}

// x[..., din] * w[din, dout] + b[dout], leading dims flattened.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    const std::size_t din = w.dim(0), dout = w.dim(1);
    if (x.shape().back() != din)
        throw DimensionError("linear: input width " + std::to_string(x.shape().back()) +
                             " does not match weight " + shape_str(w.shape()));
    if (b.defined() && b.size() != dout) throw DimensionError("linear: bias width mismatch");
    const std::size_t rows = x.size() / din;
    std::vector<T> out(rows * dout);
    kern::gemm_nn(rows, dout, din, x.data().data(), w.data().data(), out.data());
    if (b.defined())
        for (std::size_t r = 0; r < rows; ++r)
            kern::add(out.data() + r * dout, b.data().data(), out.data() + r * dout, dout);
    std::vector<std::size_t> out_shape = x.shape();
    out_shape.back() = dout;
    auto px = x.node_ptr();
    auto pw = w.node_ptr();
    std::vector<opdetail::NodePtr<T>> parents{px, pw};
    opdetail::NodePtr<T> pb;
    if (b.defined()) {
        pb = b.node_ptr();
        parents.push_back(pb);
    }
    return Tensor<T>::make_op(
        std::move(out_shape), std::move(out), std::move(parents),
        [px, pw, pb, rows, din, dout](auto&, const std::vector<T>& go, auto& gm) {
            if (px->requires_grad) {
                std::vector<T> dx(rows * din);
                kern::gemm_nt(rows, din, dout, go.data(), pw->data.data(), dx.data());
                kern::axpy(T(1), dx.data(), Tensor<T>::acc(gm, px).data(), dx.size());
            }
            if (pw->requires_grad) {
                std::vector<T> dw(din * dout);
                kern::gemm_tn(din, dout, rows, px->data.data(), go.data(), dw.data());
                kern::axpy(T(1), dw.data(), Tensor<T>::acc(gm, pw).data(), dw.size());
            }
            if (pb && pb->requires_grad) {
                auto& g = Tensor<T>::acc(gm, pb);
                for (std::size_t r = 0; r < rows; ++r)
                    kern::axpy(T(1), go.data() + r * dout, g.data(), dout);
            }
        });
}

// ---------------------------------------------------------------------------
// Softmax and loss
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> softmax_lastdim(const Tensor<T>& a) {
    const std::size_t d = a.shape().back();
    const std::size_t rows = a.size() / d;
    auto out = std::make_shared<std::vector<T>>(a.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* src = a.data().data() + r * d;
        T* dst = out->data() + r * d;
        double mx = src[0];
        for (std::size_t i = 1; i < d; ++i) mx = std::max(mx, static_cast<double>(src[i]));
        double denom = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            double e = std::exp(static_cast<double>(src[i]) - mx);
            dst[i] = static_cast<T>(e);
            denom += e;
        }
        for (std::size_t i = 0; i < d; ++i) dst[i] = static_cast<T>(dst[i] / denom);
    }
    auto pa = a.node_ptr();
    return Tensor<T>::make_op(
        a.shape(), *out, {pa},
        [pa, out, rows, d](auto&, const std::vector<T>& go, auto& gm) {
            if (!pa->requires_grad) return;
            auto& g = Tensor<T>::acc(gm, pa);
            for (std::size_t r = 0; r < rows; ++r) {
                const T* y = out->data() + r * d;
                const T* dy = go.data() + r * d;
                double dot = 0.0;
                for (std::size_t i = 0; i < d; ++i) dot += static_cast<double>(dy[i]) * y[i];
                for (std::size_t i = 0; i < d; ++i)
                    g[r * d + i] += static_cast<T>(y[i] * (static_cast<double>(dy[i]) - dot));
            }
        });
}

// Mean over the batch of class-weighted negative log softmax probability.
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets,
                                const std::vector<double>& class_weights = {}) {
    if (logits.ndim() != 2)
        throw DimensionError("softmax_cross_entropy: logits must be B x K");
    const std::size_t bsz = logits.dim(0), k = logits.dim(1);
    if (targets.size() != bsz)
        throw DimensionError("softmax_cross_entropy: batch/target length mismatch");
    for (int t : targets)
        if (t < 0 || static_cast<std::size_t>(t) >= k)
            throw LabelError("softmax_cross_entropy: target " + std::to_string(t) +
                             " outside [0, " + std::to_string(k) + ")");
    if (!class_weights.empty() && class_weights.size() != k)
        throw DimensionError("softmax_cross_entropy: class_weights length mismatch");

    auto probs = std::make_shared<std::vector<double>>(bsz * k);
    double loss = 0.0;
    for (std::size_t b = 0; b < bsz; ++b) {
        const T* src = logits.data().data() + b * k;
        double mx = src[0];
        for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, static_cast<double>(src[i]));
        double denom = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            double e = std::exp(static_cast<double>(src[i]) - mx);
            (*probs)[b * k + i] = e;
            denom += e;
        }
        double logdenom = std::log(denom);
        for (std::size_t i = 0; i < k; ++i) (*probs)[b * k + i] /= denom;
        const double w = class_weights.empty() ? 1.0 : class_weights[targets[b]];
        loss += w * (logdenom - (static_cast<double>(src[targets[b]]) - mx));
    }
    loss /= static_cast<double>(bsz);

    auto pl = logits.node_ptr();
    auto tgt = std::make_shared<std::vector<int>>(targets);
    auto cw = std::make_shared<std::vector<double>>(class_weights);
    return Tensor<T>::make_op(
        {1}, {static_cast<T>(loss)}, {pl},
        [pl, probs, tgt, cw, bsz, k](auto&, const std::vector<T>& go, auto& gm) {
            if (!pl->requires_grad) return;
            auto& g = Tensor<T>::acc(gm, pl);
            const double g0 = go[0];
            for (std::size_t b = 0; b < bsz; ++b) {
                const double w = cw->empty() ? 1.0 : (*cw)[(*tgt)[b]];
                const double s = g0 * w / static_cast<double>(bsz);
                for (std::size_t i = 0; i < k; ++i) {
                    double p = (*probs)[b * k + i];
                    double delta = (static_cast<int>(i) == (*tgt)[b]) ? 1.0 : 0.0;
                    g[b * k + i] += static_cast<T>(s * (p - delta));
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Convolution / pooling
// ---------------------------------------------------------------------------

namespace opdetail {

// cols layout: [C*kh*kw, Ho*Wo] per batch element.
template <class T>
void im2col(const T* img, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo,
            T* cols) {
    const std::size_t cols_w = ho * wo;
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t ki = 0; ki < kh; ++ki)
            for (std::size_t kj = 0; kj < kw; ++kj) {
                T* row = cols + ((ch * kh + ki) * kw + kj) * cols_w;
                for (std::size_t oi = 0; oi < ho; ++oi) {
                    const long ii = static_cast<long>(oi * stride + ki) - static_cast<long>(pad);
                    for (std::size_t oj = 0; oj < wo; ++oj) {
                        const long jj = static_cast<long>(oj * stride + kj) - static_cast<long>(pad);
                        row[oi * wo + oj] =
                            (ii >= 0 && ii < static_cast<long>(h) && jj >= 0 &&
                             jj < static_cast<long>(w))
                                ? img[(ch * h + static_cast<std::size_t>(ii)) * w +
                                      static_cast<std::size_t>(jj)]
                                : T(0);
                    }
                }
            }
}

template <class T>
void col2im_acc(const T* cols, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
                std::size_t kw, std::size_t stride, std::size_t pad, std::size_t ho,
                std::size_t wo, T* img) {
    const std::size_t cols_w = ho * wo;
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t ki = 0; ki < kh; ++ki)
            for (std::size_t kj = 0; kj < kw; ++kj) {
                const T* row = cols + ((ch * kh + ki) * kw + kj) * cols_w;
                for (std::size_t oi = 0; oi < ho; ++oi) {
                    const long ii = static_cast<long>(oi * stride + ki) - static_cast<long>(pad);
                    if (ii < 0 || ii >= static_cast<long>(h)) continue;
                    for (std::size_t oj = 0; oj < wo; ++oj) {
                        const long jj = static_cast<long>(oj * stride + kj) - static_cast<long>(pad);
                        if (jj < 0 || jj >= static_cast<long>(w)) continue;
                        img[(ch * h + static_cast<std::size_t>(ii)) * w +
                            static_cast<std::size_t>(jj)] += row[oi * wo + oj];
                    }
                }
            }
}

}  // namespace opdetail

inline std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t pad,
                                std::size_t stride) {
    return (in + 2 * pad - k) / stride + 1;
}

// Cross-correlation, x[B,C,H,W] * w[F,C,kh,kw].
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t pad = 0) {
    if (x.ndim() != 4 || w.ndim() != 4)
        throw DimensionError("conv2d: expected 4-D input and weight");
    const std::size_t bsz = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t f = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != c)
        throw DimensionError("conv2d: channel mismatch, input " + shape_str(x.shape()) +
                             " weight " + shape_str(w.shape()));
    if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
    if (kh > h + 2 * pad || kw > wd + 2 * pad)
        throw DimensionError("conv2d: kernel " + shape_str(w.shape()) +
                             " larger than padded input " + shape_str(x.shape()));
    const std::size_t ho = conv_out_dim(h, kh, pad, stride);
    const std::size_t wo = conv_out_dim(wd, kw, pad, stride);
    const std::size_t ck2 = c * kh * kw, hw = ho * wo;

    auto cols = std::make_shared<std::vector<T>>(bsz * ck2 * hw);
    std::vector<T> out(bsz * f * hw);
    for (std::size_t b = 0; b < bsz; ++b) {
        T* cb = cols->data() + b * ck2 * hw;
        opdetail::im2col(x.data().data() + b * c * h * wd, c, h, wd, kh, kw, stride, pad, ho, wo, cb);
        kern::gemm_nn(f, hw, ck2, w.data().data(), cb, out.data() + b * f * hw);
        if (bias.defined())
            for (std::size_t fi = 0; fi < f; ++fi) {
                const T bv = bias[fi];
                T* orow = out.data() + (b * f + fi) * hw;
                for (std::size_t i = 0; i < hw; ++i) orow[i] += bv;
            }
    }

    auto px = x.node_ptr();
    auto pw = w.node_ptr();
    std::vector<opdetail::NodePtr<T>> parents{px, pw};
    opdetail::NodePtr<T> pb;
    if (bias.defined()) {
        pb = bias.node_ptr();
        parents.push_back(pb);
    }
    return Tensor<T>::make_op(
        {bsz, f, ho, wo}, std::move(out), std::move(parents),
        [px, pw, pb, cols, bsz, c, h, wd, f, kh, kw, stride, pad, ho, wo, ck2,
         hw](auto&, const std::vector<T>& go, auto& gm) {
            if (pw->requires_grad) {
                auto& gw = Tensor<T>::acc(gm, pw);
                std::vector<T> dw(f * ck2);
                for (std::size_t b = 0; b < bsz; ++b) {
                    kern::gemm_nt(f, ck2, hw, go.data() + b * f * hw, cols->data() + b * ck2 * hw,
                                  dw.data());
                    kern::axpy(T(1), dw.data(), gw.data(), dw.size());
                }
            }
            if (px->requires_grad) {
                auto& gx = Tensor<T>::acc(gm, px);
                std::vector<T> dcols(ck2 * hw);
                for (std::size_t b = 0; b < bsz; ++b) {
                    kern::gemm_tn(ck2, hw, f, pw->data.data(), go.data() + b * f * hw, dcols.data());
                    opdetail::col2im_acc(dcols.data(), c, h, wd, kh, kw, stride, pad, ho, wo,
                                         gx.data() + b * c * h * wd);
                }
            }
            if (pb && pb->requires_grad) {
                auto& gb = Tensor<T>::acc(gm, pb);
                for (std::size_t b = 0; b < bsz; ++b)
                    for (std::size_t fi = 0; fi < f; ++fi) {
                        double s = 0.0;
                        const T* orow = go.data() + (b * f + fi) * hw;
                        for (std::size_t i = 0; i < hw; ++i) s += orow[i];
                        gb[fi] += static_cast<T>(s);
                    }
            }
        });
}

template <class T>
Tensor<T> maxpool2d(const Tensor<T>& x, std::size_t window, std::size_t stride) {
    if (x.ndim() != 4) throw DimensionError("maxpool2d: expected 4-D input");
    const std::size_t bsz = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (window > h || window > w)
        throw DimensionError("maxpool2d: window " + std::to_string(window) +
                             " exceeds spatial extent " + shape_str(x.shape()));
    const std::size_t ho = (h - window) / stride + 1;
    const std::size_t wo = (w - window) / stride + 1;
    std::vector<T> out(bsz * c * ho * wo);
    auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
    for (std::size_t bc = 0; bc < bsz * c; ++bc) {
        const T* src = x.data().data() + bc * h * w;
        for (std::size_t oi = 0; oi < ho; ++oi)
            for (std::size_t oj = 0; oj < wo; ++oj) {
                T best = src[oi * stride * w + oj * stride];
                std::size_t best_idx = oi * stride * w + oj * stride;
                for (std::size_t ki = 0; ki < window; ++ki)
                    for (std::size_t kj = 0; kj < window; ++kj) {
                        const std::size_t idx = (oi * stride + ki) * w + (oj * stride + kj);
                        if (src[idx] > best) {  // first occurrence wins ties
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                out[bc * ho * wo + oi * wo + oj] = best;
                (*argmax)[bc * ho * wo + oi * wo + oj] = static_cast<std::uint32_t>(best_idx);
            }
    }
    auto px = x.node_ptr();
    return Tensor<T>::make_op(
        {bsz, c, ho, wo}, std::move(out), {px},
        [px, argmax, bsz, c, h, w, ho, wo](auto&, const std::vector<T>& go, auto& gm) {
            if (!px->requires_grad) return;
            auto& g = Tensor<T>::acc(gm, px);
            for (std::size_t bc = 0; bc < bsz * c; ++bc)
                for (std::size_t i = 0; i < ho * wo; ++i)
                    g[bc * h * w + (*argmax)[bc * ho * wo + i]] += go[bc * ho * wo + i];
        });
}

template <class T>
Tensor<T> avgpool2d(const Tensor<T>& x, std::size_t window, std::size_t stride) {
    if (x.ndim() != 4) throw DimensionError("avgpool2d: expected 4-D input");
    const std::size_t bsz = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (window > h || window > w)
        throw DimensionError("avgpool2d: window exceeds spatial extent");
    const std::size_t ho = (h - window) / stride + 1;
    const std::size_t wo = (w - window) / stride + 1;
    const T inv = static_cast<T>(1.0 / (window * window));
    std::vector<T> out(bsz * c * ho * wo);
    for (std::size_t bc = 0; bc < bsz * c; ++bc) {
        const T* src = x.data().data() + bc * h * w;
        for (std::size_t oi = 0; oi < ho; ++oi)
            for (std::size_t oj = 0; oj < wo; ++oj) {
                double s = 0.0;
                for (std::size_t ki = 0; ki < window; ++ki)
                    for (std::size_t kj = 0; kj < window; ++kj)
                        s += src[(oi * stride + ki) * w + (oj * stride + kj)];
                out[bc * ho * wo + oi * wo + oj] = static_cast<T>(s) * inv;
            }
    }
    auto px = x.node_ptr();
    return Tensor<T>::make_op(
        {bsz, c, ho, wo}, std::move(out), {px},
        [px, bsz, c, h, w, ho, wo, window, stride, inv](auto&, const std::vector<T>& go, auto& gm) {
            if (!px->requires_grad) return;
            auto& g = Tensor<T>::acc(gm, px);
            for (std::size_t bc = 0; bc < bsz * c; ++bc)
                for (std::size_t oi = 0; oi < ho; ++oi)
                    for (std::size_t oj = 0; oj < wo; ++oj) {
                        const T gv = go[bc * ho * wo + oi * wo + oj] * inv;
                        for (std::size_t ki = 0; ki < window; ++ki)
                            for (std::size_t kj = 0; kj < window; ++kj)
                                g[bc * h * w + (oi * stride + ki) * w + (oj * stride + kj)] += gv;
                    }
        });
}

template <class T>
Tensor<T> global_avgpool(const Tensor<T>& x) {
    if (x.ndim() != 4) throw DimensionError("global_avgpool: expected 4-D input");
    const std::size_t bsz = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    const T inv = static_cast<T>(1.0 / hw);
    std::vector<T> out(bsz * c);
    for (std::size_t bc = 0; bc < bsz * c; ++bc) {
        double s = 0.0;
        for (std::size_t i = 0; i < hw; ++i) s += x[bc * hw + i];
        out[bc] = static_cast<T>(s) * inv;
    }
    auto px = x.node_ptr();
    return Tensor<T>::make_op(
        {bsz, c}, std::move(out), {px},
        [px, bsz, c, hw, inv](auto&, const std::vector<T>& go, auto& gm) {
            if (!px->requires_grad) return;
            auto& g = Tensor<T>::acc(gm, px);
            for (std::size_t bc = 0; bc < bsz * c; ++bc)
                for (std::size_t i = 0; i < hw; ++i) g[bc * hw + i] += go[bc] * inv;
        });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// Per-channel batch normalization over batch+spatial dims. 2-D inputs are
// treated as B x C with a 1x1 spatial extent. Running stats (plain, non-grad
// tensors) are updated in train mode by EMA with the given momentum.
template <class T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    Tensor<T>& running_mean, Tensor<T>& running_var, bool train,
                    double eps = 1e-5, double momentum = 0.1) {
    if (x.ndim() != 4 && x.ndim() != 2)
        throw DimensionError("batchnorm: expected 2-D or 4-D input");
    const std::size_t bsz = x.dim(0), c = x.dim(1);
    const std::size_t hw = x.ndim() == 4 ? x.dim(2) * x.dim(3) : 1;
    if (gamma.size() != c || beta.size() != c)
        throw DimensionError("batchnorm: gamma/beta must have one entry per channel");
    if (train && bsz < 2)
        throw DataError("batchnorm: train mode requires batch >= 2 (variance undefined)");

    const std::size_t n = bsz * hw;
    auto mean_v = std::make_shared<std::vector<double>>(c);
    auto istd_v = std::make_shared<std::vector<double>>(c);
    if (train) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            double m = 0.0;
            for (std::size_t b = 0; b < bsz; ++b) {
                const T* src = x.data().data() + (b * c + ch) * hw;
                for (std::size_t i = 0; i < hw; ++i) m += src[i];
            }
            m /= n;
            double var = 0.0;
            for (std::size_t b = 0; b < bsz; ++b) {
                const T* src = x.data().data() + (b * c + ch) * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    const double d = src[i] - m;
                    var += d * d;
                }
            }
            var /= n;
            (*mean_v)[ch] = m;
            (*istd_v)[ch] = 1.0 / std::sqrt(var + eps);
            running_mean[ch] = static_cast<T>((1.0 - momentum) * running_mean[ch] + momentum * m);
            running_var[ch] = static_cast<T>((1.0 - momentum) * running_var[ch] + momentum * var);
        }
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            (*mean_v)[ch] = running_mean[ch];
            (*istd_v)[ch] = 1.0 / std::sqrt(static_cast<double>(running_var[ch]) + eps);
        }
    }

    auto xhat = std::make_shared<std::vector<T>>(x.size());
    std::vector<T> out(x.size());
    for (std::size_t b = 0; b < bsz; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const T* src = x.data().data() + (b * c + ch) * hw;
            T* xh = xhat->data() + (b * c + ch) * hw;
            T* o = out.data() + (b * c + ch) * hw;
            const double m = (*mean_v)[ch], is = (*istd_v)[ch];
            const double g = gamma[ch], be = beta[ch];
            for (std::size_t i = 0; i < hw; ++i) {
                const double h = (src[i] - m) * is;
                xh[i] = static_cast<T>(h);
                o[i] = static_cast<T>(g * h + be);
            }
        }

    auto px = x.node_ptr();
    auto pg = gamma.node_ptr();
    auto pb = beta.node_ptr();
    return Tensor<T>::make_op(
        x.shape(), std::move(out), {px, pg, pb},
        [px, pg, pb, xhat, istd_v, bsz, c, hw, n, train](auto&, const std::vector<T>& go,
                                                         auto& gm) {
            std::vector<double> sum_dy(c, 0.0), sum_dy_xh(c, 0.0);
            for (std::size_t b = 0; b < bsz; ++b)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const T* dy = go.data() + (b * c + ch) * hw;
                    const T* xh = xhat->data() + (b * c + ch) * hw;
                    for (std::size_t i = 0; i < hw; ++i) {
                        sum_dy[ch] += dy[i];
                        sum_dy_xh[ch] += static_cast<double>(dy[i]) * xh[i];
                    }
                }
            if (pg->requires_grad) {
                auto& g = Tensor<T>::acc(gm, pg);
                for (std::size_t ch = 0; ch < c; ++ch) g[ch] += static_cast<T>(sum_dy_xh[ch]);
            }
            if (pb->requires_grad) {
                auto& g = Tensor<T>::acc(gm, pb);
                for (std::size_t ch = 0; ch < c; ++ch) g[ch] += static_cast<T>(sum_dy[ch]);
            }
            if (px->requires_grad) {
                auto& g = Tensor<T>::acc(gm, px);
                for (std::size_t b = 0; b < bsz; ++b)
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        const T* dy = go.data() + (b * c + ch) * hw;
                        const T* xh = xhat->data() + (b * c + ch) * hw;
                        T* gx = g.data() + (b * c + ch) * hw;
                        const double gam = pg->data[ch], is = (*istd_v)[ch];
                        if (train) {
                            const double mdy = sum_dy[ch] / n, mdyxh = sum_dy_xh[ch] / n;
                            for (std::size_t i = 0; i < hw; ++i)
                                gx[i] += static_cast<T>(gam * is *
                                                        (dy[i] - mdy - xh[i] * mdyxh));
                        } else {
                            for (std::size_t i = 0; i < hw; ++i)
                                gx[i] += static_cast<T>(gam * is * dy[i]);
                        }
                    }
            }
        });
}

// Normalize over the last axis, then affine.
template <class T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    double eps = 1e-5) {
    const std::size_t d = x.shape().back();
    if (gamma.size() != d || beta.size() != d)
        throw DimensionError("layernorm: gamma/beta width mismatch");
    const std::size_t rows = x.size() / d;
    auto xhat = std::make_shared<std::vector<T>>(x.size());
    auto istd_v = std::make_shared<std::vector<double>>(rows);
    std::vector<T> out(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* src = x.data().data() + r * d;
        double m = 0.0;
        for (std::size_t i = 0; i < d; ++i) m += src[i];
        m /= d;
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double dv = src[i] - m;
            var += dv * dv;
        }
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        (*istd_v)[r] = is;
        for (std::size_t i = 0; i < d; ++i) {
            const double h = (src[i] - m) * is;
            (*xhat)[r * d + i] = static_cast<T>(h);
            out[r * d + i] = static_cast<T>(static_cast<double>(gamma[i]) * h + beta[i]);
        }
    }
    auto px = x.node_ptr();
    auto pg = gamma.node_ptr();
    auto pb = beta.node_ptr();
    return Tensor<T>::make_op(
        x.shape(), std::move(out), {px, pg, pb},
        [px, pg, pb, xhat, istd_v, rows, d](auto&, const std::vector<T>& go, auto& gm) {
            if (pg->requires_grad) {
                auto& g = Tensor<T>::acc(gm, pg);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t i = 0; i < d; ++i)
                        g[i] += go[r * d + i] * (*xhat)[r * d + i];
            }
            if (pb->requires_grad) {
                auto& g = Tensor<T>::acc(gm, pb);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t i = 0; i < d; ++i) g[i] += go[r * d + i];
            }
            if (px->requires_grad) {
                auto& g = Tensor<T>::acc(gm, px);
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* dy = go.data() + r * d;
                    const T* xh = xhat->data() + r * d;
                    double mdxh = 0.0, mdxh_xh = 0.0;
                    for (std::size_t i = 0; i < d; ++i) {
                        const double dxh = static_cast<double>(dy[i]) * pg->data[i];
                        mdxh += dxh;
                        mdxh_xh += dxh * xh[i];
                    }
                    mdxh /= d;
                    mdxh_xh /= d;
                    const double is = (*istd_v)[r];
                    for (std::size_t i = 0; i < d; ++i) {
                        const double dxh = static_cast<double>(dy[i]) * pg->data[i];
                        g[r * d + i] += static_cast<T>(is * (dxh - mdxh - xh[i] * mdxh_xh));
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

// [B, T, D] -> [B*heads, T, D/heads]
template <class T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
    if (x.ndim() != 3) throw DimensionError("split_heads: expected B x T x D");
    const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
    if (d % heads != 0)
        throw ConfigError("split_heads: embed dim " + std::to_string(d) +
                          " not divisible by heads " + std::to_string(heads));
    const std::size_t dh = d / heads;
    std::vector<T> out(x.size());
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t ti = 0; ti < t; ++ti)
                std::copy_n(x.data().data() + (bi * t + ti) * d + h * dh, dh,
                            out.data() + ((bi * heads + h) * t + ti) * dh);
    auto px = x.node_ptr();
    return Tensor<T>::make_op(
        {b * heads, t, dh}, std::move(out), {px},
        [px, b, t, d, heads, dh](auto&, const std::vector<T>& go, auto& gm) {
            if (!px->requires_grad) return;
            auto& g = Tensor<T>::acc(gm, px);
            for (std::size_t bi = 0; bi < b; ++bi)
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t ti = 0; ti < t; ++ti) {
                        const T* src = go.data() + ((bi * heads + h) * t + ti) * dh;
                        T* dst = g.data() + (bi * t + ti) * d + h * dh;
                        for (std::size_t i = 0; i < dh; ++i) dst[i] += src[i];
                    }
        });
}

// [B*heads, T, dh] -> [B, T, dh*heads]
template <class T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t heads) {
    if (x.ndim() != 3 || x.dim(0) % heads != 0)
        throw DimensionError("merge_heads: bad input shape");
    const std::size_t b = x.dim(0) / heads, t = x.dim(1), dh = x.dim(2);
    const std::size_t d = dh * heads;
    std::vector<T> out(x.size());
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t ti = 0; ti < t; ++ti)
                std::copy_n(x.data().data() + ((bi * heads + h) * t + ti) * dh, dh,
                            out.data() + (bi * t + ti) * d + h * dh);
    auto px = x.node_ptr();
    return Tensor<T>::make_op(
        {b, t, d}, std::move(out), {px},
        [px, b, t, d, heads, dh](auto&, const std::vector<T>& go, auto& gm) {
            if (!px->requires_grad) return;
            auto& g = Tensor<T>::acc(gm, px);
            for (std::size_t bi = 0; bi < b; ++bi)
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t ti = 0; ti < t; ++ti) {
                        const T* src = go.data() + (bi * t + ti) * d + h * dh;
                        T* dst = g.data() + ((bi * heads + h) * t + ti) * dh;
                        for (std::size_t i = 0; i < dh; ++i) dst[i] += src[i];
                    }
        });
}

template <class T>
struct MhaParams {
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <class T>
struct MhaOutput {
    Tensor<T> out;   // [B, Tq, D]
    Tensor<T> attn;  // [B*heads, Tq, Tk]
};

// Scaled dot-product attention; queries from q_in, keys/values from kv_in.
// Self-attention is the q_in == kv_in case.
template <class T>
MhaOutput<T> multi_head_attention_full(const Tensor<T>& q_in, const Tensor<T>& kv_in,
                                       std::size_t heads, const MhaParams<T>& p) {
    if (q_in.ndim() != 3 || kv_in.ndim() != 3)
        throw DimensionError("multi_head_attention: expected B x T x D inputs");
    const std::size_t d = p.wq.dim(1);
    if (d % heads != 0)
        throw ConfigError("multi_head_attention: model dim " + std::to_string(d) +
                          " not divisible by heads " + std::to_string(heads));
    const std::size_t dh = d / heads;
    Tensor<T> q = split_heads(linear(q_in, p.wq, p.bq), heads);
    Tensor<T> k = split_heads(linear(kv_in, p.wk, p.bk), heads);
    Tensor<T> v = split_heads(linear(kv_in, p.wv, p.bv), heads);
    Tensor<T> scores = mul_scalar(bmm(q, transpose_last2(k)),
                                  static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    Tensor<T> attn = softmax_lastdim(scores);
    Tensor<T> ctx = merge_heads(bmm(attn, v), heads);
    return {linear(ctx, p.wo, p.bo), attn};
}

template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& x, std::size_t heads, const MhaParams<T>& p) {
    return multi_head_attention_full(x, x, heads, p).out;
}

// ---------------------------------------------------------------------------
// Non-differentiable resize (inputs only)
// ---------------------------------------------------------------------------

// Half-pixel bilinear resize of a batch; forward-only.
template <class T>
Tensor<T> resize_bilinear_batch(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
    if (x.ndim() != 4) throw DimensionError("resize_bilinear_batch: expected 4-D input");
    if (x.requires_grad())
        throw ContractError("resize_bilinear_batch: input must not require grad");
    const std::size_t bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    std::vector<T> out(bc * out_h * out_w);
    const double sy = static_cast<double>(h) / out_h;
    const double sx = static_cast<double>(w) / out_w;
    for (std::size_t p = 0; p < bc; ++p) {
        const T* src = x.data().data() + p * h * w;
        T* dst = out.data() + p * out_h * out_w;
        for (std::size_t oi = 0; oi < out_h; ++oi) {
            double fy = (oi + 0.5) * sy - 0.5;
            fy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
            const std::size_t y0 = static_cast<std::size_t>(fy);
            const std::size_t y1 = std::min(y0 + 1, h - 1);
            const double wy = fy - y0;
            for (std::size_t oj = 0; oj < out_w; ++oj) {
                double fx = (oj + 0.5) * sx - 0.5;
                fx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
                const std::size_t x0 = static_cast<std::size_t>(fx);
                const std::size_t x1 = std::min(x0 + 1, w - 1);
                const double wx = fx - x0;
                const double v = (1 - wy) * ((1 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1]) +
                                 wy * ((1 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1]);
                dst[oi * out_w + oj] = static_cast<T>(v);
            }
        }
    }
    std::vector<std::size_t> shape = x.shape();
    shape[2] = out_h;
    shape[3] = out_w;
    return Tensor<T>::from_data(std::move(shape), std::move(out));
}

}  // namespace cxr

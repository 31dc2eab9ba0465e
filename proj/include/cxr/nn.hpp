#pragma once

// Layer building blocks over the tensor ops, with parameter registration
// and the initialization rules used by every architecture: Xavier uniform
// for fully connected weights, Kaiming normal for convolution weights,
// zero biases, unit/zero batchnorm affine, N(0, 0.02) embeddings.

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cxr/ops.hpp"

namespace cxr::nn {

enum class Mode { train, eval };

template <class T>
struct Registry {
    std::vector<std::pair<std::string, Tensor<T>>> params;   // trainable
    std::vector<std::pair<std::string, Tensor<T>>> buffers;  // running stats etc.
    std::vector<std::function<void(std::mt19937_64&)>> inits;

    Tensor<T> add_param(const std::string& name, std::vector<std::size_t> shape,
                        std::function<void(Tensor<T>&, std::mt19937_64&)> init) {
        Tensor<T> t(std::move(shape), /*requires_grad=*/true);
        params.emplace_back(name, t);
        inits.push_back([t, init](std::mt19937_64& rng) mutable { init(t, rng); });
        return t;
    }

    Tensor<T> add_buffer(const std::string& name, std::vector<std::size_t> shape, T fill) {
        Tensor<T> t = Tensor<T>::full(std::move(shape), fill);
        buffers.emplace_back(name, t);
        inits.push_back([t, fill](std::mt19937_64&) mutable {
            for (auto& v : t.data()) v = fill;
        });
        return t;
    }

    void init_all(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        for (auto& f : inits) f(rng);
    }

    std::size_t count_trainable() const {
        std::size_t n = 0;
        for (const auto& [name, t] : params) n += t.size();
        return n;
    }
};

namespace init {

template <class T>
void zeros(Tensor<T>& t, std::mt19937_64&) {
    for (auto& v : t.data()) v = T(0);
}

template <class T>
void xavier_uniform(Tensor<T>& t, std::mt19937_64& rng, std::size_t fan_in,
                    std::size_t fan_out) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
}

template <class T>
void kaiming_normal(Tensor<T>& t, std::mt19937_64& rng, std::size_t fan_in) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
}

template <class T>
void normal_embed(Tensor<T>& t, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, 0.02);
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
}

}  // namespace init

template <class T>
struct Linear {
    Tensor<T> w, b;

    Linear() = default;
    Linear(Registry<T>& reg, const std::string& name, std::size_t din, std::size_t dout) {
        w = reg.add_param(name + ".w", {din, dout},
                          [din, dout](Tensor<T>& t, std::mt19937_64& rng) {
                              init::xavier_uniform(t, rng, din, dout);
                          });
        b = reg.add_param(name + ".b", {dout},
                          [](Tensor<T>& t, std::mt19937_64& rng) { init::zeros(t, rng); });
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, w, b); }
};

template <class T>
struct Conv2d {
    Tensor<T> w, b;
    std::size_t stride = 1, pad = 0;

    Conv2d() = default;
    Conv2d(Registry<T>& reg, const std::string& name, std::size_t in_ch, std::size_t out_ch,
           std::size_t k, std::size_t stride_ = 1, std::size_t pad_ = 0)
        : stride(stride_), pad(pad_) {
        const std::size_t fan_in = in_ch * k * k;
        w = reg.add_param(name + ".w", {out_ch, in_ch, k, k},
                          [fan_in](Tensor<T>& t, std::mt19937_64& rng) {
                              init::kaiming_normal(t, rng, fan_in);
                          });
        b = reg.add_param(name + ".b", {out_ch},
                          [](Tensor<T>& t, std::mt19937_64& rng) { init::zeros(t, rng); });
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <class T>
struct BatchNorm2d {
    Tensor<T> gamma, beta;
    mutable Tensor<T> running_mean, running_var;
    double eps = 1e-5, momentum = 0.1;

    BatchNorm2d() = default;
    BatchNorm2d(Registry<T>& reg, const std::string& name, std::size_t channels) {
        gamma = reg.add_param(name + ".gamma", {channels},
                              [](Tensor<T>& t, std::mt19937_64&) {
                                  for (auto& v : t.data()) v = T(1);
                              });
        beta = reg.add_param(name + ".beta", {channels},
                             [](Tensor<T>& t, std::mt19937_64& rng) { init::zeros(t, rng); });
        running_mean = reg.add_buffer(name + ".running_mean", {channels}, T(0));
        running_var = reg.add_buffer(name + ".running_var", {channels}, T(1));
    }

    Tensor<T> operator()(const Tensor<T>& x, Mode mode) const {
        return batchnorm(x, gamma, beta, running_mean, running_var, mode == Mode::train, eps,
                         momentum);
    }
};

template <class T>
struct LayerNorm {
    Tensor<T> gamma, beta;

    LayerNorm() = default;
    LayerNorm(Registry<T>& reg, const std::string& name, std::size_t dim) {
        gamma = reg.add_param(name + ".gamma", {dim},
                              [](Tensor<T>& t, std::mt19937_64&) {
                                  for (auto& v : t.data()) v = T(1);
                              });
        beta = reg.add_param(name + ".beta", {dim},
                             [](Tensor<T>& t, std::mt19937_64& rng) { init::zeros(t, rng); });
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return layernorm(x, gamma, beta); }
};

template <class T>
struct Mha {
    MhaParams<T> p;
    std::size_t heads = 1;

    Mha() = default;
    Mha(Registry<T>& reg, const std::string& name, std::size_t dim, std::size_t heads_,
        std::size_t kv_dim = 0) {
        heads = heads_;
        const std::size_t kvd = kv_dim ? kv_dim : dim;
        Linear<T> q(reg, name + ".q", dim, dim), k(reg, name + ".k", kvd, dim),
            v(reg, name + ".v", kvd, dim), o(reg, name + ".o", dim, dim);
        p = {q.w, q.b, k.w, k.b, v.w, v.b, o.w, o.b};
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return multi_head_attention(x, heads, p); }
    Tensor<T> operator()(const Tensor<T>& q_in, const Tensor<T>& kv_in) const {
        return multi_head_attention_full(q_in, kv_in, heads, p).out;
    }
};

// Learned parameter with leading dim 1, broadcast over the batch.
template <class T>
struct Embed {
    Tensor<T> t;

    Embed() = default;
    Embed(Registry<T>& reg, const std::string& name, std::vector<std::size_t> shape) {
        t = reg.add_param(name, std::move(shape), [](Tensor<T>& p, std::mt19937_64& rng) {
            init::normal_embed(p, rng);
        });
    }
};

// Expands a [1, ...] parameter to batch size B; backward sums over batch.
template <class T>
Tensor<T> tile_batch(const Tensor<T>& p, std::size_t batch) {
    const auto& s = p.shape();
    if (s.empty() || s[0] != 1) throw DimensionError("tile_batch: leading dim must be 1");
    const std::size_t chunk = p.size();
    std::vector<T> out(batch * chunk);
    for (std::size_t b = 0; b < batch; ++b)
        std::copy_n(p.data().data(), chunk, out.data() + b * chunk);
    std::vector<std::size_t> out_shape = s;
    out_shape[0] = batch;
    auto pp = p.node_ptr();
    return Tensor<T>::make_op(
        std::move(out_shape), std::move(out), {pp},
        [pp, batch, chunk](auto&, const std::vector<T>& go, auto& gm) {
            if (!pp->requires_grad) return;
            auto& g = Tensor<T>::acc(gm, pp);
            for (std::size_t b = 0; b < batch; ++b)
                kern::axpy(T(1), go.data() + b * chunk, g.data(), chunk);
        });
}

// [B, C, H, W] -> [B, T, C*p*p] with T = (H/p)*(W/p), patches row-major.
template <class T>
Tensor<T> patchify(const Tensor<T>& x, std::size_t patch) {
    if (x.ndim() != 4) throw DimensionError("patchify: expected 4-D input");
    const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % patch != 0 || w % patch != 0)
        throw ConfigError("patchify: image side " + std::to_string(h) +
                          " not divisible by patch " + std::to_string(patch));
    const std::size_t gh = h / patch, gw = w / patch, t = gh * gw;
    const std::size_t pd = c * patch * patch;
    std::vector<T> out(b * t * pd);
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t gi = 0; gi < gh; ++gi)
            for (std::size_t gj = 0; gj < gw; ++gj)
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t pi = 0; pi < patch; ++pi)
                        for (std::size_t pj = 0; pj < patch; ++pj)
                            out[((bi * t + gi * gw + gj) * pd) +
                                (ch * patch + pi) * patch + pj] =
                                x[((bi * c + ch) * h + gi * patch + pi) * w + gj * patch + pj];
    auto px = x.node_ptr();
    return Tensor<T>::make_op(
        {b, t, pd}, std::move(out), {px},
        [px, b, c, h, w, patch, gh, gw, t, pd](auto&, const std::vector<T>& go, auto& gm) {
            if (!px->requires_grad) return;
            auto& g = Tensor<T>::acc(gm, px);
            for (std::size_t bi = 0; bi < b; ++bi)
                for (std::size_t gi = 0; gi < gh; ++gi)
                    for (std::size_t gj = 0; gj < gw; ++gj)
                        for (std::size_t ch = 0; ch < c; ++ch)
                            for (std::size_t pi = 0; pi < patch; ++pi)
                                for (std::size_t pj = 0; pj < patch; ++pj)
                                    g[((bi * c + ch) * h + gi * patch + pi) * w + gj * patch +
                                      pj] += go[((bi * t + gi * gw + gj) * pd) +
                                                (ch * patch + pi) * patch + pj];
        });
}

// [B, C, H, W] -> [B, H*W, C] token view of a feature map.
template <class T>
Tensor<T> flatten_tokens(const Tensor<T>& x) {
    if (x.ndim() != 4) throw DimensionError("flatten_tokens: expected 4-D input");
    const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<T> out(x.size());
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < hw; ++i)
                out[(bi * hw + i) * c + ch] = x[(bi * c + ch) * hw + i];
    auto px = x.node_ptr();
    return Tensor<T>::make_op(
        {b, hw, c}, std::move(out), {px},
        [px, b, c, hw](auto&, const std::vector<T>& go, auto& gm) {
            if (!px->requires_grad) return;
            auto& g = Tensor<T>::acc(gm, px);
            for (std::size_t bi = 0; bi < b; ++bi)
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t i = 0; i < hw; ++i)
                        g[(bi * c + ch) * hw + i] += go[(bi * hw + i) * c + ch];
        });
}

// Pre-norm transformer encoder block: x += MHA(LN(x)); x += MLP(LN(x)).
template <class T>
struct EncoderBlock {
    LayerNorm<T> ln1, ln2;
    Mha<T> attn;
    Linear<T> fc1, fc2;

    EncoderBlock() = default;
    EncoderBlock(Registry<T>& reg, const std::string& name, std::size_t dim, std::size_t heads,
                 double mlp_ratio) {
        ln1 = LayerNorm<T>(reg, name + ".ln1", dim);
        attn = Mha<T>(reg, name + ".attn", dim, heads);
        ln2 = LayerNorm<T>(reg, name + ".ln2", dim);
        const auto hidden = static_cast<std::size_t>(dim * mlp_ratio);
        fc1 = Linear<T>(reg, name + ".mlp1", dim, hidden);
        fc2 = Linear<T>(reg, name + ".mlp2", hidden, dim);
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        Tensor<T> h = add(x, attn(ln1(x)));
        return add(h, fc2(gelu(fc1(ln2(h)))));
    }
};

}  // namespace cxr::nn

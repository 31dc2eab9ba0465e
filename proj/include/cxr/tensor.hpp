#pragma once

// Dense row-major tensor with reverse-mode autodiff. Each op records a
// backward closure and its input nodes; backward() walks the graph in
// reverse topological order exactly once, so a tensor consumed by two
// ops receives the sum of both path gradients.
//
// Gradients of interior nodes live in a per-call map, not on the nodes,
// which keeps concurrent backward passes over shared leaf parameters
// race-free (see backward_collect). Leaf tensors keep a persistent grad
// buffer that accumulates across backward() calls until zero_grad().

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cxr/errors.hpp"

namespace cxr {

inline std::string shape_str(const std::vector<std::size_t>& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

namespace detail {
inline thread_local bool grad_enabled = true;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::grad_enabled; }

template <class T>
class Tensor {
public:
    struct Node;
    using NodePtr = std::shared_ptr<Node>;
    using GradMap = std::unordered_map<Node*, std::vector<T>>;
    // Accumulates d(loss)/d(self) from `gout` into parents via the map.
    using BackwardFn = std::function<void(Node&, const std::vector<T>&, GradMap&)>;

    struct Node {
        std::vector<std::size_t> shape;
        std::vector<T> data;
        std::vector<T> grad;  // leaves only; empty until first backward
        bool requires_grad = false;
        std::vector<NodePtr> parents;
        BackwardFn backward_fn;  // null for leaves

        std::size_t size() const { return data.size(); }
        bool is_leaf() const { return !backward_fn; }
    };

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape, bool requires_grad = false) {
        n_ = std::make_shared<Node>();
        n_->shape = std::move(shape);
        n_->data.assign(numel(n_->shape), T(0));
        n_->requires_grad = requires_grad;
    }

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::size_t> shape, T value) {
        Tensor t(std::move(shape));
        for (auto& v : t.n_->data) v = value;
        return t;
    }

    static Tensor from_data(std::vector<std::size_t> shape, std::vector<T> data,
                            bool requires_grad = false) {
        if (numel(shape) != data.size())
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        Tensor t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = std::move(shape);
        t.n_->data = std::move(data);
        t.n_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(T value) { return from_data({1}, {value}); }

    // Graph-building constructor used by ops.
    static Tensor make_op(std::vector<std::size_t> shape, std::vector<T> data,
                          std::vector<NodePtr> parents, BackwardFn fn) {
        Tensor t = from_data(std::move(shape), std::move(data));
        bool needs = false;
        if (grad_enabled())
            for (const auto& p : parents)
                if (p->requires_grad) needs = true;
        if (needs) {
            t.n_->requires_grad = true;
            t.n_->parents = std::move(parents);
            t.n_->backward_fn = std::move(fn);
        }
        return t;
    }

    bool defined() const { return static_cast<bool>(n_); }
    const std::vector<std::size_t>& shape() const { return n_->shape; }
    std::size_t size() const { return n_->data.size(); }
    std::size_t dim(std::size_t i) const { return n_->shape.at(i); }
    std::size_t ndim() const { return n_->shape.size(); }

    std::vector<T>& data() { return n_->data; }
    const std::vector<T>& data() const { return n_->data; }
    T& operator[](std::size_t i) { return n_->data[i]; }
    const T& operator[](std::size_t i) const { return n_->data[i]; }

    T item() const {
        if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return n_->data[0];
    }

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool rg) {
        if (!n_->is_leaf()) throw ContractError("set_requires_grad on non-leaf tensor");
        n_->requires_grad = rg;
    }

    bool has_grad() const { return !n_->grad.empty(); }
    std::vector<T>& grad() {
        if (n_->grad.empty()) n_->grad.assign(size(), T(0));
        return n_->grad;
    }
    const std::vector<T>& grad() const { return n_->grad; }
    void zero_grad() {
        for (auto& g : n_->grad) g = T(0);
    }

    Node* node() const { return n_.get(); }
    const NodePtr& node_ptr() const { return n_; }

    // Reverse-mode sweep from a scalar loss; leaf grads accumulate in place.
    void backward() const {
        GradMap gm = run_backward();
        for (auto& [node, g] : gm) {
            if (!node->is_leaf() || !node->requires_grad) continue;
            if (node->grad.empty()) node->grad.assign(node->size(), T(0));
            for (std::size_t i = 0; i < g.size(); ++i) node->grad[i] += g[i];
        }
    }

    // Same sweep, but leaf grads are returned instead of written to the
    // (possibly shared) leaf nodes. Safe to run concurrently from several
    // threads over graphs that share parameter leaves.
    GradMap backward_collect() const {
        GradMap gm = run_backward();
        GradMap leaves;
        for (auto& [node, g] : gm)
            if (node->is_leaf() && node->requires_grad) leaves.emplace(node, std::move(g));
        return leaves;
    }

    static std::size_t numel(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }

    static std::vector<T>& acc(GradMap& gm, const NodePtr& p) {
        auto it = gm.find(p.get());
        if (it == gm.end()) it = gm.emplace(p.get(), std::vector<T>(p->size(), T(0))).first;
        return it->second;
    }

private:
    GradMap run_backward() const {
        if (!defined() || size() != 1)
            throw ContractError("backward() requires a scalar loss tensor");
        if (!n_->requires_grad)
            throw ContractError("backward() on a tensor disconnected from any requires_grad leaf");

        // Iterative DFS topological order.
        std::vector<Node*> order;
        std::unordered_map<Node*, int> state;  // 0 unseen, 1 open, 2 done
        std::vector<Node*> stack{n_.get()};
        while (!stack.empty()) {
            Node* cur = stack.back();
            int& st = state[cur];
            if (st == 0) {
                st = 1;
                for (const auto& p : cur->parents)
                    if (p->requires_grad && state[p.get()] == 0) stack.push_back(p.get());
            } else {
                stack.pop_back();
                if (st == 1) {
                    st = 2;
                    order.push_back(cur);
                }
            }
        }

        GradMap gm;
        gm.emplace(n_.get(), std::vector<T>{T(1)});
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* node = *it;
            if (node->is_leaf()) continue;
            auto git = gm.find(node);
            if (git == gm.end()) continue;
            node->backward_fn(*node, git->second, gm);
        }
        return gm;
    }

    NodePtr n_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace cxr

#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation over a
// graph recorded while the forward pass runs (define-by-run).
//
// A Tensor is a cheap shared handle. Values are never mutated after creation
// except by optimizers writing parameters and by gradient accumulation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ekd/errors.hpp"

namespace ekd {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

enum class OpKind {
    Add, Sub, Mul, Scale, Square, Abs, Relu, Exp,
    Sum, Mean, MatMul, Conv2d, MaxPool2d, GlobalAvgPool2d,
    Reshape, LogSoftmax, GatherRows, KlDiv, WeightedSum,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Scale: return "scale";
        case OpKind::Square: return "square";
        case OpKind::Abs: return "abs";
        case OpKind::Relu: return "relu";
        case OpKind::Exp: return "exp";
        case OpKind::Sum: return "sum";
        case OpKind::Mean: return "mean";
        case OpKind::MatMul: return "matmul";
        case OpKind::Conv2d: return "conv2d";
        case OpKind::MaxPool2d: return "max_pool2d";
        case OpKind::GlobalAvgPool2d: return "global_avg_pool2d";
        case OpKind::Reshape: return "reshape";
        case OpKind::LogSoftmax: return "log_softmax";
        case OpKind::GatherRows: return "gather_rows";
        case OpKind::KlDiv: return "kl_div";
        case OpKind::WeightedSum: return "weighted_sum";
    }
    return "?";
}

namespace detail {
inline thread_local bool grad_enabled = true;
}

/// Disables graph recording on this thread for its lifetime (evaluation passes).
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled; }

template <typename T>
struct TensorImpl;

/// Per-pass gradient buffers handed to backward rules. Returns nullptr for inputs
/// that do not require a gradient.
template <typename T>
class GradSink {
public:
    virtual ~GradSink() = default;
    virtual std::vector<T>* grad_for(std::size_t input) = 0;
};

template <typename T>
struct GraphNode {
    using BackwardFn = std::function<void(std::span<const T> out_grad, GradSink<T>& sink)>;

    OpKind kind;
    std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
    BackwardFn backward;
};

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until the first accumulation
    bool requires_grad = false;
    std::shared_ptr<GraphNode<T>> node;
};

template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() : impl_(std::make_shared<TensorImpl<T>>()) { impl_->data.assign(1, T{0}); }

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
        : impl_(std::make_shared<TensorImpl<T>>()) {
        if (numel(shape) != values.size())
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + to_string(shape));
        impl_->shape = std::move(shape);
        impl_->data = std::move(values);
        impl_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), T{0}, requires_grad);
    }
    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        std::vector<T> v(numel(shape), value);
        return Tensor(std::move(shape), std::move(v), requires_grad);
    }
    static Tensor scalar(T value, bool requires_grad = false) {
        return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
    }

    const Shape& shape() const { return impl_->shape; }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t size() const { return impl_->data.size(); }

    std::span<const T> data() const { return impl_->data; }
    /// Mutable access; only optimizers and initializers should write through this.
    std::span<T> mutable_data() { return impl_->data; }
    T item() const {
        if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
        return impl_->data[0];
    }
    T operator[](std::size_t i) const { return impl_->data[i]; }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on) {
        impl_->requires_grad = on;
        if (!on) impl_->grad.clear();
        return *this;
    }
    bool has_grad() const { return !impl_->grad.empty(); }
    /// Gradient buffer; all zeros when nothing has been accumulated yet.
    std::vector<T> grad() const {
        return impl_->grad.empty() ? std::vector<T>(size(), T{0}) : impl_->grad;
    }
    std::span<T> mutable_grad() {
        if (impl_->grad.empty()) impl_->grad.assign(size(), T{0});
        return impl_->grad;
    }
    void zero_grad() { impl_->grad.clear(); }

    const GraphNode<T>* node() const { return impl_->node.get(); }
    bool is_leaf() const { return !impl_->node; }

    /// Deep copy of values; the copy is a fresh leaf.
    Tensor clone() const { return Tensor(shape(), impl_->data, requires_grad()); }

    const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }
    bool same(const Tensor& other) const { return impl_ == other.impl_; }

private:
    std::shared_ptr<TensorImpl<T>> impl_;
};

// ---------------------------------------------------------------------------
// Graph recording and backward

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, OpKind kind,
                      std::vector<Tensor<T>> inputs,
                      typename GraphNode<T>::BackwardFn backward) {
    Tensor<T> out(std::move(shape), std::move(data));
    if (!::ekd::grad_enabled()) return out;
    bool any = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor<T>& t) { return t.requires_grad(); });
    if (!any) return out;
    auto node = std::make_shared<GraphNode<T>>();
    node->kind = kind;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.impl());
    node->backward = std::move(backward);
    out.impl()->node = std::move(node);
    out.impl()->requires_grad = true;
    return out;
}

template <typename T>
void accumulate(std::vector<T>& dst, std::span<const T> src) {
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

/// Reverse topological order of every graph node reachable from root.
template <typename T>
std::vector<TensorImpl<T>*> topological_order(const Tensor<T>& root) {
    std::vector<TensorImpl<T>*> order;
    std::unordered_map<TensorImpl<T>*, int> state;  // 1 = on stack, 2 = done
    std::vector<std::pair<TensorImpl<T>*, std::size_t>> stack;
    stack.emplace_back(root.impl().get(), 0);
    state[root.impl().get()] = 1;
    while (!stack.empty()) {
        auto& [impl, next] = stack.back();
        const auto* node = impl->node.get();
        if (node && next < node->inputs.size()) {
            TensorImpl<T>* child = node->inputs[next++].get();
            auto it = state.find(child);
            if (it == state.end()) {
                state[child] = 1;
                stack.emplace_back(child, 0);
            } else if (it->second == 1) {
                throw Error("computation graph contains a cycle");
            }
            continue;
        }
        state[impl] = 2;
        order.push_back(impl);
        stack.pop_back();
    }
    std::reverse(order.begin(), order.end());
    return order;
}

/// Accumulates d(root)/d(t) into every reachable tensor t with requires_grad.
/// Repeated calls add to existing gradients.
template <typename T>
void backward(const Tensor<T>& root) {
    if (root.size() != 1)
        throw ShapeError("backward() requires a scalar root, got shape " + to_string(root.shape()));
    if (!root.requires_grad()) return;

    auto order = topological_order(root);
    std::unordered_map<TensorImpl<T>*, std::vector<T>> pass;
    pass[root.impl().get()] = std::vector<T>(1, T{1});

    struct Sink final : GradSink<T> {
        GraphNode<T>* node = nullptr;
        std::unordered_map<TensorImpl<T>*, std::vector<T>>* pass = nullptr;
        std::vector<T>* grad_for(std::size_t i) override {
            TensorImpl<T>* in = node->inputs.at(i).get();
            if (!in->requires_grad) return nullptr;
            auto& buf = (*pass)[in];
            if (buf.empty()) buf.assign(in->data.size(), T{0});
            return &buf;
        }
    } sink;
    sink.pass = &pass;

    for (TensorImpl<T>* impl : order) {
        auto it = pass.find(impl);
        if (it == pass.end()) continue;  // unreachable from the root's gradient
        if (impl->node) {
            sink.node = impl->node.get();
            // Element references survive rehashing, and a node never feeds itself.
            impl->node->backward(std::span<const T>(it->second), sink);
        }
    }
    for (auto& [impl, g] : pass) {
        if (!impl->requires_grad) continue;
        if (impl->grad.empty()) impl->grad = std::move(g);
        else detail::accumulate(impl->grad, std::span<const T>(g));
    }
}

/// Same values, no graph linkage: nothing upstream receives gradient through it.
template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
    return Tensor<T>(x.shape(), std::vector<T>(x.data().begin(), x.data().end()), false);
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

enum class Bcast { Same, Trailing, Scalar };

template <typename T>
Bcast check_broadcast(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() == b.shape()) return Bcast::Same;
    if (b.size() == 1) return Bcast::Scalar;
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (bs.size() <= as.size() && std::equal(bs.rbegin(), bs.rend(), as.rbegin()))
        return Bcast::Trailing;
    throw ShapeError(std::string(op) + ": shapes " + to_string(as) + " and " + to_string(bs) +
                     " are not broadcast-compatible");
}

// Sum a full-size gradient down to b's (broadcast) extent.
template <typename T>
void reduce_into(std::vector<T>& dst, std::span<const T> g, std::size_t m) {
    for (std::size_t i = 0; i < g.size(); ++i) dst[i % m] += g[i];
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_broadcast("add", a, b);
    const std::size_t m = b.size();
    auto ad = a.data();
    auto bd = b.data();
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i % m];
    return detail::make_result<T>(a.shape(), std::move(out), OpKind::Add, {a, b},
        [m](std::span<const T> g, GradSink<T>& s) {
            if (auto* ga = s.grad_for(0)) detail::accumulate(*ga, g);
            if (auto* gb = s.grad_for(1)) detail::reduce_into(*gb, g, m);
        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_broadcast("sub", a, b);
    const std::size_t m = b.size();
    auto ad = a.data();
    auto bd = b.data();
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i % m];
    return detail::make_result<T>(a.shape(), std::move(out), OpKind::Sub, {a, b},
        [m](std::span<const T> g, GradSink<T>& s) {
            if (auto* ga = s.grad_for(0)) detail::accumulate(*ga, g);
            if (auto* gb = s.grad_for(1))
                for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i % m] -= g[i];
        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_broadcast("mul", a, b);
    const std::size_t m = b.size();
    auto ad = a.data();
    auto bd = b.data();
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i % m];
    return detail::make_result<T>(a.shape(), std::move(out), OpKind::Mul, {a, b},
        [a, b, m](std::span<const T> g, GradSink<T>& s) {
            auto ad = a.data();
            auto bd = b.data();
            if (auto* ga = s.grad_for(0))
                for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bd[i % m];
            if (auto* gb = s.grad_for(1))
                for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i % m] += g[i] * ad[i];
        });
}

/// Multiplication by a constant scalar.
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    std::vector<T> out(a.data().begin(), a.data().end());
    for (auto& v : out) v *= factor;
    return detail::make_result<T>(a.shape(), std::move(out), OpKind::Scale, {a},
        [factor](std::span<const T> g, GradSink<T>& s) {
            if (auto* ga = s.grad_for(0))
                for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * factor;
        });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
    std::vector<T> out(a.data().begin(), a.data().end());
    for (auto& v : out) v *= v;
    return detail::make_result<T>(a.shape(), std::move(out), OpKind::Square, {a},
        [a](std::span<const T> g, GradSink<T>& s) {
            auto ad = a.data();
            if (auto* ga = s.grad_for(0))
                for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += T{2} * ad[i] * g[i];
        });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
    std::vector<T> out(a.data().begin(), a.data().end());
    for (auto& v : out) v = std::abs(v);
    return detail::make_result<T>(a.shape(), std::move(out), OpKind::Abs, {a},
        [a](std::span<const T> g, GradSink<T>& s) {
            auto ad = a.data();
            if (auto* ga = s.grad_for(0))
                for (std::size_t i = 0; i < g.size(); ++i)
                    (*ga)[i] += ad[i] > T{0} ? g[i] : (ad[i] < T{0} ? -g[i] : T{0});
        });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.data().begin(), a.data().end());
    for (auto& v : out) v = v > T{0} ? v : T{0};
    return detail::make_result<T>(a.shape(), std::move(out), OpKind::Relu, {a},
        [a](std::span<const T> g, GradSink<T>& s) {
            auto ad = a.data();
            if (auto* ga = s.grad_for(0))
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (ad[i] > T{0}) (*ga)[i] += g[i];
        });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    std::vector<T> out(a.data().begin(), a.data().end());
    for (auto& v : out) v = std::exp(v);
    auto result = detail::make_result<T>(a.shape(), out, OpKind::Exp, {a},
        [out](std::span<const T> g, GradSink<T>& s) {
            if (auto* ga = s.grad_for(0))
                for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * out[i];
        });
    return result;
}

/// Weighted elementwise sum of same-shaped tensors: sum_i w_i * x_i.
template <typename T>
Tensor<T> weighted_sum(const std::vector<Tensor<T>>& xs, const std::vector<T>& w) {
    if (xs.empty() || xs.size() != w.size()) throw ValueError("weighted_sum: need one weight per input");
    for (const auto& x : xs)
        if (x.shape() != xs[0].shape())
            throw ShapeError("weighted_sum: shapes " + to_string(xs[0].shape()) + " and " +
                             to_string(x.shape()) + " differ");
    std::vector<T> out(xs[0].size(), T{0});
    for (std::size_t k = 0; k < xs.size(); ++k) {
        auto d = xs[k].data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += w[k] * d[i];
    }
    return detail::make_result<T>(xs[0].shape(), std::move(out), OpKind::WeightedSum, xs,
        [w](std::span<const T> g, GradSink<T>& s) {
            for (std::size_t k = 0; k < w.size(); ++k)
                if (auto* gk = s.grad_for(k))
                    for (std::size_t i = 0; i < g.size(); ++i) (*gk)[i] += w[k] * g[i];
        });
}

/// Elementwise arithmetic mean of same-shaped tensors, (x_1 + ... + x_n) / n.
template <typename T>
Tensor<T> mean_of(const std::vector<Tensor<T>>& xs) {
    if (xs.empty()) throw ValueError("mean_of: no inputs");
    for (const auto& x : xs)
        if (x.shape() != xs[0].shape())
            throw ShapeError("mean_of: shapes " + to_string(xs[0].shape()) + " and " +
                             to_string(x.shape()) + " differ");
    const T n = static_cast<T>(xs.size());
    std::vector<T> out(xs[0].size(), T{0});
    std::vector<char> agree(out.size(), 1);
    auto first = xs[0].data();
    for (const auto& x : xs) {
        auto d = x.data();
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] += d[i];
            agree[i] &= d[i] == first[i];
        }
    }
    // Where every input agrees the mean is that value exactly; (a+a+a)/3 need not round back to a.
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = agree[i] ? first[i] : out[i] / n;
    return detail::make_result<T>(xs[0].shape(), std::move(out), OpKind::WeightedSum, xs,
        [n, count = xs.size()](std::span<const T> g, GradSink<T>& s) {
            for (std::size_t k = 0; k < count; ++k)
                if (auto* gk = s.grad_for(k))
                    for (std::size_t i = 0; i < g.size(); ++i) (*gk)[i] += g[i] / n;
        });
}

// ---------------------------------------------------------------------------
// Reductions and shape

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T acc{0};
    for (T v : a.data()) acc += v;
    return detail::make_result<T>(Shape{}, std::vector<T>{acc}, OpKind::Sum, {a},
        [](std::span<const T> g, GradSink<T>& s) {
            if (auto* ga = s.grad_for(0))
                for (auto& v : *ga) v += g[0];
        });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    T acc{0};
    for (T v : a.data()) acc += v;
    const T n = static_cast<T>(a.size());
    return detail::make_result<T>(Shape{}, std::vector<T>{acc / n}, OpKind::Mean, {a},
        [n](std::span<const T> g, GradSink<T>& s) {
            if (auto* ga = s.grad_for(0))
                for (auto& v : *ga) v += g[0] / n;
        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (numel(shape) != a.size())
        throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
    return detail::make_result<T>(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()),
        OpKind::Reshape, {a},
        [](std::span<const T> g, GradSink<T>& s) {
            if (auto* ga = s.grad_for(0)) detail::accumulate(*ga, g);
        });
}

// ---------------------------------------------------------------------------
// Matrix product

namespace detail {
// C[M,N] (+)= op(A) * op(B), all row-major.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t M, std::size_t N, std::size_t K,
          const T* A, const T* B, T* C, bool accumulate);
}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                         " are incompatible");
    const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    std::vector<T> out(M * N);
    detail::gemm<T>(false, false, M, N, K, a.data().data(), b.data().data(), out.data(), false);
    return detail::make_result<T>(Shape{M, N}, std::move(out), OpKind::MatMul, {a, b},
        [a, b, M, N, K](std::span<const T> g, GradSink<T>& s) {
            if (auto* ga = s.grad_for(0))  // dA = dC * B^T
                detail::gemm<T>(false, true, M, K, N, g.data(), b.data().data(), ga->data(), true);
            if (auto* gb = s.grad_for(1))  // dB = A^T * dC
                detail::gemm<T>(true, false, K, N, M, a.data().data(), g.data(), gb->data(), true);
        });
}

// ---------------------------------------------------------------------------
// Softmax family

/// Row-wise log-softmax of a [N, C] tensor; the row max is subtracted first.
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x) {
    if (x.rank() != 2) throw ShapeError("log_softmax expects [N,C], got " + to_string(x.shape()));
    const std::size_t N = x.dim(0), C = x.dim(1);
    auto xd = x.data();
    std::vector<T> out(N * C);
    for (std::size_t r = 0; r < N; ++r) {
        const T* row = xd.data() + r * C;
        T mx = *std::max_element(row, row + C);
        T acc{0};
        for (std::size_t c = 0; c < C; ++c) acc += std::exp(row[c] - mx);
        const T log_acc = std::log(acc);
        for (std::size_t c = 0; c < C; ++c) out[r * C + c] = (row[c] - mx) - log_acc;
    }
    return detail::make_result<T>(x.shape(), out, OpKind::LogSoftmax, {x},
        [out, N, C](std::span<const T> g, GradSink<T>& s) {
            auto* gx = s.grad_for(0);
            if (!gx) return;
            for (std::size_t r = 0; r < N; ++r) {
                T gsum{0};
                for (std::size_t c = 0; c < C; ++c) gsum += g[r * C + c];
                for (std::size_t c = 0; c < C; ++c)
                    (*gx)[r * C + c] += g[r * C + c] - std::exp(out[r * C + c]) * gsum;
            }
        });
}

/// Picks x[r, index[r]] for each row of a [N, C] tensor, giving [N].
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const int> index) {
    if (x.rank() != 2 || index.size() != x.dim(0))
        throw ShapeError("gather_rows: " + std::to_string(index.size()) + " indices for shape " +
                         to_string(x.shape()));
    const std::size_t N = x.dim(0), C = x.dim(1);
    std::vector<int> idx(index.begin(), index.end());
    std::vector<T> out(N);
    for (std::size_t r = 0; r < N; ++r) {
        if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= C)
            throw ValueError("label " + std::to_string(idx[r]) + " out of range [0," +
                             std::to_string(C) + ")");
        out[r] = x.data()[r * C + static_cast<std::size_t>(idx[r])];
    }
    return detail::make_result<T>(Shape{N}, std::move(out), OpKind::GatherRows, {x},
        [idx, C](std::span<const T> g, GradSink<T>& s) {
            if (auto* gx = s.grad_for(0))
                for (std::size_t r = 0; r < idx.size(); ++r)
                    (*gx)[r * C + static_cast<std::size_t>(idx[r])] += g[r];
        });
}

/// sum over all elements of p * (log p - log q) given log-probabilities log p and
/// log q of equal shape. Terms with p == 0 contribute 0 (p log p convention).
template <typename T>
Tensor<T> kl_div(const Tensor<T>& log_p, const Tensor<T>& log_q) {
    if (log_p.shape() != log_q.shape())
        throw ShapeError("kl_div: shapes " + to_string(log_p.shape()) + " and " +
                         to_string(log_q.shape()) + " differ");
    auto lp = log_p.data();
    auto lq = log_q.data();
    T acc{0};
    for (std::size_t i = 0; i < lp.size(); ++i) {
        const T p = std::exp(lp[i]);
        if (p != T{0}) acc += p * (lp[i] - lq[i]);
    }
    return detail::make_result<T>(Shape{}, std::vector<T>{acc}, OpKind::KlDiv, {log_p, log_q},
        [log_p, log_q](std::span<const T> g, GradSink<T>& s) {
            auto lp = log_p.data();
            auto lq = log_q.data();
            auto* gp = s.grad_for(0);
            auto* gq = s.grad_for(1);
            for (std::size_t i = 0; i < lp.size(); ++i) {
                const T p = std::exp(lp[i]);
                if (p == T{0}) continue;
                if (gp) (*gp)[i] += g[0] * p * (lp[i] - lq[i] + T{1});
                if (gq) (*gq)[i] -= g[0] * p;
            }
        });
}

}  // namespace ekd

#include "ekd/detail/gemm.hpp"

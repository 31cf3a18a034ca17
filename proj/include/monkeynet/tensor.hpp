#pragma once

// Minimal reverse-mode automatic differentiation over dense n-d arrays.
//
// A Tensor is a shared handle to a graph node. Operations record their
// parents and a backward closure only when gradient recording is enabled and
// at least one input requires a gradient, so inference builds no graph.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace monkeynet {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

namespace detail {

template <typename... Args>
[[noreturn]] void fail(const Args&... args) {
    std::ostringstream os;
    (os << ... << args);
    throw std::invalid_argument(os.str());
}

template <typename... Args>
void require(bool cond, const Args&... args) {
    if (!cond) fail(args...);
}

inline thread_local bool grad_enabled = true;

}  // namespace detail

/// Disables graph recording for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline bool grad_mode_enabled() { return detail::grad_enabled; }

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until something accumulates into it
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    T* grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad.data();
    }
};

template <typename T>
class BasicTensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<Node<T>>;

    BasicTensor() = default;
    explicit BasicTensor(NodePtr n) : node_(std::move(n)) {}

    BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false)
        : node_(std::make_shared<Node<T>>()) {
        detail::require(shape_numel(shape) == static_cast<std::int64_t>(values.size()),
                        "tensor data length ", values.size(), " does not match shape ",
                        shape_str(shape));
        node_->shape = std::move(shape);
        node_->data = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static BasicTensor zeros(Shape shape, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return BasicTensor(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), T(0)),
                           requires_grad);
    }
    static BasicTensor full(Shape shape, T value, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return BasicTensor(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), value),
                           requires_grad);
    }
    static BasicTensor scalar(T value, bool requires_grad = false) {
        return BasicTensor(Shape{1}, std::vector<T>{value}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t ndim() const { return node_->shape.size(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    T item() const {
        detail::require(node_->data.size() == 1, "item() on tensor of shape ", shape_str(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool r) { node_->requires_grad = r; }
    bool has_grad() const { return !node_->grad.empty(); }
    /// Gradient view; empty span when no gradient has been accumulated.
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return std::span<T>(node_->grad_buffer(), node_->data.size()); }
    void zero_grad() { node_->grad.clear(); }

    const NodePtr& node() const { return node_; }

    /// Reverse pass from this tensor. A non-scalar root needs an explicit seed.
    void backward(std::span<const T> seed = {}) const;

    BasicTensor detach() const {
        return BasicTensor(node_->shape, node_->data, false);
    }

private:
    NodePtr node_;
};

using Tensor = BasicTensor<double>;
using Tensor32 = BasicTensor<float>;

/// Builds an op result. The backward closure is attached only when recording.
template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> values,
                           std::vector<std::shared_ptr<Node<T>>> parents,
                           std::function<void(Node<T>&)> backward) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    bool any = false;
    if (detail::grad_enabled) {
        for (const auto& p : parents) any = any || (p && p->requires_grad);
    }
    if (any) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward = std::move(backward);
    }
    return BasicTensor<T>(std::move(node));
}

template <typename T>
void BasicTensor<T>::backward(std::span<const T> seed) const {
    detail::require(node_ != nullptr, "backward() on undefined tensor");
    if (!node_->requires_grad) return;
    if (seed.empty()) {
        detail::require(node_->data.size() == 1, "backward() on non-scalar tensor of shape ",
                        shape_str(shape()), " needs a seed");
        node_->grad_buffer()[0] += T(1);
    } else {
        detail::require(seed.size() == node_->data.size(), "backward seed size mismatch");
        T* g = node_->grad_buffer();
        for (std::size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
    }

    // Iterative post-order DFS; each node is visited once.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node<T>* p = n->parents[idx++].get();
            if (p && p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward && !n->grad.empty()) {
            n->backward(*n);
            // Interior gradients are consumed so a second pass over a shared
            // subgraph does not propagate them twice.
            n->grad.clear();
        }
    }
}

namespace detail {

template <typename T>
void check_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
    require(a.shape() == b.shape(), op, ": shape mismatch ", shape_str(a.shape()), " vs ",
            shape_str(b.shape()));
}

template <typename T>
T* grad_of(const std::shared_ptr<Node<T>>& p) {
    return p->requires_grad ? p->grad_buffer() : nullptr;
}

template <typename T, typename F, typename DF>
BasicTensor<T> unary(const BasicTensor<T>& x, F f, DF df) {
    const auto& xd = x.data();
    std::vector<T> out(xd.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xd[i]);
    auto xn = x.node();
    return make_result<T>(x.shape(), std::move(out), {xn}, [xn, df](Node<T>& self) {
        T* gx = grad_of(xn);
        if (!gx) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            gx[i] += self.grad[i] * df(xn->data[i], self.data[i]);
    });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<T> out(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
    auto an = a.node(), bn = b.node();
    return make_result<T>(a.shape(), std::move(out), {an, bn}, [an, bn](Node<T>& self) {
        for (auto* g : {detail::grad_of(an), detail::grad_of(bn)})
            if (g)
                for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<T> out(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.data()[i];
    auto an = a.node(), bn = b.node();
    return make_result<T>(a.shape(), std::move(out), {an, bn}, [an, bn](Node<T>& self) {
        if (T* g = detail::grad_of(an))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        if (T* g = detail::grad_of(bn))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<T> out(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.data()[i];
    auto an = a.node(), bn = b.node();
    return make_result<T>(a.shape(), std::move(out), {an, bn}, [an, bn](Node<T>& self) {
        if (T* g = detail::grad_of(an))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bn->data[i];
        if (T* g = detail::grad_of(bn))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * an->data[i];
    });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T s) {
    return detail::unary(
        x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T s) {
    return detail::unary(
        x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
    return detail::unary(
        x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
BasicTensor<T> leaky_relu(const BasicTensor<T>& x, T slope = T(0.2)) {
    return detail::unary(
        x, [slope](T v) { return v > T(0) ? v : slope * v; },
        [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
    return detail::unary(
        x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

/// Value pass-through that cuts the graph: nothing upstream receives gradient.
template <typename T>
BasicTensor<T> stop_gradient(const BasicTensor<T>& x) {
    return x.detach();
}

// ---------------------------------------------------------------------------
// Reductions and losses (all return shape [1])

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
    T s = T(0);
    for (T v : x.data()) s += v;
    auto xn = x.node();
    return make_result<T>(Shape{1}, {s}, {xn}, [xn](Node<T>& self) {
        if (T* g = detail::grad_of(xn))
            for (std::size_t i = 0; i < xn->data.size(); ++i) g[i] += self.grad[0];
    });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// mean |a - b|
template <typename T>
BasicTensor<T> l1_mean(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::check_same_shape(a, b, "l1_mean");
    const auto n = a.data().size();
    T s = T(0);
    for (std::size_t i = 0; i < n; ++i) s += std::abs(a.data()[i] - b.data()[i]);
    s /= static_cast<T>(n);
    auto an = a.node(), bn = b.node();
    return make_result<T>(Shape{1}, {s}, {an, bn}, [an, bn, n](Node<T>& self) {
        const T g0 = self.grad[0] / static_cast<T>(n);
        T* ga = detail::grad_of(an);
        T* gb = detail::grad_of(bn);
        for (std::size_t i = 0; i < n; ++i) {
            const T d = an->data[i] - bn->data[i];
            const T sg = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
            if (ga) ga[i] += g0 * sg;
            if (gb) gb[i] -= g0 * sg;
        }
    });
}

/// mean (a - b)^2
template <typename T>
BasicTensor<T> square_mean(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::check_same_shape(a, b, "square_mean");
    const auto n = a.data().size();
    T s = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        const T d = a.data()[i] - b.data()[i];
        s += d * d;
    }
    s /= static_cast<T>(n);
    auto an = a.node(), bn = b.node();
    return make_result<T>(Shape{1}, {s}, {an, bn}, [an, bn, n](Node<T>& self) {
        const T g0 = T(2) * self.grad[0] / static_cast<T>(n);
        T* ga = detail::grad_of(an);
        T* gb = detail::grad_of(bn);
        for (std::size_t i = 0; i < n; ++i) {
            const T d = an->data[i] - bn->data[i];
            if (ga) ga[i] += g0 * d;
            if (gb) gb[i] -= g0 * d;
        }
    });
}

/// mean (x - target)^2 against a constant target
template <typename T>
BasicTensor<T> square_mean(const BasicTensor<T>& a, T target) {
    return square_mean(a, BasicTensor<T>::full(a.shape(), target));
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
    detail::require(shape_numel(shape) == x.numel(), "reshape: cannot view ", shape_str(x.shape()),
                    " as ", shape_str(shape));
    std::vector<T> out(x.data().begin(), x.data().end());
    auto xn = x.node();
    return make_result<T>(std::move(shape), std::move(out), {xn}, [xn](Node<T>& self) {
        if (T* g = detail::grad_of(xn))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
}

namespace detail {

// Splits a shape around `axis` into (outer, axis extent, inner).
inline std::array<std::int64_t, 3> split_axis(const Shape& s, std::size_t axis) {
    std::int64_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    return {outer, s[axis], inner};
}

}  // namespace detail

/// Concatenation along `axis`; all other extents must agree.
template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& xs, std::size_t axis) {
    detail::require(!xs.empty(), "concat: empty input list");
    const Shape& ref = xs.front().shape();
    detail::require(axis < ref.size(), "concat: axis ", axis, " out of range for rank ", ref.size());
    Shape out_shape = ref;
    out_shape[axis] = 0;
    for (const auto& x : xs) {
        detail::require(x.ndim() == ref.size(), "concat: rank mismatch ", shape_str(x.shape()),
                        " vs ", shape_str(ref));
        for (std::size_t d = 0; d < ref.size(); ++d)
            detail::require(d == axis || x.dim(d) == ref[d], "concat: extent mismatch on axis ", d,
                            ": ", shape_str(x.shape()), " vs ", shape_str(ref));
        out_shape[axis] += x.dim(axis);
    }
    const auto [outer, total, inner] = detail::split_axis(out_shape, axis);
    std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)));
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::vector<std::int64_t> offsets;
    std::int64_t off = 0;
    for (const auto& x : xs) {
        const std::int64_t ext = x.dim(axis);
        const auto& xd = x.data();
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy_n(xd.begin() + o * ext * inner, ext * inner,
                        out.begin() + (o * total + off) * inner);
        parents.push_back(x.node());
        offsets.push_back(off);
        off += ext;
    }
    return make_result<T>(out_shape, std::move(out), parents,
                          [parents, offsets, axis, outer, total, inner](Node<T>& self) {
                              for (std::size_t j = 0; j < parents.size(); ++j) {
                                  T* g = detail::grad_of(parents[j]);
                                  if (!g) continue;
                                  const std::int64_t ext = parents[j]->shape[axis];
                                  for (std::int64_t o = 0; o < outer; ++o) {
                                      const T* src =
                                          self.grad.data() + (o * total + offsets[j]) * inner;
                                      T* dst = g + o * ext * inner;
                                      for (std::int64_t i = 0; i < ext * inner; ++i) dst[i] += src[i];
                                  }
                              }
                          });
}

/// Contiguous sub-range [start, start+length) along `axis`.
template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::int64_t start,
                     std::int64_t length) {
    detail::require(axis < x.ndim(), "slice: axis ", axis, " out of range for rank ", x.ndim());
    detail::require(start >= 0 && length >= 0 && start + length <= x.dim(axis),
                    "slice: range [", start, ",", start + length, ") exceeds extent ", x.dim(axis));
    Shape out_shape = x.shape();
    out_shape[axis] = length;
    const auto [outer, total, inner] = detail::split_axis(x.shape(), axis);
    std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)));
    const auto& xd = x.data();
    for (std::int64_t o = 0; o < outer; ++o)
        std::copy_n(xd.begin() + (o * total + start) * inner, length * inner,
                    out.begin() + o * length * inner);
    auto xn = x.node();
    return make_result<T>(out_shape, std::move(out), {xn},
                          [xn, outer, total, inner, start, length](Node<T>& self) {
                              T* g = detail::grad_of(xn);
                              if (!g) return;
                              for (std::int64_t o = 0; o < outer; ++o) {
                                  const T* src = self.grad.data() + o * length * inner;
                                  T* dst = g + (o * total + start) * inner;
                                  for (std::int64_t i = 0; i < length * inner; ++i) dst[i] += src[i];
                              }
                          });
}

/// [N,C,H,W] -> [N,H,W,C]
template <typename T>
BasicTensor<T> to_channels_last(const BasicTensor<T>& x) {
    detail::require(x.ndim() == 4, "to_channels_last: expected rank 4, got ", shape_str(x.shape()));
    const auto N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<T> out(x.data().size());
    const auto& xd = x.data();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t p = 0; p < HW; ++p) out[(n * HW + p) * C + c] = xd[(n * C + c) * HW + p];
    auto xn = x.node();
    return make_result<T>(Shape{N, x.dim(2), x.dim(3), C}, std::move(out), {xn},
                          [xn, N, C, HW](Node<T>& self) {
                              T* g = detail::grad_of(xn);
                              if (!g) return;
                              for (std::int64_t n = 0; n < N; ++n)
                                  for (std::int64_t c = 0; c < C; ++c)
                                      for (std::int64_t p = 0; p < HW; ++p)
                                          g[(n * C + c) * HW + p] += self.grad[(n * HW + p) * C + c];
                          });
}

/// [N,H,W,C] -> [N,C,H,W]
template <typename T>
BasicTensor<T> to_channels_first(const BasicTensor<T>& x) {
    detail::require(x.ndim() == 4, "to_channels_first: expected rank 4, got ", shape_str(x.shape()));
    const auto N = x.dim(0), C = x.dim(3), HW = x.dim(1) * x.dim(2);
    std::vector<T> out(x.data().size());
    const auto& xd = x.data();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t p = 0; p < HW; ++p)
            for (std::int64_t c = 0; c < C; ++c) out[(n * C + c) * HW + p] = xd[(n * HW + p) * C + c];
    auto xn = x.node();
    return make_result<T>(Shape{N, C, x.dim(1), x.dim(2)}, std::move(out), {xn},
                          [xn, N, C, HW](Node<T>& self) {
                              T* g = detail::grad_of(xn);
                              if (!g) return;
                              for (std::int64_t n = 0; n < N; ++n)
                                  for (std::int64_t p = 0; p < HW; ++p)
                                      for (std::int64_t c = 0; c < C; ++c)
                                          g[(n * HW + p) * C + c] += self.grad[(n * C + c) * HW + p];
                          });
}

}  // namespace monkeynet

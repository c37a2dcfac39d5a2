#pragma once

// Reverse-mode automatic differentiation on an eager tape. Operations
// compute values immediately and record a backward closure; backward()
// replays closures in reverse creation order, which is reverse topological
// order, accumulating gradients additively at fan-out.
//
// Node storage is pooled: begin() rewinds a cursor instead of freeing, so a
// training loop that builds the same graph every step performs no steady
// state allocation.

#include <cstring>
#include <functional>
#include <stdexcept>

#include "gmvae/tensor.hpp"

namespace gmvae {

template <class T>
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

template <class T>
class Tape {
public:
    struct Node {
        Shape shape;
        Buffer<T> value;
        Buffer<T> grad;
        Buffer<T> aux;  // op scratch retained for backward (im2col, bn stats)
        std::function<void(Tape&)> backward;
        bool requires_grad = false;
    };

    // Rewind for a new forward pass; buffers are reused in creation order.
    void begin() { live_ = 0; }

    Var<T> alloc(const Shape& shape, bool requires_grad) {
        if (live_ == static_cast<int>(nodes_.size())) nodes_.emplace_back();
        Node& n = nodes_[static_cast<std::size_t>(live_)];
        n.shape = shape;
        n.value.resize(static_cast<std::size_t>(gmvae::numel(shape)));
        n.grad.clear();
        n.aux.clear();
        n.backward = nullptr;
        n.requires_grad = requires_grad;
        return Var<T>{live_++};
    }

    Var<T> leaf(const Tensor<T>& t, bool requires_grad) {
        Var<T> v = alloc(t.shape, requires_grad);
        std::memcpy(value_ptr(v), t.data.data(), t.data.size() * sizeof(T));
        return v;
    }

    Node& node(Var<T> v) {
        if (v.id < 0 || v.id >= live_) throw std::logic_error("stale tape variable");
        return nodes_[static_cast<std::size_t>(v.id)];
    }
    const Node& node(Var<T> v) const {
        if (v.id < 0 || v.id >= live_) throw std::logic_error("stale tape variable");
        return nodes_[static_cast<std::size_t>(v.id)];
    }

    const Shape& shape(Var<T> v) const { return node(v).shape; }
    std::int64_t numel(Var<T> v) const { return static_cast<std::int64_t>(node(v).value.size()); }
    bool requires(Var<T> v) const { return node(v).requires_grad; }

    T* value_ptr(Var<T> v) { return node(v).value.data(); }
    const T* value_ptr(Var<T> v) const { return node(v).value.data(); }
    T* grad_ptr(Var<T> v) { return node(v).grad.data(); }
    T* aux_ptr(Var<T> v) { return node(v).aux.data(); }

    Buffer<T>& aux(Var<T> v) { return node(v).aux; }

    T scalar(Var<T> v) const {
        if (numel(v) != 1) throw std::invalid_argument("expected scalar tape variable");
        return node(v).value[0];
    }

    Tensor<T> tensor(Var<T> v) const {
        Tensor<T> out(shape(v));
        std::memcpy(out.data.data(), value_ptr(v), out.data.size() * sizeof(T));
        return out;
    }

    void set_backward(Var<T> v, std::function<void(Tape&)> fn) { node(v).backward = std::move(fn); }

    void check_finite(Var<T> v, const char* op) const {
        if (!finite_checks) return;
        const Node& n = node(v);
        require_finite(n.value.data(), static_cast<std::int64_t>(n.value.size()), op);
    }

    // Seeds d(loss)/d(loss) = 1 and replays the tape backwards. Every
    // requires_grad node reachable from the loss ends with its gradient
    // accumulated in grad().
    void backward(Var<T> loss) {
        if (numel(loss) != 1) throw std::invalid_argument("backward requires a scalar loss");
        for (int i = 0; i <= loss.id; ++i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.requires_grad) n.grad.assign(n.value.size(), T(0));
        }
        nodes_[static_cast<std::size_t>(loss.id)].grad[0] = T(1);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.requires_grad && n.backward) n.backward(*this);
        }
    }

    Tensor<T> grad(Var<T> v) {
        Node& n = node(v);
        if (n.grad.size() != n.value.size()) throw std::logic_error("gradient not computed; call backward first");
        Tensor<T> out(n.shape);
        std::memcpy(out.data.data(), n.grad.data(), n.grad.size() * sizeof(T));
        return out;
    }

    bool finite_checks = true;

private:
    std::vector<Node> nodes_;
    int live_ = 0;
};

namespace detail {

template <class T>
inline void check_same(const Tape<T>& tp, Var<T> a, Var<T> b, const char* op) {
    if (!same_shape(tp.shape(a), tp.shape(b)))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(tp.shape(a)) +
                                    " vs " + shape_str(tp.shape(b)));
}

}  // namespace detail

// ---- elementwise binary ----

template <class T>
Var<T> add(Tape<T>& tp, Var<T> a, Var<T> b) {
    detail::check_same(tp, a, b, "add");
    Var<T> out = tp.alloc(tp.shape(a), tp.requires(a) || tp.requires(b));
    const T* pa = tp.value_ptr(a);
    const T* pb = tp.value_ptr(b);
    T* po = tp.value_ptr(out);
    const std::int64_t n = tp.numel(out);
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    tp.check_finite(out, "add");
    if (tp.requires(out))
        tp.set_backward(out, [a, b, out, n](Tape<T>& t) {
            const T* g = t.grad_ptr(out);
            if (t.requires(a)) {
                T* ga = t.grad_ptr(a);
                for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (t.requires(b)) {
                T* gb = t.grad_ptr(b);
                for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i];
            }
        });
    return out;
}

template <class T>
Var<T> sub(Tape<T>& tp, Var<T> a, Var<T> b) {
    detail::check_same(tp, a, b, "sub");
    Var<T> out = tp.alloc(tp.shape(a), tp.requires(a) || tp.requires(b));
    const T* pa = tp.value_ptr(a);
    const T* pb = tp.value_ptr(b);
    T* po = tp.value_ptr(out);
    const std::int64_t n = tp.numel(out);
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
    tp.check_finite(out, "sub");
    if (tp.requires(out))
        tp.set_backward(out, [a, b, out, n](Tape<T>& t) {
            const T* g = t.grad_ptr(out);
            if (t.requires(a)) {
                T* ga = t.grad_ptr(a);
                for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (t.requires(b)) {
                T* gb = t.grad_ptr(b);
                for (std::int64_t i = 0; i < n; ++i) gb[i] -= g[i];
            }
        });
    return out;
}

template <class T>
Var<T> mul(Tape<T>& tp, Var<T> a, Var<T> b) {
    detail::check_same(tp, a, b, "mul");
    Var<T> out = tp.alloc(tp.shape(a), tp.requires(a) || tp.requires(b));
    const T* pa = tp.value_ptr(a);
    const T* pb = tp.value_ptr(b);
    T* po = tp.value_ptr(out);
    const std::int64_t n = tp.numel(out);
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    tp.check_finite(out, "mul");
    if (tp.requires(out))
        tp.set_backward(out, [a, b, out, n](Tape<T>& t) {
            const T* g = t.grad_ptr(out);
            const T* pa2 = t.value_ptr(a);
            const T* pb2 = t.value_ptr(b);
            if (t.requires(a)) {
                T* ga = t.grad_ptr(a);
                for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * pb2[i];
            }
            if (t.requires(b)) {
                T* gb = t.grad_ptr(b);
                for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i] * pa2[i];
            }
        });
    return out;
}

// ---- elementwise with scalar constant ----

template <class T>
Var<T> scale(Tape<T>& tp, Var<T> a, T c) {
    Var<T> out = tp.alloc(tp.shape(a), tp.requires(a));
    const T* pa = tp.value_ptr(a);
    T* po = tp.value_ptr(out);
    const std::int64_t n = tp.numel(out);
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * c;
    tp.check_finite(out, "scale");
    if (tp.requires(out))
        tp.set_backward(out, [a, out, c, n](Tape<T>& t) {
            const T* g = t.grad_ptr(out);
            T* ga = t.grad_ptr(a);
            for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * c;
        });
    return out;
}

template <class T>
Var<T> add_scalar(Tape<T>& tp, Var<T> a, T c) {
    Var<T> out = tp.alloc(tp.shape(a), tp.requires(a));
    const T* pa = tp.value_ptr(a);
    T* po = tp.value_ptr(out);
    const std::int64_t n = tp.numel(out);
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + c;
    tp.check_finite(out, "add_scalar");
    if (tp.requires(out))
        tp.set_backward(out, [a, out, n](Tape<T>& t) {
            const T* g = t.grad_ptr(out);
            T* ga = t.grad_ptr(a);
            for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
        });
    return out;
}

// ---- elementwise unary ----

template <class T>
Var<T> relu(Tape<T>& tp, Var<T> a) {
    Var<T> out = tp.alloc(tp.shape(a), tp.requires(a));
    const T* pa = tp.value_ptr(a);
    T* po = tp.value_ptr(out);
    const std::int64_t n = tp.numel(out);
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] > T(0) ? pa[i] : T(0);
    tp.check_finite(out, "relu");
    if (tp.requires(out))
        tp.set_backward(out, [a, out, n](Tape<T>& t) {
            const T* g = t.grad_ptr(out);
            const T* pa2 = t.value_ptr(a);
            T* ga = t.grad_ptr(a);
            for (std::int64_t i = 0; i < n; ++i)
                if (pa2[i] > T(0)) ga[i] += g[i];
        });
    return out;
}

template <class T>
Var<T> tanh_op(Tape<T>& tp, Var<T> a) {
    Var<T> out = tp.alloc(tp.shape(a), tp.requires(a));
    const T* pa = tp.value_ptr(a);
    T* po = tp.value_ptr(out);
    const std::int64_t n = tp.numel(out);
    for (std::int64_t i = 0; i < n; ++i) po[i] = std::tanh(pa[i]);
    tp.check_finite(out, "tanh");
    if (tp.requires(out))
        tp.set_backward(out, [a, out, n](Tape<T>& t) {
            const T* g = t.grad_ptr(out);
            const T* y = t.value_ptr(out);
            T* ga = t.grad_ptr(a);
            for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * (T(1) - y[i] * y[i]);
        });
    return out;
}

template <class T>
Var<T> exp_op(Tape<T>& tp, Var<T> a) {
    Var<T> out = tp.alloc(tp.shape(a), tp.requires(a));
    const T* pa = tp.value_ptr(a);
    T* po = tp.value_ptr(out);
    const std::int64_t n = tp.numel(out);
    for (std::int64_t i = 0; i < n; ++i) po[i] = std::exp(pa[i]);
    tp.check_finite(out, "exp");
    if (tp.requires(out))
        tp.set_backward(out, [a, out, n](Tape<T>& t) {
            const T* g = t.grad_ptr(out);
            const T* y = t.value_ptr(out);
            T* ga = t.grad_ptr(a);
            for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * y[i];
        });
    return out;
}

template <class T>
Var<T> log_op(Tape<T>& tp, Var<T> a) {
    const T* pa = tp.value_ptr(a);
    const std::int64_t n = tp.numel(a);
    for (std::int64_t i = 0; i < n; ++i)
        if (!(pa[i] > T(0))) throw std::domain_error("log requires strictly positive input");
    Var<T> out = tp.alloc(tp.shape(a), tp.requires(a));
    const T* pa2 = tp.value_ptr(a);
    T* po = tp.value_ptr(out);
    for (std::int64_t i = 0; i < n; ++i) po[i] = std::log(pa2[i]);
    tp.check_finite(out, "log");
    if (tp.requires(out))
        tp.set_backward(out, [a, out, n](Tape<T>& t) {
            const T* g = t.grad_ptr(out);
            const T* x = t.value_ptr(a);
            T* ga = t.grad_ptr(a);
            for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] / x[i];
        });
    return out;
}

// Gradient passes through unclamped entries only.
template <class T>
Var<T> clamp(Tape<T>& tp, Var<T> a, T lo, T hi) {
    Var<T> out = tp.alloc(tp.shape(a), tp.requires(a));
    const T* pa = tp.value_ptr(a);
    T* po = tp.value_ptr(out);
    const std::int64_t n = tp.numel(out);
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] < lo ? lo : (pa[i] > hi ? hi : pa[i]);
    tp.check_finite(out, "clamp");
    if (tp.requires(out))
        tp.set_backward(out, [a, out, lo, hi, n](Tape<T>& t) {
            const T* g = t.grad_ptr(out);
            const T* x = t.value_ptr(a);
            T* ga = t.grad_ptr(a);
            for (std::int64_t i = 0; i < n; ++i)
                if (x[i] > lo && x[i] < hi) ga[i] += g[i];
        });
    return out;
}

// ---- shape ----

template <class T>
Var<T> reshape(Tape<T>& tp, Var<T> a, const Shape& shape) {
    if (gmvae::numel(shape) != tp.numel(a))
        throw std::invalid_argument("reshape: element count mismatch");
    Var<T> out = tp.alloc(shape, tp.requires(a));
    std::memcpy(tp.value_ptr(out), tp.value_ptr(a), static_cast<std::size_t>(tp.numel(a)) * sizeof(T));
    if (tp.requires(out))
        tp.set_backward(out, [a, out](Tape<T>& t) {
            const T* g = t.grad_ptr(out);
            T* ga = t.grad_ptr(a);
            const std::int64_t n = t.numel(a);
            for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
        });
    return out;
}

// Concatenate two rank-2 tensors along columns: (B,m) ++ (B,n) -> (B,m+n).
template <class T>
Var<T> concat_cols(Tape<T>& tp, Var<T> a, Var<T> b) {
    const Shape& sa = tp.shape(a);
    const Shape& sb = tp.shape(b);
    if (sa.size() != 2 || sb.size() != 2 || sa[0] != sb[0])
        throw std::invalid_argument("concat_cols: expects rank-2 inputs with equal row count");
    const int rows = sa[0], ca = sa[1], cb = sb[1];
    Var<T> out = tp.alloc({rows, ca + cb}, tp.requires(a) || tp.requires(b));
    const T* pa = tp.value_ptr(a);
    const T* pb = tp.value_ptr(b);
    T* po = tp.value_ptr(out);
    for (int r = 0; r < rows; ++r) {
        std::memcpy(po + static_cast<std::size_t>(r) * (ca + cb), pa + static_cast<std::size_t>(r) * ca,
                    static_cast<std::size_t>(ca) * sizeof(T));
        std::memcpy(po + static_cast<std::size_t>(r) * (ca + cb) + ca, pb + static_cast<std::size_t>(r) * cb,
                    static_cast<std::size_t>(cb) * sizeof(T));
    }
    if (tp.requires(out))
        tp.set_backward(out, [a, b, out, rows, ca, cb](Tape<T>& t) {
            const T* g = t.grad_ptr(out);
            if (t.requires(a)) {
                T* ga = t.grad_ptr(a);
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < ca; ++c) ga[static_cast<std::size_t>(r) * ca + c] += g[static_cast<std::size_t>(r) * (ca + cb) + c];
            }
            if (t.requires(b)) {
                T* gb = t.grad_ptr(b);
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < cb; ++c) gb[static_cast<std::size_t>(r) * cb + c] += g[static_cast<std::size_t>(r) * (ca + cb) + ca + c];
            }
        });
    return out;
}

// ---- reductions ----

template <class T>
Var<T> sum_all(Tape<T>& tp, Var<T> a) {
    Var<T> out = tp.alloc({1}, tp.requires(a));
    const T* pa = tp.value_ptr(a);
    const std::int64_t n = tp.numel(a);
    T acc = T(0);
    for (std::int64_t i = 0; i < n; ++i) acc += pa[i];
    tp.value_ptr(out)[0] = acc;
    tp.check_finite(out, "sum");
    if (tp.requires(out))
        tp.set_backward(out, [a, out, n](Tape<T>& t) {
            const T g = t.grad_ptr(out)[0];
            T* ga = t.grad_ptr(a);
            for (std::int64_t i = 0; i < n; ++i) ga[i] += g;
        });
    return out;
}

// ---- row/column indexing ----

// Gather rows of a (K,L) matrix: out[i,:] = p[idx[i],:].
template <class T>
Var<T> rows(Tape<T>& tp, Var<T> p, const std::vector<int>& idx) {
    const Shape& sp = tp.shape(p);
    if (sp.size() != 2) throw std::invalid_argument("rows: expects a rank-2 matrix");
    const int k = sp[0], l = sp[1];
    for (int i : idx)
        if (i < 0 || i >= k) throw std::invalid_argument("rows: index out of range");
    const int b = static_cast<int>(idx.size());
    Var<T> out = tp.alloc({b, l}, tp.requires(p));
    const T* pp = tp.value_ptr(p);
    T* po = tp.value_ptr(out);
    for (int i = 0; i < b; ++i)
        std::memcpy(po + static_cast<std::size_t>(i) * l, pp + static_cast<std::size_t>(idx[i]) * l,
                    static_cast<std::size_t>(l) * sizeof(T));
    if (tp.requires(out))
        tp.set_backward(out, [p, out, idx, l, b](Tape<T>& t) {
            const T* g = t.grad_ptr(out);
            T* gp = t.grad_ptr(p);
            for (int i = 0; i < b; ++i)
                for (int c = 0; c < l; ++c) gp[static_cast<std::size_t>(idx[i]) * l + c] += g[static_cast<std::size_t>(i) * l + c];
        });
    return out;
}

// Select one column per row: out[i] = m[i, idx[i]].
template <class T>
Var<T> pick(Tape<T>& tp, Var<T> m, const std::vector<int>& idx) {
    const Shape& sm = tp.shape(m);
    if (sm.size() != 2 || static_cast<int>(idx.size()) != sm[0])
        throw std::invalid_argument("pick: index count must match row count");
    const int b = sm[0], k = sm[1];
    for (int i : idx)
        if (i < 0 || i >= k) throw std::invalid_argument("pick: index out of range");
    Var<T> out = tp.alloc({b}, tp.requires(m));
    const T* pm = tp.value_ptr(m);
    T* po = tp.value_ptr(out);
    for (int i = 0; i < b; ++i) po[i] = pm[static_cast<std::size_t>(i) * k + idx[i]];
    if (tp.requires(out))
        tp.set_backward(out, [m, out, idx, b, k](Tape<T>& t) {
            const T* g = t.grad_ptr(out);
            T* gm = t.grad_ptr(m);
            for (int i = 0; i < b; ++i) gm[static_cast<std::size_t>(i) * k + idx[i]] += g[i];
        });
    return out;
}

// Squared Euclidean distances between rows of z (B,L) and rows of p (K,L).
template <class T>
Var<T> pairwise_sqdist(Tape<T>& tp, Var<T> z, Var<T> p) {
    const Shape& sz = tp.shape(z);
    const Shape& sp = tp.shape(p);
    if (sz.size() != 2 || sp.size() != 2 || sz[1] != sp[1])
        throw std::invalid_argument("pairwise_sqdist: rank-2 inputs with matching inner dimension required");
    const int b = sz[0], l = sz[1], k = sp[0];
    Var<T> out = tp.alloc({b, k}, tp.requires(z) || tp.requires(p));
    const T* pz = tp.value_ptr(z);
    const T* pp = tp.value_ptr(p);
    T* po = tp.value_ptr(out);
    for (int i = 0; i < b; ++i)
        for (int j = 0; j < k; ++j) {
            T acc = T(0);
            const T* zr = pz + static_cast<std::size_t>(i) * l;
            const T* pr = pp + static_cast<std::size_t>(j) * l;
            for (int c = 0; c < l; ++c) {
                const T d = zr[c] - pr[c];
                acc += d * d;
            }
            po[static_cast<std::size_t>(i) * k + j] = acc;
        }
    tp.check_finite(out, "pairwise_sqdist");
    if (tp.requires(out))
        tp.set_backward(out, [z, p, out, b, l, k](Tape<T>& t) {
            const T* g = t.grad_ptr(out);
            const T* pz2 = t.value_ptr(z);
            const T* pp2 = t.value_ptr(p);
            T* gz = t.requires(z) ? t.grad_ptr(z) : nullptr;
            T* gp = t.requires(p) ? t.grad_ptr(p) : nullptr;
            for (int i = 0; i < b; ++i)
                for (int j = 0; j < k; ++j) {
                    const T gij = g[static_cast<std::size_t>(i) * k + j];
                    if (gij == T(0)) continue;
                    const T* zr = pz2 + static_cast<std::size_t>(i) * l;
                    const T* pr = pp2 + static_cast<std::size_t>(j) * l;
                    for (int c = 0; c < l; ++c) {
                        const T d = T(2) * (zr[c] - pr[c]) * gij;
                        if (gz) gz[static_cast<std::size_t>(i) * l + c] += d;
                        if (gp) gp[static_cast<std::size_t>(j) * l + c] -= d;
                    }
                }
        });
    return out;
}

// ---- softmax family ----
//
// Reductions run over a named axis of a rank-1 or rank-2 tensor. Lanes are
// iterated via (count, stride) so both axes share one implementation.

namespace detail {

struct Lanes {
    int count;   // number of lanes
    int len;     // elements per lane
    int lstride; // stride between lanes
    int estride; // stride between elements within a lane
};

template <class T>
inline Lanes lanes_for(const Tape<T>& tp, Var<T> v, int axis, const char* op) {
    const Shape& s = tp.shape(v);
    if (s.size() == 1) {
        if (axis != 0) throw std::invalid_argument(std::string(op) + ": axis out of range for rank-1 input");
        return {1, s[0], 0, 1};
    }
    if (s.size() == 2) {
        if (axis == 1) return {s[0], s[1], s[1], 1};
        if (axis == 0) return {s[1], s[0], 1, s[1]};
        throw std::invalid_argument(std::string(op) + ": axis out of range for rank-2 input");
    }
    throw std::invalid_argument(std::string(op) + ": rank-1 or rank-2 input required");
}

}  // namespace detail

template <class T>
Var<T> softmax(Tape<T>& tp, Var<T> a, int axis) {
    const auto ln = detail::lanes_for(tp, a, axis, "softmax");
    Var<T> out = tp.alloc(tp.shape(a), tp.requires(a));
    const T* pa = tp.value_ptr(a);
    T* po = tp.value_ptr(out);
    for (int lane = 0; lane < ln.count; ++lane) {
        const T* x = pa + static_cast<std::size_t>(lane) * ln.lstride;
        T* y = po + static_cast<std::size_t>(lane) * ln.lstride;
        T mx = x[0];
        for (int i = 1; i < ln.len; ++i) mx = std::max(mx, x[static_cast<std::size_t>(i) * ln.estride]);
        T z = T(0);
        for (int i = 0; i < ln.len; ++i) {
            const T e = std::exp(x[static_cast<std::size_t>(i) * ln.estride] - mx);
            y[static_cast<std::size_t>(i) * ln.estride] = e;
            z += e;
        }
        for (int i = 0; i < ln.len; ++i) y[static_cast<std::size_t>(i) * ln.estride] /= z;
    }
    tp.check_finite(out, "softmax");
    if (tp.requires(out))
        tp.set_backward(out, [a, out, ln](Tape<T>& t) {
            const T* g = t.grad_ptr(out);
            const T* y = t.value_ptr(out);
            T* ga = t.grad_ptr(a);
            for (int lane = 0; lane < ln.count; ++lane) {
                const std::size_t base = static_cast<std::size_t>(lane) * ln.lstride;
                T dot = T(0);
                for (int i = 0; i < ln.len; ++i) {
                    const std::size_t ix = base + static_cast<std::size_t>(i) * ln.estride;
                    dot += g[ix] * y[ix];
                }
                for (int i = 0; i < ln.len; ++i) {
                    const std::size_t ix = base + static_cast<std::size_t>(i) * ln.estride;
                    ga[ix] += y[ix] * (g[ix] - dot);
                }
            }
        });
    return out;
}

template <class T>
Var<T> log_softmax(Tape<T>& tp, Var<T> a, int axis) {
    const auto ln = detail::lanes_for(tp, a, axis, "log_softmax");
    Var<T> out = tp.alloc(tp.shape(a), tp.requires(a));
    const T* pa = tp.value_ptr(a);
    T* po = tp.value_ptr(out);
    for (int lane = 0; lane < ln.count; ++lane) {
        const T* x = pa + static_cast<std::size_t>(lane) * ln.lstride;
        T* y = po + static_cast<std::size_t>(lane) * ln.lstride;
        T mx = x[0];
        for (int i = 1; i < ln.len; ++i) mx = std::max(mx, x[static_cast<std::size_t>(i) * ln.estride]);
        T z = T(0);
        for (int i = 0; i < ln.len; ++i) z += std::exp(x[static_cast<std::size_t>(i) * ln.estride] - mx);
        const T lse = mx + std::log(z);
        for (int i = 0; i < ln.len; ++i)
            y[static_cast<std::size_t>(i) * ln.estride] = x[static_cast<std::size_t>(i) * ln.estride] - lse;
    }
    tp.check_finite(out, "log_softmax");
    if (tp.requires(out))
        tp.set_backward(out, [a, out, ln](Tape<T>& t) {
            const T* g = t.grad_ptr(out);
            const T* y = t.value_ptr(out);
            T* ga = t.grad_ptr(a);
            for (int lane = 0; lane < ln.count; ++lane) {
                const std::size_t base = static_cast<std::size_t>(lane) * ln.lstride;
                T gsum = T(0);
                for (int i = 0; i < ln.len; ++i) gsum += g[base + static_cast<std::size_t>(i) * ln.estride];
                for (int i = 0; i < ln.len; ++i) {
                    const std::size_t ix = base + static_cast<std::size_t>(i) * ln.estride;
                    ga[ix] += g[ix] - std::exp(y[ix]) * gsum;
                }
            }
        });
    return out;
}

// Max-shifted log-sum-exp over the given axis; rank-2 axis=1 -> (rows).
template <class T>
Var<T> log_sum_exp(Tape<T>& tp, Var<T> a, int axis) {
    const auto ln = detail::lanes_for(tp, a, axis, "log_sum_exp");
    const Shape& s = tp.shape(a);
    Shape os = s.size() == 1 ? Shape{1} : (axis == 1 ? Shape{s[0]} : Shape{s[1]});
    Var<T> out = tp.alloc(os, tp.requires(a));
    const T* pa = tp.value_ptr(a);
    T* po = tp.value_ptr(out);
    for (int lane = 0; lane < ln.count; ++lane) {
        const T* x = pa + static_cast<std::size_t>(lane) * ln.lstride;
        T mx = x[0];
        for (int i = 1; i < ln.len; ++i) mx = std::max(mx, x[static_cast<std::size_t>(i) * ln.estride]);
        T z = T(0);
        for (int i = 0; i < ln.len; ++i) z += std::exp(x[static_cast<std::size_t>(i) * ln.estride] - mx);
        po[lane] = mx + std::log(z);
    }
    tp.check_finite(out, "log_sum_exp");
    if (tp.requires(out))
        tp.set_backward(out, [a, out, ln](Tape<T>& t) {
            const T* g = t.grad_ptr(out);
            const T* x = t.value_ptr(a);
            const T* y = t.value_ptr(out);
            T* ga = t.grad_ptr(a);
            for (int lane = 0; lane < ln.count; ++lane) {
                const std::size_t base = static_cast<std::size_t>(lane) * ln.lstride;
                for (int i = 0; i < ln.len; ++i) {
                    const std::size_t ix = base + static_cast<std::size_t>(i) * ln.estride;
                    ga[ix] += g[lane] * std::exp(x[ix] - y[lane]);
                }
            }
        });
    return out;
}

}  // namespace gmvae

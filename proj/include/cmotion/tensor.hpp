#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "cmotion/rng.hpp"

namespace cmotion {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << s[i] << (i + 1 < s.size() ? "," : "");
    os << ")";
    return os.str();
}

[[noreturn]] inline void tensor_error(const std::string& msg) { throw std::runtime_error("tensor: " + msg); }

// ---------------------------------------------------------------- autograd graph

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated lazily during backward; kept only on leaves
    bool requires_grad = false;
    bool leaf = true;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(value.size()); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T(0));
    }
};

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

// RAII guard disabling graph construction (inference / target branches).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
};

// ---------------------------------------------------------------- tensor handle

template <typename T>
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    static Tensor from_vector(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            tensor_error("from_vector: shape " + shape_str(shape) + " does not hold " + std::to_string(data.size()) + " elements");
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad && grad_mode();
        check_finite(*n, "from_vector");
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<T> d(shape_numel(shape), T(0));
        return from_vector(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor full(Shape shape, T v, bool requires_grad = false) {
        std::vector<T> d(shape_numel(shape), v);
        return from_vector(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor scalar(T v) { return from_vector({1}, {v}); }

    static Tensor randn(Shape shape, Prng& rng, bool requires_grad = false) {
        std::vector<T> d(shape_numel(shape));
        for (auto& x : d) x = static_cast<T>(rng.normal());
        return from_vector(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor rand_uniform(Shape shape, Prng& rng, T lo, T hi, bool requires_grad = false) {
        std::vector<T> d(shape_numel(shape));
        for (auto& x : d) x = static_cast<T>(rng.uniform(lo, hi));
        return from_vector(std::move(shape), std::move(d), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t ndim() const { return static_cast<int64_t>(node_->shape.size()); }
    int64_t numel() const { return node_->numel(); }
    int64_t dim(int64_t i) const { return node_->shape[static_cast<size_t>(i)]; }
    const std::vector<T>& data() const { return node_->value; }
    // In-place access for leaves only (parameter init / optimizer steps).
    std::vector<T>& mutable_data() {
        if (!node_->leaf) tensor_error("mutable_data on non-leaf (op " + std::string(node_->op) + ")");
        return node_->value;
    }
    T item() const {
        if (numel() != 1) tensor_error("item: tensor of shape " + shape_str(shape()) + " is not scalar");
        return node_->value[0];
    }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) {
        if (!node_->leaf) tensor_error("set_requires_grad on non-leaf");
        node_->requires_grad = rg;
    }
    const std::vector<T>& grad() const {
        if (node_->grad.empty()) tensor_error("grad not populated (did backward run?)");
        return node_->grad;
    }
    bool has_grad() const { return !node_->grad.empty(); }
    std::vector<T>& mutable_grad() { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    std::shared_ptr<Node<T>> node() const { return node_; }

    static void check_finite(const Node<T>& n, const char* op) {
        for (const T& x : n.value)
            if (!std::isfinite(static_cast<double>(x)))
                tensor_error(std::string("non-finite value produced by op '") + op + "'");
    }

  private:
    std::shared_ptr<Node<T>> node_;
};

// ---------------------------------------------------------------- helpers

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    size_t n = std::max(a.size(), b.size());
    Shape out(n);
    for (size_t i = 0; i < n; ++i) {
        int64_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
        int64_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
        if (da != db && da != 1 && db != 1)
            tensor_error(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcastable");
        out[i] = std::max(da, db);
    }
    return out;
}

// Linear offsets into `in` for every element of `out` (size-1 dims broadcast).
inline std::vector<int64_t> broadcast_offsets(const Shape& out, const Shape& in) {
    size_t on = out.size();
    std::vector<int64_t> stride(on, 0);
    int64_t s = 1;
    for (int i = static_cast<int>(in.size()) - 1; i >= 0; --i) {
        size_t o = static_cast<size_t>(i) + (on - in.size());
        stride[o] = (in[static_cast<size_t>(i)] == 1) ? 0 : s;
        s *= in[static_cast<size_t>(i)];
    }
    int64_t total = shape_numel(out);
    std::vector<int64_t> map(static_cast<size_t>(total));
    std::vector<int64_t> idx(on, 0);
    int64_t off = 0;
    for (int64_t e = 0; e < total; ++e) {
        map[static_cast<size_t>(e)] = off;
        for (int d = static_cast<int>(on) - 1; d >= 0; --d) {
            idx[static_cast<size_t>(d)]++;
            off += stride[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < out[static_cast<size_t>(d)]) break;
            off -= stride[static_cast<size_t>(d)] * out[static_cast<size_t>(d)];
            idx[static_cast<size_t>(d)] = 0;
        }
    }
    return map;
}

inline std::vector<int64_t> contiguous_strides(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[static_cast<size_t>(i)] = st[static_cast<size_t>(i) + 1] * s[static_cast<size_t>(i) + 1];
    return st;
}

// C (m x n) = A (m x k) * B (k x n); optional transposes refer to the logical
// contents of A/B given their row-major storage.
template <typename T>
void gemm_nn(int64_t m, int64_t n, int64_t k, const T* A, const T* B, T* C, bool acc) {
    if (!acc) std::fill(C, C + m * n, T(0));
    for (int64_t i = 0; i < m; ++i) {
        T* c = C + i * n;
        const T* a = A + i * k;
        for (int64_t p = 0; p < k; ++p) {
            T av = a[p];
            const T* b = B + p * n;
            for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

// C (m x n) = A (m x k) * B^T where B is (n x k)
template <typename T>
void gemm_nt(int64_t m, int64_t n, int64_t k, const T* A, const T* B, T* C, bool acc) {
    for (int64_t i = 0; i < m; ++i) {
        const T* a = A + i * k;
        for (int64_t j = 0; j < n; ++j) {
            const T* b = B + j * k;
            T s = 0;
            for (int64_t p = 0; p < k; ++p) s += a[p] * b[p];
            T* c = C + i * n + j;
            *c = acc ? *c + s : s;
        }
    }
}

// C (m x n) = A^T * B where A is (k x m), B is (k x n)
template <typename T>
void gemm_tn(int64_t m, int64_t n, int64_t k, const T* A, const T* B, T* C, bool acc) {
    if (!acc) std::fill(C, C + m * n, T(0));
    for (int64_t p = 0; p < k; ++p) {
        const T* a = A + p * m;
        const T* b = B + p * n;
        for (int64_t i = 0; i < m; ++i) {
            T av = a[i];
            T* c = C + i * n;
            for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

}  // namespace detail

// Central op factory: runs the finite check, wires parents and the backward
// closure only when some parent participates in autograd.
template <typename T>
Tensor<T> make_op(const char* op, Shape shape, std::vector<T> value, std::vector<Tensor<T>> parents,
                  std::function<void(Node<T>&)> backward_fn) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    n->leaf = false;
    Tensor<T>::check_finite(*n, op);
    bool rg = false;
    if (grad_mode())
        for (const auto& p : parents) rg = rg || p.requires_grad();
    n->requires_grad = rg;
    if (rg) {
        for (const auto& p : parents) n->parents.push_back(p.node());
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor<T>(std::move(n));
}

// ---------------------------------------------------------------- elementwise

namespace detail {

template <typename T, typename FwdF, typename BwdA, typename BwdB>
Tensor<T> binary_op(const char* op, const Tensor<T>& a, const Tensor<T>& b, FwdF f, BwdA dfa, BwdB dfb) {
    Shape out_shape = broadcast_shape(a.shape(), b.shape(), op);
    auto ma = broadcast_offsets(out_shape, a.shape());
    auto mb = broadcast_offsets(out_shape, b.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    std::vector<T> out(ma.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = f(av[static_cast<size_t>(ma[i])], bv[static_cast<size_t>(mb[i])]);
    auto an = a.node();
    auto bn = b.node();
    Shape osh = out_shape;
    return make_op<T>(op, std::move(out_shape), std::move(out), {a, b}, [an, bn, osh, dfa, dfb](Node<T>& n) {
        auto ma2 = broadcast_offsets(osh, an->shape);
        auto mb2 = broadcast_offsets(osh, bn->shape);
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i)
                an->grad[static_cast<size_t>(ma2[i])] += n.grad[i] * dfa(an->value[static_cast<size_t>(ma2[i])], bn->value[static_cast<size_t>(mb2[i])]);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i)
                bn->grad[static_cast<size_t>(mb2[i])] += n.grad[i] * dfb(an->value[static_cast<size_t>(ma2[i])], bn->value[static_cast<size_t>(mb2[i])]);
        }
    });
}

template <typename T, typename FwdF, typename BwdF>
Tensor<T> unary_op(const char* op, const Tensor<T>& a, FwdF f, BwdF df) {
    const auto& av = a.data();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
    auto an = a.node();
    return make_op<T>(op, a.shape(), std::move(out), {a}, [an, df](Node<T>& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * df(an->value[i], n.value[i]);
    });
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>("add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>("sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>("mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>("div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
                                [](T x, T y) { return -x / (y * y); });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
    return detail::unary_op<T>("neg", a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    return detail::unary_op<T>("add_scalar", a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
    return detail::unary_op<T>("mul_scalar", a, [c](T x) { return x * c; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
    return detail::unary_op<T>(
        "silu", a, [](T x) { return x / (T(1) + std::exp(-x)); },
        [](T x, T) {
            T s = T(1) / (T(1) + std::exp(-x));
            return s + x * s * (T(1) - s);
        });
}

template <typename T>
Tensor<T> vexp(const Tensor<T>& a) {
    return detail::unary_op<T>("exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> vlog(const Tensor<T>& a) {
    return detail::unary_op<T>("log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> vsqrt(const Tensor<T>& a) {
    return detail::unary_op<T>("sqrt", a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(1) / (T(2) * y); });
}

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

// ---------------------------------------------------------------- matmul

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() == 2 && sb.size() == 2) {
        if (sa[1] != sb[0]) tensor_error("matmul: inner dims of " + shape_str(sa) + " and " + shape_str(sb) + " differ");
        int64_t m = sa[0], k = sa[1], n = sb[1];
        std::vector<T> out(static_cast<size_t>(m * n));
        detail::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data(), false);
        auto an = a.node();
        auto bn = b.node();
        return make_op<T>("matmul", {m, n}, std::move(out), {a, b}, [an, bn, m, n, k](Node<T>& nd) {
            if (an->requires_grad) {
                an->ensure_grad();
                detail::gemm_nt(m, k, n, nd.grad.data(), bn->value.data(), an->grad.data(), true);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                detail::gemm_tn(k, n, m, an->value.data(), nd.grad.data(), bn->grad.data(), true);
            }
        });
    }
    if (sa.size() == 3 && sb.size() == 3) {
        if (sa[0] != sb[0] || sa[2] != sb[1])
            tensor_error("matmul: batched shapes " + shape_str(sa) + " and " + shape_str(sb) + " are incompatible");
        int64_t bsz = sa[0], m = sa[1], k = sa[2], n = sb[2];
        std::vector<T> out(static_cast<size_t>(bsz * m * n));
        for (int64_t i = 0; i < bsz; ++i)
            detail::gemm_nn(m, n, k, a.data().data() + i * m * k, b.data().data() + i * k * n, out.data() + i * m * n, false);
        auto an = a.node();
        auto bn = b.node();
        return make_op<T>("matmul", {bsz, m, n}, std::move(out), {a, b}, [an, bn, bsz, m, n, k](Node<T>& nd) {
            for (int64_t i = 0; i < bsz; ++i) {
                if (an->requires_grad) {
                    an->ensure_grad();
                    detail::gemm_nt(m, k, n, nd.grad.data() + i * m * n, bn->value.data() + i * k * n, an->grad.data() + i * m * k, true);
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    detail::gemm_tn(k, n, m, an->value.data() + i * m * k, nd.grad.data() + i * m * n, bn->grad.data() + i * k * n, true);
                }
            }
        });
    }
    tensor_error("matmul: unsupported ranks " + shape_str(sa) + " x " + shape_str(sb));
}

// ---------------------------------------------------------------- shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        tensor_error("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    auto an = a.node();
    return make_op<T>("reshape", std::move(shape), a.data(), {a}, [an](Node<T>& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
    });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a, const std::vector<int64_t>& perm) {
    const Shape& s = a.shape();
    if (perm.size() != s.size()) tensor_error("transpose: perm rank mismatch for " + shape_str(s));
    Shape out_shape(s.size());
    for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = s[static_cast<size_t>(perm[i])];
    auto in_strides = detail::contiguous_strides(s);
    // stride of out dim i in the input buffer
    std::vector<int64_t> gather(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) gather[i] = in_strides[static_cast<size_t>(perm[i])];
    int64_t total = a.numel();
    std::vector<T> out(static_cast<size_t>(total));
    std::vector<int64_t> idx(out_shape.size(), 0);
    int64_t off = 0;
    const auto& av = a.data();
    for (int64_t e = 0; e < total; ++e) {
        out[static_cast<size_t>(e)] = av[static_cast<size_t>(off)];
        for (int d = static_cast<int>(out_shape.size()) - 1; d >= 0; --d) {
            idx[static_cast<size_t>(d)]++;
            off += gather[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
            off -= gather[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
            idx[static_cast<size_t>(d)] = 0;
        }
    }
    auto an = a.node();
    Shape osh = out_shape;
    std::vector<int64_t> gat = gather;
    return make_op<T>("transpose", std::move(out_shape), std::move(out), {a}, [an, osh, gat](Node<T>& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        std::vector<int64_t> idx2(osh.size(), 0);
        int64_t off2 = 0;
        for (size_t e = 0; e < n.grad.size(); ++e) {
            an->grad[static_cast<size_t>(off2)] += n.grad[e];
            for (int d = static_cast<int>(osh.size()) - 1; d >= 0; --d) {
                idx2[static_cast<size_t>(d)]++;
                off2 += gat[static_cast<size_t>(d)];
                if (idx2[static_cast<size_t>(d)] < osh[static_cast<size_t>(d)]) break;
                off2 -= gat[static_cast<size_t>(d)] * osh[static_cast<size_t>(d)];
                idx2[static_cast<size_t>(d)] = 0;
            }
        }
    });
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
    return transpose(a, {1, 0});
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& a, Shape shape) {
    Shape chk = detail::broadcast_shape(a.shape(), shape, "broadcast_to");
    if (chk != shape) tensor_error("broadcast_to: " + shape_str(a.shape()) + " does not broadcast to " + shape_str(shape));
    auto map = detail::broadcast_offsets(shape, a.shape());
    const auto& av = a.data();
    std::vector<T> out(map.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[static_cast<size_t>(map[i])];
    auto an = a.node();
    Shape osh = shape;
    return make_op<T>("broadcast_to", std::move(shape), std::move(out), {a}, [an, osh](Node<T>& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        auto map2 = detail::broadcast_offsets(osh, an->shape);
        for (size_t i = 0; i < n.grad.size(); ++i) an->grad[static_cast<size_t>(map2[i])] += n.grad[i];
    });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int64_t axis) {
    if (parts.empty()) tensor_error("concat: no inputs");
    Shape out_shape = parts[0].shape();
    size_t ax = static_cast<size_t>(axis);
    if (ax >= out_shape.size()) tensor_error("concat: axis out of range");
    int64_t axis_total = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != out_shape.size()) tensor_error("concat: rank mismatch " + shape_str(s) + " vs " + shape_str(out_shape));
        for (size_t i = 0; i < s.size(); ++i)
            if (i != ax && s[i] != out_shape[i])
                tensor_error("concat: shapes " + shape_str(s) + " and " + shape_str(out_shape) + " differ off-axis");
        axis_total += s[ax];
    }
    out_shape[ax] = axis_total;
    int64_t outer = 1, inner = 1;
    for (size_t i = 0; i < ax; ++i) outer *= out_shape[i];
    for (size_t i = ax + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
    std::vector<T> out(static_cast<size_t>(shape_numel(out_shape)));
    int64_t pos = 0;
    for (const auto& p : parts) {
        int64_t len = p.shape()[ax];
        const auto& pv = p.data();
        for (int64_t o = 0; o < outer; ++o)
            std::copy(pv.begin() + o * len * inner, pv.begin() + (o + 1) * len * inner,
                      out.begin() + (o * axis_total + pos) * inner);
        pos += len;
    }
    std::vector<std::shared_ptr<Node<T>>> pnodes;
    std::vector<int64_t> lens;
    for (const auto& p : parts) {
        pnodes.push_back(p.node());
        lens.push_back(p.shape()[ax]);
    }
    return make_op<T>("concat", std::move(out_shape), std::move(out), parts,
                      [pnodes, lens, outer, inner, axis_total](Node<T>& n) {
                          int64_t pos2 = 0;
                          for (size_t pi = 0; pi < pnodes.size(); ++pi) {
                              auto& pn = pnodes[pi];
                              int64_t len = lens[pi];
                              if (pn->requires_grad) {
                                  pn->ensure_grad();
                                  for (int64_t o = 0; o < outer; ++o)
                                      for (int64_t i = 0; i < len * inner; ++i)
                                          pn->grad[static_cast<size_t>(o * len * inner + i)] +=
                                              n.grad[static_cast<size_t>((o * axis_total + pos2) * inner + i)];
                              }
                              pos2 += len;
                          }
                      });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, int64_t axis, int64_t start, int64_t len) {
    const Shape& s = a.shape();
    size_t ax = static_cast<size_t>(axis);
    if (ax >= s.size()) tensor_error("slice: axis out of range for " + shape_str(s));
    if (start < 0 || len < 0 || start + len > s[ax])
        tensor_error("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) + ") out of bounds for " + shape_str(s));
    Shape out_shape = s;
    out_shape[ax] = len;
    int64_t outer = 1, inner = 1;
    for (size_t i = 0; i < ax; ++i) outer *= s[i];
    for (size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
    std::vector<T> out(static_cast<size_t>(shape_numel(out_shape)));
    const auto& av = a.data();
    for (int64_t o = 0; o < outer; ++o)
        std::copy(av.begin() + (o * s[ax] + start) * inner, av.begin() + (o * s[ax] + start + len) * inner,
                  out.begin() + o * len * inner);
    auto an = a.node();
    int64_t axis_len = s[ax];
    return make_op<T>("slice", std::move(out_shape), std::move(out), {a},
                      [an, outer, inner, axis_len, start, len](Node<T>& n) {
                          if (!an->requires_grad) return;
                          an->ensure_grad();
                          for (int64_t o = 0; o < outer; ++o)
                              for (int64_t i = 0; i < len * inner; ++i)
                                  an->grad[static_cast<size_t>((o * axis_len + start) * inner + i)] +=
                                      n.grad[static_cast<size_t>(o * len * inner + i)];
                      });
}

// ---------------------------------------------------------------- reductions

namespace detail {
template <typename T>
Tensor<T> reduce_axis(const char* op, const Tensor<T>& a, int64_t axis, bool keepdim, bool mean_reduce) {
    const Shape& s = a.shape();
    size_t ax = static_cast<size_t>(axis);
    if (ax >= s.size()) tensor_error(std::string(op) + ": axis out of range for " + shape_str(s));
    int64_t outer = 1, inner = 1, len = s[ax];
    for (size_t i = 0; i < ax; ++i) outer *= s[i];
    for (size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
    Shape out_shape;
    for (size_t i = 0; i < s.size(); ++i) {
        if (i == ax) {
            if (keepdim) out_shape.push_back(1);
        } else {
            out_shape.push_back(s[i]);
        }
    }
    if (out_shape.empty()) out_shape = {1};
    T scale = mean_reduce ? T(1) / static_cast<T>(len) : T(1);
    std::vector<T> out(static_cast<size_t>(outer * inner), T(0));
    const auto& av = a.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t l = 0; l < len; ++l)
            for (int64_t i = 0; i < inner; ++i) out[static_cast<size_t>(o * inner + i)] += av[static_cast<size_t>((o * len + l) * inner + i)];
    if (mean_reduce)
        for (auto& x : out) x *= scale;
    auto an = a.node();
    return make_op<T>(op, std::move(out_shape), std::move(out), {a}, [an, outer, inner, len, scale](Node<T>& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t l = 0; l < len; ++l)
                for (int64_t i = 0; i < inner; ++i)
                    an->grad[static_cast<size_t>((o * len + l) * inner + i)] += n.grad[static_cast<size_t>(o * inner + i)] * scale;
    });
}
}  // namespace detail

template <typename T>
Tensor<T> sum(const Tensor<T>& a, int64_t axis, bool keepdim = false) {
    return detail::reduce_axis<T>("sum", a, axis, keepdim, false);
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a, int64_t axis, bool keepdim = false) {
    return detail::reduce_axis<T>("mean", a, axis, keepdim, true);
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    T acc = 0;
    for (T x : a.data()) acc += x;
    auto an = a.node();
    return make_op<T>("sum_all", {1}, {acc}, {a}, [an](Node<T>& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (auto& g : an->grad) g += n.grad[0];
    });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    T acc = 0;
    for (T x : a.data()) acc += x;
    T scale = T(1) / static_cast<T>(a.numel());
    acc *= scale;
    auto an = a.node();
    return make_op<T>("mean_all", {1}, {acc}, {a}, [an, scale](Node<T>& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (auto& g : an->grad) g += n.grad[0] * scale;
    });
}

template <typename T>
Tensor<T> cumsum(const Tensor<T>& a, int64_t axis) {
    const Shape& s = a.shape();
    size_t ax = static_cast<size_t>(axis);
    if (ax >= s.size()) tensor_error("cumsum: axis out of range for " + shape_str(s));
    int64_t outer = 1, inner = 1, len = s[ax];
    for (size_t i = 0; i < ax; ++i) outer *= s[i];
    for (size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
    std::vector<T> out(a.data());
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t l = 1; l < len; ++l)
            for (int64_t i = 0; i < inner; ++i)
                out[static_cast<size_t>((o * len + l) * inner + i)] += out[static_cast<size_t>((o * len + l - 1) * inner + i)];
    auto an = a.node();
    return make_op<T>("cumsum", s, std::move(out), {a}, [an, outer, inner, len](Node<T>& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        // grad of cumsum = reversed cumulative sum of incoming grad
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < inner; ++i) {
                T acc = 0;
                for (int64_t l = len - 1; l >= 0; --l) {
                    acc += n.grad[static_cast<size_t>((o * len + l) * inner + i)];
                    an->grad[static_cast<size_t>((o * len + l) * inner + i)] += acc;
                }
            }
    });
}

// ---------------------------------------------------------------- row ops (last axis)

template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
    const Shape& s = a.shape();
    if (s.empty()) tensor_error("softmax: scalar input");
    int64_t cols = s.back();
    int64_t rows = a.numel() / cols;
    std::vector<T> out(a.data().size());
    const auto& av = a.data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* x = av.data() + r * cols;
        T* y = out.data() + r * cols;
        T mx = x[0];
        for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
        T z = 0;
        for (int64_t c = 0; c < cols; ++c) {
            y[c] = std::exp(x[c] - mx);
            z += y[c];
        }
        for (int64_t c = 0; c < cols; ++c) y[c] /= z;
    }
    auto an = a.node();
    return make_op<T>("softmax", s, std::move(out), {a}, [an, rows, cols](Node<T>& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const T* y = n.value.data() + r * cols;
            const T* g = n.grad.data() + r * cols;
            T dot = 0;
            for (int64_t c = 0; c < cols; ++c) dot += y[c] * g[c];
            T* gx = an->grad.data() + r * cols;
            for (int64_t c = 0; c < cols; ++c) gx[c] += y[c] * (g[c] - dot);
        }
    });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a) {
    const Shape& s = a.shape();
    int64_t cols = s.back();
    int64_t rows = a.numel() / cols;
    std::vector<T> out(a.data().size());
    const auto& av = a.data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* x = av.data() + r * cols;
        T* y = out.data() + r * cols;
        T mx = x[0];
        for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
        T z = 0;
        for (int64_t c = 0; c < cols; ++c) z += std::exp(x[c] - mx);
        T lse = mx + std::log(z);
        for (int64_t c = 0; c < cols; ++c) y[c] = x[c] - lse;
    }
    auto an = a.node();
    return make_op<T>("log_softmax", s, std::move(out), {a}, [an, rows, cols](Node<T>& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const T* y = n.value.data() + r * cols;
            const T* g = n.grad.data() + r * cols;
            T gsum = 0;
            for (int64_t c = 0; c < cols; ++c) gsum += g[c];
            T* gx = an->grad.data() + r * cols;
            for (int64_t c = 0; c < cols; ++c) gx[c] += g[c] - std::exp(y[c]) * gsum;
        }
    });
}

// Normalization only; affine scale/shift live in the layer wrapper.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, T eps = T(1e-5)) {
    const Shape& s = a.shape();
    int64_t cols = s.back();
    int64_t rows = a.numel() / cols;
    std::vector<T> out(a.data().size());
    std::vector<T> inv_std(static_cast<size_t>(rows));
    const auto& av = a.data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* x = av.data() + r * cols;
        T mu = 0;
        for (int64_t c = 0; c < cols; ++c) mu += x[c];
        mu /= static_cast<T>(cols);
        T var = 0;
        for (int64_t c = 0; c < cols; ++c) var += (x[c] - mu) * (x[c] - mu);
        var /= static_cast<T>(cols);
        T is = T(1) / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(r)] = is;
        T* y = out.data() + r * cols;
        for (int64_t c = 0; c < cols; ++c) y[c] = (x[c] - mu) * is;
    }
    auto an = a.node();
    return make_op<T>("layer_norm", s, std::move(out), {a}, [an, rows, cols, inv_std](Node<T>& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const T* xh = n.value.data() + r * cols;  // normalized values
            const T* g = n.grad.data() + r * cols;
            T gmean = 0, gxmean = 0;
            for (int64_t c = 0; c < cols; ++c) {
                gmean += g[c];
                gxmean += g[c] * xh[c];
            }
            gmean /= static_cast<T>(cols);
            gxmean /= static_cast<T>(cols);
            T is = inv_std[static_cast<size_t>(r)];
            T* gx = an->grad.data() + r * cols;
            for (int64_t c = 0; c < cols; ++c) gx[c] += is * (g[c] - gmean - xh[c] * gxmean);
        }
    });
}

// ---------------------------------------------------------------- lookup & losses

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int64_t>& indices) {
    const Shape& s = table.shape();
    if (s.size() != 2) tensor_error("embedding: table must be rank 2, got " + shape_str(s));
    int64_t vocab = s[0], width = s[1];
    std::vector<T> out(indices.size() * static_cast<size_t>(width));
    const auto& tv = table.data();
    for (size_t i = 0; i < indices.size(); ++i) {
        int64_t id = indices[i];
        if (id < 0 || id >= vocab) tensor_error("embedding: index " + std::to_string(id) + " outside vocab " + std::to_string(vocab));
        std::copy(tv.begin() + id * width, tv.begin() + (id + 1) * width, out.begin() + static_cast<int64_t>(i) * width);
    }
    auto tn = table.node();
    std::vector<int64_t> idx = indices;
    return make_op<T>("embedding", {static_cast<int64_t>(indices.size()), width}, std::move(out), {table},
                      [tn, idx, width](Node<T>& n) {
                          if (!tn->requires_grad) return;
                          tn->ensure_grad();
                          for (size_t i = 0; i < idx.size(); ++i)
                              for (int64_t c = 0; c < width; ++c)
                                  tn->grad[static_cast<size_t>(idx[i] * width + c)] += n.grad[static_cast<size_t>(static_cast<int64_t>(i) * width + c)];
                      });
}

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        tensor_error("mse_loss: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
    const auto& av = a.data();
    const auto& bv = b.data();
    T acc = 0;
    for (size_t i = 0; i < av.size(); ++i) {
        T d = av[i] - bv[i];
        acc += d * d;
    }
    T scale = T(1) / static_cast<T>(av.size());
    auto an = a.node();
    auto bn = b.node();
    return make_op<T>("mse_loss", {1}, {acc * scale}, {a, b}, [an, bn, scale](Node<T>& n) {
        T g = n.grad[0] * T(2) * scale;
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < an->value.size(); ++i) an->grad[i] += g * (an->value[i] - bn->value[i]);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < bn->value.size(); ++i) bn->grad[i] -= g * (an->value[i] - bn->value[i]);
        }
    });
}

// Mean-reduced Huber distance; the |d| == delta boundary takes the linear
// branch (the two branches agree in value and derivative there anyway).
template <typename T>
Tensor<T> huber_loss(const Tensor<T>& a, const Tensor<T>& b, T delta) {
    if (a.shape() != b.shape())
        tensor_error("huber_loss: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
    const auto& av = a.data();
    const auto& bv = b.data();
    T acc = 0;
    for (size_t i = 0; i < av.size(); ++i) {
        T d = av[i] - bv[i];
        T ad = std::abs(d);
        acc += ad < delta ? T(0.5) * d * d : delta * (ad - T(0.5) * delta);
    }
    T scale = T(1) / static_cast<T>(av.size());
    auto an = a.node();
    auto bn = b.node();
    return make_op<T>("huber_loss", {1}, {acc * scale}, {a, b}, [an, bn, scale, delta](Node<T>& n) {
        T g = n.grad[0] * scale;
        for (size_t i = 0; i < an->value.size(); ++i) {
            T d = an->value[i] - bn->value[i];
            T dd = std::abs(d) < delta ? d : (d > 0 ? delta : -delta);
            if (an->requires_grad) {
                an->ensure_grad();
                an->grad[i] += g * dd;
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                bn->grad[i] -= g * dd;
            }
        }
    });
}

// Detached copy; the target-branch isolation primitive.
template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& a) {
    return Tensor<T>::from_vector(a.shape(), a.data(), false);
}

// Classic transformer sin/cos embedding of a batch of scalar positions.
template <typename T>
Tensor<T> sinusoidal_embedding(const std::vector<double>& positions, int64_t dim) {
    if (dim % 2 != 0) tensor_error("sinusoidal_embedding: dim must be even");
    int64_t half = dim / 2;
    std::vector<T> out(positions.size() * static_cast<size_t>(dim));
    for (size_t b = 0; b < positions.size(); ++b) {
        for (int64_t i = 0; i < half; ++i) {
            double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
            out[b * static_cast<size_t>(dim) + static_cast<size_t>(2 * i)] = static_cast<T>(std::sin(positions[b] * freq));
            out[b * static_cast<size_t>(dim) + static_cast<size_t>(2 * i + 1)] = static_cast<T>(std::cos(positions[b] * freq));
        }
    }
    return Tensor<T>::from_vector({static_cast<int64_t>(positions.size()), dim}, std::move(out));
}

// ---------------------------------------------------------------- backward

template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) tensor_error("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;  // nothing reaches a parameter

    // reverse post-order = consumers before producers
    std::vector<Node<T>*> topo;
    std::unordered_set<Node<T>*> seen;
    struct Frame {
        Node<T>* n;
        size_t i;
    };
    std::vector<Frame> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.i < f.n->parents.size()) {
            Node<T>* p = f.n->parents[f.i++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            topo.push_back(f.n);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad();
    loss.node()->grad[0] = T(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
        if (!n->leaf) n->grad.clear();
    }
    // release intermediates: leaves keep grads, interior nodes drop links
    for (Node<T>* n : topo) {
        if (!n->leaf) {
            n->parents.clear();
            n->backward_fn = nullptr;
        }
    }
}

}  // namespace cmotion

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <random>
#include <string>
#include <vector>

#include "ferformer/errors.hpp"
#include "ferformer/tape.hpp"
#include "ferformer/tensor.hpp"

namespace ferformer {

namespace detail {

template <typename T>
inline bool tracing(std::initializer_list<const Tensor<T>*> inputs) {
    if (!active_tape<T>()) return false;
    for (const Tensor<T>* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op) {
#ifndef NDEBUG
    for (const T& v : t.data()) {
        if (!std::isfinite(v)) {
            throw std::logic_error(std::string(op) + ": non-finite value in output");
        }
    }
#else
    (void)t;
    (void)op;
#endif
}

// Row-major kernels with a fixed accumulation order (k ascending), so results
// are reproducible and A*I == A holds bitwise.

// c = a[m x k] * b[k x p], c overwritten
template <typename T>
inline void mm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t p) {
    std::fill(c, c + m * p, T(0));
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T aik = a[i * k + kk];
            if (aik == T(0)) continue;
            const T* brow = b + kk * p;
            T* crow = c + i * p;
            for (std::size_t j = 0; j < p; ++j) crow[j] += aik * brow[j];
        }
    }
}

// c += a[m x p] * b^T where b is [k x p]  -> c is [m x k]
template <typename T>
inline void mm_nt_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t p, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * p;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T* brow = b + kk * p;
            T acc = T(0);
            for (std::size_t j = 0; j < p; ++j) acc += arow[j] * brow[j];
            c[i * k + kk] += acc;
        }
    }
}

// c += a^T * b where a is [m x k], b is [m x p]  -> c is [k x p]
template <typename T>
inline void mm_tn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t p) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* brow = b + i * p;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T aik = a[i * k + kk];
            if (aik == T(0)) continue;
            T* crow = c + kk * p;
            for (std::size_t j = 0; j < p; ++j) crow[j] += aik * brow[j];
        }
    }
}

template <typename T>
inline std::size_t trailing_dim(const Tensor<T>& x) {
    return x.dim(x.rank() - 1);
}

} // namespace detail

// ---- linear algebra ----

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
    Tensor<T> out(Shape{m, p});
    detail::mm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, p);
    detail::check_finite(out, "matmul");
    if (detail::tracing<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        active_tape<T>()->record(oi, [ai, bi, oi, m, k, p]() {
            if (ai->requires_grad) {
                ensure_grad(ai);
                detail::mm_nt_acc(oi->grad.data(), bi->data.data(), ai->grad.data(), m, p, k);
            }
            if (bi->requires_grad) {
                ensure_grad(bi);
                detail::mm_tn_acc(ai->data.data(), oi->grad.data(), bi->grad.data(), m, k, p);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
    if (x.rank() != 2) throw ShapeError("transpose: rank-2 tensor required, got " + shape_str(x.shape()));
    const std::size_t m = x.dim(0), n = x.dim(1);
    Tensor<T> out(Shape{n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        active_tape<T>()->record(oi, [xi, oi, m, n]() {
            if (!xi->requires_grad) return;
            ensure_grad(xi);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) xi->grad[i * n + j] += oi->grad[j * m + i];
        });
    }
    return out;
}

// ---- elementwise / broadcast ----

// b broadcasts when it is a single scalar or a rank-1 vector matching the
// trailing axis of a; no other broadcasting exists.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t n = a.numel();
    Tensor<T> out(a.shape());
    enum class Mode { same, scalar, trailing } mode;
    if (a.shape() == b.shape()) {
        mode = Mode::same;
        for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
    } else if (b.numel() == 1) {
        mode = Mode::scalar;
        const T c = b[0];
        for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + c;
    } else if (b.rank() == 1 && b.numel() == detail::trailing_dim(a)) {
        mode = Mode::trailing;
        const std::size_t d = b.numel();
        for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i % d];
    } else {
        throw ShapeError("add: cannot broadcast " + shape_str(b.shape()) + " onto " +
                         shape_str(a.shape()));
    }
    if (detail::tracing<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        active_tape<T>()->record(oi, [ai, bi, oi, n, mode]() {
            if (ai->requires_grad) {
                ensure_grad(ai);
                for (std::size_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i];
            }
            if (bi->requires_grad) {
                ensure_grad(bi);
                if (mode == Mode::same) {
                    for (std::size_t i = 0; i < n; ++i) bi->grad[i] += oi->grad[i];
                } else if (mode == Mode::scalar) {
                    for (std::size_t i = 0; i < n; ++i) bi->grad[0] += oi->grad[i];
                } else {
                    const std::size_t d = bi->data.size();
                    for (std::size_t i = 0; i < n; ++i) bi->grad[i % d] += oi->grad[i];
                }
            }
        });
    }
    return out;
}

// mat[r x c] plus one bias value per row; the per-channel bias of a conv
// expressed on the unfolded matrix.
template <typename T>
Tensor<T> add_rowwise(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.numel() != a.dim(0)) {
        throw ShapeError("add_rowwise: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::size_t r = a.dim(0), c = a.dim(1);
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a[i * c + j] + b[i];
    if (detail::tracing<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        active_tape<T>()->record(oi, [ai, bi, oi, r, c]() {
            if (ai->requires_grad) {
                ensure_grad(ai);
                for (std::size_t i = 0; i < r * c; ++i) ai->grad[i] += oi->grad[i];
            }
            if (bi->requires_grad) {
                ensure_grad(bi);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) bi->grad[i] += oi->grad[i * c + j];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::size_t n = a.numel();
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
    if (detail::tracing<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        active_tape<T>()->record(oi, [ai, bi, oi, n]() {
            if (ai->requires_grad) {
                ensure_grad(ai);
                for (std::size_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i];
            }
            if (bi->requires_grad) {
                ensure_grad(bi);
                for (std::size_t i = 0; i < n; ++i) bi->grad[i] -= oi->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::size_t n = a.numel();
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
    if (detail::tracing<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        active_tape<T>()->record(oi, [ai, bi, oi, n]() {
            if (ai->requires_grad) {
                ensure_grad(ai);
                for (std::size_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i] * bi->data[i];
            }
            if (bi->requires_grad) {
                ensure_grad(bi);
                for (std::size_t i = 0; i < n; ++i) bi->grad[i] += oi->grad[i] * ai->data[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c) {
    const std::size_t n = x.numel();
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * c;
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        active_tape<T>()->record(oi, [xi, oi, n, c]() {
            if (!xi->requires_grad) return;
            ensure_grad(xi);
            for (std::size_t i = 0; i < n; ++i) xi->grad[i] += oi->grad[i] * c;
        });
    }
    return out;
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
    return mul_scalar(x, T(-1));
}

// ---- reductions ----

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = T(0);
    for (const T& v : x.data()) acc += v;
    Tensor<T> out = Tensor<T>::scalar(acc);
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        active_tape<T>()->record(oi, [xi, oi]() {
            if (!xi->requires_grad) return;
            ensure_grad(xi);
            const T g = oi->grad[0];
            for (T& v : xi->grad) v += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    const T inv = T(1) / static_cast<T>(x.numel());
    T acc = T(0);
    for (const T& v : x.data()) acc += v;
    Tensor<T> out = Tensor<T>::scalar(acc * inv);
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        active_tape<T>()->record(oi, [xi, oi, inv]() {
            if (!xi->requires_grad) return;
            ensure_grad(xi);
            const T g = oi->grad[0] * inv;
            for (T& v : xi->grad) v += g;
        });
    }
    return out;
}

// ---- shape plumbing ----

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
    }
    Tensor<T> out(std::move(shape), x.data());
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        active_tape<T>()->record(oi, [xi, oi]() {
            if (!xi->requires_grad) return;
            ensure_grad(xi);
            for (std::size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    if (parts[0].rank() != 2) throw ShapeError("concat_rows: parts must be rank 2");
    const std::size_t cols = parts[0].dim(1);
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(1) != cols) {
            throw ShapeError("concat_rows: mismatched part " + shape_str(p.shape()));
        }
        rows += p.dim(0);
    }
    Tensor<T> out(Shape{rows, cols});
    std::size_t at = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), out.data().begin() + at);
        at += p.numel();
    }
    bool trace = false;
    for (const auto& p : parts)
        if (detail::tracing<T>({&p})) trace = true;
    if (trace) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<TensorImpl<T>>> impls;
        impls.reserve(parts.size());
        for (const auto& p : parts) impls.push_back(p.impl());
        auto oi = out.impl();
        active_tape<T>()->record(oi, [impls, oi]() {
            std::size_t at = 0;
            for (const auto& pi : impls) {
                const std::size_t n = pi->data.size();
                if (pi->requires_grad) {
                    ensure_grad(pi);
                    for (std::size_t i = 0; i < n; ++i) pi->grad[i] += oi->grad[at + i];
                }
                at += n;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t count) {
    if (x.rank() != 2 || begin + count > x.dim(0)) {
        throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") outside " + shape_str(x.shape()));
    }
    const std::size_t cols = x.dim(1);
    Tensor<T> out(Shape{count, cols});
    std::copy(x.data().begin() + begin * cols, x.data().begin() + (begin + count) * cols,
              out.data().begin());
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        active_tape<T>()->record(oi, [xi, oi, begin, count, cols]() {
            if (!xi->requires_grad) return;
            ensure_grad(xi);
            for (std::size_t i = 0; i < count * cols; ++i)
                xi->grad[begin * cols + i] += oi->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw ShapeError("gather_rows: table must be rank 2");
    const std::size_t v = table.dim(0), d = table.dim(1);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
            throw IndexError("gather_rows: id " + std::to_string(ids[i]) + " at position " +
                             std::to_string(i) + " outside table of " + std::to_string(v) + " rows");
        }
    }
    Tensor<T> out(Shape{ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        std::copy(table.data().begin() + ids[i] * d, table.data().begin() + (ids[i] + 1) * d,
                  out.data().begin() + i * d);
    }
    if (detail::tracing<T>({&table})) {
        out.set_requires_grad(true);
        auto ti = table.impl(), oi = out.impl();
        active_tape<T>()->record(oi, [ti, oi, ids, d]() {
            if (!ti->requires_grad) return;
            ensure_grad(ti);
            for (std::size_t i = 0; i < ids.size(); ++i)
                for (std::size_t j = 0; j < d; ++j)
                    ti->grad[ids[i] * d + j] += oi->grad[i * d + j];
        });
    }
    return out;
}

// ---- nonlinearities ----

// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
// The finite-difference checks differentiate this same formula.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr T k0 = T(0.7978845608028654); // sqrt(2/pi)
    constexpr T k1 = T(0.044715);
    const std::size_t n = x.numel();
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < n; ++i) {
        const T v = x[i];
        out[i] = T(0.5) * v * (T(1) + std::tanh(k0 * (v + k1 * v * v * v)));
    }
    detail::check_finite(out, "gelu");
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        active_tape<T>()->record(oi, [xi, oi, n]() {
            if (!xi->requires_grad) return;
            ensure_grad(xi);
            const T c0 = T(0.7978845608028654);
            const T c1 = T(0.044715);
            for (std::size_t i = 0; i < n; ++i) {
                const T v = xi->data[i];
                const T t = std::tanh(c0 * (v + c1 * v * v * v));
                const T d = T(0.5) * (T(1) + t) +
                            T(0.5) * v * (T(1) - t * t) * c0 * (T(1) + T(3) * c1 * v * v);
                xi->grad[i] += oi->grad[i] * d;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
    const std::size_t r = x.rank();
    const long long signed_ax = axis < 0 ? static_cast<long long>(r) + axis : axis;
    if (signed_ax < 0 || signed_ax >= static_cast<long long>(r)) {
        throw ShapeError("softmax: axis " + std::to_string(axis) + " outside " + shape_str(x.shape()));
    }
    const std::size_t ax = static_cast<std::size_t>(signed_ax);
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < ax; ++i) outer *= x.dim(i);
    for (std::size_t i = ax + 1; i < r; ++i) inner *= x.dim(i);
    const std::size_t n = x.dim(ax);
    Tensor<T> out(x.shape());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            T mx = x[base];
            for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[base + i * inner]);
            T denom = T(0);
            for (std::size_t i = 0; i < n; ++i) {
                const T e = std::exp(x[base + i * inner] - mx);
                out[base + i * inner] = e;
                denom += e;
            }
            const T inv = T(1) / denom;
            for (std::size_t i = 0; i < n; ++i) out[base + i * inner] *= inv;
        }
    }
    detail::check_finite(out, "softmax");
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        active_tape<T>()->record(oi, [xi, oi, outer, inner, n]() {
            if (!xi->requires_grad) return;
            ensure_grad(xi);
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * n * inner + in;
                    T dot = T(0);
                    for (std::size_t i = 0; i < n; ++i)
                        dot += oi->grad[base + i * inner] * oi->data[base + i * inner];
                    for (std::size_t i = 0; i < n; ++i) {
                        const std::size_t at = base + i * inner;
                        xi->grad[at] += oi->data[at] * (oi->grad[at] - dot);
                    }
                }
            }
        });
    }
    return out;
}

// Per-vector zero mean / unit variance over the trailing axis, then affine.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
    const std::size_t d = detail::trailing_dim(x);
    if (d < 2) throw ShapeError("layer_norm: trailing axis must be >= 2, got " + shape_str(x.shape()));
    if (gain.numel() != d || bias.numel() != d) {
        throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match trailing axis " + std::to_string(d));
    }
    const std::size_t rows = x.numel() / d;
    Tensor<T> out(x.shape());
    std::vector<T> normed(x.numel());
    std::vector<T> inv_sigma(rows);
    for (std::size_t rix = 0; rix < rows; ++rix) {
        const T* xr = x.data().data() + rix * d;
        T mu = T(0);
        for (std::size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<T>(d);
        T var = T(0);
        for (std::size_t j = 0; j < d; ++j) {
            const T c = xr[j] - mu;
            var += c * c;
        }
        var /= static_cast<T>(d);
        const T inv = T(1) / std::sqrt(var + eps);
        inv_sigma[rix] = inv;
        for (std::size_t j = 0; j < d; ++j) {
            const T y = (xr[j] - mu) * inv;
            normed[rix * d + j] = y;
            out[rix * d + j] = gain[j] * y + bias[j];
        }
    }
    detail::check_finite(out, "layer_norm");
    if (detail::tracing<T>({&x, &gain, &bias})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl();
        active_tape<T>()->record(oi, [xi, gi, bi, oi, rows, d, normed = std::move(normed),
                                      inv_sigma = std::move(inv_sigma)]() {
            for (std::size_t rix = 0; rix < rows; ++rix) {
                const T* go = oi->grad.data() + rix * d;
                const T* y = normed.data() + rix * d;
                if (xi->requires_grad) {
                    ensure_grad(xi);
                    T mean_dy = T(0), mean_dyy = T(0);
                    for (std::size_t j = 0; j < d; ++j) {
                        const T dy = go[j] * gi->data[j];
                        mean_dy += dy;
                        mean_dyy += dy * y[j];
                    }
                    mean_dy /= static_cast<T>(d);
                    mean_dyy /= static_cast<T>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const T dy = go[j] * gi->data[j];
                        xi->grad[rix * d + j] += inv_sigma[rix] * (dy - mean_dy - y[j] * mean_dyy);
                    }
                }
                if (gi->requires_grad) {
                    ensure_grad(gi);
                    for (std::size_t j = 0; j < d; ++j) gi->grad[j] += go[j] * y[j];
                }
                if (bi->requires_grad) {
                    ensure_grad(bi);
                    for (std::size_t j = 0; j < d; ++j) bi->grad[j] += go[j];
                }
            }
        });
    }
    return out;
}

// Each trailing-axis vector divided by max(||v||_2, 1e-12).
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x) {
    constexpr T floor = T(1e-12);
    const std::size_t d = detail::trailing_dim(x);
    const std::size_t rows = x.numel() / d;
    Tensor<T> out(x.shape());
    std::vector<T> inv_norm(rows);
    std::vector<bool> clamped(rows);
    for (std::size_t rix = 0; rix < rows; ++rix) {
        const T* xr = x.data().data() + rix * d;
        T sq = T(0);
        for (std::size_t j = 0; j < d; ++j) sq += xr[j] * xr[j];
        const T norm = std::sqrt(sq);
        const T r = std::max(norm, floor);
        clamped[rix] = norm < floor;
        inv_norm[rix] = T(1) / r;
        for (std::size_t j = 0; j < d; ++j) out[rix * d + j] = xr[j] * inv_norm[rix];
    }
    detail::check_finite(out, "l2_normalize");
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        active_tape<T>()->record(oi, [xi, oi, rows, d, inv_norm = std::move(inv_norm),
                                      clamped = std::move(clamped)]() {
            if (!xi->requires_grad) return;
            ensure_grad(xi);
            for (std::size_t rix = 0; rix < rows; ++rix) {
                const T* go = oi->grad.data() + rix * d;
                const T* y = oi->data.data() + rix * d;
                if (clamped[rix]) {
                    // below the floor the norm is a constant
                    for (std::size_t j = 0; j < d; ++j)
                        xi->grad[rix * d + j] += go[j] * inv_norm[rix];
                    continue;
                }
                T dot = T(0);
                for (std::size_t j = 0; j < d; ++j) dot += go[j] * y[j];
                for (std::size_t j = 0; j < d; ++j)
                    xi->grad[rix * d + j] += (go[j] - y[j] * dot) * inv_norm[rix];
            }
        });
    }
    return out;
}

// ---- losses ----

// Mean over the batch of -log softmax(logits)[target].
template <typename T>
Tensor<T> cross_entropy_from_logits(const Tensor<T>& logits, const std::vector<int>& targets) {
    if (logits.rank() != 2) {
        throw ShapeError("cross_entropy: logits must be [batch x classes], got " +
                         shape_str(logits.shape()));
    }
    const std::size_t b = logits.dim(0), m = logits.dim(1);
    if (targets.size() != b) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for batch " +
                         std::to_string(b));
    }
    for (std::size_t i = 0; i < b; ++i) {
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= m) {
            throw IndexError("cross_entropy: target " + std::to_string(targets[i]) + " in row " +
                             std::to_string(i) + " outside [0, " + std::to_string(m) + ")");
        }
    }
    std::vector<T> probs(b * m);
    T total = T(0);
    for (std::size_t i = 0; i < b; ++i) {
        const T* row = logits.data().data() + i * m;
        T mx = row[0];
        for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
        T denom = T(0);
        for (std::size_t j = 0; j < m; ++j) {
            const T e = std::exp(row[j] - mx);
            probs[i * m + j] = e;
            denom += e;
        }
        const T inv = T(1) / denom;
        for (std::size_t j = 0; j < m; ++j) probs[i * m + j] *= inv;
        total += (mx + std::log(denom)) - row[targets[i]];
    }
    Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(b));
    detail::check_finite(out, "cross_entropy");
    if (detail::tracing<T>({&logits})) {
        out.set_requires_grad(true);
        auto li = logits.impl(), oi = out.impl();
        active_tape<T>()->record(oi, [li, oi, b, m, targets, probs = std::move(probs)]() {
            if (!li->requires_grad) return;
            ensure_grad(li);
            const T g = oi->grad[0] / static_cast<T>(b);
            for (std::size_t i = 0; i < b; ++i) {
                for (std::size_t j = 0; j < m; ++j) {
                    const T onehot = (static_cast<std::size_t>(targets[i]) == j) ? T(1) : T(0);
                    li->grad[i * m + j] += g * (probs[i * m + j] - onehot);
                }
            }
        });
    }
    return out;
}

// ---- spatial ops ----

// PyTorch-style adaptive windows: start = floor(i*H/out), end = ceil((i+1)*H/out).
// When H is a multiple of out the windows tile exactly and the global mean is
// preserved; out == in is the identity.
template <typename T>
Tensor<T> adaptive_avg_pool2d(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
    if (x.rank() != 3) throw ShapeError("adaptive_avg_pool2d: expected [C x H x W], got " + shape_str(x.shape()));
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h < out_h || w < out_w) {
        throw ShapeError("adaptive_avg_pool2d: cannot upsample " + shape_str(x.shape()) + " to [" +
                         std::to_string(out_h) + "x" + std::to_string(out_w) + "]");
    }
    Tensor<T> out(Shape{c, out_h, out_w});
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t oy = 0; oy < out_h; ++oy) {
            const std::size_t ys = oy * h / out_h;
            const std::size_t ye = ((oy + 1) * h + out_h - 1) / out_h;
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                const std::size_t xs = ox * w / out_w;
                const std::size_t xe = ((ox + 1) * w + out_w - 1) / out_w;
                T acc = T(0);
                for (std::size_t y = ys; y < ye; ++y)
                    for (std::size_t xx = xs; xx < xe; ++xx) acc += x[(ch * h + y) * w + xx];
                out[(ch * out_h + oy) * out_w + ox] =
                    acc / static_cast<T>((ye - ys) * (xe - xs));
            }
        }
    }
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        active_tape<T>()->record(oi, [xi, oi, c, h, w, out_h, out_w]() {
            if (!xi->requires_grad) return;
            ensure_grad(xi);
            for (std::size_t ch = 0; ch < c; ++ch) {
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    const std::size_t ys = oy * h / out_h;
                    const std::size_t ye = ((oy + 1) * h + out_h - 1) / out_h;
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                        const std::size_t xs = ox * w / out_w;
                        const std::size_t xe = ((ox + 1) * w + out_w - 1) / out_w;
                        const T g = oi->grad[(ch * out_h + oy) * out_w + ox] /
                                    static_cast<T>((ye - ys) * (xe - xs));
                        for (std::size_t y = ys; y < ye; ++y)
                            for (std::size_t xx = xs; xx < xe; ++xx)
                                xi->grad[(ch * h + y) * w + xx] += g;
                    }
                }
            }
        });
    }
    return out;
}

// im2col: [C x H x W] -> [(C*kh*kw) x (OH*OW)] with zero padding.
template <typename T>
Tensor<T> unfold(const Tensor<T>& x, std::size_t kh, std::size_t kw, std::size_t stride,
                 std::size_t pad) {
    if (x.rank() != 3) throw ShapeError("unfold: expected [C x H x W], got " + shape_str(x.shape()));
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h + 2 * pad < kh || w + 2 * pad < kw) {
        throw ShapeError("unfold: kernel larger than padded input " + shape_str(x.shape()));
    }
    const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
    const std::size_t ow = (w + 2 * pad - kw) / stride + 1;
    Tensor<T> out(Shape{c * kh * kw, oh * ow});
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t ki = 0; ki < kh; ++ki) {
            for (std::size_t kj = 0; kj < kw; ++kj) {
                const std::size_t row = (ch * kh + ki) * kw + kj;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * stride + ki) -
                                             static_cast<std::ptrdiff_t>(pad);
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox * stride + kj) -
                                                  static_cast<std::ptrdiff_t>(pad);
                        T v = T(0);
                        if (y >= 0 && y < static_cast<std::ptrdiff_t>(h) && xx >= 0 &&
                            xx < static_cast<std::ptrdiff_t>(w)) {
                            v = x[(ch * h + y) * w + xx];
                        }
                        out[row * oh * ow + oy * ow + ox] = v;
                    }
                }
            }
        }
    }
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        active_tape<T>()->record(oi, [xi, oi, c, h, w, kh, kw, stride, pad, oh, ow]() {
            if (!xi->requires_grad) return;
            ensure_grad(xi);
            for (std::size_t ch = 0; ch < c; ++ch) {
                for (std::size_t ki = 0; ki < kh; ++ki) {
                    for (std::size_t kj = 0; kj < kw; ++kj) {
                        const std::size_t row = (ch * kh + ki) * kw + kj;
                        for (std::size_t oy = 0; oy < oh; ++oy) {
                            const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * stride + ki) -
                                                     static_cast<std::ptrdiff_t>(pad);
                            if (y < 0 || y >= static_cast<std::ptrdiff_t>(h)) continue;
                            for (std::size_t ox = 0; ox < ow; ++ox) {
                                const std::ptrdiff_t xx =
                                    static_cast<std::ptrdiff_t>(ox * stride + kj) -
                                    static_cast<std::ptrdiff_t>(pad);
                                if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
                                xi->grad[(ch * h + y) * w + xx] +=
                                    oi->grad[row * oh * ow + oy * ow + ox];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Direct convolution with square-window semantics, built from unfold + matmul
// so the backward pass comes from the recorded primitives.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad) {
    if (x.rank() != 3 || weight.rank() != 4) {
        throw ShapeError("conv2d: expected image [C x H x W] and weight [OC x IC x KH x KW], got " +
                         shape_str(x.shape()) + " and " + shape_str(weight.shape()));
    }
    const std::size_t oc = weight.dim(0), ic = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
    if (ic != x.dim(0)) {
        throw ShapeError("conv2d: input channels " + std::to_string(x.dim(0)) +
                         " do not match weight " + shape_str(weight.shape()));
    }
    if (bias.numel() != oc) {
        throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " vs " + std::to_string(oc) +
                         " output channels");
    }
    const std::size_t oh = (x.dim(1) + 2 * pad - kh) / stride + 1;
    const std::size_t ow = (x.dim(2) + 2 * pad - kw) / stride + 1;
    Tensor<T> cols = unfold(x, kh, kw, stride, pad);
    Tensor<T> w2 = reshape(weight, Shape{oc, ic * kh * kw});
    Tensor<T> flat = add_rowwise(matmul(w2, cols), bias);
    return reshape(flat, Shape{oc, oh, ow});
}

// ---- stochastic ----

// Inverted dropout; a no-op (the same tensor) when p <= 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, T p, std::mt19937& rng) {
    if (p <= T(0)) return x;
    if (p >= T(1)) throw ConfigError("dropout: rate must be < 1");
    const std::size_t n = x.numel();
    const T keep = T(1) / (T(1) - p);
    std::vector<T> mask(n);
    std::uniform_real_distribution<T> d(T(0), T(1));
    for (std::size_t i = 0; i < n; ++i) mask[i] = d(rng) < p ? T(0) : keep;
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * mask[i];
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        active_tape<T>()->record(oi, [xi, oi, n, mask = std::move(mask)]() {
            if (!xi->requires_grad) return;
            ensure_grad(xi);
            for (std::size_t i = 0; i < n; ++i) xi->grad[i] += oi->grad[i] * mask[i];
        });
    }
    return out;
}

} // namespace ferformer

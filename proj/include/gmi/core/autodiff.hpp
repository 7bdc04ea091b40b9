#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gmi/core/tensor.hpp"

namespace gmi::ad {

// Dynamic-tape reverse-mode autodiff. Backward passes are themselves built
// out of these ops, so gradients are Vars and can be differentiated again
// (needed for the discriminator gradient penalty). Every primitive's vjp is
// expressed with primitives; data movement ops come in adjoint pairs
// (im2col/col2im, narrow/widen, gather/scatter, colsum/broadcast_rows, ...).

template <typename S>
struct Node;

template <typename S>
using Var = std::shared_ptr<Node<S>>;

inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

template <typename S>
struct Node {
    Tensor<S> value;
    bool requires_grad = false;
    std::uint64_t id = 0;
    std::vector<Var<S>> parents;
    // Maps upstream gradient to per-parent gradients (nullptr = no flow).
    std::function<std::vector<Var<S>>(const Var<S>&)> vjp;
};

template <typename S>
Var<S> constant(Tensor<S> v) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(v);
    n->id = next_node_id();
    return n;
}

template <typename S>
Var<S> constant_scalar(S v) {
    return constant(Tensor<S>::scalar(v));
}

template <typename S>
Var<S> leaf(Tensor<S> v) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(v);
    n->requires_grad = true;
    n->id = next_node_id();
    return n;
}

template <typename S>
Var<S> make_op(Tensor<S> value, std::vector<Var<S>> parents,
               std::function<std::vector<Var<S>>(const Var<S>&)> vjp) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(value);
    n->id = next_node_id();
    for (auto& p : parents)
        if (p && p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->vjp = std::move(vjp);
    }
    return n;
}

// ---------------------------------------------------------------- elementwise

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    GMI_CHECK_SHAPE(a->value.same_shape(b->value), "add: shape mismatch");
    Tensor<S> out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
    return make_op<S>(std::move(out), {a, b},
                      [](const Var<S>& g) { return std::vector<Var<S>>{g, g}; });
}

// Gradients are only materialized for parents that can use them.
template <typename S>
bool wants_grad(const Var<S>& v) {
    return v && v->requires_grad;
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
    GMI_CHECK_SHAPE(a->value.same_shape(b->value), "sub: shape mismatch");
    Tensor<S> out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b->value[i];
    return make_op<S>(std::move(out), {a, b}, [](const Var<S>& g) {
        return std::vector<Var<S>>{g, neg(g)};
    });
}

template <typename S>
Var<S> neg(const Var<S>& a) {
    Tensor<S> out = a->value;
    for (auto& v : out) v = -v;
    return make_op<S>(std::move(out), {a},
                      [](const Var<S>& g) { return std::vector<Var<S>>{neg(g)}; });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
    GMI_CHECK_SHAPE(a->value.same_shape(b->value), "mul: shape mismatch");
    Tensor<S> out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
    return make_op<S>(std::move(out), {a, b}, [a, b](const Var<S>& g) {
        return std::vector<Var<S>>{wants_grad(a) ? mul(g, b) : nullptr,
                                   wants_grad(b) ? mul(g, a) : nullptr};
    });
}

template <typename S>
Var<S> div(const Var<S>& a, const Var<S>& b) {
    GMI_CHECK_SHAPE(a->value.same_shape(b->value), "div: shape mismatch");
    Tensor<S> out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b->value[i];
    return make_op<S>(std::move(out), {a, b}, [a, b](const Var<S>& g) {
        auto ga = wants_grad(a) ? div(g, b) : nullptr;
        auto gb = wants_grad(b) ? neg(div(mul(g, a), mul(b, b))) : nullptr;
        return std::vector<Var<S>>{ga, gb};
    });
}

template <typename S>
Var<S> add_s(const Var<S>& a, S c) {
    Tensor<S> out = a->value;
    for (auto& v : out) v += c;
    return make_op<S>(std::move(out), {a},
                      [](const Var<S>& g) { return std::vector<Var<S>>{g}; });
}

template <typename S>
Var<S> mul_s(const Var<S>& a, S c) {
    Tensor<S> out = a->value;
    for (auto& v : out) v *= c;
    return make_op<S>(std::move(out), {a}, [c](const Var<S>& g) {
        return std::vector<Var<S>>{mul_s(g, c)};
    });
}

template <typename S>
Var<S> stopgrad(const Var<S>& a) {
    return constant(a->value);
}

// ------------------------------------------------------------------- unaries

template <typename S>
Var<S> exp_(const Var<S>& a) {
    Tensor<S> out = a->value;
    for (auto& v : out) v = std::exp(v);
    auto r = make_op<S>(std::move(out), {a}, nullptr);
    if (r->requires_grad) {
        Var<S> self = r;  // output participates in its own vjp
        std::weak_ptr<Node<S>> w = self;
        r->vjp = [w](const Var<S>& g) {
            return std::vector<Var<S>>{mul(g, w.lock())};
        };
    }
    return r;
}

template <typename S>
Var<S> log_(const Var<S>& a) {
    Tensor<S> out = a->value;
    for (auto& v : out) v = std::log(v);
    return make_op<S>(std::move(out), {a}, [a](const Var<S>& g) {
        return std::vector<Var<S>>{div(g, a)};
    });
}

template <typename S>
Var<S> sqrt_(const Var<S>& a) {
    Tensor<S> out = a->value;
    for (auto& v : out) v = std::sqrt(v);
    auto r = make_op<S>(std::move(out), {a}, nullptr);
    if (r->requires_grad) {
        std::weak_ptr<Node<S>> w = r;
        r->vjp = [w](const Var<S>& g) {
            auto y = w.lock();
            return std::vector<Var<S>>{div(mul_s(g, S(0.5)), y)};
        };
    }
    return r;
}

template <typename S>
Var<S> tanh_(const Var<S>& a) {
    Tensor<S> out = a->value;
    for (auto& v : out) v = std::tanh(v);
    auto r = make_op<S>(std::move(out), {a}, nullptr);
    if (r->requires_grad) {
        std::weak_ptr<Node<S>> w = r;
        r->vjp = [w](const Var<S>& g) {
            auto y = w.lock();
            Tensor<S> ones(y->value.shape(), S(1));
            return std::vector<Var<S>>{mul(g, sub(constant(std::move(ones)), mul(y, y)))};
        };
    }
    return r;
}

template <typename S>
Var<S> sigmoid_(const Var<S>& a) {
    Tensor<S> out = a->value;
    for (auto& v : out) v = S(1) / (S(1) + std::exp(-v));
    auto r = make_op<S>(std::move(out), {a}, nullptr);
    if (r->requires_grad) {
        std::weak_ptr<Node<S>> w = r;
        r->vjp = [w](const Var<S>& g) {
            auto y = w.lock();
            Tensor<S> ones(y->value.shape(), S(1));
            return std::vector<Var<S>>{mul(g, mul(y, sub(constant(std::move(ones)), y)))};
        };
    }
    return r;
}

// relu/leaky_relu/clamp as mask compositions: second derivative is zero a.e.
template <typename S>
Var<S> leaky_relu(const Var<S>& a, S alpha) {
    Tensor<S> mask = a->value;
    for (auto& v : mask) v = v > S(0) ? S(1) : alpha;
    return mul(a, constant(std::move(mask)));
}

template <typename S>
Var<S> relu(const Var<S>& a) {
    return leaky_relu(a, S(0));
}

template <typename S>
Var<S> clamp(const Var<S>& a, S lo, S hi) {
    Tensor<S> mask(a->value.shape());
    Tensor<S> offset(a->value.shape());
    for (std::size_t i = 0; i < mask.size(); ++i) {
        S v = a->value[i];
        if (v < lo) {
            mask[i] = 0;
            offset[i] = lo;
        } else if (v > hi) {
            mask[i] = 0;
            offset[i] = hi;
        } else {
            mask[i] = 1;
            offset[i] = 0;
        }
    }
    return add(mul(a, constant(std::move(mask))), constant(std::move(offset)));
}

// ------------------------------------------------------------ shape movement

template <typename S>
Var<S> reshape(const Var<S>& a, Shape s) {
    Shape prev = a->value.shape();
    Tensor<S> out = a->value.reshaped(std::move(s));
    return make_op<S>(std::move(out), {a}, [prev](const Var<S>& g) {
        return std::vector<Var<S>>{reshape(g, prev)};
    });
}

namespace detail {
// batched 2D transpose: [B, r, c] -> [B, c, r]
template <typename S>
void transpose_block(const S* src, S* dst, std::size_t b, std::size_t r, std::size_t c) {
    for (std::size_t n = 0; n < b; ++n) {
        const S* s = src + n * r * c;
        S* d = dst + n * r * c;
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) d[j * r + i] = s[i * c + j];
    }
}

template <typename S>
Tensor<S> permute_tensor(const Tensor<S>& x, const std::vector<std::size_t>& perm) {
    const Shape& in = x.shape();
    std::size_t r = in.size();
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = in[perm[i]];
    Tensor<S> out(out_shape);
    // the conv layouts reduce to batched matrix transposes
    if (r == 4 && perm == std::vector<std::size_t>{0, 3, 1, 2}) {
        transpose_block(x.data(), out.data(), in[0], in[1] * in[2], in[3]);
        return out;
    }
    if (r == 4 && perm == std::vector<std::size_t>{0, 2, 3, 1}) {
        transpose_block(x.data(), out.data(), in[0], in[1], in[2] * in[3]);
        return out;
    }
    if (r == 2 && perm == std::vector<std::size_t>{1, 0}) {
        transpose_block(x.data(), out.data(), 1, in[0], in[1]);
        return out;
    }
    if (r == 3 && perm == std::vector<std::size_t>{1, 0, 2}) {
        for (std::size_t i = 0; i < in[0]; ++i)
            for (std::size_t j = 0; j < in[1]; ++j)
                std::copy(x.data() + (i * in[1] + j) * in[2], x.data() + (i * in[1] + j + 1) * in[2],
                          out.data() + (j * in[0] + i) * in[2]);
        return out;
    }
    std::vector<std::size_t> in_strides(r, 1), out_strides(r, 1);
    for (std::size_t i = r - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * in[i];
    for (std::size_t i = r - 1; i > 0; --i) out_strides[i - 1] = out_strides[i] * out_shape[i];
    std::vector<std::size_t> idx(r, 0);
    const std::size_t n = x.size();
    for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t src = 0;
        for (std::size_t i = 0; i < r; ++i) src += idx[i] * in_strides[perm[i]];
        out[flat] = x[src];
        for (std::size_t i = r; i-- > 0;) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    return out;
}
}  // namespace detail

template <typename S>
Var<S> permute(const Var<S>& a, std::vector<std::size_t> perm) {
    GMI_CHECK_SHAPE(perm.size() == a->value.rank(), "permute: rank mismatch");
    Tensor<S> out = detail::permute_tensor(a->value, perm);
    std::vector<std::size_t> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
    return make_op<S>(std::move(out), {a}, [inv](const Var<S>& g) {
        return std::vector<Var<S>>{permute(g, inv)};
    });
}

template <typename S>
Var<S> transpose(const Var<S>& a) {
    GMI_CHECK_SHAPE(a->value.rank() == 2, "transpose: rank-2 only");
    return permute(a, {1, 0});
}

// narrow/widen: adjoint slicing pair along one axis.
template <typename S>
Var<S> widen(const Var<S>& a, std::size_t axis, std::size_t start, std::size_t full);

template <typename S>
Var<S> narrow(const Var<S>& a, std::size_t axis, std::size_t start, std::size_t len) {
    const Shape& in = a->value.shape();
    GMI_CHECK_SHAPE(axis < in.size() && start + len <= in[axis], "narrow: out of range");
    Shape out_shape = in;
    out_shape[axis] = len;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= in[i];
    for (std::size_t i = axis + 1; i < in.size(); ++i) inner *= in[i];
    Tensor<S> out(out_shape);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < len; ++j)
            for (std::size_t k = 0; k < inner; ++k)
                out[(o * len + j) * inner + k] = a->value[(o * in[axis] + start + j) * inner + k];
    std::size_t full = in[axis];
    return make_op<S>(std::move(out), {a}, [axis, start, full](const Var<S>& g) {
        return std::vector<Var<S>>{widen(g, axis, start, full)};
    });
}

template <typename S>
Var<S> widen(const Var<S>& a, std::size_t axis, std::size_t start, std::size_t full) {
    const Shape& in = a->value.shape();
    GMI_CHECK_SHAPE(axis < in.size() && start + in[axis] <= full, "widen: out of range");
    Shape out_shape = in;
    out_shape[axis] = full;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= in[i];
    for (std::size_t i = axis + 1; i < in.size(); ++i) inner *= in[i];
    std::size_t len = in[axis];
    Tensor<S> out(out_shape, S(0));
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < len; ++j)
            for (std::size_t k = 0; k < inner; ++k)
                out[(o * full + start + j) * inner + k] = a->value[(o * len + j) * inner + k];
    return make_op<S>(std::move(out), {a}, [axis, start, len](const Var<S>& g) {
        return std::vector<Var<S>>{narrow(g, axis, start, len)};
    });
}

template <typename S>
Var<S> concat(const Var<S>& a, const Var<S>& b, std::size_t axis) {
    std::size_t full = a->value.dim(axis) + b->value.dim(axis);
    return add(widen(a, axis, 0, full), widen(b, axis, a->value.dim(axis), full));
}

// gather/scatter over flat indices: adjoint pair (indices are constants).
template <typename S>
Var<S> scatter_idx(const Var<S>& a, std::shared_ptr<const std::vector<std::size_t>> idx, Shape out_shape);

template <typename S>
Var<S> gather_idx(const Var<S>& a, std::shared_ptr<const std::vector<std::size_t>> idx, Shape out_shape) {
    GMI_CHECK_SHAPE(shape_numel(out_shape) == idx->size(), "gather_idx: index/shape mismatch");
    Tensor<S> out(out_shape);
    for (std::size_t i = 0; i < idx->size(); ++i) out[i] = a->value[(*idx)[i]];
    Shape in_shape = a->value.shape();
    return make_op<S>(std::move(out), {a}, [idx, in_shape](const Var<S>& g) {
        return std::vector<Var<S>>{scatter_idx(g, idx, in_shape)};
    });
}

template <typename S>
Var<S> scatter_idx(const Var<S>& a, std::shared_ptr<const std::vector<std::size_t>> idx, Shape out_shape) {
    GMI_CHECK_SHAPE(a->value.size() == idx->size(), "scatter_idx: index/size mismatch");
    Tensor<S> out(out_shape, S(0));
    for (std::size_t i = 0; i < idx->size(); ++i) out[(*idx)[i]] += a->value[i];
    Shape in_shape = a->value.shape();
    return make_op<S>(std::move(out), {a}, [idx, in_shape](const Var<S>& g) {
        return std::vector<Var<S>>{gather_idx(g, idx, in_shape)};
    });
}

// ---------------------------------------------------------------- reductions

template <typename S>
Var<S> fill_like(const Var<S>& s, Shape shape);

template <typename S>
Var<S> sum_all(const Var<S>& a) {
    Tensor<S> out = Tensor<S>::scalar(a->value.sum());
    Shape in_shape = a->value.shape();
    return make_op<S>(std::move(out), {a}, [in_shape](const Var<S>& g) {
        return std::vector<Var<S>>{fill_like(g, in_shape)};
    });
}

template <typename S>
Var<S> fill_like(const Var<S>& s, Shape shape) {
    GMI_CHECK_SHAPE(s->value.size() == 1, "fill_like: scalar input expected");
    Tensor<S> out(shape, s->value[0]);
    return make_op<S>(std::move(out), {s}, [](const Var<S>& g) {
        return std::vector<Var<S>>{sum_all(g)};
    });
}

template <typename S>
Var<S> mean_all(const Var<S>& a) {
    return mul_s(sum_all(a), S(1) / S(a->value.size()));
}

template <typename S>
Var<S> broadcast_rows(const Var<S>& b, std::size_t m);

template <typename S>
Var<S> colsum(const Var<S>& a) {  // [m,n] -> [n]
    GMI_CHECK_SHAPE(a->value.rank() == 2, "colsum: rank-2 only");
    std::size_t m = a->value.dim(0), n = a->value.dim(1);
    Tensor<S> out(Shape{n}, S(0));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += a->value[i * n + j];
    return make_op<S>(std::move(out), {a}, [m](const Var<S>& g) {
        return std::vector<Var<S>>{broadcast_rows(g, m)};
    });
}

template <typename S>
Var<S> broadcast_rows(const Var<S>& b, std::size_t m) {  // [n] -> [m,n]
    GMI_CHECK_SHAPE(b->value.rank() == 1, "broadcast_rows: rank-1 only");
    std::size_t n = b->value.dim(0);
    Tensor<S> out(Shape{m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = b->value[j];
    return make_op<S>(std::move(out), {b}, [](const Var<S>& g) {
        return std::vector<Var<S>>{colsum(g)};
    });
}

template <typename S>
Var<S> broadcast_cols(const Var<S>& c, std::size_t n);

template <typename S>
Var<S> rowsum(const Var<S>& a) {  // [m,n] -> [m]
    GMI_CHECK_SHAPE(a->value.rank() == 2, "rowsum: rank-2 only");
    std::size_t m = a->value.dim(0), n = a->value.dim(1);
    Tensor<S> out(Shape{m}, S(0));
    for (std::size_t i = 0; i < m; ++i) {
        S acc = 0;
        for (std::size_t j = 0; j < n; ++j) acc += a->value[i * n + j];
        out[i] = acc;
    }
    return make_op<S>(std::move(out), {a}, [n](const Var<S>& g) {
        return std::vector<Var<S>>{broadcast_cols(g, n)};
    });
}

template <typename S>
Var<S> broadcast_cols(const Var<S>& c, std::size_t n) {  // [m] -> [m,n]
    GMI_CHECK_SHAPE(c->value.rank() == 1, "broadcast_cols: rank-1 only");
    std::size_t m = c->value.dim(0);
    Tensor<S> out(Shape{m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = c->value[i];
    return make_op<S>(std::move(out), {c}, [](const Var<S>& g) {
        return std::vector<Var<S>>{rowsum(g)};
    });
}

// pick/scatter_pick: per-row column selection, adjoint pair.
template <typename S>
Var<S> scatter_pick(const Var<S>& a, std::shared_ptr<const std::vector<std::size_t>> cols, std::size_t n);

template <typename S>
Var<S> pick(const Var<S>& a, std::shared_ptr<const std::vector<std::size_t>> cols) {  // [m,n] -> [m]
    GMI_CHECK_SHAPE(a->value.rank() == 2 && a->value.dim(0) == cols->size(), "pick: index mismatch");
    std::size_t m = a->value.dim(0), n = a->value.dim(1);
    Tensor<S> out(Shape{m});
    for (std::size_t i = 0; i < m; ++i) out[i] = a->value[i * n + (*cols)[i]];
    return make_op<S>(std::move(out), {a}, [cols, n](const Var<S>& g) {
        return std::vector<Var<S>>{scatter_pick(g, cols, n)};
    });
}

template <typename S>
Var<S> scatter_pick(const Var<S>& a, std::shared_ptr<const std::vector<std::size_t>> cols, std::size_t n) {
    GMI_CHECK_SHAPE(a->value.rank() == 1 && a->value.dim(0) == cols->size(), "scatter_pick: index mismatch");
    std::size_t m = a->value.dim(0);
    Tensor<S> out(Shape{m, n}, S(0));
    for (std::size_t i = 0; i < m; ++i) out[i * n + (*cols)[i]] = a->value[i];
    return make_op<S>(std::move(out), {a}, [cols](const Var<S>& g) {
        return std::vector<Var<S>>{pick(g, cols)};
    });
}

// ------------------------------------------------------------------- matmul

template <typename S>
Var<S> matmul_at(const Var<S>& a, const Var<S>& b);
template <typename S>
Var<S> matmul_bt(const Var<S>& a, const Var<S>& b);

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
    GMI_CHECK_SHAPE(a->value.rank() == 2 && b->value.rank() == 2 && a->value.dim(1) == b->value.dim(0),
                    "matmul: incompatible shapes " + shape_str(a->value.shape()) + " * " +
                        shape_str(b->value.shape()));
    std::size_t m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
    Tensor<S> out(Shape{m, n});
    out.mat(m, n).noalias() = a->value.mat(m, k) * b->value.mat(k, n);
    return make_op<S>(std::move(out), {a, b}, [a, b](const Var<S>& g) {
        auto ga = wants_grad(a) ? matmul_bt(g, b) : nullptr;  // g * b^T
        auto gb = wants_grad(b) ? matmul_at(a, g) : nullptr;  // a^T * g
        return std::vector<Var<S>>{ga, gb};
    });
}

// a^T * b without materializing the transpose.
template <typename S>
Var<S> matmul_at(const Var<S>& a, const Var<S>& b) {
    GMI_CHECK_SHAPE(a->value.rank() == 2 && b->value.rank() == 2 && a->value.dim(0) == b->value.dim(0),
                    "matmul_at: incompatible shapes");
    std::size_t k = a->value.dim(0), m = a->value.dim(1), n = b->value.dim(1);
    Tensor<S> out(Shape{m, n});
    out.mat(m, n).noalias() = a->value.mat(k, m).transpose() * b->value.mat(k, n);
    return make_op<S>(std::move(out), {a, b}, [a, b](const Var<S>& g) {
        auto ga = wants_grad(a) ? matmul_bt(b, g) : nullptr;  // b * g^T
        auto gb = wants_grad(b) ? matmul(a, g) : nullptr;
        return std::vector<Var<S>>{ga, gb};
    });
}

// a * b^T without materializing the transpose.
template <typename S>
Var<S> matmul_bt(const Var<S>& a, const Var<S>& b) {
    GMI_CHECK_SHAPE(a->value.rank() == 2 && b->value.rank() == 2 && a->value.dim(1) == b->value.dim(1),
                    "matmul_bt: incompatible shapes");
    std::size_t m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(0);
    Tensor<S> out(Shape{m, n});
    out.mat(m, n).noalias() = a->value.mat(m, k) * b->value.mat(n, k).transpose();
    return make_op<S>(std::move(out), {a, b}, [a, b](const Var<S>& g) {
        auto ga = wants_grad(a) ? matmul(g, b) : nullptr;
        auto gb = wants_grad(b) ? matmul_at(g, a) : nullptr;  // g^T * a
        return std::vector<Var<S>>{ga, gb};
    });
}

// ------------------------------------------------------------- convolutions

struct ConvGeom {
    std::size_t n = 1, c = 1, h = 1, w = 1;  // image dims
    std::size_t kh = 1, kw = 1;
    std::size_t sh = 1, sw = 1;
    std::size_t ph = 0, pw = 0;
    std::size_t dh = 1, dw = 1;

    std::size_t oh() const { return (h + 2 * ph - dh * (kh - 1) - 1) / sh + 1; }
    std::size_t ow() const { return (w + 2 * pw - dw * (kw - 1) - 1) / sw + 1; }
    std::size_t n_pos() const { return n * oh() * ow(); }   // output positions
    std::size_t patch() const { return c * kh * kw; }       // taps per position
};

namespace detail {
// Kernel-major patch matrix: rows are (c, ky, kx) taps, columns (n, oy, ox)
// output positions, so stride-1 convs copy whole spans of each image row.
// Out-of-bounds taps read 0.
template <typename S>
Tensor<S> im2col_tensor(const Tensor<S>& img, const ConvGeom& g) {
    const std::size_t OH = g.oh(), OW = g.ow();
    const std::size_t npos = g.n_pos();
    Tensor<S> out(Shape{g.patch(), npos}, S(0));
    const std::ptrdiff_t H = std::ptrdiff_t(g.h), W = std::ptrdiff_t(g.w);
    for (std::size_t c = 0; c < g.c; ++c) {
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                S* row = out.data() + ((c * g.kh + ky) * g.kw + kx) * npos;
                const std::ptrdiff_t off_x = std::ptrdiff_t(kx * g.dw) - std::ptrdiff_t(g.pw);
                // valid ox range: 0 <= ox*sw + off_x < W
                std::ptrdiff_t lo = off_x < 0 ? (-off_x + std::ptrdiff_t(g.sw) - 1) / std::ptrdiff_t(g.sw) : 0;
                std::ptrdiff_t hi = (W - off_x + std::ptrdiff_t(g.sw) - 1) / std::ptrdiff_t(g.sw);
                hi = std::min<std::ptrdiff_t>(hi, std::ptrdiff_t(OW));
                for (std::size_t n = 0; n < g.n; ++n) {
                    const S* plane = img.data() + (n * g.c + c) * g.h * g.w;
                    for (std::size_t oy = 0; oy < OH; ++oy) {
                        std::ptrdiff_t iy = std::ptrdiff_t(oy * g.sh + ky * g.dh) - std::ptrdiff_t(g.ph);
                        if (iy < 0 || iy >= H) continue;
                        S* seg = row + (n * OH + oy) * OW;
                        const S* line = plane + iy * W;
                        if (g.sw == 1) {
                            for (std::ptrdiff_t ox = lo; ox < hi; ++ox) seg[ox] = line[ox + off_x];
                        } else {
                            for (std::ptrdiff_t ox = lo; ox < hi; ++ox)
                                seg[ox] = line[ox * std::ptrdiff_t(g.sw) + off_x];
                        }
                    }
                }
            }
        }
    }
    return out;
}

template <typename S>
Tensor<S> col2im_tensor(const Tensor<S>& cols, const ConvGeom& g) {
    const std::size_t OH = g.oh(), OW = g.ow();
    const std::size_t npos = g.n_pos();
    Tensor<S> out(Shape{g.n, g.c, g.h, g.w}, S(0));
    const std::ptrdiff_t H = std::ptrdiff_t(g.h), W = std::ptrdiff_t(g.w);
    for (std::size_t c = 0; c < g.c; ++c) {
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const S* row = cols.data() + ((c * g.kh + ky) * g.kw + kx) * npos;
                const std::ptrdiff_t off_x = std::ptrdiff_t(kx * g.dw) - std::ptrdiff_t(g.pw);
                std::ptrdiff_t lo = off_x < 0 ? (-off_x + std::ptrdiff_t(g.sw) - 1) / std::ptrdiff_t(g.sw) : 0;
                std::ptrdiff_t hi = (W - off_x + std::ptrdiff_t(g.sw) - 1) / std::ptrdiff_t(g.sw);
                hi = std::min<std::ptrdiff_t>(hi, std::ptrdiff_t(OW));
                for (std::size_t n = 0; n < g.n; ++n) {
                    S* plane = out.data() + (n * g.c + c) * g.h * g.w;
                    for (std::size_t oy = 0; oy < OH; ++oy) {
                        std::ptrdiff_t iy = std::ptrdiff_t(oy * g.sh + ky * g.dh) - std::ptrdiff_t(g.ph);
                        if (iy < 0 || iy >= H) continue;
                        const S* seg = row + (n * OH + oy) * OW;
                        S* line = plane + iy * W;
                        if (g.sw == 1) {
                            for (std::ptrdiff_t ox = lo; ox < hi; ++ox) line[ox + off_x] += seg[ox];
                        } else {
                            for (std::ptrdiff_t ox = lo; ox < hi; ++ox)
                                line[ox * std::ptrdiff_t(g.sw) + off_x] += seg[ox];
                        }
                    }
                }
            }
        }
    }
    return out;
}
}  // namespace detail

template <typename S>
Var<S> col2im(const Var<S>& a, const ConvGeom& geom);

template <typename S>
Var<S> im2col(const Var<S>& a, const ConvGeom& geom) {
    GMI_CHECK_SHAPE(a->value.size() == geom.n * geom.c * geom.h * geom.w, "im2col: image size mismatch");
    Tensor<S> out = detail::im2col_tensor(a->value, geom);
    return make_op<S>(std::move(out), {a}, [geom](const Var<S>& g) {
        return std::vector<Var<S>>{col2im(g, geom)};
    });
}

template <typename S>
Var<S> col2im(const Var<S>& a, const ConvGeom& geom) {
    GMI_CHECK_SHAPE(a->value.size() == geom.n_pos() * geom.patch(), "col2im: cols size mismatch");
    Tensor<S> out = detail::col2im_tensor(a->value, geom);
    return make_op<S>(std::move(out), {a}, [geom](const Var<S>& g) {
        return std::vector<Var<S>>{im2col(g, geom)};
    });
}

// ----------------------------------------------------------------- max pool

template <typename S>
Var<S> maxpool2d(const Var<S>& x, std::size_t n, std::size_t c, std::size_t h, std::size_t w,
                 std::size_t k) {
    GMI_CHECK_SHAPE(x->value.size() == n * c * h * w, "maxpool2d: size mismatch");
    GMI_CHECK_SHAPE(h % k == 0 && w % k == 0, "maxpool2d: dims must divide pool size");
    std::size_t oh = h / k, ow = w / k;
    auto idx = std::make_shared<std::vector<std::size_t>>(n * c * oh * ow);
    for (std::size_t p = 0; p < n * c; ++p) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                std::size_t best = (p * h + oy * k) * w + ox * k;
                S bv = x->value[best];
                for (std::size_t dy = 0; dy < k; ++dy)
                    for (std::size_t dx = 0; dx < k; ++dx) {
                        std::size_t at = (p * h + oy * k + dy) * w + ox * k + dx;
                        if (x->value[at] > bv) {
                            bv = x->value[at];
                            best = at;
                        }
                    }
                (*idx)[(p * oh + oy) * ow + ox] = best;
            }
        }
    }
    return gather_idx(x, std::shared_ptr<const std::vector<std::size_t>>(idx), Shape{n, c, oh, ow});
}

// ----------------------------------------------------------------- backward

// Reverse-mode sweep. Gradients are Vars built with the ops above, so the
// result can be differentiated again (grad-of-grad).
template <typename S>
std::vector<Var<S>> grad(const Var<S>& loss, const std::vector<Var<S>>& wrt) {
    GMI_CHECK(loss->value.size() == 1, "grad: loss must be scalar");

    // Reachable requires-grad subgraph.
    std::vector<Node<S>*> order;
    std::unordered_map<Node<S>*, Var<S>> hold;
    {
        std::vector<Var<S>> stack{loss};
        while (!stack.empty()) {
            Var<S> v = stack.back();
            stack.pop_back();
            if (!v || !v->requires_grad || hold.count(v.get())) continue;
            hold.emplace(v.get(), v);
            order.push_back(v.get());
            for (auto& p : v->parents) stack.push_back(p);
        }
    }
    std::sort(order.begin(), order.end(),
              [](const Node<S>* a, const Node<S>* b) { return a->id > b->id; });

    std::unordered_map<Node<S>*, Var<S>> gmap;
    gmap[loss.get()] = constant(Tensor<S>(Shape{1}, S(1)));

    for (Node<S>* node : order) {
        auto it = gmap.find(node);
        if (it == gmap.end() || !node->vjp) continue;
        auto pgrads = node->vjp(it->second);
        GMI_CHECK(pgrads.size() == node->parents.size(), "grad: vjp arity mismatch");
        for (std::size_t i = 0; i < pgrads.size(); ++i) {
            auto& parent = node->parents[i];
            if (!parent || !parent->requires_grad || !pgrads[i]) continue;
            auto pit = gmap.find(parent.get());
            if (pit == gmap.end())
                gmap.emplace(parent.get(), pgrads[i]);
            else
                pit->second = add(pit->second, pgrads[i]);
        }
    }

    std::vector<Var<S>> out;
    out.reserve(wrt.size());
    for (auto& w : wrt) {
        auto it = gmap.find(w.get());
        if (it == gmap.end())
            out.push_back(constant(Tensor<S>(w->value.shape(), S(0))));
        else
            out.push_back(it->second);
    }
    return out;
}

// Balanced reduction; keeps graph depth logarithmic for long lists.
template <typename S>
Var<S> add_many(std::vector<Var<S>> terms) {
    GMI_CHECK(!terms.empty(), "add_many: empty");
    while (terms.size() > 1) {
        std::vector<Var<S>> next;
        next.reserve((terms.size() + 1) / 2);
        for (std::size_t i = 0; i + 1 < terms.size(); i += 2) next.push_back(add(terms[i], terms[i + 1]));
        if (terms.size() % 2) next.push_back(terms.back());
        terms = std::move(next);
    }
    return terms[0];
}

// ---------------------------------------------------------------- softmax etc.

template <typename S>
Var<S> log_softmax_rows(const Var<S>& x) {
    GMI_CHECK_SHAPE(x->value.rank() == 2, "log_softmax_rows: rank-2 only");
    std::size_t m = x->value.dim(0), n = x->value.dim(1);
    // Row-max shift as a constant: the expression is invariant to it.
    Tensor<S> shift(Shape{m});
    for (std::size_t i = 0; i < m; ++i) {
        S mx = x->value[i * n];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x->value[i * n + j]);
        shift[i] = mx;
    }
    auto xs = sub(x, broadcast_cols(constant(std::move(shift)), n));
    auto lse = log_(rowsum(exp_(xs)));
    return sub(xs, broadcast_cols(lse, n));
}

template <typename S>
Var<S> softmax_rows(const Var<S>& x) {
    return exp_(log_softmax_rows(x));
}

// Mean cross entropy; exactly -mean(log p(y|x)).
template <typename S>
Var<S> cross_entropy_rows(const Var<S>& logits, const std::vector<std::size_t>& labels) {
    auto cols = std::make_shared<const std::vector<std::size_t>>(labels);
    auto ls = log_softmax_rows(logits);
    auto picked = pick(ls, cols);
    return mul_s(sum_all(picked), S(-1) / S(labels.size()));
}

}  // namespace gmi::ad

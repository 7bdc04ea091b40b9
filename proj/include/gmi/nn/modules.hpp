#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gmi/core/autodiff.hpp"
#include "gmi/core/random.hpp"

namespace gmi::nn {

using ad::Var;

// Fan-in-scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename S>
Tensor<S> init_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor<S> t(std::move(shape));
    double bound = 1.0 / std::sqrt(double(fan_in ? fan_in : 1));
    rng.fill_uniform(t, -bound, bound);
    return t;
}

template <typename S>
struct Dense {
    Var<S> W, b;  // [in,out], [out]

    Dense() = default;
    Dense(std::size_t in, std::size_t out, Rng& rng)
        : W(ad::leaf(init_uniform<S>({in, out}, in, rng))),
          b(ad::leaf(init_uniform<S>({out}, in, rng))) {}

    Var<S> forward(const Var<S>& x) const {
        return ad::add(ad::matmul(x, W), ad::broadcast_rows(b, x->value.dim(0)));
    }
    std::vector<Var<S>> params() const { return {W, b}; }
};

// Adds b[c] to every (n,c,·,·) position of a [N,C,H,W] tensor.
template <typename S>
Var<S> add_channel_bias(const Var<S>& x, const Var<S>& b, std::size_t n, std::size_t c,
                        std::size_t hw) {
    auto x2 = ad::reshape(x, Shape{n * c, hw});
    auto idx = std::make_shared<std::vector<std::size_t>>(n * c);
    for (std::size_t i = 0; i < n * c; ++i) (*idx)[i] = i % c;
    auto per_row = ad::gather_idx(b, std::shared_ptr<const std::vector<std::size_t>>(idx), Shape{n * c});
    auto y = ad::add(x2, ad::broadcast_cols(per_row, hw));
    return ad::reshape(y, x->value.shape());
}

template <typename S>
struct Conv2d {
    Var<S> W, b;  // [OC, C*KH*KW], [OC]
    std::size_t in_c = 0, out_c = 0, k = 1, stride = 1, pad = 0, dil = 1;

    Conv2d() = default;
    Conv2d(std::size_t ic, std::size_t oc, std::size_t kk, std::size_t s, std::size_t p, Rng& rng,
           std::size_t dilation = 1)
        : W(ad::leaf(init_uniform<S>({oc, ic * kk * kk}, ic * kk * kk, rng))),
          b(ad::leaf(init_uniform<S>({oc}, ic * kk * kk, rng))),
          in_c(ic), out_c(oc), k(kk), stride(s), pad(p), dil(dilation) {}

    ad::ConvGeom geom(std::size_t n, std::size_t h, std::size_t w) const {
        return ad::ConvGeom{n, in_c, h, w, k, k, stride, stride, pad, pad, dil, dil};
    }

    Var<S> forward(const Var<S>& x) const {
        const Shape& s = x->value.shape();
        GMI_CHECK_SHAPE(s.size() == 4 && s[1] == in_c, "conv2d: expected [N," + std::to_string(in_c) + ",H,W]");
        auto g = geom(s[0], s[2], s[3]);
        auto cols = ad::im2col(x, g);  // [patch, N*OH*OW]
        auto y2 = ad::add(ad::matmul(W, cols), ad::broadcast_cols(b, g.n_pos()));
        auto y3 = ad::permute(ad::reshape(y2, Shape{out_c, s[0], g.oh() * g.ow()}), {1, 0, 2});
        return ad::reshape(y3, Shape{s[0], out_c, g.oh(), g.ow()});
    }
    std::vector<Var<S>> params() const { return {W, b}; }
};

// Transposed conv (fractional stride); output spatial size = stride * input.
template <typename S>
struct Deconv2d {
    Var<S> W, b;  // [OC*KH*KW, C], [OC]
    std::size_t in_c = 0, out_c = 0, k = 1, stride = 1, pad = 0;

    Deconv2d() = default;
    Deconv2d(std::size_t ic, std::size_t oc, std::size_t kk, std::size_t s, std::size_t p, Rng& rng)
        : W(ad::leaf(init_uniform<S>({oc * kk * kk, ic}, ic, rng))),
          b(ad::leaf(init_uniform<S>({oc}, ic, rng))),
          in_c(ic), out_c(oc), k(kk), stride(s), pad(p) {}

    Var<S> forward(const Var<S>& x) const {
        const Shape& s = x->value.shape();
        GMI_CHECK_SHAPE(s.size() == 4 && s[1] == in_c, "deconv2d: expected [N,C,H,W]");
        std::size_t n = s[0], h = s[2], w = s[3];
        std::size_t oh = h * stride, ow = w * stride;
        ad::ConvGeom g{n, out_c, oh, ow, k, k, stride, stride, pad, pad, 1, 1};
        GMI_CHECK_SHAPE(g.oh() == h && g.ow() == w, "deconv2d: geometry does not invert");
        auto xt = ad::reshape(ad::permute(ad::reshape(x, Shape{n, in_c, h * w}), {1, 0, 2}),
                              Shape{in_c, n * h * w});
        auto cols = ad::matmul(W, xt);  // [OC*KH*KW, N*H*W]
        auto y = ad::col2im(cols, g);
        return add_channel_bias(y, b, n, out_c, oh * ow);
    }
    std::vector<Var<S>> params() const { return {W, b}; }
};

template <typename S>
struct BatchNorm {
    Var<S> gamma, beta;         // [C]
    Tensor<S> run_mean, run_var;  // inference statistics
    S momentum = S(0.1), eps = S(1e-5);

    BatchNorm() = default;
    explicit BatchNorm(std::size_t c)
        : gamma(ad::leaf(Tensor<S>(Shape{c}, S(1)))),
          beta(ad::leaf(Tensor<S>(Shape{c}, S(0)))),
          run_mean(Shape{c}, S(0)),
          run_var(Shape{c}, S(1)) {}

    // x2d: [m, C] (callers flatten NCHW to [N*H*W, C] first).
    Var<S> forward_2d(const Var<S>& x2d, bool train) {
        std::size_t m = x2d->value.dim(0), c = x2d->value.dim(1);
        Var<S> xhat;
        if (train) {
            auto mu = ad::mul_s(ad::colsum(x2d), S(1) / S(m));
            auto xc = ad::sub(x2d, ad::broadcast_rows(mu, m));
            auto var = ad::mul_s(ad::colsum(ad::mul(xc, xc)), S(1) / S(m));
            for (std::size_t j = 0; j < c; ++j) {
                run_mean[j] = (S(1) - momentum) * run_mean[j] + momentum * mu->value[j];
                run_var[j] = (S(1) - momentum) * run_var[j] + momentum * var->value[j];
            }
            auto inv = ad::div(ad::constant(Tensor<S>(Shape{c}, S(1))), ad::sqrt_(ad::add_s(var, eps)));
            xhat = ad::mul(xc, ad::broadcast_rows(inv, m));
        } else {
            Tensor<S> inv(Shape{c});
            for (std::size_t j = 0; j < c; ++j) inv[j] = S(1) / std::sqrt(run_var[j] + eps);
            auto xc = ad::sub(x2d, ad::broadcast_rows(ad::constant(run_mean), m));
            xhat = ad::mul(xc, ad::broadcast_rows(ad::constant(std::move(inv)), m));
        }
        return ad::add(ad::mul(xhat, ad::broadcast_rows(gamma, m)), ad::broadcast_rows(beta, m));
    }

    // NCHW wrapper: per-channel statistics over N,H,W.
    Var<S> forward_nchw(const Var<S>& x, bool train) {
        const Shape& s = x->value.shape();
        auto flat = ad::reshape(ad::permute(x, {0, 2, 3, 1}), Shape{s[0] * s[2] * s[3], s[1]});
        auto y = forward_2d(flat, train);
        return ad::permute(ad::reshape(y, Shape{s[0], s[2], s[3], s[1]}), {0, 3, 1, 2});
    }
    std::vector<Var<S>> params() const { return {gamma, beta}; }
};

template <typename S>
Var<S> dropout(const Var<S>& x, double rate, bool train, Rng& rng) {
    if (!train || rate <= 0.0) return x;
    Tensor<S> mask(x->value.shape());
    S keep = S(1.0 - rate);
    for (auto& v : mask) v = rng.uniform() < rate ? S(0) : S(1) / keep;
    return ad::mul(x, ad::constant(std::move(mask)));
}

template <typename S>
Var<S> flatten_batch(const Var<S>& x) {
    const Shape& s = x->value.shape();
    std::size_t rest = 1;
    for (std::size_t i = 1; i < s.size(); ++i) rest *= s[i];
    return ad::reshape(x, Shape{s[0], rest});
}

}  // namespace gmi::nn

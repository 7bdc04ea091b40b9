#pragma once

#include <vector>

#include "gmi/core/autodiff.hpp"

namespace gmi::nn {

template <typename S>
class Sgd {
  public:
    Sgd(S lr, S momentum = 0, S weight_decay = 0, bool nesterov = false)
        : lr_(lr), momentum_(momentum), weight_decay_(weight_decay), nesterov_(nesterov) {}

    void step(const std::vector<ad::Var<S>>& params, const std::vector<Tensor<S>>& grads) {
        if (vel_.empty())
            for (auto& p : params) vel_.emplace_back(p->value.shape(), S(0));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& w = params[i]->value;
            auto& v = vel_[i];
            for (std::size_t j = 0; j < w.size(); ++j) {
                S g = grads[i][j] + weight_decay_ * w[j];
                v[j] = momentum_ * v[j] + g;
                w[j] -= lr_ * (nesterov_ ? g + momentum_ * v[j] : v[j]);
            }
        }
    }

    void set_lr(S lr) { lr_ = lr; }

  private:
    S lr_, momentum_, weight_decay_;
    bool nesterov_;
    std::vector<Tensor<S>> vel_;
};

template <typename S>
class Adam {
  public:
    Adam(S lr, S beta1 = S(0.9), S beta2 = S(0.999), S eps = S(1e-8))
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const std::vector<ad::Var<S>>& params, const std::vector<Tensor<S>>& grads) {
        if (m_.empty()) {
            for (auto& p : params) {
                m_.emplace_back(p->value.shape(), S(0));
                v_.emplace_back(p->value.shape(), S(0));
            }
        }
        ++t_;
        S bc1 = S(1) - std::pow(beta1_, S(t_));
        S bc2 = S(1) - std::pow(beta2_, S(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& w = params[i]->value;
            for (std::size_t j = 0; j < w.size(); ++j) {
                S g = grads[i][j];
                m_[i][j] = beta1_ * m_[i][j] + (S(1) - beta1_) * g;
                v_[i][j] = beta2_ * v_[i][j] + (S(1) - beta2_) * g * g;
                w[j] -= lr_ * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + eps_);
            }
        }
    }

  private:
    S lr_, beta1_, beta2_, eps_;
    int t_ = 0;
    std::vector<Tensor<S>> m_, v_;
};

// Convenience: tensor-valued gradients for an optimizer step.
template <typename S>
std::vector<Tensor<S>> grad_values(const ad::Var<S>& loss, const std::vector<ad::Var<S>>& params) {
    auto gs = ad::grad(loss, params);
    std::vector<Tensor<S>> out;
    out.reserve(gs.size());
    for (auto& g : gs) out.push_back(g->value);
    return out;
}

}  // namespace gmi::nn

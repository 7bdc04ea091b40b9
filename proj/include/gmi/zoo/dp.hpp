#pragma once

#include <cmath>
#include <vector>

#include "gmi/zoo/accountant.hpp"
#include "gmi/zoo/classifier.hpp"

namespace gmi::zoo {

struct DPConfig {
    double clip_norm = 1.5;
    double noise_ratio = 0.0;  // sigma = noise std / clip_norm
    double delta = 1e-5;
    int epochs = 40;
    std::size_t batch_size = 256;
    double learning_rate = 0.1;
    std::uint64_t seed = 1;
    bool check_clipping = false;  // test mode: assert per-sample norms post-clip

    void validate() const {
        GMI_CHECK_PARAM(clip_norm > 0, "clip_norm must be positive");
        GMI_CHECK_PARAM(noise_ratio >= 0, "noise ratio must be nonnegative");
        GMI_CHECK_PARAM(delta > 0 && delta < 1, "delta must lie in (0,1)");
        GMI_CHECK_PARAM(batch_size >= 1 && epochs >= 1, "batch/epochs must be positive");
    }
};

struct PrivacyReport {
    double epsilon = std::numeric_limits<double>::infinity();
    double delta = 0;
    double noise_ratio = 0;
    double sampling_rate = 0;
    std::size_t steps = 0;
    int order = 0;
    std::vector<std::pair<std::size_t, double>> trace;  // (step, epsilon) per epoch

    json to_json() const {
        json t = json::array();
        for (auto& [s, e] : trace) t.push_back({{"step", s}, {"epsilon", std::isinf(e) ? -1.0 : e}});
        return json{{"epsilon", std::isinf(epsilon) ? -1.0 : epsilon},
                    {"delta", delta},
                    {"noise_ratio", noise_ratio},
                    {"sampling_rate", sampling_rate},
                    {"steps", steps},
                    {"order", order},
                    {"trace", t},
                    {"epsilon_is_infinite", std::isinf(epsilon)}};
    }
};

namespace detail {

// The DP path handles dense stacks (flatten/dense/relu); per-sample gradients
// of a dense layer are rank one, so per-sample norms come from row norms of
// activations and pre-activation gradients instead of materializing B copies.
inline bool dense_only(const ClassifierModel& m) {
    for (auto& l : m.body)
        if (l.kind != LayerRef::dense && l.kind != LayerRef::relu && l.kind != LayerRef::flatten)
            return false;
    return true;
}

}  // namespace detail

inline PrivacyReport train_classifier_dp(ClassifierModel& model, const data::Samples& train,
                                         const DPConfig& cfg) {
    cfg.validate();
    GMI_CHECK(!train.empty(), "train_classifier_dp: empty train set");
    GMI_CHECK(detail::dense_only(model),
              "train_classifier_dp: per-sample clipping implemented for dense stacks "
              "(mnist_mlp_dp_target, softmax_net)");

    const std::size_t N = train.size();
    const std::size_t B = std::min(cfg.batch_size, N);
    const double q = double(B) / double(N);
    const std::size_t steps_per_epoch = (N + B - 1) / B;
    const std::size_t total_steps = steps_per_epoch * std::size_t(cfg.epochs);

    // dense layers in execution order; the head is last
    std::vector<nn::Dense<float>*> layers;
    for (auto& l : model.body)
        if (l.kind == LayerRef::dense) layers.push_back(&model.denses[l.index]);
    layers.push_back(&model.denses.back());

    Rng rng(derive_seed(cfg.seed, "dp_train"));
    Rng noise_rng(derive_seed(cfg.seed, "dp_noise"));
    std::vector<std::size_t> order(N);
    for (std::size_t i = 0; i < N; ++i) order[i] = i;

    const float C = float(cfg.clip_norm);
    const double noise_std = cfg.noise_ratio * cfg.clip_norm;

    PrivacyReport rep;
    rep.delta = cfg.delta;
    rep.noise_ratio = cfg.noise_ratio;
    rep.sampling_rate = q;

    std::size_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        for (std::size_t at = 0; at < N; at += B) {
            std::size_t n = std::min(B, N - at);
            auto x = ad::constant(batch_tensor(train, order, at, n));
            std::vector<std::size_t> labels(n);
            for (std::size_t i = 0; i < n; ++i) labels[i] = std::size_t(train[order[at + i]].label);

            // forward, keeping activations and pre-activations per layer
            auto h = nn::flatten_batch(ad::Var<float>(x));
            std::vector<ad::Var<float>> acts{h}, preacts;
            for (std::size_t li = 0; li < layers.size(); ++li) {
                auto z = layers[li]->forward(h);
                preacts.push_back(z);
                h = li + 1 < layers.size() ? ad::relu(z) : z;
                if (li + 1 < layers.size()) acts.push_back(h);
            }
            auto loss_sum = ad::mul_s(ad::cross_entropy_rows(h, labels), float(n));
            auto deltas = ad::grad(loss_sum, preacts);  // each [n, d_l]; rows are per-sample

            // per-sample gradient norms via the rank-1 structure
            std::vector<float> norm2(n, 0.0f);
            for (std::size_t li = 0; li < layers.size(); ++li) {
                const auto& A = acts[li]->value;
                const auto& D = deltas[li]->value;
                std::size_t da = A.dim(1), dd = D.dim(1);
                for (std::size_t i = 0; i < n; ++i) {
                    float a2 = 0, d2 = 0;
                    const float* ar = A.data() + i * da;
                    const float* dr = D.data() + i * dd;
                    for (std::size_t j = 0; j < da; ++j) a2 += ar[j] * ar[j];
                    for (std::size_t j = 0; j < dd; ++j) d2 += dr[j] * dr[j];
                    norm2[i] += a2 * d2 + d2;  // weight block + bias block
                }
            }
            std::vector<float> scale(n);
            for (std::size_t i = 0; i < n; ++i) {
                float nrm = std::sqrt(norm2[i]);
                scale[i] = nrm > C ? C / nrm : 1.0f;
                if (cfg.check_clipping)
                    GMI_CHECK(double(nrm) * scale[i] <= cfg.clip_norm + 1e-6,
                              "dp clipping invariant violated");
            }

            // clipped sums, noised, averaged, applied
            for (std::size_t li = 0; li < layers.size(); ++li) {
                const auto& A = acts[li]->value;
                const auto& D = deltas[li]->value;
                std::size_t da = A.dim(1), dd = D.dim(1);
                TensorF As = A;
                for (std::size_t i = 0; i < n; ++i) {
                    float* row = As.data() + i * da;
                    for (std::size_t j = 0; j < da; ++j) row[j] *= scale[i];
                }
                TensorF gw(Shape{da, dd});
                gw.mat(da, dd).noalias() = As.mat(n, da).transpose() * D.mat(n, dd);
                TensorF gb(Shape{dd}, 0.0f);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < dd; ++j) gb[j] += scale[i] * D.data()[i * dd + j];
                if (noise_std > 0) {
                    for (auto& v : gw) v += float(noise_std * noise_rng.normal());
                    for (auto& v : gb) v += float(noise_std * noise_rng.normal());
                }
                float lr_over_n = float(cfg.learning_rate) / float(n);
                auto& W = layers[li]->W->value;
                auto& bb = layers[li]->b->value;
                for (std::size_t j = 0; j < W.size(); ++j) W[j] -= lr_over_n * gw[j];
                for (std::size_t j = 0; j < bb.size(); ++j) bb[j] -= lr_over_n * gb[j];
            }
            ++step;
        }
        rep.trace.emplace_back(step, compute_epsilon(cfg.noise_ratio, q, step, cfg.delta));
    }

    rep.steps = total_steps;
    auto res = compute_epsilon_detail(cfg.noise_ratio, q, total_steps, cfg.delta);
    rep.epsilon = res.epsilon;
    rep.order = res.order;
    return rep;
}

}  // namespace gmi::zoo

#pragma once

#include <vector>

#include "gmi/core/autodiff.hpp"
#include "gmi/data/dataset.hpp"
#include "gmi/nn/modules.hpp"
#include "gmi/nn/optim.hpp"

namespace gmi::data {

struct AugmentConfig {
    int latent_dim = 32;
    std::size_t pairs = 0;
    int interpolation_points = 1;
    int train_epochs = 8;
    std::size_t batch_size = 64;
    float learning_rate = 1e-3f;
    std::uint64_t seed = 1;
};

// Public-set augmentation: fit a small dense autoencoder on the public
// images, then decode convex combinations of encoded pairs. Interpolants are
// unlabeled; they may feed GAN training only.
inline Samples augment_public_autoencoder(const Samples& pub, const AugmentConfig& cfg) {
    GMI_CHECK_PARAM(cfg.latent_dim > 0, "augment: latent_dim must be positive");
    GMI_CHECK_PARAM(cfg.interpolation_points >= 1, "augment: interpolation_points must be >= 1");
    GMI_CHECK(!pub.empty(), "augment: empty public set");

    Samples out = pub;
    if (cfg.pairs == 0) return out;

    const Shape img_shape = pub[0].image.shape();
    const std::size_t d = shape_numel(img_shape);
    Rng rng(derive_seed(cfg.seed, "augment"));

    nn::Dense<float> enc1(d, 256, rng), enc2(256, std::size_t(cfg.latent_dim), rng);
    nn::Dense<float> dec1(std::size_t(cfg.latent_dim), 256, rng), dec2(256, d, rng);
    std::vector<ad::Var<float>> params;
    for (auto* l : {&enc1, &enc2, &dec1, &dec2})
        for (auto& p : l->params()) params.push_back(p);

    auto encode = [&](const ad::Var<float>& x) { return enc2.forward(ad::relu(enc1.forward(x))); };
    auto decode = [&](const ad::Var<float>& z) {
        return ad::sigmoid_(dec2.forward(ad::relu(dec1.forward(z))));
    };

    nn::Adam<float> opt(cfg.learning_rate);
    std::vector<std::size_t> order(pub.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.train_epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        for (std::size_t at = 0; at + cfg.batch_size <= order.size(); at += cfg.batch_size) {
            TensorF batch(Shape{cfg.batch_size, d});
            for (std::size_t i = 0; i < cfg.batch_size; ++i)
                std::copy(pub[order[at + i]].image.begin(), pub[order[at + i]].image.end(),
                          batch.data() + i * d);
            auto x = ad::constant(std::move(batch));
            auto rec = decode(encode(x));
            auto diff = ad::sub(rec, x);
            auto loss = ad::mean_all(ad::mul(diff, diff));
            opt.step(params, nn::grad_values(loss, params));
        }
    }

    for (std::size_t p = 0; p < cfg.pairs; ++p) {
        std::size_t i = rng.index(pub.size());
        std::size_t j = rng.index(pub.size());
        TensorF two(Shape{2, d});
        std::copy(pub[i].image.begin(), pub[i].image.end(), two.data());
        std::copy(pub[j].image.begin(), pub[j].image.end(), two.data() + d);
        auto z = encode(ad::constant(std::move(two)));
        for (int t = 1; t <= cfg.interpolation_points; ++t) {
            float w = float(t) / float(cfg.interpolation_points + 1);
            TensorF zi(Shape{1, std::size_t(cfg.latent_dim)});
            for (int q = 0; q < cfg.latent_dim; ++q)
                zi[std::size_t(q)] = (1 - w) * z->value[std::size_t(q)] +
                                     w * z->value[std::size_t(cfg.latent_dim + q)];
            auto img = decode(ad::constant(std::move(zi)));
            ImageSample s;
            s.label = kUnlabeled;
            s.image = img->value.reshaped(img_shape);
            out.push_back(std::move(s));
        }
    }
    return out;
}

}  // namespace gmi::data

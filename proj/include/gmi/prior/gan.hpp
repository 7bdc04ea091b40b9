#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "gmi/core/autodiff.hpp"
#include "gmi/core/serialize.hpp"
#include "gmi/data/dataset.hpp"
#include "gmi/data/mask.hpp"
#include "gmi/nn/modules.hpp"
#include "gmi/nn/optim.hpp"
#include "gmi/zoo/classifier.hpp"

namespace gmi::prior {

using ad::Var;

struct GanTrainConfig {
    double lambda_div = 0.5;
    double adam_lr = 0.004, beta1 = 0.5, beta2 = 0.999;
    std::size_t batch_size = 64;
    std::size_t generator_steps = 10000;
    std::size_t critic_steps = 5;  // critic updates per generator update
    double gp_weight = 10.0;
    double recon_weight = 1.0;  // visible-pixel guidance when aux present
    data::MaskSpec mask_spec;   // corrupted mode
    double blur_sigma = 3.0;    // blurred mode
    std::size_t blur_kernel = 9;
    std::uint64_t seed = 1;

    void validate() const {
        GMI_CHECK_PARAM(lambda_div >= 0, "lambda_div must be nonnegative");
        GMI_CHECK_PARAM(gp_weight >= 0, "gp weight must be nonnegative");
        GMI_CHECK_PARAM(batch_size >= 2, "gan batch size must be >= 2");
        GMI_CHECK_PARAM(critic_steps >= 1, "critic_steps must be >= 1");
    }
    std::string digest() const {
        std::string d = "gan/" + fmt_g(lambda_div) + "/" + fmt_g(adam_lr) + "/" +
                        std::to_string(batch_size) + "/" + std::to_string(generator_steps) + "/" +
                        std::to_string(critic_steps) + "/" + fmt_g(gp_weight) + "/" +
                        fmt_g(recon_weight) + "/" + std::to_string(seed);
        return digest_hex(digest_of(d));
    }
};

// ----------------------------------------------------------------- networks

// Two-branch generator: a latent (lower) encoder, an optional auxiliary
// (upper) encoder with dilated layers, and a shared decoder. The decoder
// output is tanh-bounded and affinely mapped to [0,1]. Batch norm after every
// hidden layer keeps the tanh out of its saturation basin (mostly-black
// image data otherwise drives the whole decoder dead early in training).
struct Generator {
    data::AuxMode aux_mode = data::AuxMode::none;
    Shape data_shape;  // {C,H,W}
    std::size_t latent_dim = 0;

    nn::Dense<float> fc;
    Shape fc_chw;  // reshape target after fc
    std::vector<nn::Deconv2d<float>> lower;
    std::vector<nn::Conv2d<float>> upper;
    std::vector<nn::Deconv2d<float>> dec_deconvs;
    std::vector<nn::Conv2d<float>> dec_convs;
    std::vector<nn::BatchNorm<float>> bns;  // consumed in forward order; may be empty

    std::vector<Var<float>> params() {
        std::vector<Var<float>> out;
        for (auto& p : fc.params()) out.push_back(p);
        auto take = [&out](auto& layers) {
            for (auto& l : layers)
                for (auto& p : l.params()) out.push_back(p);
        };
        take(lower);
        take(upper);
        take(dec_deconvs);
        take(dec_convs);
        take(bns);
        return out;
    }

    std::size_t aux_channels() const {
        if (aux_mode == data::AuxMode::corrupted) return data_shape[0] + 1;  // image + mask plane
        if (aux_mode == data::AuxMode::blurred) return data_shape[0];
        return 0;
    }

    // z: [N, latent_dim]; aux_in: [N, aux_channels, H, W] when conditioned.
    Var<float> forward(const Var<float>& z, const Var<float>* aux_in, bool train = false) {
        GMI_CHECK_SHAPE(z->value.rank() == 2 && z->value.dim(1) == latent_dim,
                        "generator: latent shape mismatch");
        GMI_CHECK((aux_mode == data::AuxMode::none) == (aux_in == nullptr),
                  "generator: auxiliary payload required iff aux_mode != none");
        std::size_t n = z->value.dim(0);
        std::size_t bn_at = 0;
        auto norm = [&](Var<float> h) {
            if (bn_at < bns.size()) h = bns[bn_at++].forward_nchw(h, train);
            return h;
        };
        auto h = ad::reshape(fc.forward(z), Shape{n, fc_chw[0], fc_chw[1], fc_chw[2]});
        h = ad::leaky_relu(norm(h), 0.2f);
        for (auto& d : lower) h = ad::leaky_relu(norm(d.forward(h)), 0.2f);
        if (aux_in) {
            auto u = *aux_in;
            for (auto& c : upper) u = ad::leaky_relu(norm(c.forward(u)), 0.2f);
            h = ad::concat(h, u, 1);
        }
        for (auto& d : dec_deconvs) h = ad::leaky_relu(norm(d.forward(h)), 0.2f);
        for (std::size_t i = 0; i + 1 < dec_convs.size(); ++i)
            h = ad::leaky_relu(norm(dec_convs[i].forward(h)), 0.2f);
        auto out = ad::tanh_(dec_convs.back().forward(h));
        return ad::add_s(ad::mul_s(out, 0.5f), 0.5f);
    }
};

// One unbounded scalar score per image (patch); plain conv stack, no norm.
struct Discriminator {
    std::vector<nn::Conv2d<float>> convs;

    std::vector<Var<float>> params() {
        std::vector<Var<float>> out;
        for (auto& c : convs)
            for (auto& p : c.params()) out.push_back(p);
        return out;
    }
    Var<float> forward(const Var<float>& x) {
        auto h = x;
        for (std::size_t i = 0; i + 1 < convs.size(); ++i)
            h = ad::leaky_relu(convs[i].forward(h), 0.2f);
        h = convs.back().forward(h);
        GMI_CHECK_SHAPE(h->value.dim(1) == 1 && h->value.dim(2) == 1 && h->value.dim(3) == 1,
                        "discriminator: expected a single score per image");
        return ad::reshape(h, Shape{h->value.dim(0), 1});
    }
};

// Global always; local only for the corrupted-aux attack. Scores stay
// separate and are summed at the loss level, never fused.
struct DiscriminatorSet {
    Discriminator global_d;
    std::optional<Discriminator> local_d;
    std::size_t patch_size = 0;

    std::vector<Var<float>> params() {
        auto out = global_d.params();
        if (local_d)
            for (auto& p : local_d->params()) out.push_back(p);
        return out;
    }
};

struct PriorNetworks {
    Generator gen;
    DiscriminatorSet disc;
};

inline PriorNetworks build_prior_networks(Shape data_shape, std::size_t latent_dim,
                                          data::AuxMode aux_mode, std::uint64_t seed = 1) {
    GMI_CHECK_PARAM(latent_dim > 0, "latent_dim must be positive");
    GMI_CHECK_SHAPE(data_shape.size() == 3, "data shape must be [C,H,W]");
    std::size_t C = data_shape[0], H = data_shape[1], W = data_shape[2];
    GMI_CHECK_SHAPE((H == 64 && W == 64) || (H == 28 && W == 28),
                    "unsupported data shape " + shape_str(data_shape) + " (64x64 or 28x28)");
    Rng rng(derive_seed(seed, "prior_init"));

    PriorNetworks nets;
    Generator& g = nets.gen;
    g.aux_mode = aux_mode;
    g.data_shape = data_shape;
    g.latent_dim = latent_dim;
    bool has_aux = aux_mode != data::AuxMode::none;
    std::size_t ain = g.aux_channels();

    if (H == 64) {
        g.fc = nn::Dense<float>(latent_dim, 512 * 4 * 4, rng);
        g.fc_chw = {512, 4, 4};
        g.lower.emplace_back(512, 256, 5, 2, 2, rng);  // 8x8
        g.lower.emplace_back(256, 128, 5, 2, 2, rng);  // 16x16
        if (has_aux) {
            g.upper.emplace_back(ain, 32, 5, 1, 2, rng);
            g.upper.emplace_back(32, 64, 3, 2, 1, rng);   // 32
            g.upper.emplace_back(64, 128, 3, 1, 1, rng);
            g.upper.emplace_back(128, 128, 3, 2, 1, rng);  // 16
            g.upper.emplace_back(128, 128, 3, 1, 1, rng);
            g.upper.emplace_back(128, 128, 3, 1, 1, rng);
            g.upper.emplace_back(128, 128, 3, 1, 2, rng, 2);   // dilation 2
            g.upper.emplace_back(128, 128, 3, 1, 4, rng, 4);   // dilation 4
            g.upper.emplace_back(128, 128, 3, 1, 8, rng, 8);   // dilation 8
            g.upper.emplace_back(128, 128, 3, 1, 16, rng, 16); // dilation 16
        }
        std::size_t dec_in = has_aux ? 256 : 128;
        g.dec_deconvs.emplace_back(dec_in, 128, 5, 2, 2, rng);  // 32
        g.dec_deconvs.emplace_back(128, 64, 5, 2, 2, rng);      // 64
        g.dec_convs.emplace_back(64, 32, 3, 1, 1, rng);
        g.dec_convs.emplace_back(32, C, 3, 1, 1, rng);

        nets.disc.global_d.convs.emplace_back(C, 64, 5, 2, 2, rng);    // 32
        nets.disc.global_d.convs.emplace_back(64, 128, 5, 2, 2, rng);  // 16
        nets.disc.global_d.convs.emplace_back(128, 256, 5, 2, 2, rng); // 8
        nets.disc.global_d.convs.emplace_back(256, 512, 5, 2, 2, rng); // 4
        nets.disc.global_d.convs.emplace_back(512, 1, 1, 4, 0, rng);   // 1
        if (aux_mode == data::AuxMode::corrupted) {
            nets.disc.patch_size = 32;
            Discriminator local;
            local.convs.emplace_back(C, 64, 5, 2, 2, rng);    // 16
            local.convs.emplace_back(64, 128, 5, 2, 2, rng);  // 8
            local.convs.emplace_back(128, 256, 5, 2, 2, rng); // 4
            local.convs.emplace_back(256, 1, 1, 4, 0, rng);   // 1
            nets.disc.local_d = std::move(local);
        }
    } else {
        // 28x28 adaptation: reduced channels and kernel geometry
        g.fc = nn::Dense<float>(latent_dim, 48 * 7 * 7, rng);
        g.fc_chw = {48, 7, 7};
        g.lower.emplace_back(48, 48, 5, 2, 2, rng);  // 14x14
        if (has_aux) {
            g.upper.emplace_back(ain, 16, 5, 1, 2, rng);
            g.upper.emplace_back(16, 24, 3, 2, 1, rng);  // 14
            g.upper.emplace_back(24, 48, 3, 1, 1, rng);
            g.upper.emplace_back(48, 48, 3, 1, 2, rng, 2);  // dilation 2
            g.upper.emplace_back(48, 48, 3, 1, 4, rng, 4);  // dilation 4
        }
        std::size_t dec_in = has_aux ? 96 : 48;
        g.dec_deconvs.emplace_back(dec_in, 32, 5, 2, 2, rng);  // 28
        g.dec_convs.emplace_back(32, 16, 3, 1, 1, rng);
        g.dec_convs.emplace_back(16, C, 3, 1, 1, rng);

        nets.disc.global_d.convs.emplace_back(C, 24, 5, 2, 2, rng);  // 14
        nets.disc.global_d.convs.emplace_back(24, 48, 5, 2, 2, rng); // 7
        nets.disc.global_d.convs.emplace_back(48, 96, 3, 2, 1, rng); // 4
        nets.disc.global_d.convs.emplace_back(96, 1, 1, 4, 0, rng);  // 1
        if (aux_mode == data::AuxMode::corrupted) {
            nets.disc.patch_size = 14;
            Discriminator local;
            local.convs.emplace_back(C, 24, 5, 2, 2, rng);  // 7
            local.convs.emplace_back(24, 48, 5, 2, 2, rng); // 4
            local.convs.emplace_back(48, 1, 1, 4, 0, rng);  // 1
            nets.disc.local_d = std::move(local);
        }
    }
    // generator batch norms, in forward consumption order
    Generator& gg = nets.gen;
    gg.bns.emplace_back(gg.fc_chw[0]);
    for (auto& d : gg.lower) gg.bns.emplace_back(d.out_c);
    for (auto& c : gg.upper) gg.bns.emplace_back(c.out_c);
    for (auto& d : gg.dec_deconvs) gg.bns.emplace_back(d.out_c);
    for (std::size_t i = 0; i + 1 < gg.dec_convs.size(); ++i)
        gg.bns.emplace_back(gg.dec_convs[i].out_c);
    return nets;
}

// ------------------------------------------------------------------- losses

// critic loss = -(E[D(real)] - E[D(fake)]); generator adversarial loss =
// -E[D(fake)]. Computed from per-image score columns.
template <typename S>
std::pair<Var<S>, Var<S>> wgan_losses_from_scores(const Var<S>& d_real, const Var<S>& d_fake) {
    GMI_CHECK_SHAPE(!d_real->value.empty() && !d_fake->value.empty(), "wgan: empty score batch");
    auto est = ad::sub(ad::mean_all(d_real), ad::mean_all(d_fake));
    return {ad::neg(est), ad::neg(ad::mean_all(d_fake))};
}

template <typename S, typename DFn>
std::pair<Var<S>, Var<S>> wgan_losses(DFn&& critic, const Var<S>& real, const Var<S>& fake) {
    GMI_CHECK_SHAPE(real->value.shape() == fake->value.shape(), "wgan: real/fake shape mismatch");
    return wgan_losses_from_scores<S>(critic(real), critic(fake));
}

// Eq.-style diversity: mean over ordered cross pairs of
// ||F(G(z1)) - F(G(z2))|| / ||z1 - z2||, via the Gram-matrix expansion.
template <typename S, typename GFn, typename FFn>
Var<S> diversity_loss(GFn&& G, FFn&& F, const Tensor<S>& z1, const Tensor<S>& z2) {
    GMI_CHECK_SHAPE(z1.rank() == 2 && z1.shape() == z2.shape(), "diversity: z batch shape mismatch");
    std::size_t m = z1.dim(0), zd = z1.dim(1);
    Tensor<S> zdist(Shape{m, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            S acc = 0;
            for (std::size_t k = 0; k < zd; ++k) {
                S d = z1[i * zd + k] - z2[j * zd + k];
                acc += d * d;
            }
            GMI_CHECK_PARAM(acc > 0, "diversity: zero-distance latent pair rejected");
            zdist[i * m + j] = std::sqrt(acc);
        }
    auto f1 = F(G(ad::constant(z1)));
    auto f2 = F(G(ad::constant(z2)));
    GMI_CHECK_SHAPE(f1->value.rank() == 2 && f1->value.dim(0) == m, "diversity: feature shape");
    auto gram = ad::matmul(f1, ad::transpose(f2));
    auto r1 = ad::rowsum(ad::mul(f1, f1));
    auto r2 = ad::rowsum(ad::mul(f2, f2));
    auto d2 = ad::add(ad::sub(ad::broadcast_cols(r1, m), ad::mul_s(gram, S(2))),
                      ad::broadcast_rows(r2, m));
    auto dist = ad::sqrt_(ad::add_s(ad::relu(d2), S(1e-24)));  // guard fp negatives / collapse
    return ad::mean_all(ad::div(dist, ad::constant(std::move(zdist))));
}

// penalty = weight * E over interpolates of (||grad_x D(x)||_2 - 1)^2.
template <typename S, typename DFn>
Var<S> gradient_penalty(DFn&& critic, const Tensor<S>& real, const Tensor<S>& fake, S weight,
                        Rng& rng) {
    GMI_CHECK_PARAM(weight >= 0, "gradient penalty weight must be nonnegative");
    GMI_CHECK_SHAPE(real.shape() == fake.shape(), "gradient penalty: shape mismatch");
    if (weight == 0) return ad::constant_scalar(S(0));
    std::size_t n = real.dim(0);
    std::size_t d = real.size() / n;
    Tensor<S> mix(real.shape());
    for (std::size_t i = 0; i < n; ++i) {
        S eps = S(rng.uniform());
        for (std::size_t j = 0; j < d; ++j)
            mix[i * d + j] = eps * real[i * d + j] + (S(1) - eps) * fake[i * d + j];
    }
    auto x = ad::leaf(std::move(mix));
    auto scores = critic(x);
    auto gx = ad::grad(ad::sum_all(scores), {x})[0];  // per-sample rows
    auto flat = ad::reshape(gx, Shape{n, d});
    auto norms = ad::sqrt_(ad::add_s(ad::rowsum(ad::mul(flat, flat)), S(1e-24)));
    auto dev = ad::add_s(norms, S(-1));
    return ad::mul_s(ad::mean_all(ad::mul(dev, dev)), weight);
}

// ------------------------------------------------------------- local patch

// Seeded choice of a patch window that straddles the mask boundary.
struct PatchPos {
    std::size_t y = 0, x = 0;
};

inline PatchPos local_patch_pos(const TensorF& mask, std::size_t patch, Rng& rng) {
    std::size_t h = mask.dim(0), w = mask.dim(1);
    GMI_CHECK_PARAM(patch <= h && patch <= w, "local_patch: patch larger than image");
    // prefix sums for O(1) window occupancy
    std::vector<std::size_t> ps((h + 1) * (w + 1), 0);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            ps[(y + 1) * (w + 1) + x + 1] = ps[y * (w + 1) + x + 1] + ps[(y + 1) * (w + 1) + x] -
                                            ps[y * (w + 1) + x] + (mask[y * w + x] != 0.0f ? 1 : 0);
    auto window = [&](std::size_t y, std::size_t x) {
        return ps[(y + patch) * (w + 1) + x + patch] - ps[y * (w + 1) + x + patch] -
               ps[(y + patch) * (w + 1) + x] + ps[y * (w + 1) + x];
    };
    std::vector<PatchPos> candidates;
    for (std::size_t y = 0; y + patch <= h; ++y)
        for (std::size_t x = 0; x + patch <= w; ++x) {
            std::size_t ones = window(y, x);
            if (ones > 0 && ones < patch * patch) candidates.push_back({y, x});
        }
    if (candidates.empty()) throw ParamError("local_patch: mask has no boundary inside any window");
    return candidates[rng.index(candidates.size())];
}

inline TensorF local_patch(const TensorF& image, const TensorF& mask, std::size_t patch,
                           std::uint64_t seed) {
    GMI_CHECK_SHAPE(image.rank() == 3 && mask.rank() == 2 && image.dim(1) == mask.dim(0) &&
                        image.dim(2) == mask.dim(1),
                    "local_patch: image/mask mismatch");
    Rng rng(derive_seed(seed, "local_patch"));
    auto pos = local_patch_pos(mask, patch, rng);
    std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
    TensorF out(Shape{C, patch, patch});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < patch; ++y)
            for (std::size_t x = 0; x < patch; ++x)
                out[(c * patch + y) * patch + x] = image[(c * H + pos.y + y) * W + pos.x + x];
    return out;
}

// Differentiable batched patch extraction at per-image positions.
inline Var<float> extract_patches(const Var<float>& images, const std::vector<PatchPos>& pos,
                                  std::size_t patch) {
    const Shape& s = images->value.shape();
    std::vector<Var<float>> slices;
    slices.reserve(s[0]);
    for (std::size_t i = 0; i < s[0]; ++i) {
        auto one = ad::narrow(images, 0, i, 1);
        one = ad::narrow(one, 2, pos[i].y, patch);
        one = ad::narrow(one, 3, pos[i].x, patch);
        slices.push_back(one);
    }
    auto out = slices[0];
    for (std::size_t i = 1; i < slices.size(); ++i) out = ad::concat(out, slices[i], 0);
    return out;
}

// -------------------------------------------------------------- checkpoint

struct TraceRow {
    std::size_t step = 0;
    double critic_loss = 0, gen_loss = 0, diversity = 0, penalty = 0;
};

struct PriorCheckpoint {
    PriorNetworks nets;
    std::string config_digest;
    std::string feature_digest;  // digest of the F used by the diversity loss
    bool has_diversity = false;
    std::vector<TraceRow> trace;

    data::AuxMode aux_mode() const { return nets.gen.aux_mode; }
};

inline std::string trace_csv(const PriorCheckpoint& ck) {
    std::string out = ck.has_diversity ? "step,critic_loss,gen_loss,diversity,penalty\n"
                                       : "step,critic_loss,gen_loss,penalty\n";
    for (auto& r : ck.trace) {
        out += std::to_string(r.step) + "," + fmt_g(r.critic_loss) + "," + fmt_g(r.gen_loss);
        if (ck.has_diversity) out += "," + fmt_g(r.diversity);
        out += "," + fmt_g(r.penalty) + "\n";
    }
    return out;
}

inline void save_prior(const std::filesystem::path& path, PriorCheckpoint& ck) {
    json header{{"kind", "prior"},
                {"aux_mode", data::aux_mode_name(ck.nets.gen.aux_mode)},
                {"data_shape", ck.nets.gen.data_shape},
                {"latent_dim", ck.nets.gen.latent_dim},
                {"config_digest", ck.config_digest},
                {"feature_digest", ck.feature_digest},
                {"has_diversity", ck.has_diversity}};
    std::vector<const TensorF*> tensors;
    auto gp = ck.nets.gen.params();
    auto dp = ck.nets.disc.params();
    header["gen_tensors"] = gp.size();
    header["gen_bns"] = ck.nets.gen.bns.size();
    for (auto& p : gp) tensors.push_back(&p->value);
    for (auto& p : dp) tensors.push_back(&p->value);
    for (auto& bn : ck.nets.gen.bns) {
        tensors.push_back(&bn.run_mean);
        tensors.push_back(&bn.run_var);
    }
    ckpt::save(path, header, tensors);
}

inline PriorCheckpoint load_prior(const std::filesystem::path& path) {
    auto loaded = ckpt::load(path);
    auto& h = loaded.header;
    GMI_CHECK(h.at("kind") == "prior", "not a prior checkpoint: " + path.string());
    PriorCheckpoint ck;
    ck.nets = build_prior_networks(h.at("data_shape").get<Shape>(), h.at("latent_dim").get<std::size_t>(),
                                   data::parse_aux_mode(h.at("aux_mode").get<std::string>()));
    ck.config_digest = h.at("config_digest").get<std::string>();
    ck.feature_digest = h.at("feature_digest").get<std::string>();
    ck.has_diversity = h.at("has_diversity").get<bool>();
    auto gp = ck.nets.gen.params();
    auto dp = ck.nets.disc.params();
    std::size_t nbn = ck.nets.gen.bns.size();
    GMI_CHECK(loaded.tensors.size() == gp.size() + dp.size() + 2 * nbn,
              "prior checkpoint: tensor count mismatch");
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i]->value = loaded.tensors[i];
    for (std::size_t i = 0; i < dp.size(); ++i) dp[i]->value = loaded.tensors[gp.size() + i];
    for (std::size_t i = 0; i < nbn; ++i) {
        ck.nets.gen.bns[i].run_mean = loaded.tensors[gp.size() + dp.size() + 2 * i];
        ck.nets.gen.bns[i].run_var = loaded.tensors[gp.size() + dp.size() + 2 * i + 1];
    }
    return ck;
}

// ----------------------------------------------------------------- sampling

// Builds the [N, C(+1), H, W] conditioning tensor for a batch of aux payloads.
inline TensorF aux_input_tensor(const Generator& g, const std::vector<data::AuxKnowledge>& aux) {
    std::size_t n = aux.size();
    std::size_t C = g.data_shape[0], H = g.data_shape[1], W = g.data_shape[2];
    std::size_t ac = g.aux_channels();
    TensorF in(Shape{n, ac, H, W});
    for (std::size_t i = 0; i < n; ++i) {
        GMI_CHECK(aux[i].mode == g.aux_mode, "aux mode mismatch with generator");
        std::copy(aux[i].image.begin(), aux[i].image.end(), in.data() + i * ac * H * W);
        if (g.aux_mode == data::AuxMode::corrupted)
            std::copy(aux[i].mask.begin(), aux[i].mask.end(), in.data() + (i * ac + C) * H * W);
    }
    return in;
}

// Batched generator output with the corrupted-mode composite applied:
// visible pixels come from the aux image bit-exact, masked pixels from G.
inline Var<float> generate_images(Generator& g, const Var<float>& z,
                                  const std::vector<data::AuxKnowledge>* aux, bool train = false) {
    if (g.aux_mode == data::AuxMode::none) {
        GMI_CHECK(aux == nullptr || aux->empty(), "generator without aux mode got a payload");
        return g.forward(z, nullptr, train);
    }
    GMI_CHECK(aux && aux->size() == z->value.dim(0), "generator: aux payload batch mismatch");
    auto in = ad::constant(aux_input_tensor(g, *aux));
    auto raw = g.forward(z, &in, train);
    if (g.aux_mode == data::AuxMode::blurred) return raw;
    // composite = aux*(1-m) + raw*m
    std::size_t n = z->value.dim(0);
    std::size_t C = g.data_shape[0], HW = g.data_shape[1] * g.data_shape[2];
    TensorF keep(raw->value.shape()), base(raw->value.shape());
    for (std::size_t i = 0; i < n; ++i) {
        const auto& a = (*aux)[i];
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t j = 0; j < HW; ++j) {
                bool hidden = a.mask[j] != 0.0f;
                keep[(i * C + c) * HW + j] = hidden ? 1.0f : 0.0f;
                base[(i * C + c) * HW + j] = hidden ? 0.0f : a.image[c * HW + j];
            }
    }
    return ad::add(ad::mul(raw, ad::constant(std::move(keep))), ad::constant(std::move(base)));
}

inline TensorF sample_prior(Generator& g, const TensorF& z, const data::AuxKnowledge& aux) {
    GMI_CHECK(aux.mode == g.aux_mode, "sample_prior: aux mode mismatch");
    auto zv = ad::constant(z.reshaped(Shape{1, g.latent_dim}));
    std::vector<data::AuxKnowledge> one{aux};
    auto img = generate_images(g, zv, g.aux_mode == data::AuxMode::none ? nullptr : &one);
    return img->value.reshaped(g.data_shape);
}

// ----------------------------------------------------------------- training

namespace detail {

struct BatchStream {
    const data::Samples& set;
    std::vector<std::size_t> order;
    std::size_t at = 0;
    Rng rng;

    BatchStream(const data::Samples& s, std::uint64_t seed) : set(s), rng(derive_seed(seed, "gan_batches")) {
        order.resize(set.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order.begin(), order.end());
    }
    std::vector<std::size_t> next(std::size_t n) {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) {
            if (at == order.size()) {
                rng.shuffle(order.begin(), order.end());
                at = 0;
            }
            idx[i] = order[at++];
        }
        return idx;
    }
};

}  // namespace detail

// Stage 1: min_G max_D L_wgan - lambda_d * L_div, with gradient penalty and,
// in conditioned modes, visible-pixel reconstruction guidance.
inline PriorCheckpoint train_prior(PriorNetworks nets, const data::Samples& public_set,
                                   zoo::ClassifierModel* F, const GanTrainConfig& cfg) {
    cfg.validate();
    GMI_CHECK(!public_set.empty(), "train_prior: empty public set");
    GMI_CHECK(cfg.lambda_div == 0 || F != nullptr, "train_prior: lambda_div > 0 requires a feature extractor");

    Generator& G = nets.gen;
    DiscriminatorSet& D = nets.disc;
    const Shape& ds = G.data_shape;
    std::size_t C = ds[0], H = ds[1], W = ds[2];
    GMI_CHECK_SHAPE(public_set[0].image.shape() == ds, "train_prior: data/network shape mismatch");
    const std::size_t B = cfg.batch_size;
    const bool corrupted = G.aux_mode == data::AuxMode::corrupted;
    const bool has_aux = G.aux_mode != data::AuxMode::none;

    TensorF mask;
    if (corrupted) mask = data::render_mask(cfg.mask_spec, H, W);

    Rng rng(derive_seed(cfg.seed, "gan_train"));
    detail::BatchStream stream(public_set, cfg.seed);
    auto g_params = G.params();
    auto d_params = D.params();
    nn::Adam<float> g_opt(float(cfg.adam_lr), float(cfg.beta1), float(cfg.beta2));
    nn::Adam<float> d_opt(float(cfg.adam_lr), float(cfg.beta1), float(cfg.beta2));

    auto make_batch = [&](const std::vector<std::size_t>& idx, TensorF& real,
                          std::vector<data::AuxKnowledge>& aux) {
        std::size_t n = idx.size();
        real = TensorF(Shape{n, C, H, W});
        aux.clear();
        for (std::size_t i = 0; i < n; ++i) {
            const auto& s = public_set[idx[i]];
            std::copy(s.image.begin(), s.image.end(), real.data() + i * C * H * W);
            if (corrupted)
                aux.push_back(data::apply_corruption(s, mask));
            else if (G.aux_mode == data::AuxMode::blurred)
                aux.push_back(data::apply_blur(s, cfg.blur_sigma, cfg.blur_kernel));
        }
    };

    auto fake_batch = [&](std::size_t n, std::vector<data::AuxKnowledge>& aux, TensorF* z_out = nullptr) {
        TensorF z(Shape{n, G.latent_dim});
        rng.fill_normal(z);
        if (z_out) *z_out = z;
        auto img = generate_images(G, ad::constant(z), has_aux ? &aux : nullptr, /*train=*/true);
        return img;
    };

    auto patch_positions = [&](std::size_t n) {
        std::vector<PatchPos> pos(n);
        for (auto& p : pos) p = local_patch_pos(mask, D.patch_size, rng);
        return pos;
    };

    PriorCheckpoint ck;
    ck.config_digest = cfg.digest();
    ck.feature_digest = (cfg.lambda_div > 0 && F) ? F->digest() : "";
    ck.has_diversity = cfg.lambda_div > 0;

    double last_critic = 0, last_pen = 0;
    for (std::size_t gs = 1; gs <= cfg.generator_steps; ++gs) {
        for (std::size_t cs = 0; cs < cfg.critic_steps; ++cs) {
            TensorF real;
            std::vector<data::AuxKnowledge> aux;
            make_batch(stream.next(B), real, aux);
            auto fake_v = fake_batch(B, aux);
            TensorF fake = fake_v->value;  // critic step treats G output as data

            auto d_real = D.global_d.forward(ad::constant(real));
            auto d_fake = D.global_d.forward(ad::constant(fake));
            auto [critic_loss, gen_adv_unused] = wgan_losses_from_scores<float>(d_real, d_fake);
            auto global_critic = [&](const Var<float>& x) { return D.global_d.forward(x); };
            auto pen = gradient_penalty<float>(global_critic, real, fake, float(cfg.gp_weight), rng);
            auto total = ad::add(critic_loss, pen);
            if (D.local_d) {
                auto pos_r = patch_positions(B);
                auto pos_f = patch_positions(B);
                auto real_p = extract_patches(ad::constant(real), pos_r, D.patch_size);
                auto fake_p = extract_patches(ad::constant(fake), pos_f, D.patch_size);
                auto dr = D.local_d->forward(real_p);
                auto df = D.local_d->forward(fake_p);
                auto [local_loss, lg_unused] = wgan_losses_from_scores<float>(dr, df);
                auto local_critic = [&](const Var<float>& x) { return D.local_d->forward(x); };
                auto lpen = gradient_penalty<float>(local_critic, real_p->value, fake_p->value,
                                                    float(cfg.gp_weight), rng);
                total = ad::add(total, ad::add(local_loss, lpen));
                last_pen = double(pen->value[0] + lpen->value[0]);
            } else {
                last_pen = double(pen->value[0]);
            }
            last_critic = double(critic_loss->value[0]);
            if (!std::isfinite(total->value[0]))
                throw StageError("train_prior: critic loss diverged at step " + std::to_string(gs));
            d_opt.step(d_params, nn::grad_values(total, d_params));
        }

        // generator step
        TensorF real;
        std::vector<data::AuxKnowledge> aux;
        make_batch(stream.next(B), real, aux);
        TensorF z;
        auto fake = fake_batch(B, aux, &z);
        auto adv = ad::neg(ad::mean_all(D.global_d.forward(fake)));
        if (D.local_d) {
            auto pos = patch_positions(B);
            adv = ad::add(adv, ad::neg(ad::mean_all(D.local_d->forward(extract_patches(fake, pos, D.patch_size)))));
        }
        auto g_loss = adv;
        if (has_aux && cfg.recon_weight > 0) {
            // pull the generated content toward the known public source
            TensorF weight(fake->value.shape(), 1.0f);
            if (corrupted) {
                std::size_t HWp = H * W;
                for (std::size_t i = 0; i < B; ++i)
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t j = 0; j < HWp; ++j)
                            weight[(i * C + c) * HWp + j] = mask[j] != 0.0f ? 0.0f : 1.0f;
            }
            auto diff = ad::mul(ad::sub(fake, ad::constant(real)), ad::constant(std::move(weight)));
            g_loss = ad::add(g_loss, ad::mul_s(ad::mean_all(ad::mul(diff, diff)), float(cfg.recon_weight)));
        }
        double div_val = 0;
        if (cfg.lambda_div > 0) {
            std::size_t half = B / 2;
            TensorF z1(Shape{half, G.latent_dim}), z2(Shape{half, G.latent_dim});
            std::copy(z.data(), z.data() + half * G.latent_dim, z1.data());
            std::copy(z.data() + half * G.latent_dim, z.data() + 2 * half * G.latent_dim, z2.data());
            std::vector<data::AuxKnowledge> aux1(aux.begin(), aux.begin() + long(half));
            std::vector<data::AuxKnowledge> aux2(aux.begin() + long(half), aux.begin() + long(2 * half));
            auto gen1 = [&](const Var<float>& zz) {
                return generate_images(G, zz, has_aux ? &aux1 : nullptr, /*train=*/true);
            };
            auto gen2 = [&](const Var<float>& zz) {
                return generate_images(G, zz, has_aux ? &aux2 : nullptr, /*train=*/true);
            };
            auto feat = [&](const Var<float>& imgs) { return F->forward(imgs, false).first; };
            // two half-batch passes with their own aux rows
            auto f1 = feat(gen1(ad::constant(z1)));
            auto f2 = feat(gen2(ad::constant(z2)));
            Tensor<float> zdist(Shape{half, half});
            for (std::size_t i = 0; i < half; ++i)
                for (std::size_t j = 0; j < half; ++j) {
                    float acc = 0;
                    for (std::size_t k = 0; k < G.latent_dim; ++k) {
                        float d = z1[i * G.latent_dim + k] - z2[j * G.latent_dim + k];
                        acc += d * d;
                    }
                    zdist[i * half + j] = std::sqrt(std::max(acc, 1e-24f));
                }
            auto gram = ad::matmul(f1, ad::transpose(f2));
            auto r1 = ad::rowsum(ad::mul(f1, f1));
            auto r2 = ad::rowsum(ad::mul(f2, f2));
            auto d2 = ad::add(ad::sub(ad::broadcast_cols(r1, half), ad::mul_s(gram, 2.0f)),
                              ad::broadcast_rows(r2, half));
            auto dist = ad::sqrt_(ad::add_s(ad::relu(d2), 1e-24f));
            auto div = ad::mean_all(ad::div(dist, ad::constant(std::move(zdist))));
            div_val = double(div->value[0]);
            g_loss = ad::sub(g_loss, ad::mul_s(div, float(cfg.lambda_div)));
        }
        if (!std::isfinite(g_loss->value[0]))
            throw StageError("train_prior: generator loss diverged at step " + std::to_string(gs));
        g_opt.step(g_params, nn::grad_values(g_loss, g_params));

        ck.trace.push_back({gs, last_critic, double(g_loss->value[0]), div_val, last_pen});
    }

    ck.nets = std::move(nets);
    return ck;
}

}  // namespace gmi::prior

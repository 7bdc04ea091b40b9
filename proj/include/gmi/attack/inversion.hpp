#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "gmi/core/image_io.hpp"
#include "gmi/prior/gan.hpp"
#include "gmi/zoo/classifier.hpp"

namespace gmi::attack {

using ad::Var;

constexpr double kProbFloor = 1e-12;

struct InversionConfig {
    double lambda_id = 100.0;
    std::size_t restarts = 5;
    std::size_t iterations = 1500;
    std::string optimizer = "sgd_momentum";  // sgd_momentum | sgd_nesterov
    double learning_rate = 0.02;
    double momentum = 0.9;
    std::size_t batch_size = 64;  // latent candidates optimized in parallel per restart
    std::uint64_t seed = 1;
    bool clamp_latents = false;  // optional projection of z onto a box
    double latent_clamp = 3.0;
    bool check_bounds = false;  // test mode: assert pixel clamps held

    void validate() const {
        GMI_CHECK_PARAM(restarts >= 1, "restarts must be >= 1");
        GMI_CHECK_PARAM(lambda_id >= 0, "lambda_id must be nonnegative");
        GMI_CHECK_PARAM(batch_size >= 1, "batch_size must be >= 1");
        GMI_CHECK_PARAM(optimizer == "sgd_momentum" || optimizer == "sgd_nesterov",
                        "unknown stage-2 optimizer '" + optimizer + "'");
    }
    std::string digest() const {
        return digest_hex(digest_of("inv/" + fmt_g(lambda_id) + "/" + std::to_string(restarts) + "/" +
                                    std::to_string(iterations) + "/" + optimizer + "/" +
                                    fmt_g(learning_rate) + "/" + fmt_g(momentum) + "/" +
                                    std::to_string(batch_size) + "/" + std::to_string(seed)));
    }
};

struct AttackResult {
    TensorF image;  // [C,H,W]
    int target_label = -1;
    data::AuxMode aux_mode = data::AuxMode::none;
    std::size_t chosen_restart = 0;
    bool identity_used = true;  // false for the prior-only baseline
    // per restart: final (L_prior, L_id); NaN marks an absent/aborted field
    std::vector<std::pair<double, double>> restart_final;
    std::vector<std::vector<double>> traces;  // mean loss per iteration, per restart
    std::vector<bool> aborted;
};

// ------------------------------------------------------------------ losses

// -log(max(p_label, 1e-12)) per row, computed on the log-softmax scale.
// The floor keeps reported losses finite and bounded; for the optimization
// path the raw -log_softmax is used instead (already finite in logit space),
// because the hard floor would zero every gradient once a confident target
// drives p below 1e-12 and strand the attack at its starting point.
template <typename S>
Var<S> identity_loss_rows(const Var<S>& logits, std::size_t label, bool floored = true) {
    GMI_CHECK_PARAM(label < logits->value.dim(1), "identity_loss: label out of range");
    auto lsm = ad::log_softmax_rows(logits);
    auto idx = std::make_shared<const std::vector<std::size_t>>(logits->value.dim(0), label);
    auto nll = ad::neg(ad::pick(lsm, idx));
    if (!floored) return nll;
    return ad::clamp(nll, S(0), S(-std::log(kProbFloor)));
}

inline double identity_loss(zoo::ClassifierModel& head, const TensorF& image, int label) {
    GMI_CHECK_PARAM(label >= 0 && label < head.num_classes, "identity_loss: label out of range");
    auto x = ad::constant(image.reshaped(Shape{1, image.dim(0), image.dim(1), image.dim(2)}));
    auto [f, logits] = head.forward(x, false);
    return double(identity_loss_rows(logits, std::size_t(label))->value[0]);
}

// -global score, plus -local score on a boundary patch when a local
// discriminator exists (equal weight). Batched; positions given per image.
inline Var<float> prior_loss_rows(prior::DiscriminatorSet& disc, const Var<float>& images,
                                  const std::vector<prior::PatchPos>* pos) {
    auto g = ad::reshape(disc.global_d.forward(images), Shape{images->value.dim(0)});
    auto total = ad::neg(g);
    if (disc.local_d && pos) {
        auto patches = prior::extract_patches(images, *pos, disc.patch_size);
        auto l = ad::reshape(disc.local_d->forward(patches), Shape{images->value.dim(0)});
        total = ad::sub(total, l);
    }
    return total;
}

inline double prior_loss(prior::DiscriminatorSet& disc, const TensorF& image,
                         const TensorF* mask = nullptr, std::uint64_t patch_seed = 0) {
    auto x = ad::constant(image.reshaped(Shape{1, image.dim(0), image.dim(1), image.dim(2)}));
    std::vector<prior::PatchPos> pos;
    bool use_local = false;
    if (disc.local_d && mask) {
        Rng rng(derive_seed(patch_seed, "prior_loss_patch"));
        try {
            pos.push_back(prior::local_patch_pos(*mask, disc.patch_size, rng));
            use_local = true;
        } catch (const ParamError&) {
            // boundary-free mask: local term is undefined, fall back to global only
        }
    }
    auto loss = prior_loss_rows(disc, x, use_local ? &pos : nullptr);
    return double(loss->value[0]);
}

// ------------------------------------------------------------------- GMI

namespace detail {

struct Stage2Opt {
    TensorF vel;
    double lr, mu;
    bool nesterov;

    Stage2Opt(const Shape& shape, double lr_, double mu_, bool nesterov_)
        : vel(shape, 0.0f), lr(lr_), mu(mu_), nesterov(nesterov_) {}

    void step(TensorF& x, const TensorF& g) {
        for (std::size_t i = 0; i < x.size(); ++i) {
            float gi = g[i];
            vel[i] = float(mu) * vel[i] + gi;
            x[i] -= float(lr) * (nesterov ? gi + float(mu) * vel[i] : vel[i]);
        }
    }
};

inline bool mask_has_boundary(const TensorF& mask, std::size_t patch) {
    std::size_t ones = 0;
    for (float v : mask) ones += v != 0.0f;
    (void)patch;
    return ones > 0 && ones < mask.size();
}

// Shared latent-space loop behind gmi_invert and pii_inpaint. target may be
// null (prior-only). Selection: lowest final identity loss when the identity
// signal participates, lowest prior loss otherwise.
inline AttackResult invert_latent(prior::PriorCheckpoint& prior_ck, zoo::ClassifierModel* target,
                                  int label, const data::AuxKnowledge& aux,
                                  const InversionConfig& cfg) {
    cfg.validate();
    GMI_CHECK_PARAM(cfg.iterations >= 1, "iterations must be >= 1");
    auto& G = prior_ck.nets.gen;
    auto& D = prior_ck.nets.disc;
    GMI_CHECK(aux.mode == G.aux_mode, "attack: aux mode does not match the prior's");
    if (target)
        GMI_CHECK_PARAM(label >= 0 && label < target->num_classes, "attack: label out of range");

    const bool use_id = target != nullptr && cfg.lambda_id > 0;
    const bool select_by_id = use_id;  // lambda_id = 0 reduces to the prior-only baseline
    std::vector<data::AuxKnowledge> aux_batch;
    if (G.aux_mode != data::AuxMode::none)
        aux_batch.assign(cfg.batch_size, aux);
    bool local_ok = D.local_d && G.aux_mode == data::AuxMode::corrupted &&
                    mask_has_boundary(aux.mask, D.patch_size);

    AttackResult best;
    best.target_label = label;
    best.aux_mode = aux.mode;
    best.identity_used = target != nullptr;
    double best_key = std::numeric_limits<double>::infinity();

    for (std::size_t r = 0; r < cfg.restarts; ++r) {
        Rng rng(derive_seed(cfg.seed, "restart/" + std::to_string(r)));
        TensorF z(Shape{cfg.batch_size, G.latent_dim});
        rng.fill_normal(z);
        Stage2Opt opt(z.shape(), cfg.learning_rate, cfg.momentum, cfg.optimizer == "sgd_nesterov");

        std::vector<double> trace;
        trace.reserve(cfg.iterations);
        bool ok = true;
        Var<float> images;
        for (std::size_t it = 0; it < cfg.iterations; ++it) {
            auto zv = ad::leaf(z);
            images = prior::generate_images(G, zv, aux_batch.empty() ? nullptr : &aux_batch);
            std::vector<prior::PatchPos> pos;
            if (local_ok) {
                pos.resize(cfg.batch_size);
                for (auto& p : pos) p = prior::local_patch_pos(aux.mask, D.patch_size, rng);
            }
            auto loss_rows = prior_loss_rows(D, images, local_ok ? &pos : nullptr);
            if (use_id) {
                auto [f, logits] = target->forward(images, false);
                auto id_rows = identity_loss_rows(logits, std::size_t(label), /*floored=*/false);
                loss_rows = ad::add(loss_rows, ad::mul_s(id_rows, float(cfg.lambda_id)));
            }
            auto total = ad::sum_all(loss_rows);
            if (!std::isfinite(total->value[0])) {
                ok = false;
                break;
            }
            trace.push_back(double(total->value[0]) / double(cfg.batch_size));
            auto g = ad::grad(total, {zv})[0]->value;
            opt.step(z, g);
            if (cfg.clamp_latents)
                for (auto& v : z) v = std::clamp(v, -float(cfg.latent_clamp), float(cfg.latent_clamp));
        }

        best.traces.push_back(std::move(trace));
        best.aborted.push_back(!ok);
        if (!ok) {
            best.restart_final.emplace_back(std::numeric_limits<double>::quiet_NaN(),
                                            std::numeric_limits<double>::quiet_NaN());
            continue;
        }

        // final per-candidate losses under the stopped z
        auto zv = ad::constant(z);
        images = prior::generate_images(G, zv, aux_batch.empty() ? nullptr : &aux_batch);
        std::vector<prior::PatchPos> pos;
        if (local_ok) {
            pos.resize(cfg.batch_size);
            for (auto& p : pos) p = prior::local_patch_pos(aux.mask, D.patch_size, rng);
        }
        auto pr = prior_loss_rows(D, images, local_ok ? &pos : nullptr);
        std::vector<double> idv(cfg.batch_size, std::numeric_limits<double>::quiet_NaN());
        if (target) {
            auto [f, logits] = target->forward(images, false);
            auto ir = identity_loss_rows(logits, std::size_t(label));
            for (std::size_t i = 0; i < cfg.batch_size; ++i) idv[i] = double(ir->value[i]);
        }
        std::size_t pick = 0;
        double pick_key = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < cfg.batch_size; ++i) {
            double key = select_by_id ? idv[i] : double(pr->value[i]);
            if (key < pick_key) {
                pick_key = key;
                pick = i;
            }
        }
        best.restart_final.emplace_back(double(pr->value[pick]), idv[pick]);
        if (pick_key < best_key) {
            best_key = pick_key;
            best.chosen_restart = r;
            std::size_t d = shape_numel(G.data_shape);
            TensorF img(G.data_shape);
            std::copy(images->value.data() + pick * d, images->value.data() + (pick + 1) * d, img.data());
            best.image = std::move(img);
        }
    }

    bool any_ok = false;
    for (bool a : best.aborted) any_ok |= !a;
    if (!any_ok) throw StageError("attack: every restart aborted with non-finite loss");
    return best;
}

}  // namespace detail

inline AttackResult gmi_invert(prior::PriorCheckpoint& prior_ck, zoo::ClassifierModel& target,
                               int label, const data::AuxKnowledge& aux, const InversionConfig& cfg) {
    return detail::invert_latent(prior_ck, &target, label, aux, cfg);
}

inline AttackResult pii_inpaint(prior::PriorCheckpoint& prior_ck, const data::AuxKnowledge& aux,
                                const InversionConfig& cfg) {
    InversionConfig c = cfg;
    c.lambda_id = 0;
    auto res = detail::invert_latent(prior_ck, nullptr, -1, aux, c);
    res.identity_used = false;
    return res;
}

// ------------------------------------------------------------------- EMI

// Pixel-space baseline: gradient descent on the image against the identity
// loss alone, initialized from the auxiliary knowledge when present.
inline AttackResult emi_invert(zoo::ClassifierModel& target, int label, const data::AuxKnowledge& aux,
                               const InversionConfig& cfg) {
    cfg.validate();
    GMI_CHECK_PARAM(label >= 0 && label < target.num_classes, "emi: label out of range");
    const Shape& ds = target.input_shape;
    std::size_t d = shape_numel(ds);

    TensorF init(Shape{1, ds[0], ds[1], ds[2]}, 0.5f);
    if (aux.mode != data::AuxMode::none)
        std::copy(aux.image.begin(), aux.image.end(), init.data());
    const bool masked_update = aux.mode == data::AuxMode::corrupted;

    AttackResult best;
    best.target_label = label;
    best.aux_mode = aux.mode;
    best.identity_used = true;
    double best_key = std::numeric_limits<double>::infinity();

    for (std::size_t r = 0; r < cfg.restarts; ++r) {
        TensorF x = init;
        detail::Stage2Opt opt(x.shape(), cfg.learning_rate, cfg.momentum,
                              cfg.optimizer == "sgd_nesterov");
        std::vector<double> trace;
        bool ok = true;
        for (std::size_t it = 0; it < cfg.iterations; ++it) {
            auto xv = ad::leaf(x);
            auto [f, logits] = target.forward(xv, false);
            auto loss = ad::sum_all(identity_loss_rows(logits, std::size_t(label), /*floored=*/false));
            if (!std::isfinite(loss->value[0])) {
                ok = false;
                break;
            }
            trace.push_back(double(loss->value[0]));
            auto g = ad::grad(loss, {xv})[0]->value;
            if (masked_update) {
                std::size_t hw = ds[1] * ds[2];
                for (std::size_t c = 0; c < ds[0]; ++c)
                    for (std::size_t j = 0; j < hw; ++j)
                        if (aux.mask[j] == 0.0f) g[c * hw + j] = 0.0f;
            }
            opt.step(x, g);
            for (auto& v : x) v = std::clamp(v, 0.0f, 1.0f);
            if (cfg.check_bounds)
                for (float v : x) GMI_CHECK(v >= 0.0f && v <= 1.0f, "emi: clamp violated");
        }
        best.traces.push_back(std::move(trace));
        best.aborted.push_back(!ok);
        if (!ok) {
            best.restart_final.emplace_back(std::numeric_limits<double>::quiet_NaN(),
                                            std::numeric_limits<double>::quiet_NaN());
            continue;
        }
        double final_id = identity_loss(target, x.reshaped(ds), label);
        best.restart_final.emplace_back(std::numeric_limits<double>::quiet_NaN(), final_id);
        if (final_id < best_key) {
            best_key = final_id;
            best.chosen_restart = r;
            best.image = x.reshaped(ds);
        }
    }
    bool any_ok = false;
    for (bool a : best.aborted) any_ok |= !a;
    if (!any_ok) throw StageError("emi: every restart aborted with non-finite loss");
    return best;
}

// ------------------------------------------------------------ persistence

// AttackResult directory: recon.png, loss_trace_restart<r>.csv, metadata.json
inline void save_attack_result(const std::filesystem::path& dir, const AttackResult& res,
                               const std::string& config_digest) {
    std::filesystem::create_directories(dir);
    io::write_png(dir / "recon.png", io::to_u8(res.image));
    for (std::size_t r = 0; r < res.traces.size(); ++r) {
        std::string csv = "iteration,loss\n";
        for (std::size_t i = 0; i < res.traces[r].size(); ++i)
            csv += std::to_string(i) + "," + fmt_g(res.traces[r][i]) + "\n";
        write_text_atomic(dir / ("loss_trace_restart" + std::to_string(r) + ".csv"), csv);
    }
    json finals = json::array();
    for (auto& [p, i] : res.restart_final)
        finals.push_back({{"prior_loss", std::isnan(p) ? json() : json(p)},
                          {"identity_loss", std::isnan(i) ? json() : json(i)}});
    json meta{{"target_label", res.target_label},
              {"aux_mode", data::aux_mode_name(res.aux_mode)},
              {"chosen_restart", res.chosen_restart},
              {"identity_used", res.identity_used},
              {"config_digest", config_digest},
              {"restart_final", finals}};
    write_text_atomic(dir / "metadata.json", meta.dump(2) + "\n");
}

}  // namespace gmi::attack

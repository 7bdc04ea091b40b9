// Acceptance suite: runs every acceptance criterion at its stated tolerance
// and prints one pass/fail line each. Criteria that need the real MNIST
// corpus are skipped when it is absent (set GMI_MNIST_DIR) and the identical
// protocol then runs against the built-in synthetic digit corpus, clearly
// labeled and asserted at the same thresholds.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <string>

#include "gmi/exp/pipeline.hpp"
#include "gmi/theory/validator.hpp"

using namespace gmi;

namespace {

int g_pass = 0, g_fail = 0, g_skip = 0;

double now_s() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

void outcome(const char* tag, const std::string& name, const std::string& detail, double secs) {
    std::printf("[%s] %s: %s (%.1fs)\n", tag, name.c_str(), detail.c_str(), secs);
    std::fflush(stdout);
}

void run_criterion(const std::string& name, const std::function<std::pair<bool, std::string>()>& fn) {
    double t0 = now_s();
    try {
        auto [ok, detail] = fn();
        outcome(ok ? "PASS" : "FAIL", name, detail, now_s() - t0);
        (ok ? g_pass : g_fail)++;
    } catch (const std::exception& e) {
        outcome("FAIL", name, std::string("exception: ") + e.what(), now_s() - t0);
        g_fail++;
    }
}

void skip_criterion(const std::string& name, const std::string& why) {
    outcome("SKIP", name, why, 0.0);
    g_skip++;
}

std::filesystem::path work_dir() {
    if (const char* env = std::getenv("GMI_ACCEPT_WORK")) return env;
    return "acceptance_work";
}

// ---------------------------------------------------------------- criteria

std::pair<bool, std::string> criterion1_identity() {
    double t0 = now_s();
    Rng rng(101);
    double worst = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        std::size_t ns = 2 + rng.index(4), nn = 1 + rng.index(4), ny = 2 + rng.index(2);
        auto joint = theory::random_joint(rng, ns, nn, ny);
        auto m1 = theory::random_likelihood(rng, ns, nn, ny);
        auto m2 = theory::random_likelihood(rng, ns, nn, ny);
        for (std::size_t n = 0; n < nn; ++n) {
            auto rep = theory::theorem1_verify(m1, m2, joint, n);
            for (auto& c : rep.per_y)
                worst = std::max(worst, std::abs(c.identity_lhs - c.identity_rhs));
        }
    }
    double secs = now_s() - t0;
    bool ok = worst <= 1e-9 && secs < 60.0;
    return {ok, "1000 instances, worst |identity gap| = " + fmt_g(worst) + ", " + fmt_g(secs, 3) + "s"};
}

std::pair<bool, std::string> criterion2_ordering() {
    Rng rng(102);
    std::size_t checked = 0, violations = 0;
    for (int trial = 0; trial < 1500; ++trial) {
        std::size_t ns = 2 + rng.index(4), nn = 1 + rng.index(4), ny = 2 + rng.index(2);
        auto joint = theory::random_joint(rng, ns, nn, ny);
        auto m2 = theory::random_likelihood(rng, ns, nn, ny);
        // half the instances are constructed to satisfy the hypothesis
        auto m1 = (trial % 2 == 0) ? theory::sharpen_toward_truth(m2, joint, 0.4 + 0.5 * rng.uniform())
                                   : theory::random_likelihood(rng, ns, nn, ny);
        for (std::size_t n = 0; n < nn; ++n) {
            auto rep = theory::theorem1_verify(m1, m2, joint, n);
            if (!rep.hypothesis_holds) continue;  // hypothesis checked, not assumed
            ++checked;
            if (!rep.ordering_ok) ++violations;
        }
    }
    bool ok = checked > 100 && violations == 0;
    return {ok, std::to_string(checked) + " hypothesis-holding instances, " +
                    std::to_string(violations) + " ordering violations"};
}

std::pair<bool, std::string> criterion8_gradients() {
    // diversity loss on a 12-parameter generator
    Rng rng(108);
    auto W = ad::leaf([&] {
        Tensor<double> t(Shape{3, 4});
        rng.fill_normal(t, 0, 0.5);
        return t;
    }());
    Tensor<double> z1(Shape{3, 3}), z2(Shape{3, 3});
    rng.fill_normal(z1);
    rng.fill_normal(z2);
    auto identity = [](const ad::Var<double>& v) { return v; };
    auto build_div = [&] {
        auto gen = [&](const ad::Var<double>& z) { return ad::tanh_(ad::matmul(z, W)); };
        return prior::diversity_loss<double>(gen, identity, z1, z2);
    };
    double worst_rel = 0;
    auto fd_check = [&](const std::function<ad::Var<double>()>& build, ad::Var<double> param) {
        auto g = ad::grad(build(), {param})[0];
        const double h = 1e-6;
        for (std::size_t i = 0; i < param->value.size(); ++i) {
            double keep = param->value[i];
            param->value[i] = keep + h;
            double f1 = build()->value[0];
            param->value[i] = keep - h;
            double f2 = build()->value[0];
            param->value[i] = keep;
            double fd = (f1 - f2) / (2 * h);
            double rel = std::abs(fd - g->value[i]) / std::max({std::abs(fd), std::abs(g->value[i]), 1e-8});
            worst_rel = std::max(worst_rel, rel);
        }
    };
    fd_check(build_div, W);

    // identity loss through a 36-parameter affine softmax
    auto W2 = ad::leaf([&] {
        Tensor<double> t(Shape{6, 3});
        rng.fill_normal(t, 0, 0.5);
        return t;
    }());
    Tensor<double> x(Shape{2, 6});
    rng.fill_normal(x);
    auto build_id = [&] {
        return ad::mean_all(attack::identity_loss_rows(ad::matmul(ad::constant(x), W2), 1));
    };
    fd_check(build_id, W2);

    return {worst_rel <= 1e-4, "worst relative gradient error " + fmt_g(worst_rel)};
}

std::pair<bool, std::string> criterion9_metric_oracles() {
    double worst = 0;
    auto check = [&](double got, double expect) { worst = std::max(worst, std::abs(got - expect)); };

    TensorF a(Shape{1, 4, 4}, 0.5f), b(Shape{1, 4, 4}, 0.6f);
    check(metrics::psnr(a, b, 1.0), 20.0);

    check(theory::kl_similarity({0.5, 0.5}, {0.25, 0.75}),
          -(0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0)));

    theory::DiscreteJoint j(2, 1, 2);
    j.at(0, 0, 0) = 0.45;
    j.at(1, 0, 0) = 0.05;
    j.at(0, 0, 1) = 0.05;
    j.at(1, 0, 1) = 0.45;
    theory::ModelLikelihood m(2, 1, 2);
    m.at(0, 0, 0) = 0.8;
    m.at(0, 0, 1) = 0.2;
    m.at(1, 0, 0) = 0.2;
    m.at(1, 0, 1) = 0.8;
    check(theory::predictive_power(m, j, 0, 0), 0.9 * std::log(1.6) + 0.1 * std::log(0.4));

    auto eval = zoo::build_classifier("softmax_net", 2, {1, 1, 2}, 2);  // identity features
    TensorF recon(Shape{1, 1, 2}, 0.5f);
    check(metrics::feature_distance(eval, recon, {0.5f, 1.5f}), 1.0);

    data::Samples cls;
    for (float dist : {3.0f, 5.0f}) {
        data::ImageSample s;
        s.image = TensorF(Shape{1, 1, 2}, 0.5f);
        s.image[1] += dist;
        s.label = 0;
        cls.push_back(std::move(s));
    }
    check(metrics::knn_distance(eval, recon, cls), 3.0);
    check(attack::identity_loss_rows(ad::constant(Tensor<double>(Shape{1, 2}, 0.0)), 0)->value[0],
          std::log(2.0));

    return {worst <= 1e-6, "worst |oracle error| = " + fmt_g(worst)};
}

std::pair<bool, std::string> criterion10_reductions() {
    // gmi with lambda_id = 0 is bit-identical to the inpainting baseline
    auto nets = prior::build_prior_networks({1, 28, 28}, 8, data::AuxMode::corrupted, 110);
    prior::PriorCheckpoint ck;
    ck.nets = std::move(nets);
    auto target = zoo::build_classifier("mnist_cnn_target", 5, {1, 28, 28}, 111);
    data::ImageSample src;
    src.image = TensorF(Shape{1, 28, 28});
    Rng rng(112);
    rng.fill_uniform(src.image, 0, 1);
    auto aux = data::apply_corruption(src, data::render_mask({}, 28, 28));
    attack::InversionConfig icfg;
    icfg.lambda_id = 0;
    icfg.restarts = 2;
    icfg.iterations = 8;
    icfg.batch_size = 2;
    icfg.seed = 991;
    auto g = attack::gmi_invert(ck, target, 1, aux, icfg);
    auto p = attack::pii_inpaint(ck, aux, icfg);
    bool identical = g.image.shape() == p.image.shape() &&
                     std::equal(g.image.begin(), g.image.end(), p.image.begin());

    // lambda_div = 0 traces carry no diversity term
    auto nets2 = prior::build_prior_networks({1, 28, 28}, 8, data::AuxMode::none, 113);
    prior::GanTrainConfig gcfg;
    gcfg.lambda_div = 0;
    gcfg.batch_size = 4;
    gcfg.generator_steps = 3;
    gcfg.critic_steps = 1;
    auto trained = prior::train_prior(std::move(nets2), data::load_dataset("synth:64:3"), nullptr, gcfg);
    auto csv = prior::trace_csv(trained);
    bool clean_trace = !trained.has_diversity && csv.find("diversity") == std::string::npos;

    return {identical && clean_trace,
            std::string("bit-identical reduction: ") + (identical ? "yes" : "NO") +
                ", diversity-free trace: " + (clean_trace ? "yes" : "NO")};
}

std::pair<bool, std::string> criterion6a_epsilon_table() {
    // Pinned from the protocol: batch 256, 40 epochs over the 35725-image
    // private split, delta 1e-5.
    double N = 35725, B = 256;
    double q = B / N;
    std::size_t T = std::size_t(40 * std::ceil(N / B));
    struct Row {
        double sigma, eps;
    };
    std::string detail;
    double worst_rel = 0;
    for (auto [sigma, eps] : {Row{0.694, 9.89}, Row{0.92, 4.94}, Row{3.0, 0.98}, Row{28.0, 0.10}}) {
        double got = zoo::compute_epsilon(sigma, q, T, 1e-5);
        double rel = std::abs(got - eps) / eps;
        worst_rel = std::max(worst_rel, rel);
        detail += "(" + fmt_g(sigma) + "->" + fmt_g(got, 3) + ") ";
    }
    bool inf_ok = std::isinf(zoo::compute_epsilon(0.0, q, T, 1e-5));
    return {worst_rel <= 0.15 && inf_ok,
            detail + "worst relative error " + fmt_g(worst_rel, 3) + ", sigma=0 -> inf: " +
                (inf_ok ? "yes" : "NO")};
}

// ------------------------------------------------- dataset-bound criteria

struct DatasetSpec {
    std::string corpus, eval_train, eval_test, tag;
};

exp::ExperimentConfig protocol_config(const DatasetSpec& ds, const std::filesystem::path& work) {
    exp::ExperimentConfig cfg;
    cfg.name = "acceptance";
    cfg.seed = 1;
    cfg.out_dir = work / ("out_" + ds.tag);
    cfg.cache_dir = work / "cache";
    cfg.dataset = ds.corpus;
    cfg.private_labels = {5, 6, 7, 8, 9};
    cfg.public_labels = {0, 1, 2, 3, 4};
    cfg.train_frac = 0.9;
    cfg.target_arch = "mnist_cnn_target";
    cfg.target_train = {"sgd", 1e-2, 64, 0.9, 1e-4, 4, 1};
    cfg.eval_arch = "mnist_eval_cnn3";
    cfg.eval_dataset = ds.eval_train;
    cfg.eval_test_dataset = ds.eval_test;
    cfg.eval_train = {"sgd", 1e-2, 64, 0.9, 1e-4, 8, 1};
    cfg.aux_mode = data::AuxMode::corrupted;
    cfg.latent_dim = 64;
    cfg.gan.lambda_div = 0.5;
    cfg.gan.adam_lr = 0.004;
    cfg.gan.batch_size = 32;
    cfg.gan.generator_steps = 1500;
    cfg.gan.critic_steps = 2;
    cfg.gan.gp_weight = 10.0;
    cfg.gan.mask_spec.h_frac = cfg.gan.mask_spec.w_frac = 0.5;
    cfg.attacks = {"gmi", "emi"};
    cfg.attacked_labels = {5, 6, 7, 8, 9};
    cfg.images_per_label = 20;  // 100 attacked images
    cfg.inversion.lambda_id = 100;
    cfg.inversion.restarts = 2;
    cfg.inversion.iterations = 1500;
    cfg.inversion.optimizer = "sgd_nesterov";
    cfg.inversion.learning_rate = 0.01;
    cfg.inversion.momentum = 0.9;
    cfg.inversion.batch_size = 1;
    cfg.workers = 2;
    cfg.topk = 5;
    cfg.canonical = "acceptance-protocol-v1/" + ds.corpus;
    return cfg;
}

void run_dataset_criteria(const DatasetSpec& ds, const std::string& label_suffix) {
    auto work = work_dir();
    exp::Pipeline* pipe_ptr = nullptr;
    exp::ExperimentConfig cfg = protocol_config(ds, work);
    static std::map<std::string, std::unique_ptr<exp::Pipeline>> pipes;
    pipes[ds.tag] = std::make_unique<exp::Pipeline>(cfg);
    pipe_ptr = pipes[ds.tag].get();

    run_criterion("criterion 3" + label_suffix + " (attack ordering)", [&]() {
        pipe_ptr->ensure_metrics();
        double gmi = pipe_ptr->metric_reports().at("gmi").attack_acc_top1;
        double emi = pipe_ptr->metric_reports().at("emi").attack_acc_top1;
        bool ok = gmi >= 0.60 && (gmi - emi) >= 0.20;
        return std::make_pair(ok, "GMI top-1 " + fmt_g(gmi, 3) + ", EMI top-1 " + fmt_g(emi, 3) +
                                      ", gap " + fmt_g(gmi - emi, 3) +
                                      " (need GMI >= 0.60 and gap >= 0.20)");
    });

    run_criterion("criterion 4" + label_suffix + " (distance ordering)", [&]() {
        auto& g = pipe_ptr->metric_reports().at("gmi");
        auto& e = pipe_ptr->metric_reports().at("emi");
        bool ok = g.knn_dist < 0.5 * e.knn_dist && g.feat_dist < 0.5 * e.feat_dist;
        return std::make_pair(ok, "KNN " + fmt_g(g.knn_dist, 4) + " vs " + fmt_g(e.knn_dist, 4) +
                                      ", Feat " + fmt_g(g.feat_dist, 4) + " vs " +
                                      fmt_g(e.feat_dist, 4) + " (need GMI < 0.5 x EMI)");
    });

    run_criterion("criterion 5" + label_suffix + " (evaluation classifier)", [&]() {
        pipe_ptr->ensure_eval();
        auto test = data::load_dataset(ds.eval_test);
        double acc = zoo::accuracy(pipe_ptr->eval_model(), test);
        return std::make_pair(acc >= 0.99, "test accuracy " + fmt_g(acc, 4) + " (need >= 0.99)");
    });

    run_criterion("criterion 6" + label_suffix + " (DP sweep: GMI >= PII per epsilon)", [&]() {
        exp::ExperimentConfig dcfg = protocol_config(ds, work);
        // Appendix-B.2 regime: digits 0-4 private, the rest public
        dcfg.private_labels = {0, 1, 2, 3, 4};
        dcfg.public_labels = {5, 6, 7, 8, 9};
        dcfg.target_arch = "mnist_mlp_dp_target";
        dcfg.dp = zoo::DPConfig{1.5, 0.0, 1e-5, 40, 256, 0.1, 1, false};
        dcfg.gan.generator_steps = 1000;
        dcfg.attacked_labels = {0, 1, 2};
        dcfg.images_per_label = 8;
        dcfg.inversion.iterations = 500;
        dcfg.canonical += "/dp";
        dcfg.out_dir = work / ("out_dp_" + ds.tag);
        auto report = exp::dp_sweep(dcfg, {0.0, 0.694, 0.92, 3.0, 28.0});
        bool ok = !report.rows.empty();
        std::string detail;
        for (auto& r : report.rows) {
            ok = ok && r.gmi_acc >= r.pii_acc;
            detail += "[eps " + (std::isinf(r.epsilon) ? std::string("inf") : fmt_g(r.epsilon, 3)) +
                      ": gmi " + fmt_g(r.gmi_acc, 3) + " pii " + fmt_g(r.pii_acc, 3) + "] ";
        }
        return std::make_pair(ok, detail);
    });

    run_criterion("criterion 7" + label_suffix + " (predictive-power trend)", [&]() {
        double total = 0;
        std::string detail;
        for (std::uint64_t seed_variant = 1; seed_variant <= 3; ++seed_variant) {
            exp::ExperimentConfig pcfg = protocol_config(ds, work);
            pcfg.variant = seed_variant;
            pcfg.target_train.epochs = 2;
            pcfg.gan.generator_steps = 600;
            pcfg.attacks = {"gmi"};
            pcfg.attacked_labels = {5, 6};
            pcfg.images_per_label = 6;
            pcfg.inversion.iterations = 400;
            pcfg.inversion.restarts = 1;
            pcfg.canonical += "/power";
            pcfg.out_dir = work / ("out_power_" + ds.tag + "_" + std::to_string(seed_variant));
            auto rep = exp::predictive_power_sweep(pcfg, "train_size", {0.25, 0.5, 1.0});
            total += rep.spearman;
            detail += "seed" + std::to_string(seed_variant) + ": rho " + fmt_g(rep.spearman, 3) + " ";
        }
        double mean = total / 3.0;
        return std::make_pair(mean >= 0.0, detail + "| mean rho " + fmt_g(mean, 3) + " (need >= 0)");
    });
}

}  // namespace

int main() {
    std::printf("== acceptance suite (%s) ==\n", exp::kToolVersion);
    std::filesystem::create_directories(work_dir());

    run_criterion("criterion 1 (theorem-1 identity)", criterion1_identity);
    run_criterion("criterion 2 (theorem-1 ordering)", criterion2_ordering);
    run_criterion("criterion 6a (epsilon table)", criterion6a_epsilon_table);
    run_criterion("criterion 8 (gradient correctness)", criterion8_gradients);
    run_criterion("criterion 9 (metric oracles)", criterion9_metric_oracles);
    run_criterion("criterion 10 (reduction identities)", criterion10_reductions);

    bool have_mnist = data::mnist_available();
    if (have_mnist) {
        run_dataset_criteria({"mnist", "mnist:train", "mnist:test", "mnist"}, " (mnist)");
    } else {
        for (const char* c : {"3", "4", "5", "6", "7"})
            skip_criterion(std::string("criterion ") + c + " (mnist)",
                           "MNIST not found offline (set GMI_MNIST_DIR to the IDX files); "
                           "running the identical protocol on the synthetic corpus below");
        run_dataset_criteria({"synth:70000:20240001", "synth:60000:20240001",
                              "synth:10000:20240001:60000", "synth"},
                             " [synth substitute]");
    }

    std::printf("== result: %d pass / %d fail / %d skip ==\n", g_pass, g_fail, g_skip);
    return g_fail == 0 ? 0 : 1;
}

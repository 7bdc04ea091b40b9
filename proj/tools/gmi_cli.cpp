// Command-line front end: train targets and priors, run inversion attacks,
// evaluate metrics, check the finite-table theory, and drive the DP and
// predictive-power sweeps from a flat config file.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "gmi/exp/pipeline.hpp"
#include "gmi/theory/validator.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

struct CommonOpts {
    std::string config_path;
    long seed = -1;
    std::string out_dir;
    std::string cache_dir;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool config_required = true) {
    auto* c = cmd->add_option("--config", opts.config_path, "experiment config file");
    if (config_required) c->required();
    cmd->add_option("--seed", opts.seed, "override the config seed");
    cmd->add_option("--out", opts.out_dir, "override the output directory");
    cmd->add_option("--cache", opts.cache_dir, "override the cache directory");
}

gmi::exp::ExperimentConfig load_config(const CommonOpts& opts) {
    auto kv = gmi::exp::KvConfig::parse_file(opts.config_path);
    auto cfg = gmi::exp::ExperimentConfig::from_kv(kv);
    if (opts.seed >= 0) cfg.seed = std::uint64_t(opts.seed);
    if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
    if (!opts.cache_dir.empty()) cfg.cache_dir = opts.cache_dir;
    return cfg;
}

int theory_check(std::size_t instances, std::uint64_t seed) {
    gmi::Rng rng(gmi::derive_seed(seed, "theory_cli"));
    std::size_t identity_fail = 0, ordering_fail = 0, hypothesis_count = 0;
    for (std::size_t i = 0; i < instances; ++i) {
        std::size_t ns = 2 + rng.index(4), nn = 1 + rng.index(4), ny = 2 + rng.index(2);
        auto joint = gmi::theory::random_joint(rng, ns, nn, ny);
        auto m2 = gmi::theory::random_likelihood(rng, ns, nn, ny);
        auto m1 = (i % 2 == 0) ? gmi::theory::sharpen_toward_truth(m2, joint, 0.5)
                               : gmi::theory::random_likelihood(rng, ns, nn, ny);
        bool ok = true, hyp = true, ord = true;
        for (std::size_t n = 0; n < nn; ++n) {
            auto rep = gmi::theory::theorem1_verify(m1, m2, joint, n);
            ok = ok && rep.identity_ok;
            hyp = hyp && rep.hypothesis_holds;
            ord = ord && (!rep.hypothesis_holds || rep.ordering_ok);
        }
        if (!ok) ++identity_fail;
        if (hyp) ++hypothesis_count;
        if (!ord) ++ordering_fail;
        std::printf("instance %zu (%zux%zux%zu): identity %s%s\n", i, ns, nn, ny,
                    ok ? "pass" : "FAIL",
                    hyp ? (ord ? ", ordering pass" : ", ordering FAIL") : "");
    }
    std::printf("theory-check: %zu instances, %zu identity failures, %zu ordering failures "
                "(%zu with hypothesis)\n",
                instances, identity_fail, ordering_fail, hypothesis_count);
    return (identity_fail || ordering_fail) ? kExitStage : kExitOk;
}

std::vector<double> parse_doubles(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"model-inversion attack laboratory"};
    app.require_subcommand(1);

    CommonOpts opts;
    std::string ratios_arg = "0,0.694,0.92,3,28";
    std::string axis_arg = "train_size";
    std::string values_arg = "0.25,0.5,1.0";
    long instances = 1000;
    long theory_seed = 1;

    auto* train_target = app.add_subcommand("train-target", "train the target classifier");
    add_common(train_target, opts);
    auto* train_target_dp = app.add_subcommand("train-target-dp", "train the target with DP-SGD");
    add_common(train_target_dp, opts);
    auto* train_prior = app.add_subcommand("train-prior", "distill the public prior (stage 1)");
    add_common(train_prior, opts);
    auto* attack = app.add_subcommand("attack", "run the configured attacks (stage 2)");
    add_common(attack, opts);
    auto* evaluate = app.add_subcommand("evaluate", "run attacks and compute the metric table");
    add_common(evaluate, opts);
    auto* report = app.add_subcommand("report", "emit grids, tables and plots for a finished run");
    add_common(report, opts);
    auto* dp_sweep_cmd = app.add_subcommand("dp-sweep", "attack DP targets across noise ratios");
    add_common(dp_sweep_cmd, opts);
    dp_sweep_cmd->add_option("--ratios", ratios_arg, "comma-separated noise ratios");
    auto* power_sweep_cmd =
        app.add_subcommand("power-sweep", "predictive power vs attack accuracy sweep");
    add_common(power_sweep_cmd, opts);
    power_sweep_cmd->add_option("--axis", axis_arg, "train_size | dropout | batch_norm");
    power_sweep_cmd->add_option("--values", values_arg, "comma-separated axis values");
    auto* theory = app.add_subcommand("theory-check", "verify the predictive-power theory on random tables");
    theory->add_option("--instances", instances, "number of random instances");
    theory->add_option("--seed", theory_seed, "instance generator seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (theory->parsed()) return theory_check(std::size_t(instances), std::uint64_t(theory_seed));

        auto cfg = load_config(opts);
        if (train_target_dp->parsed()) {
            cfg.target_dp = true;
            if (cfg.target_arch != "mnist_mlp_dp_target" && cfg.target_arch != "softmax_net")
                cfg.target_arch = "mnist_mlp_dp_target";
        }
        gmi::exp::Pipeline pipe(cfg);

        if (train_target->parsed() || train_target_dp->parsed()) {
            pipe.ensure_target();
            pipe.write_manifest();
            std::printf("target ready (digest %s)\n", pipe.target_digest().c_str());
        } else if (train_prior->parsed()) {
            pipe.ensure_prior();
            pipe.write_manifest();
            std::printf("prior ready (digest %s)\n", pipe.prior_digest().c_str());
        } else if (attack->parsed()) {
            pipe.ensure_attacks();
            pipe.write_manifest();
            std::printf("attacks done (digest %s)\n", pipe.attacks_digest().c_str());
        } else if (evaluate->parsed()) {
            auto manifest = pipe.run_all();
            std::printf("results: %s\n", manifest.artifacts.at("results_csv").c_str());
        } else if (report->parsed()) {
            pipe.ensure_metrics();
            pipe.emit_report();
            pipe.write_manifest();
            std::printf("report written under %s\n", cfg.out_dir.string().c_str());
        } else if (dp_sweep_cmd->parsed()) {
            auto rep = gmi::exp::dp_sweep(cfg, parse_doubles(ratios_arg));
            std::fputs(rep.csv().c_str(), stdout);
        } else if (power_sweep_cmd->parsed()) {
            auto rep = gmi::exp::predictive_power_sweep(cfg, axis_arg, parse_doubles(values_arg));
            std::fputs(rep.csv().c_str(), stdout);
            if (rep.spearman_defined)
                std::printf("spearman(power, gmi_acc) = %s\n", gmi::fmt_g(rep.spearman).c_str());
            else
                std::puts("spearman undefined (single value)");
        }
        return kExitOk;
    } catch (const gmi::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "stage failure: %s\n", e.what());
        return kExitStage;
    }
}

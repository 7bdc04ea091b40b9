#pragma once

#include <atomic>
#include <chrono>
#include <mutex>
#include <thread>

#include "gmi/data/augment.hpp"
#include "gmi/exp/config.hpp"
#include "gmi/metrics/metrics.hpp"

namespace gmi::exp {

constexpr const char* kToolVersion = "gmi-lab 0.1.0";

struct StageRecord {
    std::string name;
    std::string digest;
    bool cache_hit = false;
    double seconds = 0;
    std::vector<std::string> outputs;

    json to_json() const {
        return json{{"name", name},
                    {"digest", digest},
                    {"cache_hit", cache_hit},
                    {"seconds", seconds},
                    {"outputs", outputs}};
    }
};

struct RunManifest {
    std::string tool_version = kToolVersion;
    std::string config_digest;
    std::vector<StageRecord> stages;
    std::string failed_stage;  // empty on success
    std::map<std::string, std::string> artifacts;  // logical name -> path

    json to_json() const {
        json st = json::array();
        for (auto& s : stages) st.push_back(s.to_json());
        json art = json::object();
        for (auto& [k, v] : artifacts) art[k] = v;
        return json{{"tool_version", tool_version},
                    {"config_digest", config_digest},
                    {"stages", st},
                    {"failed_stage", failed_stage},
                    {"artifacts", art}};
    }
};

namespace detail {

struct StageTimer {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
};

inline std::string ds(const std::string& s) { return digest_hex(digest_of(s)); }

}  // namespace detail

// Executes data -> target -> prior -> attacks -> metrics with config-digest
// checkpoint reuse. Every stage records timing and cache provenance in the
// manifest; a failing stage leaves a partial manifest behind.
class Pipeline {
  public:
    explicit Pipeline(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
        manifest_.config_digest = cfg_.config_digest();
        std::filesystem::create_directories(cfg_.out_dir);
        std::filesystem::create_directories(cfg_.cache_dir);
    }

    const ExperimentConfig& config() const { return cfg_; }
    const RunManifest& manifest() const { return manifest_; }

    // ------------------------------------------------------------- stages

    void ensure_data() {
        if (data_done_) return;
        detail::StageTimer timer;
        all_ = data::load_dataset(cfg_.dataset);
        if (cfg_.dataset.rfind("mnist", 0) == 0 && cfg_.dataset.find(':') == std::string::npos) {
            GMI_CHECK(all_.size() == 70000, "mnist: expected the 70000-image corpus");
            GMI_CHECK(data::count_label(all_, 5) + data::count_label(all_, 6) +
                              data::count_label(all_, 7) + data::count_label(all_, 8) +
                              data::count_label(all_, 9) ==
                          34265,
                      "mnist: label 5-9 count is off");
        }
        data::SplitSpec split{cfg_.private_labels, cfg_.public_labels};
        auto [priv, pub] = data::split_private_public(all_, split);
        priv_ = std::move(priv);
        pub_ = std::move(pub);
        if (train_size_frac_ < 1.0) subsample_private(train_size_frac_);
        if (cfg_.augment_pairs > 0) {
            data::AugmentConfig acfg;
            acfg.pairs = cfg_.augment_pairs;
            acfg.interpolation_points = cfg_.augment_points;
            acfg.latent_dim = cfg_.augment_latent;
            acfg.seed = derive_seed(cfg_.seed, "augment");
            pub_ = data::augment_public_autoencoder(pub_, acfg);
        }
        auto [tr, te] = data::train_test_split(priv_, cfg_.train_frac, derive_seed(cfg_.seed, "split"));
        priv_train_ = std::move(tr);
        priv_test_ = std::move(te);
        // private labels remapped to a dense range for the target's head
        label_map_priv_train_ = priv_train_;
        label_map_ = data::compact_labels(label_map_priv_train_);
        label_map_priv_test_ = priv_test_;
        data::compact_labels(label_map_priv_test_);

        record_stage("data", data_digest(), false, timer.seconds(), {});
        data_done_ = true;
    }

    void ensure_target() {
        if (target_done_) return;
        ensure_data();
        detail::StageTimer timer;
        auto digest = target_digest();
        auto path = cfg_.cache_dir / ("target_" + digest + ".ckpt");
        bool hit = std::filesystem::exists(path);
        if (hit) {
            target_ = zoo::load_classifier(path);
        } else {
            const Shape in_shape = priv_train_[0].image.shape();
            target_ = zoo::build_classifier(cfg_.target_arch, int(label_map_.size()), in_shape,
                                            derive_seed(cfg_.seed, "target_init/v" + std::to_string(cfg_.variant)), cfg_.target_opts);
            json report;
            if (cfg_.target_dp) {
                auto dpcfg = cfg_.dp;
                dpcfg.seed = derive_seed(cfg_.seed, "target_dp/v" + std::to_string(cfg_.variant));
                auto priv_rep = zoo::train_classifier_dp(target_, label_map_priv_train_, dpcfg);
                report = priv_rep.to_json();
                report["train_acc"] = zoo::accuracy(target_, label_map_priv_train_);
                report["test_acc"] = zoo::accuracy(target_, label_map_priv_test_);
                report["epochs"] = dpcfg.epochs;
                report["seed"] = dpcfg.seed;
            } else {
                auto tcfg = cfg_.target_train;
                tcfg.seed = derive_seed(cfg_.seed, "target_train/v" + std::to_string(cfg_.variant));
                auto rep =
                    zoo::train_classifier(target_, label_map_priv_train_, label_map_priv_test_, tcfg);
                report = rep.to_json();
            }
            zoo::save_classifier(path, target_, digest);
            write_text_atomic(cfg_.out_dir / "target_report.json", report.dump(2) + "\n");
        }
        record_stage("target", digest, hit, timer.seconds(), {path.string()});
        target_done_ = true;
    }

    void ensure_eval() {
        if (eval_done_) return;
        detail::StageTimer timer;
        auto digest = eval_digest();
        auto path = cfg_.cache_dir / ("eval_" + digest + ".ckpt");
        bool hit = std::filesystem::exists(path);
        if (hit) {
            eval_ = zoo::load_classifier(path);
        } else {
            auto train = data::load_dataset(cfg_.eval_dataset);
            auto test = data::load_dataset(cfg_.eval_test_dataset);
            const Shape in_shape = train[0].image.shape();
            eval_ = zoo::build_classifier(cfg_.eval_arch, data::num_classes(train), in_shape,
                                          derive_seed(cfg_.seed, "eval_init"));
            auto ecfg = cfg_.eval_train;
            ecfg.seed = derive_seed(cfg_.seed, "eval_train");
            auto rep = zoo::train_classifier(eval_, train, test, ecfg);
            zoo::save_classifier(path, eval_, digest);
            write_text_atomic(cfg_.out_dir / "eval_report.json", rep.to_json().dump(2) + "\n");
            eval_test_acc_ = rep.test_acc;
        }
        record_stage("eval", digest, hit, timer.seconds(), {path.string()});
        eval_done_ = true;
    }

    void ensure_prior() {
        if (prior_done_) return;
        ensure_data();
        if (cfg_.gan.lambda_div > 0) ensure_target();
        detail::StageTimer timer;
        auto digest = prior_digest();
        auto path = cfg_.cache_dir / ("prior_" + digest + ".ckpt");
        bool hit = std::filesystem::exists(path);
        if (hit) {
            prior_ = prior::load_prior(path);
        } else {
            const Shape in_shape = pub_[0].image.shape();
            auto nets = prior::build_prior_networks(in_shape, cfg_.latent_dim, cfg_.aux_mode,
                                                    derive_seed(cfg_.seed, "prior_init"));
            auto gcfg = cfg_.gan;
            gcfg.seed = derive_seed(cfg_.seed, "prior_train");
            prior_ = prior::train_prior(std::move(nets), pub_,
                                        cfg_.gan.lambda_div > 0 ? &target_ : nullptr, gcfg);
            prior::save_prior(path, prior_);
            write_text_atomic(cfg_.out_dir / "prior_trace.csv", prior::trace_csv(prior_));
        }
        record_stage("prior", digest, hit, timer.seconds(), {path.string()});
        prior_done_ = true;
    }

    struct AttackArtifacts {
        std::vector<std::string> attack_names;
        TensorF targets;                       // [M,C,H,W]
        TensorF aux_images;                    // [M,C,H,W]
        std::vector<int> labels;               // compact target-space labels
        std::vector<int> original_labels;      // dataset labels (eval space)
        std::vector<TensorF> recons;           // one [M,C,H,W] per attack
        std::vector<std::vector<double>> mean_traces;
    };

    void ensure_attacks() {
        if (attacks_done_) return;
        ensure_target();
        ensure_prior();
        detail::StageTimer timer;
        auto digest = attacks_digest();
        auto path = cfg_.cache_dir / ("attacks_" + digest + ".ckpt");
        bool hit = std::filesystem::exists(path);
        if (hit) {
            load_attack_artifacts(path);
        } else {
            run_attacks();
            save_attack_artifacts(path);
        }
        record_stage("attacks", digest, hit, timer.seconds(), {path.string()});
        attacks_done_ = true;
    }

    void ensure_metrics() {
        if (metrics_done_) return;
        ensure_attacks();
        ensure_eval();
        detail::StageTimer timer;
        metrics::require_independent_evaluator(eval_, target_.digest());

        std::string csv = "model,attack,setting,psnr,attack_acc_top1,attack_acc_topk,feat_dist,knn_dist\n";
        json all_reports = json::object();
        const std::size_t M = art_.labels.size();
        const std::size_t d = shape_numel(target_.input_shape);

        // per-label centroids and class feature sets from the target's train split
        std::map<int, std::vector<float>> centroids;
        std::map<int, std::vector<std::vector<float>>> class_feats;
        for (int lab : cfg_.attacked_labels) {
            data::Samples cls;
            for (auto& s : priv_train_)
                if (s.label == lab) cls.push_back(s);
            GMI_CHECK(!cls.empty(), "metrics: attacked label missing from train split");
            centroids[lab] = metrics::class_centroid(eval_, cls, lab);
            auto& feats = class_feats[lab];
            for (auto& s : cls) feats.push_back(zoo::feature_extract(eval_, s.image));
        }

        for (std::size_t a = 0; a < art_.attack_names.size(); ++a) {
            metrics::MetricsReport rep;
            rep.topk = cfg_.topk;
            rep.count = M;
            double psnr_acc = 0;
            std::map<int, std::pair<double, double>> label_feat, label_knn;  // (sum, n)
            std::map<int, std::pair<double, double>> label_hits;
            std::vector<metrics::LabeledRecon> results;
            for (std::size_t i = 0; i < M; ++i) {
                TensorF recon(target_.input_shape);
                std::copy(art_.recons[a].data() + i * d, art_.recons[a].data() + (i + 1) * d,
                          recon.data());
                TensorF tgt(target_.input_shape);
                std::copy(art_.targets.data() + i * d, art_.targets.data() + (i + 1) * d, tgt.data());
                int lab = art_.original_labels[i];
                psnr_acc += metrics::psnr(tgt, recon);
                double fd = metrics::feature_distance(eval_, recon, centroids[lab]);
                double kd = metrics::knn_distance_features(zoo::feature_extract(eval_, recon),
                                                           class_feats[lab]);
                label_feat[lab].first += fd;
                label_feat[lab].second += 1;
                label_knn[lab].first += kd;
                label_knn[lab].second += 1;
                auto probs = zoo::predict_proba(eval_, recon);
                bool top1 = metrics::label_rank(probs, lab) < 1;
                label_hits[lab].first += top1 ? 1 : 0;
                label_hits[lab].second += 1;
                results.push_back({std::move(recon), lab});
            }
            rep.psnr_db = psnr_acc / double(M);
            rep.attack_acc_top1 = metrics::attack_accuracy(eval_, results, 1, target_.digest());
            rep.attack_acc_topk = metrics::attack_accuracy(eval_, results, cfg_.topk, target_.digest());
            double fsum = 0, ksum = 0;
            for (auto& [lab, sn] : label_feat) fsum += sn.first / sn.second;
            for (auto& [lab, sn] : label_knn) ksum += sn.first / sn.second;
            rep.feat_dist = fsum / double(label_feat.size());  // uniform over labels
            rep.knn_dist = ksum / double(label_knn.size());
            for (auto& [lab, sn] : label_hits) rep.per_label_top1[lab] = sn.first / sn.second;

            csv += rep.csv_row(cfg_.target_arch, art_.attack_names[a],
                               data::aux_mode_name(cfg_.aux_mode)) +
                   "\n";
            all_reports[art_.attack_names[a]] = rep.to_json();
            reports_[art_.attack_names[a]] = rep;
        }
        write_text_atomic(cfg_.out_dir / "results.csv", csv);
        write_text_atomic(cfg_.out_dir / "metrics.json", all_reports.dump(2) + "\n");
        manifest_.artifacts["results_csv"] = (cfg_.out_dir / "results.csv").string();
        manifest_.artifacts["metrics_json"] = (cfg_.out_dir / "metrics.json").string();
        record_stage("metrics", detail::ds(attacks_digest() + eval_digest() + std::to_string(cfg_.topk)),
                     false, timer.seconds(),
                     {(cfg_.out_dir / "results.csv").string(), (cfg_.out_dir / "metrics.json").string()});
        metrics_done_ = true;
    }

    RunManifest run_all() {
        std::string stage = "data";
        try {
            ensure_data();
            stage = "target";
            ensure_target();
            stage = "prior";
            ensure_prior();
            stage = "attacks";
            ensure_attacks();
            stage = "eval";
            ensure_eval();
            stage = "metrics";
            ensure_metrics();
            stage = "report";
            emit_report();
        } catch (...) {
            manifest_.failed_stage = stage;
            write_manifest();
            throw;
        }
        write_manifest();
        return manifest_;
    }

    // image grids, metric tables and plots from the stored artifacts
    void emit_report() {
        ensure_metrics();
        // grid: target | aux | one column per attack, a row per attacked image
        std::vector<TensorF> cells;
        const std::size_t d = shape_numel(target_.input_shape);
        std::size_t rows = std::min<std::size_t>(art_.labels.size(), 16);
        std::size_t cols = 2 + art_.attack_names.size();
        for (std::size_t i = 0; i < rows; ++i) {
            auto cut = [&](const TensorF& block) {
                TensorF img(target_.input_shape);
                std::copy(block.data() + i * d, block.data() + (i + 1) * d, img.data());
                return img;
            };
            cells.push_back(cut(art_.targets));
            cells.push_back(cut(art_.aux_images));
            for (auto& r : art_.recons) cells.push_back(cut(r));
        }
        auto grid = io::tile_grid(cells, cols);
        io::write_png(cfg_.out_dir / "grid.png", grid);

        std::string note = "columns: target aux";
        for (auto& n : art_.attack_names) note += " " + n;
        for (const char* want : {"emi", "pii", "gmi"})
            if (std::find(art_.attack_names.begin(), art_.attack_names.end(), want) ==
                art_.attack_names.end())
                note += std::string("\nnote: ") + want + " column absent from this run";
        note += "\n";
        write_text_atomic(cfg_.out_dir / "grid_columns.txt", note);

        // metric table as text
        std::string table = read_text(cfg_.out_dir / "results.csv");
        std::string pretty;
        for (auto& ch : table) pretty += ch == ',' ? '\t' : ch;
        write_text_atomic(cfg_.out_dir / "results.txt", pretty);

        // loss-trace plot per attack
        io::Chart chart;
        for (auto& tr : art_.mean_traces) {
            std::vector<std::pair<double, double>> pts;
            for (std::size_t i = 0; i < tr.size(); ++i) pts.push_back({double(i), tr[i]});
            if (!pts.empty()) chart.series.push_back(std::move(pts));
        }
        if (!chart.series.empty()) io::write_png(cfg_.out_dir / "attack_losses.png", chart.render());

        manifest_.artifacts["grid_png"] = (cfg_.out_dir / "grid.png").string();
        record_stage("report", manifest_.config_digest, false, 0.0,
                     {(cfg_.out_dir / "grid.png").string()});
    }

    void write_manifest() {
        for (auto& s : manifest_.stages)
            for (auto& p : s.outputs)
                GMI_CHECK(p.empty() || std::filesystem::exists(p),
                          "manifest references a missing path: " + p);
        write_text_atomic(cfg_.out_dir / "manifest.json", manifest_.to_json().dump(2) + "\n");
    }

    // ------------------------------------------------------------ accessors

    zoo::ClassifierModel& target() { return target_; }
    zoo::ClassifierModel& eval_model() { return eval_; }
    prior::PriorCheckpoint& prior_checkpoint() { return prior_; }
    const data::Samples& private_train() const { return priv_train_; }
    const data::Samples& private_test() const { return priv_test_; }
    const data::Samples& public_set() const { return pub_; }
    const data::Samples& compact_private_train() const { return label_map_priv_train_; }
    const data::Samples& compact_private_test() const { return label_map_priv_test_; }
    const std::vector<int>& label_map() const { return label_map_; }
    const std::map<std::string, metrics::MetricsReport>& metric_reports() const { return reports_; }
    double eval_test_accuracy() const { return eval_test_acc_; }
    const AttackArtifacts& attack_artifacts() const { return art_; }

    void set_train_size_fraction(double f) {
        GMI_CHECK(!data_done_, "set_train_size_fraction must precede the data stage");
        train_size_frac_ = f;
    }

    // digests double as cache keys; exposed for tests
    std::string data_digest() const {
        std::string s = cfg_.dataset + "/" + std::to_string(cfg_.seed) + "/" + fmt_g(cfg_.train_frac) +
                        "/" + std::to_string(cfg_.augment_pairs) + "/" +
                        std::to_string(cfg_.augment_points) + "/" + fmt_g(train_size_frac_);
        for (int l : cfg_.private_labels) s += "p" + std::to_string(l);
        for (int l : cfg_.public_labels) s += "q" + std::to_string(l);
        return detail::ds(s);
    }
    std::string target_digest() const {
        std::string s = data_digest() + "/" + cfg_.target_arch + "/" +
                        fmt_g(cfg_.target_opts.dropout_rate) + "/" +
                        std::to_string(cfg_.target_opts.batch_norm) + "/";
        if (cfg_.target_dp)
            s += "dp/" + fmt_g(cfg_.dp.noise_ratio) + "/" + fmt_g(cfg_.dp.clip_norm) + "/" +
                 std::to_string(cfg_.dp.epochs) + "/" + std::to_string(cfg_.dp.batch_size) + "/" +
                 fmt_g(cfg_.dp.learning_rate) + "/" + fmt_g(cfg_.dp.delta);
        else
            s += cfg_.target_train.optimizer + "/" + fmt_g(cfg_.target_train.learning_rate) + "/" +
                 std::to_string(cfg_.target_train.batch_size) + "/" +
                 fmt_g(cfg_.target_train.momentum) + "/" + fmt_g(cfg_.target_train.weight_decay) +
                 "/" + std::to_string(cfg_.target_train.epochs);
        return detail::ds(s + "/" + std::to_string(cfg_.seed) + "/v" + std::to_string(cfg_.variant));
    }
    std::string eval_digest() const {
        return detail::ds(cfg_.eval_dataset + "/" + cfg_.eval_test_dataset + "/" + cfg_.eval_arch + "/" +
                          cfg_.eval_train.optimizer + "/" + fmt_g(cfg_.eval_train.learning_rate) + "/" +
                          std::to_string(cfg_.eval_train.epochs) + "/" +
                          std::to_string(cfg_.eval_train.batch_size) + "/" + std::to_string(cfg_.seed));
    }
    std::string prior_digest() const {
        std::string s = data_digest() + "/" + data::aux_mode_name(cfg_.aux_mode) + "/" +
                        std::to_string(cfg_.latent_dim) + "/" + cfg_.gan.digest();
        if (cfg_.gan.lambda_div > 0) s += "/" + target_digest();
        return detail::ds(s);
    }
    std::string attacks_digest() const {
        std::string s = prior_digest() + "/" + target_digest() + "/" + cfg_.inversion.digest();
        for (auto& a : cfg_.attacks) s += "/" + a;
        for (int l : cfg_.attacked_labels) s += "l" + std::to_string(l);
        s += "/" + std::to_string(cfg_.images_per_label) + "/" + cfg_.attack_source;
        s += "/v" + std::to_string(cfg_.variant);
        return detail::ds(s);
    }

  private:
    void subsample_private(double frac) {
        Rng rng(derive_seed(cfg_.seed, "train_size"));
        std::map<int, data::Samples> by_label;
        for (auto& s : priv_) by_label[s.label].push_back(s);
        data::Samples kept;
        for (auto& [lab, group] : by_label) {
            std::vector<std::size_t> idx(group.size());
            for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
            rng.shuffle(idx.begin(), idx.end());
            std::size_t keep = std::max<std::size_t>(1, std::size_t(frac * double(group.size())));
            for (std::size_t i = 0; i < keep; ++i) kept.push_back(group[idx[i]]);
        }
        priv_ = std::move(kept);
    }

    data::AuxKnowledge make_aux(const data::ImageSample& s) const {
        const Shape& sh = s.image.shape();
        switch (cfg_.aux_mode) {
            case data::AuxMode::corrupted:
                return data::apply_corruption(s, data::render_mask(cfg_.gan.mask_spec, sh[1], sh[2]));
            case data::AuxMode::blurred:
                return data::apply_blur(s, cfg_.gan.blur_sigma, cfg_.gan.blur_kernel);
            case data::AuxMode::none:
            default: {
                data::AuxKnowledge a;
                a.mode = data::AuxMode::none;
                return a;
            }
        }
    }

    void run_attacks() {
        // deterministically pick attacked images per label
        const data::Samples& source = cfg_.attack_source == "test" ? priv_test_ : priv_train_;
        struct Task {
            data::ImageSample sample;  // original-label sample
            int compact_label;
        };
        std::vector<Task> tasks;
        Rng pick_rng(derive_seed(cfg_.seed, "attack_pick"));
        for (int lab : cfg_.attacked_labels) {
            std::vector<std::size_t> idx;
            for (std::size_t i = 0; i < source.size(); ++i)
                if (source[i].label == lab) idx.push_back(i);
            GMI_CHECK(!idx.empty(), "attacks: no images of label " + std::to_string(lab) + " available");
            pick_rng.shuffle(idx.begin(), idx.end());
            int compact = int(std::lower_bound(label_map_.begin(), label_map_.end(), lab) -
                              label_map_.begin());
            for (std::size_t i = 0; i < std::min(cfg_.images_per_label, idx.size()); ++i)
                tasks.push_back({source[idx[i]], compact});
        }
        const std::size_t M = tasks.size();
        const Shape in_shape = target_.input_shape;
        const std::size_t d = shape_numel(in_shape);

        art_ = AttackArtifacts{};
        art_.attack_names = cfg_.attacks;
        art_.targets = TensorF(Shape{M, in_shape[0], in_shape[1], in_shape[2]});
        art_.aux_images = TensorF(Shape{M, in_shape[0], in_shape[1], in_shape[2]}, 0.0f);
        std::vector<data::AuxKnowledge> task_aux(M);
        for (std::size_t i = 0; i < M; ++i) {
            std::copy(tasks[i].sample.image.begin(), tasks[i].sample.image.end(),
                      art_.targets.data() + i * d);
            art_.labels.push_back(tasks[i].compact_label);
            art_.original_labels.push_back(tasks[i].sample.label);
            task_aux[i] = make_aux(tasks[i].sample);
            if (task_aux[i].mode != data::AuxMode::none)
                std::copy(task_aux[i].image.begin(), task_aux[i].image.end(),
                          art_.aux_images.data() + i * d);
        }

        for (auto& attack_name : cfg_.attacks) {
            TensorF recons(Shape{M, in_shape[0], in_shape[1], in_shape[2]});
            std::vector<double> mean_trace;
            std::vector<std::vector<double>> traces(M);
            std::atomic<std::size_t> next{0};
            std::atomic<bool> failed{false};
            std::string error_msg;
            std::mutex err_mu;

            auto worker = [&] {
                for (;;) {
                    std::size_t i = next.fetch_add(1);
                    if (i >= M || failed.load()) break;
                    try {
                        const auto& aux = task_aux[i];
                        auto icfg = cfg_.inversion;
                        icfg.seed = derive_seed(cfg_.seed, attack_name + "/" +
                                                               std::to_string(tasks[i].sample.label) +
                                                               "/" + std::to_string(i) + "/v" +
                                                               std::to_string(cfg_.variant));
                        attack::AttackResult res;
                        if (attack_name == "gmi")
                            res = attack::gmi_invert(prior_, target_, tasks[i].compact_label, aux, icfg);
                        else if (attack_name == "emi")
                            res = attack::emi_invert(target_, tasks[i].compact_label, aux, icfg);
                        else
                            res = attack::pii_inpaint(prior_, aux, icfg);
                        std::copy(res.image.begin(), res.image.end(), recons.data() + i * d);
                        if (!res.traces.empty()) traces[i] = res.traces[res.chosen_restart];
                        if (cfg_.save_attack_results)
                            attack::save_attack_result(
                                cfg_.out_dir / "attack_results" / attack_name /
                                    (std::to_string(tasks[i].sample.label) + "_" + std::to_string(i)),
                                res, cfg_.inversion.digest());
                    } catch (const std::exception& e) {
                        std::lock_guard<std::mutex> lock(err_mu);
                        failed = true;
                        error_msg = e.what();
                    }
                }
            };
            std::size_t nworkers = std::max<std::size_t>(1, cfg_.workers);
            std::vector<std::thread> pool;
            for (std::size_t w = 0; w < nworkers; ++w) pool.emplace_back(worker);
            for (auto& t : pool) t.join();
            if (failed) throw StageError("attack '" + attack_name + "' failed: " + error_msg);

            // element-wise mean trace over images (downsampled for the report)
            std::size_t tlen = 0;
            for (auto& t : traces) tlen = std::max(tlen, t.size());
            for (std::size_t j = 0; j < tlen; ++j) {
                double acc = 0;
                std::size_t n = 0;
                for (auto& t : traces)
                    if (j < t.size()) {
                        acc += t[j];
                        ++n;
                    }
                mean_trace.push_back(n ? acc / double(n) : 0.0);
            }
            if (mean_trace.size() > 200) {
                std::vector<double> ds;
                std::size_t stride = mean_trace.size() / 200 + 1;
                for (std::size_t j = 0; j < mean_trace.size(); j += stride) ds.push_back(mean_trace[j]);
                mean_trace = std::move(ds);
            }
            art_.recons.push_back(std::move(recons));
            art_.mean_traces.push_back(std::move(mean_trace));
        }
    }

    void save_attack_artifacts(const std::filesystem::path& path) {
        json traces = json::array();
        for (auto& t : art_.mean_traces) traces.push_back(t);
        json header{{"kind", "attacks"},
                    {"attack_names", art_.attack_names},
                    {"labels", art_.labels},
                    {"original_labels", art_.original_labels},
                    {"mean_traces", traces}};
        std::vector<const TensorF*> tensors{&art_.targets, &art_.aux_images};
        for (auto& r : art_.recons) tensors.push_back(&r);
        ckpt::save(path, header, tensors);
    }

    void load_attack_artifacts(const std::filesystem::path& path) {
        auto loaded = ckpt::load(path);
        GMI_CHECK(loaded.header.at("kind") == "attacks", "not an attack artifact file");
        art_ = AttackArtifacts{};
        art_.attack_names = loaded.header.at("attack_names").get<std::vector<std::string>>();
        art_.labels = loaded.header.at("labels").get<std::vector<int>>();
        art_.original_labels = loaded.header.at("original_labels").get<std::vector<int>>();
        for (auto& t : loaded.header.at("mean_traces"))
            art_.mean_traces.push_back(t.get<std::vector<double>>());
        art_.targets = loaded.tensors.at(0);
        art_.aux_images = loaded.tensors.at(1);
        for (std::size_t i = 2; i < loaded.tensors.size(); ++i)
            art_.recons.push_back(loaded.tensors[i]);
    }

    void record_stage(const std::string& name, const std::string& digest, bool hit, double secs,
                      std::vector<std::string> outputs) {
        manifest_.stages.push_back({name, digest, hit, secs, std::move(outputs)});
    }

    ExperimentConfig cfg_;
    RunManifest manifest_;
    double train_size_frac_ = 1.0;

    data::Samples all_, priv_, pub_, priv_train_, priv_test_;
    data::Samples label_map_priv_train_, label_map_priv_test_;
    std::vector<int> label_map_;
    zoo::ClassifierModel target_, eval_;
    prior::PriorCheckpoint prior_;
    AttackArtifacts art_;
    std::map<std::string, metrics::MetricsReport> reports_;
    double eval_test_acc_ = 0;

    bool data_done_ = false, target_done_ = false, eval_done_ = false, prior_done_ = false,
         attacks_done_ = false, metrics_done_ = false;
};

// ------------------------------------------------------------------ sweeps

struct DpSweepRow {
    double noise_ratio = 0;
    double epsilon = 0;
    double target_test_acc = 0;
    double gmi_acc = 0;
    double pii_acc = 0;
};

struct DpSweepReport {
    std::vector<DpSweepRow> rows;

    std::string csv() const {
        std::string out = "noise_ratio,epsilon,target_test_acc,gmi_acc,pii_acc\n";
        for (auto& r : rows)
            out += fmt_g(r.noise_ratio) + "," + (std::isinf(r.epsilon) ? "inf" : fmt_g(r.epsilon)) +
                   "," + fmt_g(r.target_test_acc) + "," + fmt_g(r.gmi_acc) + "," + fmt_g(r.pii_acc) +
                   "\n";
        return out;
    }
};

// One DP target per noise ratio; GMI and PII against each; the GAN prior is
// shared across ratios (diversity disabled so the prior has no target
// dependence).
inline DpSweepReport dp_sweep(const ExperimentConfig& base, const std::vector<double>& ratios) {
    for (double r : ratios) GMI_CHECK_PARAM(r >= 0, "dp_sweep: ratios must be nonnegative");
    DpSweepReport report;
    if (ratios.empty()) return report;

    for (double ratio : ratios) {
        ExperimentConfig cfg = base;
        cfg.target_dp = true;
        cfg.dp.noise_ratio = ratio;
        cfg.dp.learning_rate = ratio >= 28 ? 0.01 : base.dp.learning_rate;
        cfg.gan.lambda_div = 0;  // one prior serves every ratio
        cfg.attacks = {"gmi", "pii"};
        cfg.canonical = base.canonical + "override.dp_noise_ratio=" + fmt_g(ratio) + "\n";
        cfg.out_dir = base.out_dir / ("dp_ratio_" + fmt_g(ratio));

        Pipeline pipe(cfg);
        pipe.ensure_metrics();

        DpSweepRow row;
        row.noise_ratio = ratio;
        const std::size_t N = pipe.compact_private_train().size();
        const std::size_t B = std::min(cfg.dp.batch_size, N);
        std::size_t steps = (N + B - 1) / B * std::size_t(cfg.dp.epochs);
        row.epsilon = zoo::compute_epsilon(ratio, double(B) / double(N), steps, cfg.dp.delta);
        row.target_test_acc = zoo::accuracy(pipe.target(), pipe.compact_private_test());
        row.gmi_acc = pipe.metric_reports().at("gmi").attack_acc_top1;
        row.pii_acc = pipe.metric_reports().at("pii").attack_acc_top1;
        report.rows.push_back(row);
    }

    write_text_atomic(base.out_dir / "dp_sweep.csv", report.csv());
    io::Chart chart;
    std::vector<std::pair<double, double>> gmi_pts, pii_pts;
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
        gmi_pts.push_back({double(i), report.rows[i].gmi_acc});
        pii_pts.push_back({double(i), report.rows[i].pii_acc});
    }
    chart.series = {gmi_pts, pii_pts};
    io::write_png(base.out_dir / "dp_sweep.png", chart.render());
    return report;
}

struct PowerSweepRow {
    double value = 0;
    double predictive_power = 0;
    double gmi_acc = 0;
};

struct PowerSweepReport {
    std::string axis;
    std::vector<PowerSweepRow> rows;
    double spearman = 0;
    bool spearman_defined = false;

    std::string csv() const {
        std::string out = "axis,value,predictive_power,gmi_acc\n";
        for (auto& r : rows)
            out += axis + "," + fmt_g(r.value) + "," + fmt_g(r.predictive_power) + "," +
                   fmt_g(r.gmi_acc) + "\n";
        return out;
    }
};

// Targets with varied predictive power share one GAN prior (diversity off,
// exactly so the prior is reusable across architectures/regularizers).
inline PowerSweepReport predictive_power_sweep(const ExperimentConfig& base, const std::string& axis,
                                               const std::vector<double>& values) {
    GMI_CHECK_PARAM(axis == "train_size" || axis == "dropout" || axis == "batch_norm",
                    "power sweep axis must be train_size | dropout | batch_norm");
    PowerSweepReport report;
    report.axis = axis;

    for (double v : values) {
        if (axis == "train_size") GMI_CHECK_PARAM(v > 0 && v <= 1, "train_size values must lie in (0,1]");
        if (axis == "dropout") GMI_CHECK_PARAM(v >= 0 && v < 1, "dropout values must lie in [0,1)");
        ExperimentConfig cfg = base;
        cfg.gan.lambda_div = 0;  // shared prior across targets
        cfg.attacks = {"gmi"};
        cfg.canonical = base.canonical + "override." + axis + "=" + fmt_g(v) + "\n";
        cfg.out_dir = base.out_dir / (axis + "_" + fmt_g(v));
        if (axis == "dropout") cfg.target_opts.dropout_rate = v;
        if (axis == "batch_norm") cfg.target_opts.batch_norm = v != 0;

        Pipeline pipe(cfg);
        if (axis == "train_size") pipe.set_train_size_fraction(v);
        pipe.ensure_metrics();

        PowerSweepRow row;
        row.value = v;
        const Shape& sh = pipe.target().input_shape;
        row.predictive_power = zoo::predictive_power_empirical(
            pipe.target(), pipe.compact_private_test(),
            data::render_mask(cfg.gan.mask_spec, sh[1], sh[2]));
        row.gmi_acc = pipe.metric_reports().at("gmi").attack_acc_top1;
        report.rows.push_back(row);
    }

    if (report.rows.size() >= 2) {
        std::vector<double> power, acc;
        for (auto& r : report.rows) {
            power.push_back(r.predictive_power);
            acc.push_back(r.gmi_acc);
        }
        report.spearman = metrics::spearman(power, acc);
        report.spearman_defined = true;
    }

    write_text_atomic(base.out_dir / "power_sweep.csv", report.csv());
    io::Chart chart;
    chart.lines = false;
    std::vector<std::pair<double, double>> pts;
    for (auto& r : report.rows) pts.push_back({r.predictive_power, r.gmi_acc});
    chart.series = {pts};
    io::write_png(base.out_dir / "power_sweep.png", chart.render());
    return report;
}

}  // namespace gmi::exp

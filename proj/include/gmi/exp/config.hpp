#pragma once

#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gmi/attack/inversion.hpp"
#include "gmi/core/error.hpp"
#include "gmi/core/serialize.hpp"
#include "gmi/data/mask.hpp"
#include "gmi/prior/gan.hpp"
#include "gmi/zoo/classifier.hpp"
#include "gmi/zoo/dp.hpp"

namespace gmi::exp {

// Flat key-value text with [section] headers; '#' and ';' start comments.
class KvConfig {
  public:
    static KvConfig parse(const std::string& text) {
        KvConfig cfg;
        std::istringstream in(text);
        std::string line, section;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            auto hash = line.find_first_of("#;");
            if (hash != std::string::npos) line = line.substr(0, hash);
            auto trim = [](std::string s) {
                auto b = s.find_first_not_of(" \t\r");
                auto e = s.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
            };
            line = trim(line);
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']')
                    throw ConfigError("config line " + std::to_string(lineno) + ": unterminated section");
                section = trim(line.substr(1, line.size() - 2));
                continue;
            }
            auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
            std::string key = trim(line.substr(0, eq));
            std::string value = trim(line.substr(eq + 1));
            if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
            cfg.values_[section + "." + key] = value;
        }
        return cfg;
    }

    static KvConfig parse_file(const std::filesystem::path& path) {
        return parse(read_text(path));
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        seen_.insert(key);
        return it == values_.end() ? fallback : it->second;
    }
    double get_num(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        seen_.insert(key);
        if (it == values_.end()) return fallback;
        try {
            return std::stod(it->second);
        } catch (...) {
            throw ConfigError("config key '" + key + "': expected a number, got '" + it->second + "'");
        }
    }
    long get_int(const std::string& key, long fallback) const {
        double v = get_num(key, double(fallback));
        long r = long(v);
        if (double(r) != v) throw ConfigError("config key '" + key + "': expected an integer");
        return r;
    }
    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        seen_.insert(key);
        if (it == values_.end()) return fallback;
        if (it->second == "true" || it->second == "1" || it->second == "yes") return true;
        if (it->second == "false" || it->second == "0" || it->second == "no") return false;
        throw ConfigError("config key '" + key + "': expected a boolean");
    }
    std::vector<std::string> get_list(const std::string& key, const std::string& fallback) const {
        std::string raw = get(key, fallback);
        std::vector<std::string> out;
        std::stringstream ss(raw);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            auto b = tok.find_first_not_of(" \t");
            auto e = tok.find_last_not_of(" \t");
            if (b != std::string::npos) out.push_back(tok.substr(b, e - b + 1));
        }
        return out;
    }
    std::vector<int> get_int_list(const std::string& key, const std::string& fallback) const {
        std::vector<int> out;
        for (auto& s : get_list(key, fallback)) out.push_back(std::stoi(s));
        return out;
    }

    // every present key must have been consumed by a getter
    void reject_unknown_keys() const {
        for (auto& [k, v] : values_)
            if (!seen_.count(k)) throw ConfigError("unknown config key '" + k + "'");
    }

    std::string canonical_dump() const {
        std::string out;
        for (auto& [k, v] : values_) out += k + "=" + v + "\n";  // std::map is sorted
        return out;
    }

  private:
    std::map<std::string, std::string> values_;
    mutable std::set<std::string> seen_;
};

// ---------------------------------------------------------------- experiment

struct ExperimentConfig {
    std::string name = "experiment";
    std::uint64_t seed = 1;
    std::filesystem::path out_dir = "runs/out";
    std::filesystem::path cache_dir = "cache";

    // data
    std::string dataset = "synth";
    std::set<int> private_labels{5, 6, 7, 8, 9};
    std::set<int> public_labels{0, 1, 2, 3, 4};
    double train_frac = 0.9;
    std::size_t augment_pairs = 0;
    int augment_points = 1;
    int augment_latent = 32;

    // target
    std::string target_arch = "mnist_cnn_target";
    zoo::TrainConfig target_train;
    zoo::ArchOptions target_opts;
    bool target_dp = false;
    zoo::DPConfig dp;

    // evaluation classifier
    std::string eval_arch = "mnist_eval_cnn3";
    std::string eval_dataset = "synth:60000:20240001";
    std::string eval_test_dataset = "synth:10000:20240001:60000";
    zoo::TrainConfig eval_train;

    // prior
    data::AuxMode aux_mode = data::AuxMode::corrupted;
    std::size_t latent_dim = 64;
    prior::GanTrainConfig gan;

    // attack
    std::vector<std::string> attacks{"gmi", "emi"};
    std::vector<int> attacked_labels{5, 6, 7, 8, 9};
    std::size_t images_per_label = 20;
    attack::InversionConfig inversion;
    std::size_t workers = 2;
    std::string attack_source = "test";  // test | train
    bool save_attack_results = false;    // per-image AttackResult directories

    // metrics
    std::size_t topk = 5;

    // programmatic variant tag: separates target/attack seeds and cache keys
    // while keeping the data split and prior shared (sweep machinery)
    std::uint64_t variant = 0;

    std::string canonical;  // raw dump for digesting

    static const std::set<std::string>& known_archs() {
        static const std::set<std::string> archs{
            "softmax_net",    "mnist_mlp_dp_target", "mnist_cnn_target", "mnist_eval_cnn",
            "mnist_eval_cnn3", "mnist_eval_cnn5",     "lenet",            "simple_cnn",
            "vgg16",          "resnet152",           "face_evolve"};
        return archs;
    }

    static ExperimentConfig from_kv(const KvConfig& kv) {
        ExperimentConfig c;
        c.name = kv.get("experiment.name", c.name);
        c.seed = std::uint64_t(kv.get_int("experiment.seed", 1));
        c.out_dir = kv.get("experiment.out_dir", c.out_dir.string());
        c.cache_dir = kv.get("experiment.cache_dir", c.cache_dir.string());

        c.dataset = kv.get("data.dataset", c.dataset);
        auto to_set = [](const std::vector<int>& v) { return std::set<int>(v.begin(), v.end()); };
        c.private_labels = to_set(kv.get_int_list("data.private_labels", "5,6,7,8,9"));
        c.public_labels = to_set(kv.get_int_list("data.public_labels", "0,1,2,3,4"));
        c.train_frac = kv.get_num("data.train_frac", c.train_frac);
        c.augment_pairs = std::size_t(kv.get_int("data.augment_pairs", 0));
        c.augment_points = int(kv.get_int("data.augment_points", 1));
        c.augment_latent = int(kv.get_int("data.augment_latent", 32));

        c.target_arch = kv.get("target.arch", c.target_arch);
        c.target_train.optimizer = kv.get("target.optimizer", "sgd");
        c.target_train.learning_rate = kv.get_num("target.learning_rate", 1e-2);
        c.target_train.batch_size = std::size_t(kv.get_int("target.batch_size", 64));
        c.target_train.momentum = kv.get_num("target.momentum", 0.9);
        c.target_train.weight_decay = kv.get_num("target.weight_decay", 1e-4);
        c.target_train.epochs = int(kv.get_int("target.epochs", 10));
        c.target_opts.dropout_rate = kv.get_num("target.dropout", 0.0);
        c.target_opts.batch_norm = kv.get_bool("target.batch_norm", false);
        c.target_dp = kv.get_bool("target.dp", false);
        c.dp.noise_ratio = kv.get_num("target.dp_noise_ratio", 0.0);
        c.dp.clip_norm = kv.get_num("target.dp_clip", 1.5);
        c.dp.delta = kv.get_num("target.dp_delta", 1e-5);
        c.dp.epochs = int(kv.get_int("target.dp_epochs", 40));
        c.dp.batch_size = std::size_t(kv.get_int("target.dp_batch", 256));
        c.dp.learning_rate = kv.get_num("target.dp_lr", 0.1);

        c.eval_arch = kv.get("eval.arch", c.eval_arch);
        c.eval_dataset = kv.get("eval.dataset", c.eval_dataset);
        c.eval_test_dataset = kv.get("eval.test_dataset", c.eval_test_dataset);
        c.eval_train.optimizer = kv.get("eval.optimizer", "sgd");
        c.eval_train.learning_rate = kv.get_num("eval.learning_rate", 0.01);
        c.eval_train.batch_size = std::size_t(kv.get_int("eval.batch_size", 64));
        c.eval_train.momentum = kv.get_num("eval.momentum", 0.9);
        c.eval_train.weight_decay = kv.get_num("eval.weight_decay", 1e-4);
        c.eval_train.epochs = int(kv.get_int("eval.epochs", 8));

        c.aux_mode = data::parse_aux_mode(kv.get("prior.aux_mode", "corrupted"));
        c.latent_dim = std::size_t(kv.get_int("prior.latent_dim", 64));
        c.gan.lambda_div = kv.get_num("prior.lambda_div", 0.5);
        c.gan.adam_lr = kv.get_num("prior.adam_lr", 0.004);
        c.gan.beta1 = kv.get_num("prior.beta1", 0.5);
        c.gan.beta2 = kv.get_num("prior.beta2", 0.999);
        c.gan.batch_size = std::size_t(kv.get_int("prior.batch_size", 64));
        c.gan.generator_steps = std::size_t(kv.get_int("prior.generator_steps", 10000));
        c.gan.critic_steps = std::size_t(kv.get_int("prior.critic_steps", 5));
        c.gan.gp_weight = kv.get_num("prior.gp_weight", 10.0);
        c.gan.recon_weight = kv.get_num("prior.recon_weight", 1.0);
        std::string mask = kv.get("prior.mask", "center:0.5x0.5");
        if (mask.rfind("center", 0) == 0) {
            c.gan.mask_spec.kind = data::MaskKind::center;
            if (auto colon = mask.find(':'); colon != std::string::npos) {
                auto x = mask.find('x', colon);
                if (x == std::string::npos) throw ConfigError("prior.mask: expected center:HxW fractions");
                c.gan.mask_spec.h_frac = std::stod(mask.substr(colon + 1, x - colon - 1));
                c.gan.mask_spec.w_frac = std::stod(mask.substr(x + 1));
            }
        } else if (mask.rfind("face_t", 0) == 0) {
            c.gan.mask_spec.kind = data::MaskKind::face_t;
        } else {
            throw ConfigError("prior.mask: unknown mask kind in '" + mask + "'");
        }
        c.gan.blur_sigma = kv.get_num("prior.blur_sigma", 3.0);
        c.gan.blur_kernel = std::size_t(kv.get_int("prior.blur_kernel", 9));
        c.gan.seed = c.seed;

        c.attacks = kv.get_list("attack.attacks", "gmi,emi");
        c.attacked_labels = kv.get_int_list("attack.labels", "5,6,7,8,9");
        c.images_per_label = std::size_t(kv.get_int("attack.images_per_label", 20));
        c.inversion.lambda_id = kv.get_num("attack.lambda_id", 100.0);
        c.inversion.restarts = std::size_t(kv.get_int("attack.restarts", 5));
        c.inversion.iterations = std::size_t(kv.get_int("attack.iterations", 1500));
        c.inversion.optimizer = kv.get("attack.optimizer", "sgd_momentum");
        c.inversion.learning_rate = kv.get_num("attack.learning_rate", 0.02);
        c.inversion.momentum = kv.get_num("attack.momentum", 0.9);
        c.inversion.batch_size = std::size_t(kv.get_int("attack.batch_size", 64));
        c.workers = std::size_t(kv.get_int("attack.workers", 2));
        c.attack_source = kv.get("attack.source", "test");
        c.save_attack_results = kv.get_bool("attack.save_results", false);

        c.topk = std::size_t(kv.get_int("metrics.topk", 5));

        kv.reject_unknown_keys();
        c.canonical = kv.canonical_dump();
        c.validate();
        return c;
    }

    void validate() const {
        if (!known_archs().count(target_arch))
            throw ConfigError("unknown target architecture '" + target_arch + "'");
        if (!known_archs().count(eval_arch))
            throw ConfigError("unknown eval architecture '" + eval_arch + "'");
        for (int l : private_labels)
            if (public_labels.count(l))
                throw ConfigError("private/public label sets intersect at " + std::to_string(l));
        for (int l : attacked_labels)
            if (!private_labels.count(l))
                throw ConfigError("attacked label " + std::to_string(l) + " is not private");
        for (auto& a : attacks)
            if (a != "gmi" && a != "emi" && a != "pii")
                throw ConfigError("unknown attack '" + a + "'");
        if (target_dp && target_arch != "mnist_mlp_dp_target" && target_arch != "softmax_net")
            throw ConfigError("dp training supports dense architectures only");
        if (attack_source != "test" && attack_source != "train")
            throw ConfigError("attack.source must be test or train");
        if (train_frac <= 0 || train_frac >= 1) throw ConfigError("data.train_frac must lie in (0,1)");
        try {
            target_train.validate();
            eval_train.validate();
            gan.validate();
            inversion.validate();
            if (target_dp) dp.validate();
        } catch (const Error& e) {
            throw ConfigError(e.what());
        }
    }

    std::string config_digest() const { return digest_hex(digest_of(canonical + std::to_string(seed))); }
};

}  // namespace gmi::exp

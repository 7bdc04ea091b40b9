#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <vector>

#include "gmi/zoo/classifier.hpp"

namespace gmi::metrics {

// 10*log10(max^2 / MSE); identical images report the +inf sentinel.
inline double psnr(const TensorF& target, const TensorF& recon, double max_value = 1.0) {
    GMI_CHECK_SHAPE(target.shape() == recon.shape(), "psnr: shape mismatch");
    GMI_CHECK_PARAM(max_value > 0, "psnr: max_value must be positive");
    double mse = 0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        double d = double(target[i]) - double(recon[i]);
        mse += d * d;
    }
    mse /= double(target.size());
    if (mse == 0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(max_value * max_value / mse);
}

// Deterministic top-k rank: ties broken by ascending class id.
inline std::size_t label_rank(const std::vector<float>& probs, int label) {
    std::size_t rank = 0;
    float py = probs[std::size_t(label)];
    for (std::size_t c = 0; c < probs.size(); ++c) {
        if (int(c) == label) continue;
        if (probs[c] > py || (probs[c] == py && int(c) < label)) ++rank;
    }
    return rank;
}

using LabeledRecon = std::pair<TensorF, int>;  // (reconstruction, target label)

inline double attack_accuracy(zoo::ClassifierModel& eval_model,
                              const std::vector<LabeledRecon>& results, std::size_t k) {
    GMI_CHECK_PARAM(k >= 1, "attack_accuracy: k must be >= 1");
    GMI_CHECK(!results.empty(), "attack_accuracy: no results");
    std::size_t hit = 0;
    for (auto& [img, label] : results) {
        GMI_CHECK_PARAM(label >= 0 && label < eval_model.num_classes,
                        "attack_accuracy: label out of range");
        auto p = zoo::predict_proba(eval_model, img);
        hit += label_rank(p, label) < k;
    }
    return double(hit) / double(results.size());
}

// The evaluation classifier must be a different network than the target.
inline void require_independent_evaluator(const zoo::ClassifierModel& eval_model,
                                          const std::string& target_digest) {
    GMI_CHECK_PARAM(eval_model.digest() != target_digest,
                    "attack_accuracy: evaluation classifier must differ from the target network");
}

inline double attack_accuracy(zoo::ClassifierModel& eval_model,
                              const std::vector<LabeledRecon>& results, std::size_t k,
                              const std::string& target_digest) {
    require_independent_evaluator(eval_model, target_digest);
    return attack_accuracy(eval_model, results, k);
}

inline std::vector<float> class_centroid(zoo::ClassifierModel& eval_model,
                                         const data::Samples& training_set, int label) {
    std::vector<double> acc(eval_model.feature_dim, 0.0);
    std::size_t n = 0;
    for (auto& s : training_set) {
        if (s.label != label) continue;
        auto f = zoo::feature_extract(eval_model, s.image);
        for (std::size_t i = 0; i < f.size(); ++i) acc[i] += f[i];
        ++n;
    }
    GMI_CHECK_PARAM(n > 0, "class_centroid: label absent from set");
    std::vector<float> out(acc.size());
    for (std::size_t i = 0; i < acc.size(); ++i) out[i] = float(acc[i] / double(n));
    return out;
}

inline double feature_distance(zoo::ClassifierModel& eval_model, const TensorF& recon,
                               const std::vector<float>& centroid) {
    auto f = zoo::feature_extract(eval_model, recon);
    GMI_CHECK_SHAPE(f.size() == centroid.size(), "feature_distance: dimension mismatch");
    double acc = 0;
    for (std::size_t i = 0; i < f.size(); ++i) {
        double d = double(f[i]) - double(centroid[i]);
        acc += d * d;
    }
    return std::sqrt(acc);
}

inline double knn_distance_features(const std::vector<float>& recon_feat,
                                    const std::vector<std::vector<float>>& class_feats) {
    GMI_CHECK(!class_feats.empty(), "knn_distance: empty class set");
    double best = std::numeric_limits<double>::infinity();
    for (auto& f : class_feats) {
        GMI_CHECK_SHAPE(f.size() == recon_feat.size(), "knn_distance: dimension mismatch");
        double acc = 0;
        for (std::size_t i = 0; i < f.size(); ++i) {
            double d = double(recon_feat[i]) - double(f[i]);
            acc += d * d;
        }
        best = std::min(best, std::sqrt(acc));
    }
    return best;
}

inline double knn_distance(zoo::ClassifierModel& eval_model, const TensorF& recon,
                           const data::Samples& class_training_set) {
    GMI_CHECK(!class_training_set.empty(), "knn_distance: empty class set");
    auto rf = zoo::feature_extract(eval_model, recon);
    double best = std::numeric_limits<double>::infinity();
    for (auto& s : class_training_set) {
        auto f = zoo::feature_extract(eval_model, s.image);
        double acc = 0;
        for (std::size_t i = 0; i < f.size(); ++i) {
            double d = double(rf[i]) - double(f[i]);
            acc += d * d;
        }
        best = std::min(best, std::sqrt(acc));
    }
    return best;
}

// Fraction of reconstructions whose detected binary attribute matches.
inline double attribute_accuracy(zoo::ClassifierModel& attribute_classifier,
                                 const std::vector<LabeledRecon>& results) {
    GMI_CHECK(!results.empty(), "attribute_accuracy: no results");
    GMI_CHECK_PARAM(attribute_classifier.num_classes == 2, "attribute_accuracy: binary classifier expected");
    std::size_t hit = 0;
    for (auto& [img, label] : results) {
        GMI_CHECK_PARAM(label == 0 || label == 1, "attribute_accuracy: labels must be binary");
        auto p = zoo::predict_proba(attribute_classifier, img);
        int pred = p[1] > p[0] ? 1 : 0;
        hit += pred == label;
    }
    return double(hit) / double(results.size());
}

// ------------------------------------------------------------------ report

struct MetricsReport {
    double psnr_db = 0;
    double attack_acc_top1 = 0;
    double attack_acc_topk = 0;
    std::size_t topk = 5;
    double feat_dist = 0;
    double knn_dist = 0;
    std::size_t count = 0;
    std::map<int, double> per_label_top1;

    json to_json() const {
        json pl = json::object();
        for (auto& [l, v] : per_label_top1) pl[std::to_string(l)] = v;
        return json{{"psnr_db", std::isinf(psnr_db) ? json("inf") : json(psnr_db)},
                    {"attack_acc_top1", attack_acc_top1},
                    {"attack_acc_topk", attack_acc_topk},
                    {"topk", topk},
                    {"feat_dist", feat_dist},
                    {"knn_dist", knn_dist},
                    {"count", count},
                    {"per_label_top1", pl}};
    }
    // model,attack,setting,psnr,attack_acc_top1,attack_acc_topk,feat_dist,knn_dist
    std::string csv_row(const std::string& model, const std::string& attack_name,
                        const std::string& setting) const {
        return model + "," + attack_name + "," + setting + "," +
               (std::isinf(psnr_db) ? "inf" : fmt_g(psnr_db)) + "," + fmt_g(attack_acc_top1) + "," +
               fmt_g(attack_acc_topk) + "," + fmt_g(feat_dist) + "," + fmt_g(knn_dist);
    }
};

// Spearman rank correlation (average ranks for ties).
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    GMI_CHECK_PARAM(a.size() == b.size() && a.size() >= 2, "spearman: need >= 2 paired values");
    auto ranks = [](const std::vector<double>& v) {
        std::size_t n = v.size();
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
        std::vector<double> r(n);
        std::size_t i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
            double avg = (double(i) + double(j)) / 2.0 + 1.0;
            for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    auto ra = ranks(a), rb = ranks(b);
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < ra.size(); ++i) ma += ra[i], mb += rb[i];
    ma /= double(ra.size());
    mb /= double(rb.size());
    double num = 0, da = 0, db = 0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    if (da == 0 || db == 0) return 0.0;  // constant series: correlation undefined; report 0
    return num / std::sqrt(da * db);
}

}  // namespace gmi::metrics

#pragma once

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "gmi/core/autodiff.hpp"
#include "gmi/core/serialize.hpp"
#include "gmi/data/dataset.hpp"
#include "gmi/data/mask.hpp"
#include "gmi/nn/modules.hpp"
#include "gmi/nn/optim.hpp"

namespace gmi::zoo {

using ad::Var;

struct TrainConfig {
    std::string optimizer = "sgd";  // sgd | sgd_nesterov | adam
    double learning_rate = 1e-2;
    std::size_t batch_size = 64;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int epochs = 10;
    std::uint64_t seed = 1;

    void validate() const {
        GMI_CHECK_PARAM(learning_rate > 0, "learning_rate must be positive");
        GMI_CHECK_PARAM(batch_size >= 1, "batch_size must be >= 1");
        GMI_CHECK_PARAM(optimizer == "sgd" || optimizer == "sgd_nesterov" || optimizer == "adam",
                        "unknown optimizer '" + optimizer + "'");
    }
};

struct AccuracyReport {
    double train_acc = 0;
    double test_acc = 0;
    int epochs = 0;
    std::uint64_t seed = 0;

    json to_json() const {
        return json{{"train_acc", train_acc}, {"test_acc", test_acc}, {"epochs", epochs}, {"seed", seed}};
    }
};

// Sequential layer program; the penultimate boundary (everything before the
// final dense head) defines the feature extractor F, the head plus softmax
// defines C.
struct LayerRef {
    enum Kind { conv, pool, dense, flatten, relu, leaky, batchnorm, dropout } kind;
    std::size_t index = 0;  // into the per-kind storage
    float arg = 0.0f;       // leaky slope / dropout rate / pool size
};

struct ClassifierModel {
    std::string arch;
    int num_classes = 0;
    Shape input_shape;  // {C,H,W}
    double dropout_rate = 0.0;
    bool use_batch_norm = false;

    std::vector<nn::Conv2d<float>> convs;
    std::vector<nn::Dense<float>> denses;  // last entry is the head
    std::vector<nn::BatchNorm<float>> bns;
    std::vector<LayerRef> body;
    std::size_t feature_dim = 0;

    std::vector<Var<float>> params() {
        std::vector<Var<float>> out;
        for (auto& c : convs)
            for (auto& p : c.params()) out.push_back(p);
        for (auto& d : denses)
            for (auto& p : d.params()) out.push_back(p);
        for (auto& b : bns)
            for (auto& p : b.params()) out.push_back(p);
        return out;
    }

    std::string digest() const {
        std::string desc = arch + "/" + std::to_string(num_classes) + "/" + shape_str(input_shape) +
                           "/do" + fmt_g(dropout_rate) + "/bn" + std::to_string(use_batch_norm);
        return digest_hex(digest_of(desc));
    }

    // (features, logits); x is [N,C,H,W].
    std::pair<Var<float>, Var<float>> forward(const Var<float>& x, bool train, Rng* rng = nullptr) {
        GMI_CHECK_SHAPE(x->value.rank() == 4 && x->value.dim(1) == input_shape[0] &&
                            x->value.dim(2) == input_shape[1] && x->value.dim(3) == input_shape[2],
                        "classifier: input shape mismatch, expected [N," + shape_str(input_shape) + "]");
        Var<float> h = x;
        bool flat = false;
        for (auto& l : body) {
            switch (l.kind) {
                case LayerRef::conv: h = convs[l.index].forward(h); break;
                case LayerRef::pool: {
                    const Shape& s = h->value.shape();
                    h = ad::maxpool2d(h, s[0], s[1], s[2], s[3], std::size_t(l.arg));
                    break;
                }
                case LayerRef::dense: h = denses[l.index].forward(h); break;
                case LayerRef::flatten: h = nn::flatten_batch(h); flat = true; break;
                case LayerRef::relu: h = ad::relu(h); break;
                case LayerRef::leaky: h = ad::leaky_relu(h, l.arg); break;
                case LayerRef::batchnorm:
                    h = flat ? bns[l.index].forward_2d(h, train) : bns[l.index].forward_nchw(h, train);
                    break;
                case LayerRef::dropout:
                    if (train) {
                        GMI_CHECK(rng, "dropout in train mode needs an rng");
                        h = nn::dropout(h, double(l.arg), true, *rng);
                    }
                    break;
            }
        }
        Var<float> features = h;
        Var<float> logits = denses.back().forward(features);
        return {features, logits};
    }
};

namespace detail {

struct Builder {
    ClassifierModel m;
    std::size_t c, h, w;
    Rng rng;
    bool flattened = false;
    std::size_t flat_dim = 0;

    Builder(std::string arch, int k, Shape in, std::uint64_t seed)
        : rng(derive_seed(seed, "init/" + arch)) {
        m.arch = std::move(arch);
        m.num_classes = k;
        m.input_shape = in;
        c = in[0];
        h = in[1];
        w = in[2];
    }
    void conv(std::size_t oc, std::size_t k, std::size_t s, std::size_t p) {
        m.convs.emplace_back(c, oc, k, s, p, rng);
        m.body.push_back({LayerRef::conv, m.convs.size() - 1, 0});
        auto g = m.convs.back().geom(1, h, w);
        c = oc;
        h = g.oh();
        w = g.ow();
    }
    void pool(std::size_t k) {
        GMI_CHECK_SHAPE(h % k == 0 && w % k == 0, "pool: indivisible spatial dims");
        m.body.push_back({LayerRef::pool, 0, float(k)});
        h /= k;
        w /= k;
    }
    void bn() {
        m.bns.emplace_back(flattened ? flat_dim : c);
        m.body.push_back({LayerRef::batchnorm, m.bns.size() - 1, 0});
    }
    void relu() { m.body.push_back({LayerRef::relu, 0, 0}); }
    void leaky(float a) { m.body.push_back({LayerRef::leaky, 0, a}); }
    void flatten() {
        m.body.push_back({LayerRef::flatten, 0, 0});
        flattened = true;
        flat_dim = c * h * w;
    }
    void dense(std::size_t out) {
        GMI_CHECK(flattened, "dense before flatten");
        m.denses.emplace_back(flat_dim, out, rng);
        m.body.push_back({LayerRef::dense, m.denses.size() - 1, 0});
        flat_dim = out;
    }
    void dropout(double rate) {
        if (rate > 0) m.body.push_back({LayerRef::dropout, 0, float(rate)});
    }
    ClassifierModel head() {
        if (!flattened) flatten();
        m.feature_dim = flat_dim;
        m.denses.emplace_back(flat_dim, std::size_t(m.num_classes), rng);
        return std::move(m);
    }
};

}  // namespace detail

struct ArchOptions {
    double dropout_rate = 0.0;
    bool batch_norm = false;
};

inline ClassifierModel build_classifier(const std::string& arch, int num_classes, Shape input_shape,
                                        std::uint64_t seed = 1, ArchOptions opts = {}) {
    GMI_CHECK_PARAM(num_classes >= 2, "need at least two classes");
    GMI_CHECK_SHAPE(input_shape.size() == 3, "input shape must be [C,H,W]");
    detail::Builder b(arch, num_classes, input_shape, seed);
    b.m.dropout_rate = opts.dropout_rate;
    b.m.use_batch_norm = opts.batch_norm;

    if (arch == "softmax_net") {
        // single affine map; F is the identity on flattened pixels
        return b.head();
    }
    if (arch == "mnist_mlp_dp_target") {
        b.flatten();
        b.dense(512);
        b.relu();
        b.dense(256);
        b.relu();
        return b.head();
    }
    if (arch == "mnist_cnn_target") {
        // 3 conv + 2 pool; dropout/batch-norm sweep flags hang off this one
        b.conv(16, 5, 1, 2);
        if (opts.batch_norm) b.bn();
        b.relu();
        b.pool(2);
        b.conv(32, 5, 1, 2);
        if (opts.batch_norm) b.bn();
        b.relu();
        b.pool(2);
        b.conv(64, 3, 1, 1);
        if (opts.batch_norm) b.bn();
        b.relu();
        b.flatten();
        b.dropout(opts.dropout_rate);
        return b.head();
    }
    if (arch == "mnist_eval_cnn" || arch == "mnist_eval_cnn3") {
        // three conv layers followed by two FC layers
        b.conv(16, 5, 1, 2);
        b.relu();
        b.pool(2);
        b.conv(32, 5, 1, 2);
        b.relu();
        b.pool(2);
        b.conv(64, 3, 1, 1);
        b.relu();
        b.flatten();
        b.dense(128);
        b.relu();
        return b.head();
    }
    if (arch == "mnist_eval_cnn5") {
        // five conv layers and two pooling layers
        b.conv(16, 3, 1, 1);
        b.relu();
        b.conv(32, 3, 1, 1);
        b.relu();
        b.pool(2);
        b.conv(64, 3, 1, 1);
        b.relu();
        b.conv(64, 3, 1, 1);
        b.relu();
        b.pool(2);
        b.conv(128, 3, 1, 1);
        b.relu();
        return b.head();
    }
    if (arch == "lenet") {
        b.conv(6, 5, 1, 2);
        b.relu();
        b.pool(2);
        b.conv(16, 5, 1, 0);
        b.relu();
        b.pool(2);
        b.conv(120, 5, 1, 0);
        b.relu();
        return b.head();
    }
    if (arch == "simple_cnn") {
        std::size_t chans[5] = {16, 32, 64, 64, 128};
        std::size_t strides[5] = {2, 1, 2, 1, 2};
        for (int i = 0; i < 5; ++i) {
            b.conv(chans[i], 3, strides[i], 1);
            b.bn();
            b.leaky(0.2f);
        }
        return b.head();
    }
    if (arch == "vgg16" || arch == "resnet152" || arch == "face_evolve") {
        // desk-scale stand-ins of increasing depth
        int depth = arch == "vgg16" ? 4 : arch == "resnet152" ? 6 : 8;
        std::size_t ch = 16;
        for (int i = 0; i < depth; ++i) {
            std::size_t s = (i % 2 == 0 && b.h >= 8) ? 2 : 1;
            b.conv(std::min<std::size_t>(ch, 128), 3, s, 1);
            b.leaky(0.2f);
            if (s == 2) ch *= 2;
        }
        return b.head();
    }
    throw ParamError("unknown architecture id '" + arch + "'");
}

// ------------------------------------------------------------- inference

inline TensorF batch_tensor(const data::Samples& set, const std::vector<std::size_t>& idx,
                            std::size_t from, std::size_t count) {
    const Shape& s = set[idx[from]].image.shape();
    TensorF out(Shape{count, s[0], s[1], s[2]});
    std::size_t d = shape_numel(s);
    for (std::size_t i = 0; i < count; ++i)
        std::copy(set[idx[from + i]].image.begin(), set[idx[from + i]].image.end(), out.data() + i * d);
    return out;
}

inline std::vector<float> predict_proba(ClassifierModel& model, const TensorF& image) {
    GMI_CHECK_SHAPE(image.shape() == model.input_shape, "predict_proba: image shape mismatch");
    auto x = ad::constant(image.reshaped(Shape{1, image.dim(0), image.dim(1), image.dim(2)}));
    auto [f, logits] = model.forward(x, false);
    auto probs = ad::softmax_rows(logits);
    return {probs->value.begin(), probs->value.end()};
}

inline std::vector<float> feature_extract(ClassifierModel& model, const TensorF& image) {
    GMI_CHECK_SHAPE(image.shape() == model.input_shape, "feature_extract: image shape mismatch");
    auto x = ad::constant(image.reshaped(Shape{1, image.dim(0), image.dim(1), image.dim(2)}));
    auto [f, logits] = model.forward(x, false);
    return {f->value.begin(), f->value.end()};
}

inline std::vector<int> predict_labels(ClassifierModel& model, const data::Samples& set,
                                       std::size_t batch = 256) {
    std::vector<std::size_t> idx(set.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::vector<int> out(set.size());
    for (std::size_t at = 0; at < set.size(); at += batch) {
        std::size_t n = std::min(batch, set.size() - at);
        auto x = ad::constant(batch_tensor(set, idx, at, n));
        auto [f, logits] = model.forward(x, false);
        std::size_t k = std::size_t(model.num_classes);
        for (std::size_t i = 0; i < n; ++i) {
            const float* row = logits->value.data() + i * k;
            out[at + i] = int(std::max_element(row, row + k) - row);
        }
    }
    return out;
}

inline double accuracy(ClassifierModel& model, const data::Samples& set) {
    if (set.empty()) return 0.0;
    auto pred = predict_labels(model, set);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < set.size(); ++i) hit += pred[i] == set[i].label;
    return double(hit) / double(set.size());
}

// -------------------------------------------------------------- training

inline AccuracyReport train_classifier(ClassifierModel& model, const data::Samples& train,
                                       const data::Samples& test, const TrainConfig& cfg) {
    cfg.validate();
    GMI_CHECK(!train.empty(), "train_classifier: empty train set");
    for (auto& s : train)
        GMI_CHECK_PARAM(s.label >= 0 && s.label < model.num_classes,
                        "train_classifier: label outside model's class count");

    auto params = model.params();
    nn::Sgd<float> sgd(float(cfg.learning_rate), float(cfg.momentum), float(cfg.weight_decay),
                       cfg.optimizer == "sgd_nesterov");
    nn::Adam<float> adam(float(cfg.learning_rate));
    bool use_adam = cfg.optimizer == "adam";

    Rng rng(derive_seed(cfg.seed, "train/" + model.arch));
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        for (std::size_t at = 0; at < train.size(); at += cfg.batch_size) {
            std::size_t n = std::min(cfg.batch_size, train.size() - at);
            auto x = ad::constant(batch_tensor(train, order, at, n));
            std::vector<std::size_t> labels(n);
            for (std::size_t i = 0; i < n; ++i) labels[i] = std::size_t(train[order[at + i]].label);
            auto [f, logits] = model.forward(x, true, &rng);
            auto loss = ad::cross_entropy_rows(logits, labels);
            GMI_CHECK(std::isfinite(loss->value[0]), "train_classifier: non-finite loss");
            auto grads = nn::grad_values(loss, params);
            if (use_adam)
                adam.step(params, grads);
            else
                sgd.step(params, grads);
        }
    }

    AccuracyReport rep;
    rep.train_acc = accuracy(model, train);
    rep.test_acc = accuracy(model, test);
    rep.epochs = cfg.epochs;
    rep.seed = cfg.seed;
    return rep;
}

// ------------------------------------------------- empirical predictive power

// acc(full test images) - acc(masked test images); the empirical counterpart
// of the sensitive-feature predictive power for the masked region.
inline double predictive_power_empirical(ClassifierModel& model, const data::Samples& test,
                                         const TensorF& mask) {
    GMI_CHECK(!test.empty(), "predictive_power_empirical: empty test set");
    data::Samples masked;
    masked.reserve(test.size());
    for (auto& t : test) {
        data::ImageSample m;
        m.label = t.label;
        m.image = data::apply_corruption(t, mask).image;
        masked.push_back(std::move(m));
    }
    return accuracy(model, test) - accuracy(model, masked);
}

inline double predictive_power_empirical(ClassifierModel& model, const data::Samples& test,
                                         const data::MaskSpec& mask_spec) {
    GMI_CHECK(!test.empty(), "predictive_power_empirical: empty test set");
    const Shape& s = test[0].image.shape();
    return predictive_power_empirical(model, test, data::render_mask(mask_spec, s[1], s[2]));
}

// ------------------------------------------------------------ persistence

inline void save_classifier(const std::filesystem::path& path, ClassifierModel& model,
                            const std::string& config_digest = "") {
    json header{{"kind", "classifier"},
                {"arch", model.arch},
                {"num_classes", model.num_classes},
                {"input_shape", model.input_shape},
                {"dropout_rate", model.dropout_rate},
                {"batch_norm", model.use_batch_norm},
                {"config_digest", config_digest}};
    std::vector<const TensorF*> tensors;
    auto params = model.params();
    for (auto& p : params) tensors.push_back(&p->value);
    std::vector<TensorF> stats;  // batch-norm running statistics ride along
    for (auto& bn : model.bns) {
        stats.push_back(bn.run_mean);
        stats.push_back(bn.run_var);
    }
    for (auto& t : stats) tensors.push_back(&t);
    ckpt::save(path, header, tensors);
}

inline ClassifierModel load_classifier(const std::filesystem::path& path) {
    auto loaded = ckpt::load(path);
    auto& h = loaded.header;
    GMI_CHECK(h.at("kind") == "classifier", "not a classifier checkpoint: " + path.string());
    ArchOptions opts;
    opts.dropout_rate = h.at("dropout_rate").get<double>();
    opts.batch_norm = h.at("batch_norm").get<bool>();
    auto model = build_classifier(h.at("arch").get<std::string>(), h.at("num_classes").get<int>(),
                                  h.at("input_shape").get<Shape>(), 1, opts);
    auto params = model.params();
    GMI_CHECK(loaded.tensors.size() == params.size() + 2 * model.bns.size(),
              "classifier checkpoint: tensor count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        GMI_CHECK_SHAPE(params[i]->value.shape() == loaded.tensors[i].shape(),
                        "classifier checkpoint: tensor shape mismatch");
        params[i]->value = loaded.tensors[i];
    }
    for (std::size_t i = 0; i < model.bns.size(); ++i) {
        model.bns[i].run_mean = loaded.tensors[params.size() + 2 * i];
        model.bns[i].run_var = loaded.tensors[params.size() + 2 * i + 1];
    }
    return model;
}

}  // namespace gmi::zoo

#include <catch2/catch.hpp>

#include <cmath>

#include "gmi/zoo/accountant.hpp"
#include "gmi/zoo/classifier.hpp"
#include "gmi/zoo/dp.hpp"

using namespace gmi;
using namespace gmi::zoo;

namespace {

data::Samples two_pixel_toy(std::size_t n, std::uint64_t seed) {
    // class 0: left pixel brighter; class 1: right pixel brighter; wide margin
    data::Samples out;
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        data::ImageSample s;
        s.image = TensorF(Shape{1, 1, 2});
        float hi = float(rng.uniform(0.8, 1.0)), lo = float(rng.uniform(0.0, 0.2));
        s.label = int(i % 2);
        s.image[0] = s.label == 0 ? hi : lo;
        s.image[1] = s.label == 0 ? lo : hi;
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

TEST_CASE("mlp dp target has the appendix layer widths") {
    auto m = build_classifier("mnist_mlp_dp_target", 5, {1, 28, 28});
    REQUIRE(m.denses.size() == 3);
    CHECK(m.denses[0].W->value.shape() == Shape{784, 512});
    CHECK(m.denses[1].W->value.shape() == Shape{512, 256});
    CHECK(m.denses[2].W->value.shape() == Shape{256, 5});
    CHECK(m.feature_dim == 256);
}

TEST_CASE("softmax_net feature extractor is the identity on pixels") {
    auto m = build_classifier("softmax_net", 3, {1, 4, 4});
    TensorF img(Shape{1, 4, 4});
    Rng rng(3);
    rng.fill_uniform(img, 0, 1);
    auto f = feature_extract(m, img);
    REQUIRE(f.size() == 16);
    for (std::size_t i = 0; i < 16; ++i) CHECK(f[i] == img[i]);
}

TEST_CASE("unknown architecture id is rejected") {
    CHECK_THROWS_AS(build_classifier("resnet-9000", 10, {1, 28, 28}), ParamError);
}

TEST_CASE("probability head is normalized and nonnegative") {
    auto mlp = build_classifier("mnist_mlp_dp_target", 7, {1, 8, 8}, 5);
    Rng rng(41);
    for (int i = 0; i < 1000; ++i) {
        TensorF img(Shape{1, 8, 8});
        rng.fill_uniform(img, 0, 1);
        auto p = predict_proba(mlp, img);
        double s = 0;
        for (float v : p) {
            CHECK(v >= 0.0f);
            s += v;
        }
        CHECK(s == Approx(1.0).margin(1e-5));
    }
    auto cnn = build_classifier("lenet", 4, {1, 28, 28}, 6);
    for (int i = 0; i < 50; ++i) {
        TensorF img(Shape{1, 28, 28});
        rng.fill_uniform(img, 0, 1);
        auto p = predict_proba(cnn, img);
        double s = 0;
        for (float v : p) s += v;
        CHECK(s == Approx(1.0).margin(1e-5));
    }
}

TEST_CASE("zero-weight softmax net predicts uniformly") {
    auto m = build_classifier("softmax_net", 5, {1, 3, 3});
    for (auto& p : m.params())
        for (auto& v : p->value) v = 0.0f;
    TensorF img(Shape{1, 3, 3}, 0.7f);
    auto p = predict_proba(m, img);
    for (float v : p) CHECK(v == Approx(0.2).margin(1e-6));
}

TEST_CASE("inference is pure: identical images give identical features") {
    auto m = build_classifier("mnist_cnn_target", 5, {1, 28, 28}, 8);
    TensorF img(Shape{1, 28, 28});
    Rng rng(12);
    rng.fill_uniform(img, 0, 1);
    auto f1 = feature_extract(m, img);
    auto f2 = feature_extract(m, img);
    CHECK(f1 == f2);
    TensorF bad(Shape{1, 14, 14}, 0.0f);
    CHECK_THROWS_AS(predict_proba(m, bad), ShapeError);
}

TEST_CASE("single sample is memorized") {
    auto m = build_classifier("mnist_mlp_dp_target", 2, {1, 2, 2}, 3);
    data::Samples one;
    data::ImageSample s;
    s.image = TensorF(Shape{1, 2, 2}, 0.9f);
    s.label = 1;
    one.push_back(s);
    TrainConfig cfg;
    cfg.epochs = 40;
    cfg.learning_rate = 0.1;
    cfg.batch_size = 1;
    auto rep = train_classifier(m, one, one, cfg);
    CHECK(rep.train_acc == 1.0);
}

TEST_CASE("linearly separable toy set is solved exactly by softmax_net") {
    auto train = two_pixel_toy(64, 21);
    auto test = two_pixel_toy(32, 22);
    auto m = build_classifier("softmax_net", 2, {1, 1, 2}, 4);
    TrainConfig cfg;
    cfg.epochs = 60;
    cfg.learning_rate = 0.5;
    cfg.batch_size = 16;
    cfg.weight_decay = 0;
    auto rep = train_classifier(m, train, test, cfg);
    CHECK(rep.test_acc == 1.0);

    data::Samples empty;
    CHECK_THROWS_AS(train_classifier(m, empty, test, cfg), Error);
}

TEST_CASE("training is deterministic for a fixed seed") {
    auto train = two_pixel_toy(40, 31);
    auto run = [&] {
        auto m = build_classifier("mnist_mlp_dp_target", 2, {1, 1, 2}, 9);
        TrainConfig cfg;
        cfg.epochs = 3;
        cfg.seed = 77;
        cfg.batch_size = 8;
        train_classifier(m, train, train, cfg);
        std::vector<float> flat;
        for (auto& p : m.params()) flat.insert(flat.end(), p->value.begin(), p->value.end());
        return flat;
    };
    CHECK(run() == run());
}

TEST_CASE("empirical predictive power oracles") {
    auto train = two_pixel_toy(64, 51);
    auto test = two_pixel_toy(40, 52);
    auto m = build_classifier("softmax_net", 2, {1, 1, 2}, 4);
    TrainConfig cfg;
    cfg.epochs = 60;
    cfg.learning_rate = 0.5;
    cfg.weight_decay = 0;
    auto rep = train_classifier(m, train, test, cfg);
    REQUIRE(rep.test_acc == 1.0);

    // all-zero mask: identical inputs, power exactly 0
    TensorF zero(Shape{1, 2}, 0.0f);
    CHECK(predictive_power_empirical(m, test, zero) == 0.0);

    // model built to ignore the masked pixel: power 0
    auto ignore = build_classifier("softmax_net", 2, {1, 1, 2}, 4);
    train_classifier(ignore, train, test, cfg);
    for (auto& d : ignore.denses)
        for (std::size_t col = 0; col < d.W->value.dim(1); ++col) d.W->value.at(1, col) = 0.0f;
    TensorF right(Shape{1, 2}, 0.0f);
    right[1] = 1.0f;  // hide the pixel the model ignores
    CHECK(predictive_power_empirical(ignore, test, right) == 0.0);

    // full mask on a perfect model over a balanced set: acc - 1/K
    TensorF full(Shape{1, 2}, 1.0f);
    double p = predictive_power_empirical(m, test, full);
    CHECK(p == Approx(1.0 - 0.5).margin(1e-9));
    CHECK(p >= -1.0);
    CHECK(p <= 1.0);

    data::Samples empty;
    data::MaskSpec spec;
    CHECK_THROWS_AS(predictive_power_empirical(m, empty, spec), Error);
}

TEST_CASE("classifier checkpoint round trip preserves behavior") {
    auto m = build_classifier("mnist_cnn_target", 5, {1, 28, 28}, 15, {0.25, true});
    auto dir = std::filesystem::temp_directory_path() / "gmi_zoo_ckpt";
    std::filesystem::create_directories(dir);
    save_classifier(dir / "m.ckpt", m, "cfgdigest");
    auto back = load_classifier(dir / "m.ckpt");
    TensorF img(Shape{1, 28, 28});
    Rng rng(7);
    rng.fill_uniform(img, 0, 1);
    CHECK(predict_proba(m, img) == predict_proba(back, img));
    std::filesystem::remove_all(dir);
}

// ------------------------------------------------------------- accountant

TEST_CASE("epsilon is infinite at zero noise") {
    CHECK(std::isinf(compute_epsilon(0.0, 0.01, 100, 1e-5)));
    CHECK_THROWS_AS(compute_epsilon(1.0, 0.01, 100, 0.0), ParamError);
    CHECK_THROWS_AS(compute_epsilon(1.0, 0.0, 100, 1e-5), ParamError);
}

TEST_CASE("accountant reproduces the reported epsilon table within 15%") {
    double N = 35725, B = 256, epochs = 40;
    double q = B / N;
    auto T = std::size_t(epochs * std::ceil(N / B));
    struct Row {
        double sigma, eps;
    };
    for (auto [sigma, eps] : {Row{0.694, 9.89}, Row{0.92, 4.94}, Row{3.0, 0.98}, Row{28.0, 0.10}}) {
        double got = compute_epsilon(sigma, q, T, 1e-5);
        INFO("sigma=" << sigma << " got=" << got << " expect~" << eps);
        CHECK(std::abs(got - eps) / eps < 0.15);
    }
}

TEST_CASE("epsilon is monotone in noise and steps") {
    double q = 0.01, delta = 1e-5;
    double prev = std::numeric_limits<double>::infinity();
    for (int i = 1; i <= 20; ++i) {
        double eps = compute_epsilon(0.3 * i, q, 1000, delta);
        CHECK(eps <= prev + 1e-12);
        prev = eps;
    }
    prev = 0.0;
    for (int i = 1; i <= 20; ++i) {
        double eps = compute_epsilon(1.1, q, std::size_t(200 * i), delta);
        CHECK(eps >= prev - 1e-12);
        prev = eps;
    }
}

// ------------------------------------------------------------------- DP

TEST_CASE("dp training is deterministic and honors the clipping invariant") {
    auto train = two_pixel_toy(64, 61);
    auto run = [&] {
        auto m = build_classifier("mnist_mlp_dp_target", 2, {1, 1, 2}, 13);
        DPConfig cfg;
        cfg.noise_ratio = 1.0;
        cfg.epochs = 2;
        cfg.batch_size = 16;
        cfg.learning_rate = 0.1;
        cfg.clip_norm = 0.5;
        cfg.seed = 5;
        cfg.check_clipping = true;  // asserts inside every step
        auto rep = train_classifier_dp(m, train, cfg);
        std::vector<float> flat;
        for (auto& p : m.params()) flat.insert(flat.end(), p->value.begin(), p->value.end());
        return std::make_pair(flat, rep.epsilon);
    };
    auto [w1, e1] = run();
    auto [w2, e2] = run();
    CHECK(w1 == w2);  // bitwise-identical trajectories
    CHECK(e1 == e2);
    CHECK(e1 > 0);
    CHECK(std::isfinite(e1));
}

TEST_CASE("zero noise with loose clipping matches plain batch SGD") {
    auto train = two_pixel_toy(16, 71);
    auto dp_model = build_classifier("softmax_net", 2, {1, 1, 2}, 23);
    auto sgd_model = build_classifier("softmax_net", 2, {1, 1, 2}, 23);  // same init seed

    DPConfig cfg;
    cfg.noise_ratio = 0.0;
    cfg.epochs = 1;
    cfg.batch_size = 16;
    cfg.learning_rate = 0.05;
    cfg.clip_norm = 1e6;  // clipping is the identity for every sample
    cfg.seed = 3;
    auto rep = train_classifier_dp(dp_model, train, cfg);
    CHECK(std::isinf(rep.epsilon));

    // manual single plain-SGD step on the same (single) batch
    Rng rng(derive_seed(cfg.seed, "dp_train"));
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());
    auto x = ad::constant(batch_tensor(train, order, 0, train.size()));
    std::vector<std::size_t> labels(train.size());
    for (std::size_t i = 0; i < train.size(); ++i) labels[i] = std::size_t(train[order[i]].label);
    auto [f, logits] = sgd_model.forward(x, true);
    auto loss = ad::cross_entropy_rows(logits, labels);
    auto params = sgd_model.params();
    auto grads = nn::grad_values(loss, params);
    for (std::size_t i = 0; i < params.size(); ++i)
        for (std::size_t j = 0; j < params[i]->value.size(); ++j)
            params[i]->value[j] -= float(cfg.learning_rate) * grads[i][j];

    auto pd = dp_model.params();
    auto ps = sgd_model.params();
    for (std::size_t i = 0; i < pd.size(); ++i)
        for (std::size_t j = 0; j < pd[i]->value.size(); ++j)
            CHECK(pd[i]->value[j] == Approx(ps[i]->value[j]).margin(1e-6));
}

TEST_CASE("dp training rejects invalid configs and conv models") {
    auto train = two_pixel_toy(8, 81);
    auto m = build_classifier("mnist_mlp_dp_target", 2, {1, 1, 2});
    DPConfig bad;
    bad.noise_ratio = -1;
    CHECK_THROWS_AS(train_classifier_dp(m, train, bad), ParamError);
    auto conv = build_classifier("lenet", 2, {1, 28, 28});
    DPConfig ok;
    CHECK_THROWS_AS(train_classifier_dp(conv, train, ok), Error);
}

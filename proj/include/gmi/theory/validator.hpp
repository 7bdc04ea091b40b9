#pragma once

#include <cmath>
#include <vector>

#include "gmi/core/error.hpp"
#include "gmi/core/random.hpp"
#include "gmi/core/serialize.hpp"

namespace gmi::theory {

// Exact finite-distribution validation of the predictive-power theory.
// Everything here is double-precision table arithmetic; tables are small
// enough for exhaustive summation.

// p(x_s, x_ns, y), indexed [s][n][y].
struct DiscreteJoint {
    std::size_t ns = 0, nn = 0, ny = 0;
    std::vector<double> p;

    DiscreteJoint() = default;
    DiscreteJoint(std::size_t s, std::size_t n, std::size_t y) : ns(s), nn(n), ny(y), p(s * n * y, 0.0) {}

    double& at(std::size_t s, std::size_t n, std::size_t y) { return p[(s * nn + n) * ny + y]; }
    double at(std::size_t s, std::size_t n, std::size_t y) const { return p[(s * nn + n) * ny + y]; }

    void validate() const {
        double total = 0;
        for (double v : p) {
            GMI_CHECK_PARAM(v >= 0, "joint: negative probability");
            total += v;
        }
        GMI_CHECK_PARAM(std::abs(total - 1.0) <= 1e-12, "joint: total mass differs from 1");
    }

    double p_xns(std::size_t n) const {
        double acc = 0;
        for (std::size_t s = 0; s < ns; ++s)
            for (std::size_t y = 0; y < ny; ++y) acc += at(s, n, y);
        return acc;
    }
    double p_y_xns(std::size_t y, std::size_t n) const {
        double acc = 0;
        for (std::size_t s = 0; s < ns; ++s) acc += at(s, n, y);
        return acc;
    }
    // p(X_s | x_ns)
    std::vector<double> xs_given_xns(std::size_t n) const {
        double z = p_xns(n);
        GMI_CHECK_PARAM(z > 0, "joint: zero-mass x_ns");
        std::vector<double> out(ns, 0.0);
        for (std::size_t s = 0; s < ns; ++s)
            for (std::size_t y = 0; y < ny; ++y) out[s] += at(s, n, y);
        for (auto& v : out) v /= z;
        return out;
    }
    // true conditional p(y | x_s, x_ns)
    double y_given_x(std::size_t y, std::size_t s, std::size_t n) const {
        double z = 0;
        for (std::size_t yy = 0; yy < ny; ++yy) z += at(s, n, yy);
        GMI_CHECK_PARAM(z > 0, "joint: zero-mass (x_s, x_ns)");
        return at(s, n, y) / z;
    }
};

// p_f(y | x_s, x_ns), indexed [s][n][y]; slices over y sum to one and stay
// strictly positive (the proof manipulates logs of model probabilities).
struct ModelLikelihood {
    std::size_t ns = 0, nn = 0, ny = 0;
    std::vector<double> p;

    ModelLikelihood() = default;
    ModelLikelihood(std::size_t s, std::size_t n, std::size_t y) : ns(s), nn(n), ny(y), p(s * n * y, 0.0) {}

    double& at(std::size_t s, std::size_t n, std::size_t y) { return p[(s * nn + n) * ny + y]; }
    double at(std::size_t s, std::size_t n, std::size_t y) const { return p[(s * nn + n) * ny + y]; }

    void validate() const {
        for (std::size_t s = 0; s < ns; ++s)
            for (std::size_t n = 0; n < nn; ++n) {
                double z = 0;
                for (std::size_t y = 0; y < ny; ++y) {
                    GMI_CHECK_PARAM(at(s, n, y) > 0, "model likelihood: strict positivity violated");
                    z += at(s, n, y);
                }
                GMI_CHECK_PARAM(std::abs(z - 1.0) <= 1e-12, "model likelihood: slice does not sum to 1");
            }
    }
};

// ---------------------------------------------------------------- operations

// p(X_s | y, x_ns)
inline std::vector<double> feature_posterior(const DiscreteJoint& joint, std::size_t y, std::size_t n) {
    double z = joint.p_y_xns(y, n);
    GMI_CHECK_PARAM(z > 0, "feature_posterior: zero-mass conditioning event");
    std::vector<double> out(joint.ns);
    for (std::size_t s = 0; s < joint.ns; ++s) out[s] = joint.at(s, n, y) / z;
    return out;
}

// p_f(y | x_ns) = sum_s p_f(y | x_s, x_ns) p(x_s | x_ns)
inline double model_marginal(const ModelLikelihood& m, const DiscreteJoint& joint, std::size_t y,
                             std::size_t n) {
    auto prior = joint.xs_given_xns(n);
    double acc = 0;
    for (std::size_t s = 0; s < joint.ns; ++s) acc += m.at(s, n, y) * prior[s];
    return acc;
}

// U_f(x_ns, y) = E_{X_s ~ p(X_s|y,x_ns)}[log p_f(y|X_s,x_ns) - log p_f(y|x_ns)]
inline double predictive_power(const ModelLikelihood& m, const DiscreteJoint& joint, std::size_t n,
                               std::size_t y) {
    auto post = feature_posterior(joint, y, n);
    double marg = model_marginal(m, joint, y, n);
    GMI_CHECK_PARAM(marg > 0, "predictive_power: zero model marginal");
    double acc = 0;
    for (std::size_t s = 0; s < joint.ns; ++s) {
        if (post[s] == 0) continue;
        GMI_CHECK_PARAM(m.at(s, n, y) > 0, "predictive_power: zero model likelihood on support");
        acc += post[s] * (std::log(m.at(s, n, y)) - std::log(marg));
    }
    return acc;
}

// p_f(X_s | y, x_ns) proportional to p_f(y|X_s,x_ns) p(X_s|x_ns)
inline std::vector<double> model_posterior(const ModelLikelihood& m, const DiscreteJoint& joint,
                                           std::size_t y, std::size_t n) {
    auto prior = joint.xs_given_xns(n);
    std::vector<double> out(joint.ns);
    double z = 0;
    for (std::size_t s = 0; s < joint.ns; ++s) {
        out[s] = m.at(s, n, y) * prior[s];
        z += out[s];
    }
    GMI_CHECK_PARAM(z > 0, "model_posterior: zero normalizer");
    for (auto& v : out) v /= z;
    return out;
}

// S_KL(p||q) = -D_KL(p||q) <= 0, zero iff p = q.
inline double kl_similarity(const std::vector<double>& p, const std::vector<double>& q) {
    GMI_CHECK_SHAPE(p.size() == q.size(), "kl_similarity: support size mismatch");
    double acc = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] == 0) continue;
        GMI_CHECK_PARAM(q[i] > 0, "kl_similarity: q vanishes on p's support");
        acc += p[i] * std::log(p[i] / q[i]);
    }
    return -acc;
}

// -------------------------------------------------------------- theorem 1

struct Theorem1Check {
    std::size_t y = 0;
    double identity_lhs = 0;  // D_KL(p||p_f1) - D_KL(p||p_f2)
    double identity_rhs = 0;  // U_f2 - U_f1
    bool identity_ok = false;
    double skl_f1 = 0, skl_f2 = 0;
};

struct Theorem1Report {
    std::vector<Theorem1Check> per_y;
    bool hypothesis_holds = false;  // U_f1 >= U_f2 for every y
    bool identity_ok = true;
    bool ordering_ok = true;  // only meaningful when hypothesis_holds

    json to_json() const {
        json rows = json::array();
        for (auto& c : per_y)
            rows.push_back({{"y", c.y},
                            {"identity_lhs", c.identity_lhs},
                            {"identity_rhs", c.identity_rhs},
                            {"identity_ok", c.identity_ok},
                            {"skl_f1", c.skl_f1},
                            {"skl_f2", c.skl_f2}});
        return json{{"per_y", rows},
                    {"hypothesis_holds", hypothesis_holds},
                    {"identity_ok", identity_ok},
                    {"ordering_ok", ordering_ok}};
    }
};

// Checks, for a fixed x_ns:
//  (a) the unconditional identity
//      D_KL(p||p_f1) - D_KL(p||p_f2) = U_f2 - U_f1   (within 1e-9), and
//  (b) when U_f1 >= U_f2 holds for every y, the similarity ordering
//      S_KL(p||p_f1) >= S_KL(p||p_f2).
inline Theorem1Report theorem1_verify(const ModelLikelihood& m1, const ModelLikelihood& m2,
                                      const DiscreteJoint& joint, std::size_t n,
                                      double identity_tol = 1e-9, double ordering_tol = 1e-12) {
    joint.validate();
    m1.validate();
    m2.validate();
    Theorem1Report rep;
    rep.hypothesis_holds = true;
    for (std::size_t y = 0; y < joint.ny; ++y) {
        if (joint.p_y_xns(y, n) <= 0) continue;
        auto p = feature_posterior(joint, y, n);
        auto q1 = model_posterior(m1, joint, y, n);
        auto q2 = model_posterior(m2, joint, y, n);
        double u1 = predictive_power(m1, joint, n, y);
        double u2 = predictive_power(m2, joint, n, y);
        Theorem1Check c;
        c.y = y;
        c.skl_f1 = kl_similarity(p, q1);
        c.skl_f2 = kl_similarity(p, q2);
        c.identity_lhs = (-c.skl_f1) - (-c.skl_f2);
        c.identity_rhs = u2 - u1;
        c.identity_ok = std::abs(c.identity_lhs - c.identity_rhs) <= identity_tol;
        rep.identity_ok = rep.identity_ok && c.identity_ok;
        if (u1 < u2) rep.hypothesis_holds = false;
        rep.per_y.push_back(c);
    }
    if (rep.hypothesis_holds)
        for (auto& c : rep.per_y)
            if (c.skl_f1 < c.skl_f2 - ordering_tol) rep.ordering_ok = false;
    return rep;
}

// ------------------------------------------------------- random instances

// Dirichlet(1)-style simplex draws with a strict-positivity floor.
inline DiscreteJoint random_joint(Rng& rng, std::size_t ns, std::size_t nn, std::size_t ny,
                                  double floor = 1e-6) {
    DiscreteJoint j(ns, nn, ny);
    double z = 0;
    for (auto& v : j.p) {
        v = -std::log(std::max(rng.uniform(), 1e-300)) + floor;
        z += v;
    }
    for (auto& v : j.p) v /= z;
    return j;
}

inline ModelLikelihood random_likelihood(Rng& rng, std::size_t ns, std::size_t nn, std::size_t ny,
                                         double floor = 1e-6) {
    ModelLikelihood m(ns, nn, ny);
    for (std::size_t s = 0; s < ns; ++s)
        for (std::size_t n = 0; n < nn; ++n) {
            double z = 0;
            for (std::size_t y = 0; y < ny; ++y) {
                m.at(s, n, y) = -std::log(std::max(rng.uniform(), 1e-300)) + floor;
                z += m.at(s, n, y);
            }
            for (std::size_t y = 0; y < ny; ++y) m.at(s, n, y) /= z;
        }
    return m;
}

// ------------------------------------------------------------ json fixtures

inline json joint_to_json(const DiscreteJoint& j) {
    return json{{"ns", j.ns}, {"nn", j.nn}, {"ny", j.ny}, {"p", j.p}};
}

inline DiscreteJoint joint_from_json(const json& js) {
    DiscreteJoint j(js.at("ns").get<std::size_t>(), js.at("nn").get<std::size_t>(),
                    js.at("ny").get<std::size_t>());
    j.p = js.at("p").get<std::vector<double>>();
    GMI_CHECK_SHAPE(j.p.size() == j.ns * j.nn * j.ny, "joint fixture: size mismatch");
    return j;
}

inline json likelihood_to_json(const ModelLikelihood& m) {
    return json{{"ns", m.ns}, {"nn", m.nn}, {"ny", m.ny}, {"p", m.p}};
}

inline ModelLikelihood likelihood_from_json(const json& js) {
    ModelLikelihood m(js.at("ns").get<std::size_t>(), js.at("nn").get<std::size_t>(),
                      js.at("ny").get<std::size_t>());
    m.p = js.at("p").get<std::vector<double>>();
    GMI_CHECK_SHAPE(m.p.size() == m.ns * m.nn * m.ny, "likelihood fixture: size mismatch");
    return m;
}

// Interpolates a model toward the true conditional: t=0 returns base, t=1 the
// Bayes-exact model. Used to construct hypothesis-satisfying pairs.
inline ModelLikelihood sharpen_toward_truth(const ModelLikelihood& base, const DiscreteJoint& joint,
                                            double t) {
    ModelLikelihood out = base;
    for (std::size_t s = 0; s < joint.ns; ++s)
        for (std::size_t n = 0; n < joint.nn; ++n) {
            double z = 0;
            for (std::size_t y = 0; y < joint.ny; ++y) {
                double truth = joint.y_given_x(y, s, n);
                out.at(s, n, y) = (1 - t) * base.at(s, n, y) + t * truth;
                if (out.at(s, n, y) < 1e-12) out.at(s, n, y) = 1e-12;
                z += out.at(s, n, y);
            }
            for (std::size_t y = 0; y < joint.ny; ++y) out.at(s, n, y) /= z;
        }
    return out;
}

}  // namespace gmi::theory

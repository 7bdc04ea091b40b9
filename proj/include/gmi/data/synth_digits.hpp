#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "gmi/core/random.hpp"
#include "gmi/core/tensor.hpp"

namespace gmi::data {

// Deterministic procedurally rendered handwritten-style digit corpus
// (28x28 grayscale, 10 classes). Strokes are polyline skeletons rendered as
// soft distance fields under a random affine map with point jitter, so the
// classes share a stroke vocabulary while keeping healthy intra-class
// variation. Used as the offline stand-in corpus in desk-scale runs.

namespace synth_detail {

struct P {
    double x, y;
};
using Stroke = std::vector<P>;

inline std::vector<Stroke> circle(double cx, double cy, double rx, double ry, int n = 20,
                                  double a0 = 0, double a1 = 6.28318530717958647692) {
    Stroke s;
    for (int i = 0; i <= n; ++i) {
        double a = a0 + (a1 - a0) * double(i) / n;
        s.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
    }
    return {s};
}

inline const std::array<std::vector<Stroke>, 10>& skeletons() {
    static const std::array<std::vector<Stroke>, 10> glyphs = [] {
        std::array<std::vector<Stroke>, 10> g;
        auto arc = [](double cx, double cy, double rx, double ry, double a0, double a1, int n = 14) {
            Stroke s;
            for (int i = 0; i <= n; ++i) {
                double a = a0 + (a1 - a0) * double(i) / n;
                s.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
            }
            return s;
        };
        const double pi = 3.14159265358979323846;
        g[0] = circle(0.5, 0.5, 0.30, 0.40);
        g[1] = {{{0.34, 0.26}, {0.52, 0.10}, {0.52, 0.90}}};
        g[2] = {arc(0.5, 0.32, 0.28, 0.22, -pi, 0.25 * pi, 16), {{0.72, 0.46}, {0.24, 0.90}, {0.78, 0.90}}};
        g[3] = {arc(0.46, 0.30, 0.26, 0.20, -0.9 * pi, 0.5 * pi, 16),
                arc(0.46, 0.69, 0.28, 0.22, -0.5 * pi, 0.9 * pi, 16)};
        g[4] = {{{0.66, 0.10}, {0.20, 0.62}, {0.84, 0.62}}, {{0.66, 0.10}, {0.66, 0.92}}};
        g[5] = {{{0.76, 0.10}, {0.28, 0.10}, {0.26, 0.48}}, arc(0.48, 0.66, 0.26, 0.24, -0.45 * pi, 0.8 * pi, 16)};
        g[6] = {{{0.64, 0.08}, {0.40, 0.40}, {0.30, 0.66}}, circle(0.50, 0.68, 0.21, 0.21)[0]};
        g[7] = {{{0.20, 0.12}, {0.80, 0.12}, {0.44, 0.92}}};
        g[8] = {circle(0.50, 0.30, 0.20, 0.19)[0], circle(0.50, 0.70, 0.24, 0.22)[0]};
        g[9] = {circle(0.52, 0.32, 0.21, 0.21)[0], {{0.73, 0.34}, {0.68, 0.62}, {0.58, 0.92}}};
        return g;
    }();
    return glyphs;
}

inline double seg_dist2(double px, double py, const P& a, const P& b) {
    double vx = b.x - a.x, vy = b.y - a.y;
    double wx = px - a.x, wy = py - a.y;
    double vv = vx * vx + vy * vy;
    double t = vv > 1e-12 ? std::clamp((wx * vx + wy * vy) / vv, 0.0, 1.0) : 0.0;
    double dx = wx - t * vx, dy = wy - t * vy;
    return dx * dx + dy * dy;
}

}  // namespace synth_detail

// One 28x28 image; the (seed, sample_index) pair fully determines it.
inline TensorF synth_digit(int label, std::uint64_t seed, std::uint64_t index) {
    using namespace synth_detail;
    Rng rng(derive_seed(seed, "synth/" + std::to_string(index)));
    const std::size_t hw = 28;

    // jittered copy of the skeleton; occasionally shorten a stroke end
    std::vector<Stroke> strokes = skeletons()[std::size_t(label)];
    for (auto& s : strokes)
        for (auto& p : s) {
            p.x += rng.normal() * 0.030;
            p.y += rng.normal() * 0.030;
        }
    if (strokes.size() > 1 && rng.uniform() < 0.20) {
        auto& s = strokes[rng.index(strokes.size())];
        if (s.size() > 3) s.resize(s.size() - 1 - rng.index(s.size() / 3));
    }

    // random affine placement (glyph box -> pixel coords)
    double rot = rng.uniform(-0.28, 0.28);
    double shear = rng.uniform(-0.22, 0.22);
    double sx = rng.uniform(0.70, 1.10) * 22.0;
    double sy = rng.uniform(0.72, 1.10) * 22.0;
    double tx = 14.0 + rng.uniform(-2.4, 2.4) - 0.5 * sx;
    double ty = 14.0 + rng.uniform(-2.4, 2.4) - 0.5 * sy;
    double cr = std::cos(rot), sr = std::sin(rot);
    auto map = [&](const P& p) {
        double gx = (p.x - 0.5) + shear * (p.y - 0.5) + 0.5;
        double gy = p.y;
        double rx = cr * (gx - 0.5) - sr * (gy - 0.5) + 0.5;
        double ry = sr * (gx - 0.5) + cr * (gy - 0.5) + 0.5;
        return P{rx * sx + tx, ry * sy + ty};
    };

    std::vector<Stroke> mapped;
    for (auto& s : strokes) {
        Stroke m;
        for (auto& p : s) m.push_back(map(p));
        mapped.push_back(std::move(m));
    }

    double thick = rng.uniform(0.7, 2.0);
    double soft = 0.75;
    double bright = rng.uniform(0.72, 1.0);

    TensorF img(Shape{1, hw, hw}, 0.0f);
    for (std::size_t y = 0; y < hw; ++y) {
        for (std::size_t x = 0; x < hw; ++x) {
            double d2 = 1e30;
            for (auto& s : mapped)
                for (std::size_t i = 0; i + 1 < s.size(); ++i)
                    d2 = std::min(d2, seg_dist2(double(x), double(y), s[i], s[i + 1]));
            double d = std::sqrt(d2);
            double v = std::clamp((thick + soft - d) / (2 * soft), 0.0, 1.0) * bright;
            v += rng.normal() * 0.03;
            img[y * hw + x] = float(std::clamp(v, 0.0, 1.0));
        }
    }
    return img;
}

}  // namespace gmi::data

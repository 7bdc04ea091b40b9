#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gmi/core/error.hpp"
#include "gmi/core/tensor.hpp"
#include "gmi/data/dataset.hpp"

namespace gmi::data {

enum class MaskKind { center, face_t };

// Geometry fractions are relative to image height/width.
// center: one axis-aligned box of h_frac x w_frac, centered.
// face_t: horizontal eye band plus a vertical strip.
struct MaskSpec {
    MaskKind kind = MaskKind::center;
    // center
    double h_frac = 0.5, w_frac = 0.5;
    // face_t defaults: band rows [0.25H,0.45H) full width; strip cols
    // [0.35W,0.65W) over rows [0.25H,0.85H).
    double band_top = 0.25, band_h = 0.20;
    double strip_w = 0.30, strip_top = 0.25, strip_bottom = 0.85;
};

inline TensorF render_mask(const MaskSpec& spec, std::size_t height, std::size_t width) {
    GMI_CHECK_PARAM(height > 0 && width > 0, "render_mask: empty image");
    TensorF mask(Shape{height, width}, 0.0f);
    auto fill_box = [&](std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
        for (std::size_t r = r0; r < r1; ++r)
            for (std::size_t c = c0; c < c1; ++c) mask[r * width + c] = 1.0f;
    };
    if (spec.kind == MaskKind::center) {
        GMI_CHECK_PARAM(spec.h_frac > 0 && spec.h_frac <= 1 && spec.w_frac > 0 && spec.w_frac <= 1,
                        "render_mask: center fractions must lie in (0,1]");
        std::size_t bh = std::size_t(std::lround(spec.h_frac * double(height)));
        std::size_t bw = std::size_t(std::lround(spec.w_frac * double(width)));
        bh = std::max<std::size_t>(1, std::min(bh, height));
        bw = std::max<std::size_t>(1, std::min(bw, width));
        std::size_t r0 = (height - bh) / 2, c0 = (width - bw) / 2;
        fill_box(r0, r0 + bh, c0, c0 + bw);
    } else {
        GMI_CHECK_PARAM(spec.band_top >= 0 && spec.band_h > 0 && spec.band_top + spec.band_h <= 1,
                        "render_mask: face_t band outside image");
        GMI_CHECK_PARAM(spec.strip_w > 0 && spec.strip_w <= 1 && spec.strip_top >= 0 &&
                            spec.strip_bottom > spec.strip_top && spec.strip_bottom <= 1,
                        "render_mask: face_t strip outside image");
        auto row = [&](double f) { return std::size_t(std::lround(f * double(height))); };
        auto col = [&](double f) { return std::size_t(std::lround(f * double(width))); };
        fill_box(row(spec.band_top), row(spec.band_top + spec.band_h), 0, width);
        std::size_t c0 = col(0.5 - spec.strip_w / 2), c1 = col(0.5 + spec.strip_w / 2);
        fill_box(row(spec.strip_top), row(spec.strip_bottom), c0, c1);
    }
    return mask;
}

// Masks are exportable as PNGs for eyeballing the occlusion geometry.
inline void save_mask_png(const TensorF& mask, const std::filesystem::path& path) {
    io::write_png(path, io::to_u8(mask.reshaped(Shape{1, mask.dim(0), mask.dim(1)})));
}

enum class AuxMode { none, corrupted, blurred };

inline std::string aux_mode_name(AuxMode m) {
    switch (m) {
        case AuxMode::none: return "none";
        case AuxMode::corrupted: return "corrupted";
        case AuxMode::blurred: return "blurred";
    }
    return "?";
}

inline AuxMode parse_aux_mode(const std::string& s) {
    if (s == "none") return AuxMode::none;
    if (s == "corrupted") return AuxMode::corrupted;
    if (s == "blurred") return AuxMode::blurred;
    throw ParamError("unknown aux mode '" + s + "'");
}

// Attacker side information. corrupted: image has hidden pixels zeroed where
// mask = 1. blurred: Gaussian-blurred image, no mask. none: empty payload.
struct AuxKnowledge {
    AuxMode mode = AuxMode::none;
    TensorF image;  // [C,H,W]
    TensorF mask;   // [H,W], 1 = hidden (corrupted only)
};

inline AuxKnowledge apply_corruption(const ImageSample& sample, const TensorF& mask) {
    const Shape& s = sample.image.shape();
    GMI_CHECK_SHAPE(mask.rank() == 2 && mask.dim(0) == s[1] && mask.dim(1) == s[2],
                    "apply_corruption: mask/image shape mismatch");
    AuxKnowledge aux;
    aux.mode = AuxMode::corrupted;
    aux.mask = mask;
    aux.image = sample.image;
    std::size_t hw = s[1] * s[2];
    for (std::size_t c = 0; c < s[0]; ++c)
        for (std::size_t i = 0; i < hw; ++i)
            if (mask[i] != 0.0f) aux.image[c * hw + i] = 0.0f;
    return aux;
}

inline std::vector<float> gaussian_kernel(double sigma, std::size_t size) {
    GMI_CHECK_PARAM(size % 2 == 1, "gaussian kernel size must be odd");
    GMI_CHECK_PARAM(sigma > 0, "gaussian sigma must be positive");
    std::vector<float> k(size);
    double sum = 0;
    long half = long(size / 2);
    for (long i = -half; i <= half; ++i) {
        double v = std::exp(-double(i * i) / (2 * sigma * sigma));
        k[std::size_t(i + half)] = float(v);
        sum += v;
    }
    for (auto& v : k) v = float(v / sum);
    return k;
}

// Separable Gaussian, reflect padding.
inline AuxKnowledge apply_blur(const ImageSample& sample, double sigma, std::size_t kernel_size) {
    auto k = gaussian_kernel(sigma, kernel_size);
    const Shape& s = sample.image.shape();
    std::size_t C = s[0], H = s[1], W = s[2];
    long half = long(kernel_size / 2);
    auto reflect = [](long i, long n) {
        while (i < 0 || i >= n) {
            if (i < 0) i = -i - 1;
            if (i >= n) i = 2 * n - i - 1;
        }
        return std::size_t(i);
    };
    TensorF tmp(s), out(s);
    for (std::size_t c = 0; c < C; ++c) {
        const float* src = sample.image.data() + c * H * W;
        float* mid = tmp.data() + c * H * W;
        float* dst = out.data() + c * H * W;
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                float acc = 0;
                for (long i = -half; i <= half; ++i)
                    acc += k[std::size_t(i + half)] * src[y * W + reflect(long(x) + i, long(W))];
                mid[y * W + x] = acc;
            }
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                float acc = 0;
                for (long i = -half; i <= half; ++i)
                    acc += k[std::size_t(i + half)] * mid[reflect(long(y) + i, long(H)) * W + x];
                dst[y * W + x] = acc;
            }
    }
    AuxKnowledge aux;
    aux.mode = AuxMode::blurred;
    aux.image = std::move(out);
    return aux;
}

// composite = aux*(1-m) + patch*m, preserving visible pixels exactly.
inline TensorF composite_with_mask(const TensorF& aux_image, const TensorF& patch, const TensorF& mask) {
    GMI_CHECK_SHAPE(aux_image.shape() == patch.shape(), "composite: shape mismatch");
    TensorF out = aux_image;
    std::size_t hw = mask.size();
    std::size_t C = aux_image.size() / hw;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < hw; ++i)
            if (mask[i] != 0.0f) out[c * hw + i] = patch[c * hw + i];
    return out;
}

}  // namespace gmi::data

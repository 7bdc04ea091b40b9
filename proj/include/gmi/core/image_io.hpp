#pragma once

#include <zlib.h>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "gmi/core/error.hpp"
#include "gmi/core/tensor.hpp"

namespace gmi::io {

struct ImageU8 {
    std::size_t width = 0, height = 0, channels = 1;
    std::vector<std::uint8_t> pixels;  // row-major, interleaved channels
};

// [C,H,W] float in [0,1] <-> interleaved bytes
inline ImageU8 to_u8(const TensorF& img) {
    GMI_CHECK_SHAPE(img.rank() == 3, "to_u8: expected [C,H,W]");
    ImageU8 out;
    out.channels = img.dim(0);
    out.height = img.dim(1);
    out.width = img.dim(2);
    out.pixels.resize(out.width * out.height * out.channels);
    for (std::size_t y = 0; y < out.height; ++y)
        for (std::size_t x = 0; x < out.width; ++x)
            for (std::size_t c = 0; c < out.channels; ++c) {
                float v = img[(c * out.height + y) * out.width + x];
                v = std::clamp(v, 0.0f, 1.0f);
                out.pixels[(y * out.width + x) * out.channels + c] = std::uint8_t(v * 255.0f + 0.5f);
            }
    return out;
}

inline TensorF from_u8(const ImageU8& img) {
    TensorF out(Shape{img.channels, img.height, img.width});
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < img.channels; ++c)
                out[(c * img.height + y) * img.width + x] =
                    float(img.pixels[(y * img.width + x) * img.channels + c]) / 255.0f;
    return out;
}

// ------------------------------------------------------------------ PNM

inline void write_pnm(const std::filesystem::path& path, const ImageU8& img) {
    GMI_CHECK(img.channels == 1 || img.channels == 3, "write_pnm: 1 or 3 channels");
    std::ofstream f(path, std::ios::binary);
    GMI_CHECK(f.good(), "write_pnm: cannot open " + path.string());
    f << (img.channels == 1 ? "P5" : "P6") << "\n" << img.width << " " << img.height << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
}

inline ImageU8 read_pnm(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f.good()) throw LoadError("read_pnm: cannot open " + path.string());
    std::string magic;
    f >> magic;
    if (magic != "P5" && magic != "P6") throw FormatError("read_pnm: bad magic in " + path.string());
    auto next_token = [&f, &path]() {
        std::string t;
        while (f >> t) {
            if (t[0] == '#') {
                std::string rest;
                std::getline(f, rest);
                continue;
            }
            return t;
        }
        throw FormatError("read_pnm: truncated header in " + path.string());
    };
    ImageU8 img;
    img.channels = magic == "P5" ? 1 : 3;
    img.width = std::stoul(next_token());
    img.height = std::stoul(next_token());
    unsigned maxval = unsigned(std::stoul(next_token()));
    if (maxval != 255) throw FormatError("read_pnm: only maxval 255 supported");
    f.get();  // single whitespace after header
    img.pixels.resize(img.width * img.height * img.channels);
    f.read(reinterpret_cast<char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
    if (std::size_t(f.gcount()) != img.pixels.size()) throw FormatError("read_pnm: truncated pixels");
    return img;
}

// ------------------------------------------------------------------ PNG

namespace detail {

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n, std::uint32_t seed = 0) {
    return std::uint32_t(::crc32(seed, data, uInt(n)));
}

inline void put_u32(std::vector<std::uint8_t>& v, std::uint32_t x) {
    v.push_back(std::uint8_t(x >> 24));
    v.push_back(std::uint8_t(x >> 16));
    v.push_back(std::uint8_t(x >> 8));
    v.push_back(std::uint8_t(x));
}

inline void png_chunk(std::vector<std::uint8_t>& out, const char type[5],
                      const std::vector<std::uint8_t>& payload) {
    put_u32(out, std::uint32_t(payload.size()));
    std::vector<std::uint8_t> body(type, type + 4);
    body.insert(body.end(), payload.begin(), payload.end());
    std::uint32_t crc = crc32_of(body.data(), body.size());
    out.insert(out.end(), body.begin(), body.end());
    put_u32(out, crc);
}

inline std::vector<std::uint8_t> zlib_deflate(const std::vector<std::uint8_t>& raw) {
    uLongf bound = compressBound(uLong(raw.size()));
    std::vector<std::uint8_t> out(bound);
    if (compress2(out.data(), &bound, raw.data(), uLong(raw.size()), 6) != Z_OK)
        throw Error("png: deflate failed");
    out.resize(bound);
    return out;
}

inline std::vector<std::uint8_t> zlib_inflate(const std::uint8_t* data, std::size_t n,
                                              std::size_t expect) {
    std::vector<std::uint8_t> out(expect);
    uLongf len = uLongf(expect);
    int rc = uncompress(out.data(), &len, data, uLong(n));
    if (rc != Z_OK) throw FormatError("png: inflate failed");
    out.resize(len);
    return out;
}

}  // namespace detail

inline void write_png(const std::filesystem::path& path, const ImageU8& img) {
    GMI_CHECK(img.channels == 1 || img.channels == 3, "write_png: 1 or 3 channels");
    std::vector<std::uint8_t> raw;
    std::size_t stride = img.width * img.channels;
    raw.reserve((stride + 1) * img.height);
    for (std::size_t y = 0; y < img.height; ++y) {
        raw.push_back(0);  // filter: none
        raw.insert(raw.end(), img.pixels.begin() + long(y * stride),
                   img.pixels.begin() + long((y + 1) * stride));
    }
    std::vector<std::uint8_t> out{0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<std::uint8_t> ihdr;
    detail::put_u32(ihdr, std::uint32_t(img.width));
    detail::put_u32(ihdr, std::uint32_t(img.height));
    ihdr.push_back(8);                                   // bit depth
    ihdr.push_back(img.channels == 1 ? 0 : 2);           // gray / truecolor
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    detail::png_chunk(out, "IHDR", ihdr);
    detail::png_chunk(out, "IDAT", detail::zlib_deflate(raw));
    detail::png_chunk(out, "IEND", {});
    std::ofstream f(path, std::ios::binary);
    GMI_CHECK(f.good(), "write_png: cannot open " + path.string());
    f.write(reinterpret_cast<const char*>(out.data()), std::streamsize(out.size()));
}

// Reads 8-bit gray/RGB non-interlaced PNGs (the subset this tool writes,
// plus standard filtered rows).
inline ImageU8 read_png(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f.good()) throw LoadError("read_png: cannot open " + path.string());
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (buf.size() < 8 || std::memcmp(buf.data(), sig, 8) != 0)
        throw FormatError("read_png: bad signature in " + path.string());

    auto rd_u32 = [&buf](std::size_t at) {
        return (std::uint32_t(buf[at]) << 24) | (std::uint32_t(buf[at + 1]) << 16) |
               (std::uint32_t(buf[at + 2]) << 8) | std::uint32_t(buf[at + 3]);
    };

    ImageU8 img;
    std::vector<std::uint8_t> idat;
    std::size_t at = 8;
    int color_type = -1;
    while (at + 8 <= buf.size()) {
        std::uint32_t len = rd_u32(at);
        std::string type(buf.begin() + long(at + 4), buf.begin() + long(at + 8));
        std::size_t payload = at + 8;
        if (type == "IHDR") {
            img.width = rd_u32(payload);
            img.height = rd_u32(payload + 4);
            int depth = buf[payload + 8];
            color_type = buf[payload + 9];
            int interlace = buf[payload + 12];
            if (depth != 8 || (color_type != 0 && color_type != 2) || interlace != 0)
                throw FormatError("read_png: unsupported PNG variant (8-bit gray/RGB only)");
            img.channels = color_type == 0 ? 1 : 3;
        } else if (type == "IDAT") {
            idat.insert(idat.end(), buf.begin() + long(payload), buf.begin() + long(payload + len));
        } else if (type == "IEND") {
            break;
        }
        at = payload + len + 4;
    }
    if (color_type < 0 || idat.empty()) throw FormatError("read_png: missing chunks");

    std::size_t stride = img.width * img.channels;
    auto raw = detail::zlib_inflate(idat.data(), idat.size(), (stride + 1) * img.height);
    if (raw.size() != (stride + 1) * img.height) throw FormatError("read_png: size mismatch");

    img.pixels.assign(stride * img.height, 0);
    std::size_t bpp = img.channels;
    for (std::size_t y = 0; y < img.height; ++y) {
        std::uint8_t filter = raw[y * (stride + 1)];
        const std::uint8_t* src = raw.data() + y * (stride + 1) + 1;
        std::uint8_t* dst = img.pixels.data() + y * stride;
        const std::uint8_t* up = y ? img.pixels.data() + (y - 1) * stride : nullptr;
        for (std::size_t x = 0; x < stride; ++x) {
            int a = x >= bpp ? dst[x - bpp] : 0;
            int b = up ? up[x] : 0;
            int c = (up && x >= bpp) ? up[x - bpp] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: {
                    int p = a + b - c;
                    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
                    v += (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
                    break;
                }
                default: throw FormatError("read_png: bad filter");
            }
            dst[x] = std::uint8_t(v & 0xff);
        }
    }
    return img;
}

inline ImageU8 read_image(const std::filesystem::path& path) {
    auto ext = path.extension().string();
    for (auto& ch : ext) ch = char(std::tolower(ch));
    if (ext == ".png") return read_png(path);
    if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") return read_pnm(path);
    throw LoadError("read_image: unsupported extension '" + ext + "' for " + path.string());
}

// --------------------------------------------------------------- composites

// Tile images (all same shape) into a rows x cols grid with a 1px separator.
inline ImageU8 tile_grid(const std::vector<TensorF>& images, std::size_t cols) {
    GMI_CHECK(!images.empty(), "tile_grid: no images");
    std::size_t c = images[0].dim(0), h = images[0].dim(1), w = images[0].dim(2);
    std::size_t rows = (images.size() + cols - 1) / cols;
    ImageU8 out;
    out.channels = c;
    out.height = rows * (h + 1) + 1;
    out.width = cols * (w + 1) + 1;
    out.pixels.assign(out.width * out.height * c, 64);
    for (std::size_t i = 0; i < images.size(); ++i) {
        GMI_CHECK_SHAPE(images[i].shape() == images[0].shape(), "tile_grid: shape mismatch");
        ImageU8 cell = to_u8(images[i]);
        std::size_t oy = (i / cols) * (h + 1) + 1, ox = (i % cols) * (w + 1) + 1;
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                for (std::size_t ch = 0; ch < c; ++ch)
                    out.pixels[((oy + y) * out.width + ox + x) * c + ch] =
                        cell.pixels[(y * w + x) * cell.channels + ch];
    }
    return out;
}

// Minimal chart: polyline series on white, black axes. Good enough for the
// sweep plots; not a plotting library.
struct Chart {
    std::size_t width = 640, height = 480;
    std::vector<std::vector<std::pair<double, double>>> series;
    bool lines = true;

    ImageU8 render() const {
        ImageU8 img;
        img.channels = 3;
        img.width = width;
        img.height = height;
        img.pixels.assign(width * height * 3, 255);
        double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
        for (auto& s : series)
            for (auto& [x, y] : s) {
                xmin = std::min(xmin, x), xmax = std::max(xmax, x);
                ymin = std::min(ymin, y), ymax = std::max(ymax, y);
            }
        if (xmin > xmax) xmin = 0, xmax = 1;
        if (ymin > ymax) ymin = 0, ymax = 1;
        if (xmax - xmin < 1e-12) xmax = xmin + 1;
        if (ymax - ymin < 1e-12) ymax = ymin + 1;
        const std::size_t m = 40;  // margin
        auto px = [&](double x) {
            return long(m + (x - xmin) / (xmax - xmin) * double(width - 2 * m));
        };
        auto py = [&](double y) {
            return long(height - m - (y - ymin) / (ymax - ymin) * double(height - 2 * m));
        };
        auto put = [&](long x, long y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
            if (x < 0 || y < 0 || std::size_t(x) >= width || std::size_t(y) >= height) return;
            auto* p = &img.pixels[(std::size_t(y) * width + std::size_t(x)) * 3];
            p[0] = r, p[1] = g, p[2] = b;
        };
        for (std::size_t x = m; x < width - m; ++x) put(long(x), long(height - m), 0, 0, 0);
        for (std::size_t y = m; y < height - m; ++y) put(long(m), long(y), 0, 0, 0);
        static const std::uint8_t palette[][3] = {{200, 30, 30}, {30, 90, 200}, {30, 150, 60},
                                                  {150, 30, 180}, {220, 140, 20}};
        for (std::size_t si = 0; si < series.size(); ++si) {
            auto& col = palette[si % 5];
            auto mark = [&](long x, long y) {
                for (long dy = -2; dy <= 2; ++dy)
                    for (long dx = -2; dx <= 2; ++dx) put(x + dx, y + dy, col[0], col[1], col[2]);
            };
            for (std::size_t i = 0; i < series[si].size(); ++i) {
                long x1 = px(series[si][i].first), y1 = py(series[si][i].second);
                mark(x1, y1);
                if (lines && i + 1 < series[si].size()) {
                    long x2 = px(series[si][i + 1].first), y2 = py(series[si][i + 1].second);
                    long steps = std::max(std::abs(x2 - x1), std::abs(y2 - y1)) + 1;
                    for (long s = 0; s <= steps; ++s)
                        put(x1 + (x2 - x1) * s / steps, y1 + (y2 - y1) * s / steps, col[0], col[1], col[2]);
                }
            }
        }
        return img;
    }
};

}  // namespace gmi::io

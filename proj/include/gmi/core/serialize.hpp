#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gmi/core/error.hpp"
#include "gmi/core/random.hpp"
#include "gmi/core/tensor.hpp"

namespace gmi {

using json = nlohmann::json;

// Locale-independent float formatting for CSV/report determinism.
inline std::string fmt_g(double v, int digits = 9) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
    return buf;
}

inline std::string digest_hex(std::uint64_t h) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline std::uint64_t digest_of(const std::string& text) { return hash64(text); }

// Versioned checkpoint container: magic, version, JSON header, raw float32
// tensors in header order.
namespace ckpt {

constexpr std::uint32_t kVersion = 1;
constexpr char kMagic[5] = "GMIC";

inline void save(const std::filesystem::path& path, json header,
                 const std::vector<const TensorF*>& tensors) {
    json shapes = json::array();
    for (auto* t : tensors) shapes.push_back(t->shape());
    header["tensor_shapes"] = shapes;
    std::string htext = header.dump();

    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        GMI_CHECK(f.good(), "checkpoint: cannot open " + tmp.string());
        f.write(kMagic, 4);
        std::uint32_t ver = kVersion;
        f.write(reinterpret_cast<const char*>(&ver), 4);
        std::uint64_t hlen = htext.size();
        f.write(reinterpret_cast<const char*>(&hlen), 8);
        f.write(htext.data(), std::streamsize(htext.size()));
        for (auto* t : tensors)
            f.write(reinterpret_cast<const char*>(t->data()), std::streamsize(t->size() * sizeof(float)));
        GMI_CHECK(f.good(), "checkpoint: write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);  // atomic publish
}

struct Loaded {
    json header;
    std::vector<TensorF> tensors;
};

inline Loaded load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f.good()) throw LoadError("checkpoint: cannot open " + path.string());
    char magic[4];
    f.read(magic, 4);
    if (std::string(magic, 4) != kMagic) throw FormatError("checkpoint: bad magic in " + path.string());
    std::uint32_t ver = 0;
    f.read(reinterpret_cast<char*>(&ver), 4);
    if (ver != kVersion) throw FormatError("checkpoint: unsupported version");
    std::uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 8);
    std::string htext(hlen, '\0');
    f.read(htext.data(), std::streamsize(hlen));
    Loaded out;
    out.header = json::parse(htext);
    for (auto& js : out.header.at("tensor_shapes")) {
        Shape s = js.get<Shape>();
        TensorF t(s);
        f.read(reinterpret_cast<char*>(t.data()), std::streamsize(t.size() * sizeof(float)));
        if (!f.good()) throw FormatError("checkpoint: truncated tensor data");
        out.tensors.push_back(std::move(t));
    }
    return out;
}

}  // namespace ckpt

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        GMI_CHECK(f.good(), "cannot open " + tmp.string());
        f << text;
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f.good()) throw LoadError("cannot open " + path.string());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace gmi

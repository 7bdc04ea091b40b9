#pragma once

#include <zlib.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gmi/core/error.hpp"
#include "gmi/core/image_io.hpp"
#include "gmi/core/tensor.hpp"
#include "gmi/data/synth_digits.hpp"

namespace gmi::data {

constexpr int kUnlabeled = -1;

struct ImageSample {
    TensorF image;  // [C,H,W], intensities in [0,1]
    int label = 0;
};

using Samples = std::vector<ImageSample>;

struct SplitSpec {
    std::set<int> private_labels;
    std::set<int> public_labels;
};

inline int num_classes(const Samples& s) {
    int mx = -1;
    for (auto& x : s) mx = std::max(mx, x.label);
    return mx + 1;
}

inline std::size_t count_label(const Samples& s, int label) {
    std::size_t n = 0;
    for (auto& x : s)
        if (x.label == label) ++n;
    return n;
}

// ------------------------------------------------------------------- IDX

namespace detail {

inline std::vector<std::uint8_t> read_gz_or_plain(const std::filesystem::path& path) {
    gzFile f = gzopen(path.string().c_str(), "rb");  // handles plain files too
    if (!f) throw LoadError("cannot open " + path.string());
    std::vector<std::uint8_t> out;
    std::uint8_t buf[1 << 16];
    int n;
    while ((n = gzread(f, buf, sizeof(buf))) > 0) out.insert(out.end(), buf, buf + n);
    gzclose(f);
    if (n < 0) throw FormatError("decompression failed for " + path.string());
    return out;
}

inline std::uint32_t be32(const std::uint8_t* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
           std::uint32_t(p[3]);
}

inline std::filesystem::path find_idx_file(const std::filesystem::path& dir,
                                           const std::string& base) {
    for (const char* suffix : {"", ".gz"}) {
        for (std::string name : {base, [&] {
                                     std::string alt = base;  // foo-idx3-ubyte -> foo.idx3-ubyte
                                     auto pos = alt.find("-idx");
                                     if (pos != std::string::npos) alt[pos] = '.';
                                     return alt;
                                 }()}) {
            auto p = dir / (name + suffix);
            if (std::filesystem::exists(p)) return p;
        }
    }
    throw LoadError("IDX file '" + base + "' not found under " + dir.string());
}

}  // namespace detail

inline Samples load_idx_pair(const std::filesystem::path& images_path,
                             const std::filesystem::path& labels_path) {
    auto ibuf = detail::read_gz_or_plain(images_path);
    auto lbuf = detail::read_gz_or_plain(labels_path);
    if (ibuf.size() < 16 || detail::be32(ibuf.data()) != 0x00000803)
        throw FormatError("bad IDX image magic in " + images_path.string());
    if (lbuf.size() < 8 || detail::be32(lbuf.data()) != 0x00000801)
        throw FormatError("bad IDX label magic in " + labels_path.string());
    std::size_t n = detail::be32(ibuf.data() + 4);
    std::size_t h = detail::be32(ibuf.data() + 8);
    std::size_t w = detail::be32(ibuf.data() + 12);
    if (detail::be32(lbuf.data() + 4) != n) throw FormatError("IDX image/label count mismatch");
    if (ibuf.size() < 16 + n * h * w || lbuf.size() < 8 + n) throw FormatError("IDX truncated");
    Samples out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        ImageSample s;
        s.image = TensorF(Shape{1, h, w});
        for (std::size_t j = 0; j < h * w; ++j) s.image[j] = float(ibuf[16 + i * h * w + j]) / 255.0f;
        s.label = int(lbuf[8 + i]);
        out.push_back(std::move(s));
    }
    return out;
}

inline std::filesystem::path mnist_dir() {
    if (const char* env = std::getenv("GMI_MNIST_DIR")) return env;
    return "data/mnist";
}

inline bool mnist_available() {
    try {
        detail::find_idx_file(mnist_dir(), "train-images-idx3-ubyte");
        return true;
    } catch (const LoadError&) {
        return false;
    }
}

// ------------------------------------------------------------- directory

// Directory of images with manifest.csv rows "relative_path,label".
inline Samples load_directory(const std::filesystem::path& dir) {
    auto manifest = dir / "manifest.csv";
    if (!std::filesystem::exists(manifest)) throw LoadError("missing manifest: " + manifest.string());
    std::ifstream f(manifest);
    Samples out;
    std::string line;
    Shape expect;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto comma = line.find_last_of(',');
        if (comma == std::string::npos) throw FormatError("bad manifest row: " + line);
        std::string rel = line.substr(0, comma);
        std::string lab = line.substr(comma + 1);
        if (!lab.empty() && lab.back() == '\r') lab.pop_back();
        if (rel == "relative_path" || rel == "path") continue;  // header row
        int label = 0;
        try {
            label = std::stoi(lab);
        } catch (...) {
            throw FormatError("bad label '" + lab + "' in manifest row: " + line);
        }
        GMI_CHECK_PARAM(label >= 0, "manifest label must be >= 0");
        ImageSample s;
        s.image = io::from_u8(io::read_image(dir / rel));
        s.label = label;
        if (expect.empty())
            expect = s.image.shape();
        else if (s.image.shape() != expect)
            throw FormatError("image shape mismatch at " + rel + ": expected " + shape_str(expect) +
                              ", got " + shape_str(s.image.shape()));
        out.push_back(std::move(s));
    }
    if (out.empty()) throw LoadError("no samples listed in " + manifest.string());
    return out;
}

// -------------------------------------------------------------- registry

// Registry names:
//   mnist | mnist:train | mnist:test       IDX files under $GMI_MNIST_DIR or data/mnist
//   synth | synth:<count> | synth:<count>:<seed>
// anything else is treated as a directory-of-images path.
inline Samples load_dataset(const std::string& source) {
    if (source.rfind("mnist", 0) == 0) {
        auto dir = mnist_dir();
        std::string which = source.size() > 5 && source[5] == ':' ? source.substr(6) : "";
        auto train = [&] {
            return load_idx_pair(detail::find_idx_file(dir, "train-images-idx3-ubyte"),
                                 detail::find_idx_file(dir, "train-labels-idx1-ubyte"));
        };
        auto test = [&] {
            return load_idx_pair(detail::find_idx_file(dir, "t10k-images-idx3-ubyte"),
                                 detail::find_idx_file(dir, "t10k-labels-idx1-ubyte"));
        };
        if (which == "train") return train();
        if (which == "test") return test();
        GMI_CHECK_PARAM(which.empty(), "unknown mnist subset '" + which + "'");
        Samples all = train();
        Samples te = test();
        all.insert(all.end(), std::make_move_iterator(te.begin()), std::make_move_iterator(te.end()));
        return all;
    }
    if (source.rfind("synth", 0) == 0) {
        std::size_t count = 70000;
        std::uint64_t seed = 20240001ull;
        if (source.size() > 5 && source[5] == ':') {
            std::stringstream ss(source.substr(6));
            std::string tok;
            if (std::getline(ss, tok, ':')) count = std::stoul(tok);
            if (std::getline(ss, tok, ':')) seed = std::stoull(tok);
        }
        GMI_CHECK_PARAM(count > 0, "synth: count must be positive");
        Samples out;
        out.reserve(count);
        for (std::size_t i = 0; i < count; ++i) {
            ImageSample s;
            s.label = int(i % 10);  // balanced classes, deterministic order
            s.image = synth_digit(s.label, seed, i);
            out.push_back(std::move(s));
        }
        return out;
    }
    return load_directory(source);
}

// ---------------------------------------------------------------- splits

inline std::pair<Samples, Samples> split_private_public(const Samples& data, const SplitSpec& spec) {
    for (int l : spec.private_labels)
        if (spec.public_labels.count(l))
            throw ParamError("split: label " + std::to_string(l) + " appears on both sides");
    std::set<int> seen;
    for (auto& s : data) seen.insert(s.label);
    for (int l : spec.private_labels)
        GMI_CHECK_PARAM(seen.count(l), "split: private label " + std::to_string(l) + " absent from data");
    for (int l : spec.public_labels)
        GMI_CHECK_PARAM(seen.count(l), "split: public label " + std::to_string(l) + " absent from data");
    Samples priv, pub;
    for (auto& s : data) {
        if (spec.private_labels.count(s.label))
            priv.push_back(s);
        else if (spec.public_labels.count(s.label))
            pub.push_back(s);
    }
    return {std::move(priv), std::move(pub)};
}

// Deterministic shuffled train/test split (fraction of each call's input).
inline std::pair<Samples, Samples> train_test_split(const Samples& data, double train_frac,
                                                    std::uint64_t seed) {
    std::vector<std::size_t> idx(data.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(derive_seed(seed, "train_test_split"));
    rng.shuffle(idx.begin(), idx.end());
    std::size_t ntrain = std::size_t(double(data.size()) * train_frac);
    Samples train, test;
    for (std::size_t i = 0; i < idx.size(); ++i)
        (i < ntrain ? train : test).push_back(data[idx[i]]);
    return {std::move(train), std::move(test)};
}

// Remap labels to a dense [0,K) range; returns the ordered original labels.
inline std::vector<int> compact_labels(Samples& data) {
    std::set<int> labels;
    for (auto& s : data)
        if (s.label != kUnlabeled) labels.insert(s.label);
    std::vector<int> ordered(labels.begin(), labels.end());
    for (auto& s : data) {
        if (s.label == kUnlabeled) continue;
        s.label = int(std::lower_bound(ordered.begin(), ordered.end(), s.label) - ordered.begin());
    }
    return ordered;
}

}  // namespace gmi::data

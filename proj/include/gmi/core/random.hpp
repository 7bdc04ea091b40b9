#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "gmi/core/tensor.hpp"

namespace gmi {

// splitmix64: used both as the PRNG core and to derive stage seeds from a
// global seed + tag, so stages stay decoupled (adding a stage never shifts
// another stage's stream).
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t hash64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t seed, const std::string& tag) {
    std::uint64_t s = seed ^ hash64(tag);
    return splitmix64(s);
}

// Deterministic PRNG with hand-rolled distributions (identical streams on any
// platform, unlike std:: distributions).
class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0x5eedULL) : state_(seed ? seed : 0x5eedULL) {}

    std::uint64_t next_u64() { return splitmix64(state_); }

    double uniform() {  // [0,1)
        return double(next_u64() >> 11) * 0x1.0p-53;
    }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::size_t index(std::size_t n) { return std::size_t(next_u64() % n); }

    double normal() {  // Box-Muller, one value per call
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0;
        while (u1 <= 1e-300) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    template <typename S>
    void fill_normal(Tensor<S>& t, double mean = 0.0, double stddev = 1.0) {
        for (auto& v : t) v = S(mean + stddev * normal());
    }
    template <typename S>
    void fill_uniform(Tensor<S>& t, double lo, double hi) {
        for (auto& v : t) v = S(uniform(lo, hi));
    }

    template <typename It>
    void shuffle(It first, It last) {
        auto n = std::size_t(last - first);
        for (std::size_t i = n; i > 1; --i) std::swap(first[i - 1], first[index(i)]);
    }

    Rng fork(const std::string& tag) { return Rng(derive_seed(next_u64(), tag)); }

  private:
    std::uint64_t state_;
    double spare_ = 0;
    bool have_spare_ = false;
};

}  // namespace gmi

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <ostream>
#include <vector>

#include <Eigen/Dense>

#include "gmi/core/error.hpp"

namespace gmi {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense row-major tensor over a contiguous buffer. Value semantics; moves are
// cheap. Rank is dynamic: classifiers use [N,D], images [N,C,H,W].
template <typename S>
class Tensor {
  public:
    using Scalar = S;

    Tensor() = default;
    explicit Tensor(Shape shape, S fill = S(0))
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
    Tensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
        GMI_CHECK_SHAPE(data_.size() == shape_numel(shape_), "tensor data/shape mismatch");
    }

    static Tensor scalar(S v) { return Tensor(Shape{1}, std::vector<S>{v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }
    S& operator[](std::size_t i) { return data_[i]; }
    const S& operator[](std::size_t i) const { return data_[i]; }

    S& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    const S& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    auto begin() { return data_.begin(); }
    auto end() { return data_.end(); }
    auto begin() const { return data_.begin(); }
    auto end() const { return data_.end(); }

    Tensor reshaped(Shape s) const {
        GMI_CHECK_SHAPE(shape_numel(s) == size(), "reshape changes element count");
        Tensor out = *this;
        out.shape_ = std::move(s);
        return out;
    }

    // Row-major Eigen views ([rows, cols] for rank >= 2, flattening trailing dims).
    using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<EMat> mat(std::size_t rows, std::size_t cols) {
        GMI_CHECK_SHAPE(rows * cols == size(), "matrix view size mismatch");
        return Eigen::Map<EMat>(data(), rows, cols);
    }
    Eigen::Map<const EMat> mat(std::size_t rows, std::size_t cols) const {
        GMI_CHECK_SHAPE(rows * cols == size(), "matrix view size mismatch");
        return Eigen::Map<const EMat>(data(), rows, cols);
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    S min() const { return *std::min_element(data_.begin(), data_.end()); }
    S max() const { return *std::max_element(data_.begin(), data_.end()); }
    S sum() const {
        S acc = 0;
        for (S v : data_) acc += v;
        return acc;
    }
    S norm2() const {
        S acc = 0;
        for (S v : data_) acc += v * v;
        return std::sqrt(acc);
    }
    bool all_finite() const {
        for (S v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

  private:
    Shape shape_;
    std::vector<S> data_;
};

template <typename S>
std::ostream& operator<<(std::ostream& os, const Tensor<S>& t) {
    os << "Tensor" << shape_str(t.shape()) << "{";
    for (std::size_t i = 0; i < std::min<std::size_t>(t.size(), 8); ++i) os << (i ? "," : "") << t[i];
    if (t.size() > 8) os << ",...";
    return os << "}";
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace gmi

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sisma/core/errors.hpp"

namespace sisma {

using i64 = std::int64_t;
using u64 = std::uint64_t;
using u32 = std::uint32_t;
using u16 = std::uint16_t;
using u8 = std::uint8_t;

/// Dense row-major tensor. Rank is dynamic but in practice 1..3.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<i64> shape) : shape_(std::move(shape)) {
        i64 n = 1;
        for (i64 d : shape_) {
            if (d < 0) throw ShapeError("negative dimension " + std::to_string(d));
            n *= d;
        }
        v_.assign(static_cast<std::size_t>(n), T(0));
    }

    Tensor(std::initializer_list<i64> shape) : Tensor(std::vector<i64>(shape)) {}

    static Tensor zeros(std::vector<i64> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<i64> shape, T value) {
        Tensor t(std::move(shape));
        t.fill(value);
        return t;
    }

    const std::vector<i64>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    i64 dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    i64 numel() const { return static_cast<i64>(v_.size()); }
    bool empty() const { return v_.empty(); }

    T* data() { return v_.data(); }
    const T* data() const { return v_.data(); }

    T& operator[](i64 i) { return v_[static_cast<std::size_t>(i)]; }
    const T& operator[](i64 i) const { return v_[static_cast<std::size_t>(i)]; }

    T& operator()(i64 i) { return v_[static_cast<std::size_t>(i)]; }
    const T& operator()(i64 i) const { return v_[static_cast<std::size_t>(i)]; }

    T& operator()(i64 i, i64 j) { return v_[static_cast<std::size_t>(i * shape_[1] + j)]; }
    const T& operator()(i64 i, i64 j) const { return v_[static_cast<std::size_t>(i * shape_[1] + j)]; }

    T& operator()(i64 i, i64 j, i64 k) {
        return v_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
    }
    const T& operator()(i64 i, i64 j, i64 k) const {
        return v_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
    }

    void fill(T value) { std::fill(v_.begin(), v_.end(), value); }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    bool all_finite() const {
        for (const T& x : v_)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
        os << "]";
        return os.str();
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (i64 i = 0; i < numel(); ++i) out[i] = static_cast<U>(v_[static_cast<std::size_t>(i)]);
        return out;
    }

private:
    std::vector<i64> shape_;
    std::vector<T> v_;
};

/// Throws ShapeError naming `what` unless `t` has exactly the given shape.
template <typename T>
inline void check_shape(const Tensor<T>& t, const std::vector<i64>& want, const char* what) {
    if (t.shape() != want) {
        Tensor<T> w(want);
        throw ShapeError(std::string(what) + ": expected " + w.shape_str() + ", got " + t.shape_str());
    }
}

template <typename T>
inline T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    T m = 0;
    for (i64 i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace sisma

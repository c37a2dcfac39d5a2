#pragma once

// Dense row-major tensors. Storage only; gradients and graph structure live
// on the Tape (tape.hpp). Element type is a template parameter: float for
// training, double for finite-difference gradient checks.

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace gmvae {

using Shape = std::vector<int>;

template <class T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

inline std::int64_t numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) {
        if (d <= 0) throw std::invalid_argument("tensor shape must have positive dimensions");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

template <class T>
struct Tensor {
    Shape shape;
    Buffer<T> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<std::size_t>(numel(shape)), T(0)) {}
    Tensor(Shape s, T fill) : shape(std::move(s)), data(static_cast<std::size_t>(numel(shape)), fill) {}
    Tensor(Shape s, Buffer<T> values) : shape(std::move(s)), data(std::move(values)) {
        if (static_cast<std::int64_t>(data.size()) != numel(shape))
            throw std::invalid_argument("tensor data length does not match shape " + shape_str(shape));
    }

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }

    T& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    T& at(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
    const T& at(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }

    T& at(int i, int j, int k) {
        return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    const T& at(int i, int j, int k) const {
        return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
    }
};

template <class T>
inline bool all_finite(const T* p, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i) {
        if (!std::isfinite(p[i])) return false;
    }
    return true;
}

template <class T>
inline void require_finite(const T* p, std::int64_t n, const char* what) {
    if (!all_finite(p, n))
        throw std::runtime_error(std::string("non-finite values produced by ") + what);
}

// Convert between element types (used by the double-precision check path).
template <class To, class From>
inline Tensor<To> cast_tensor(const Tensor<From>& t) {
    Tensor<To> out(t.shape);
    for (std::int64_t i = 0; i < t.size(); ++i) out[i] = static_cast<To>(t[i]);
    return out;
}

}  // namespace gmvae

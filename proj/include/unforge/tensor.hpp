#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "unforge/errors.hpp"

namespace unforge {

// Dense row-major tensor. Scalar type is a template parameter so the
// finite-difference oracle can run the same graphs in double precision;
// everything user-facing is TensorT<float>.
template <typename T>
struct TensorT {
    std::vector<std::size_t> shape;
    std::vector<T> data;

    TensorT() = default;

    explicit TensorT(std::vector<std::size_t> s) : shape(std::move(s)) {
        data.assign(numel_of(shape), T(0));
    }

    TensorT(std::vector<std::size_t> s, std::vector<T> d)
        : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != numel_of(shape))
            throw GraphError("tensor: data length " + std::to_string(data.size()) +
                             " does not match shape numel " + std::to_string(numel_of(shape)));
    }

    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t d : s) n *= d;
        return n;
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t size(std::size_t i) const { return shape[i]; }

    // rank-2 accessors; rows()/cols() treat rank-1 as a single row
    std::size_t rows() const { return rank() == 2 ? shape[0] : 1; }
    std::size_t cols() const { return rank() == 2 ? shape[1] : numel(); }

    T& operator()(std::size_t i) { return data[i]; }
    const T& operator()(std::size_t i) const { return data[i]; }
    T& operator()(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
    const T& operator()(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    static TensorT zeros(std::vector<std::size_t> s) { return TensorT(std::move(s)); }

    static TensorT scalar(T v) { return TensorT({1}, {v}); }

    static TensorT row(std::vector<T> d) {
        std::size_t n = d.size();
        return TensorT({1, n}, std::move(d));
    }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out;
        out.shape = shape;
        out.data.reserve(data.size());
        for (T v : data) out.data.push_back(static_cast<U>(v));
        return out;
    }
};

using Tensor = TensorT<float>;

template <typename T>
std::string shape_str(const TensorT<T>& t) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < t.shape.size(); ++i) os << (i ? "," : "") << t.shape[i];
    os << "]";
    return os.str();
}

}  // namespace unforge

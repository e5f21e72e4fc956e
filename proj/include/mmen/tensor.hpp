#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmen {

// Raised when layer/tensor shapes are inconsistent with each other.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raised when a NaN/Inf shows up in activations, gradients or parameters.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raised on malformed files (bad magic, truncation, version mismatch).
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline int64_t numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// Dense n-dimensional array, row-major. T is float for training and
// double for the finite-difference verification mode.
template <typename T>
struct TensorT {
    std::vector<int> shape;
    std::vector<T> data;

    TensorT() = default;

    explicit TensorT(std::vector<int> s, T fill = T(0))
        : shape(std::move(s)), data(static_cast<size_t>(numel(shape)), fill) {
        for (int d : shape)
            if (d <= 0) throw ConfigError("tensor dimension must be positive, got " + shape_str(shape));
    }

    static TensorT from(std::vector<int> s, std::vector<T> d) {
        TensorT t;
        t.shape = std::move(s);
        t.data = std::move(d);
        if (numel(t.shape) != static_cast<int64_t>(t.data.size()))
            throw ConfigError("tensor data size does not match shape " + shape_str(t.shape));
        return t;
    }

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    void check_finite(const std::string& what) const {
        for (const T& v : data)
            if (!std::isfinite(v)) throw NumericError("non-finite value in " + what);
    }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

using Tensor = TensorT<float>;

}  // namespace mmen

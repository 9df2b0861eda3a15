#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "seqcond/errors.hpp"

namespace seqcond {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

// Dense row-major tensor. Owns its storage.
template <class T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(numel(shape), fill) {}
    Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != numel(shape))
            throw InputError("tensor data size " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }

    std::size_t size() const { return data.size(); }
    std::size_t dim(std::size_t axis) const { return shape.at(axis); }
    std::size_t rank() const { return shape.size(); }
    bool empty() const { return data.empty(); }

    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    std::span<T> span() { return data; }
    std::span<const T> span() const { return data; }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    Tensor reshaped(Shape s) const {
        if (numel(s) != size())
            throw InputError("cannot reshape " + shape_str(shape) + " to " + shape_str(s));
        return Tensor(std::move(s), data);
    }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out(shape);
        for (std::size_t i = 0; i < size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

template <class T>
void require_shape(const Tensor<T>& t, const Shape& expected, const char* what) {
    if (t.shape != expected)
        throw InputError(std::string(what) + ": expected shape " + shape_str(expected) + ", got " +
                         shape_str(t.shape));
}

}  // namespace seqcond

namespace seqcond {

enum class Precision { kSingle, kDouble };

inline const char* precision_name(Precision p) { return p == Precision::kSingle ? "f32" : "f64"; }

}  // namespace seqcond

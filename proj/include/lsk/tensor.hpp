#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lsk {

/// Row-major dense matrix. Rows are voxels or points, columns are channels.
template <class T>
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), data(r * c, fill) {}

    T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    template <class U>
    Matrix<U> cast() const {
        Matrix<U> out(rows, cols);
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;
};

/// Dense N-d array with an explicit shape; used for parameters and optimizer state.
template <class T>
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> s, T fill = T(0)) : shape(std::move(s)) {
        data.assign(numel(shape), fill);
    }

    static std::size_t numel(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (auto d : s) n *= d;
        return n;
    }
    std::size_t size() const { return data.size(); }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw std::invalid_argument(what);
}

namespace axis_ops {

struct Split {
    std::size_t outer = 1, n = 1, inner = 1;
};

inline Split split(const std::vector<std::size_t>& shape, std::size_t axis) {
    Split s;
    for (std::size_t a = 0; a < axis; ++a) s.outer *= shape[a];
    s.n = shape[axis];
    for (std::size_t a = axis + 1; a < shape.size(); ++a) s.inner *= shape[a];
    return s;
}

/// new[..., k, ...] = old[..., perm[k], ...]
template <class U>
void permute(std::vector<U>& data, const std::vector<std::size_t>& shape, std::size_t axis,
             const std::vector<int>& perm) {
    const auto sp = split(shape, axis);
    if (perm.size() != sp.n) throw std::invalid_argument("permutation length mismatch");
    std::vector<U> out(data.size());
    if (sp.inner == 1) {
        for (std::size_t o = 0; o < sp.outer; ++o) {
            const U* src = data.data() + o * sp.n;
            U* dst = out.data() + o * sp.n;
            for (std::size_t k = 0; k < sp.n; ++k) dst[k] = src[perm[k]];
        }
        data = std::move(out);
        return;
    }
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t k = 0; k < sp.n; ++k) {
            const std::size_t src = (o * sp.n + static_cast<std::size_t>(perm[k])) * sp.inner;
            const std::size_t dst = (o * sp.n + k) * sp.inner;
            std::copy(data.begin() + static_cast<std::ptrdiff_t>(src),
                      data.begin() + static_cast<std::ptrdiff_t>(src + sp.inner),
                      out.begin() + static_cast<std::ptrdiff_t>(dst));
        }
    data = std::move(out);
}

/// Keeps indices [0, keep) along `axis`; updates `shape` in place.
template <class U>
std::vector<U> slice_leading(const std::vector<U>& data, std::vector<std::size_t>& shape, std::size_t axis,
                             std::size_t keep) {
    const auto sp = split(shape, axis);
    if (keep > sp.n) throw std::invalid_argument("slice exceeds axis length");
    std::vector<U> out(sp.outer * keep * sp.inner);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t k = 0; k < keep; ++k) {
            const std::size_t src = (o * sp.n + k) * sp.inner;
            const std::size_t dst = (o * keep + k) * sp.inner;
            std::copy(data.begin() + static_cast<std::ptrdiff_t>(src),
                      data.begin() + static_cast<std::ptrdiff_t>(src + sp.inner),
                      out.begin() + static_cast<std::ptrdiff_t>(dst));
        }
    shape[axis] = keep;
    return out;
}

/// Calls f(sub_flat, full_flat) for every element of a leading sub-block.
template <class F>
void for_each_leading(const std::vector<std::size_t>& sub_shape, const std::vector<std::size_t>& full_shape, F&& f) {
    const std::size_t rank = sub_shape.size();
    std::size_t total = 1;
    for (auto d : sub_shape) total *= d;
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t flat = 0; flat < total; ++flat) {
        std::size_t full = 0;
        for (std::size_t a = 0; a < rank; ++a) full = full * full_shape[a] + idx[a];
        f(flat, full);
        for (std::size_t a = rank; a-- > 0;) {
            if (++idx[a] < sub_shape[a]) break;
            idx[a] = 0;
        }
    }
}

}  // namespace axis_ops

}  // namespace lsk

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "plora/errors.hpp"

namespace plora {

// Dense row-major tensor, double precision. Desk scale: clarity over speed.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
        data.assign(numel_of(shape), 0.0);
    }

    Tensor(std::vector<std::size_t> s, std::vector<double> d)
        : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != numel_of(shape)) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
    }

    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t d : s) n *= d;
        return n;
    }

    static std::string shape_str(const std::vector<std::size_t>& s) {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
        os << "]";
        return os.str();
    }

    static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }

    static Tensor scalar(double v) { return Tensor({}, {v}); }

    // 2-D literal, e.g. Tensor::mat({{1,2},{3,4}}).
    static Tensor mat(std::initializer_list<std::initializer_list<double>> rows) {
        std::size_t r = rows.size();
        std::size_t c = r ? rows.begin()->size() : 0;
        Tensor t({r, c});
        std::size_t i = 0;
        for (const auto& row : rows) {
            if (row.size() != c) throw ShapeError("ragged matrix literal");
            for (double v : row) t.data[i++] = v;
        }
        return t;
    }

    static Tensor vec(std::initializer_list<double> vals) {
        return Tensor({vals.size()}, std::vector<double>(vals));
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    std::size_t rows() const { return rank() == 2 ? shape[0] : (rank() == 1 ? 1 : 0); }
    std::size_t cols() const { return rank() == 2 ? shape[1] : (rank() == 1 ? shape[0] : 0); }

    double& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const { return shape_str(shape); }
};

inline void check_finite(const Tensor& t, const char* op) {
    if (!t.all_finite()) {
        throw NumericError(std::string("non-finite value produced by '") + op + "'");
    }
}

// --- plain (untaped) tensor math; the tape ops reuse these for forward values ---

inline Tensor matmul_value(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0]) {
        throw ShapeError("matmul shape mismatch: " + a.shape_str() + " x " + b.shape_str());
    }
    const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor c({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a.data[i * k + p];
            const double* brow = &b.data[p * n];
            double* crow = &c.data[i * n];
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

// a * b^T  (a: [m,k], b: [n,k]) -> [m,n]
inline Tensor matmul_nt_value(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[1]) {
        throw ShapeError("matmul_nt shape mismatch: " + a.shape_str() + " x " + b.shape_str() +
                         "^T");
    }
    const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[0];
    Tensor c({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = &a.data[i * k];
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = &b.data[j * k];
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            c.data[i * n + j] = s;
        }
    }
    return c;
}

// a^T * b  (a: [k,m], b: [k,n]) -> [m,n]
inline Tensor matmul_tn_value(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape[0] != b.shape[0]) {
        throw ShapeError("matmul_tn shape mismatch: " + a.shape_str() + "^T x " + b.shape_str());
    }
    const std::size_t k = a.shape[0], m = a.shape[1], n = b.shape[1];
    Tensor c({m, n});
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = &a.data[p * m];
        const double* brow = &b.data[p * n];
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            double* crow = &c.data[i * n];
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

inline Tensor add_value(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("add shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    }
    Tensor c = a;
    for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] += b.data[i];
    return c;
}

inline Tensor scale_value(const Tensor& a, double s) {
    Tensor c = a;
    for (double& v : c.data) v *= s;
    return c;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("max_abs_diff shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        std::uint64_t x, y;
        static_assert(sizeof(double) == sizeof(std::uint64_t));
        std::memcpy(&x, &a.data[i], sizeof(x));
        std::memcpy(&y, &b.data[i], sizeof(y));
        if (x != y) return false;
    }
    return true;
}

}  // namespace plora

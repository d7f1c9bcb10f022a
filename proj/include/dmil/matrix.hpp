// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dmil {

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Dense row-major matrix of doubles. Row and column vectors are 1 x n and
/// n x 1 matrices; there is no separate vector type.
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw ShapeError("Matrix: data length " + std::to_string(data_.size()) +
                             " does not match " + std::to_string(rows_) + "x" +
                             std::to_string(cols_));
        }
    }

    Matrix(std::initializer_list<std::initializer_list<double>> rows) {
        rows_ = rows.size();
        cols_ = rows_ == 0 ? 0 : rows.begin()->size();
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) throw ShapeError("Matrix: ragged initializer");
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static Matrix row_vector(std::span<const double> v) {
        return Matrix(1, v.size(), std::vector<double>(v.begin(), v.end()));
    }

    static Matrix column_vector(std::span<const double> v) {
        return Matrix(v.size(), 1, std::vector<double>(v.begin(), v.end()));
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const double& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    const double& operator[](std::size_t i) const { return data_[i]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
    }

    std::string shape_string() const {
        return std::to_string(rows_) + "x" + std::to_string(cols_);
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline void require_finite(const Matrix& m, const char* where) {
    if (!m.all_finite()) throw NumericError(std::string(where) + ": non-finite value");
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* where) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(where) + ": shape mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
    }
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + a.shape_string() + " x " + b.shape_string());
    }
    Matrix out(a.rows(), b.cols());
    const std::size_t inner = a.cols();
    const std::size_t cols = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* orow = &out(i, 0);
        for (std::size_t k = 0; k < inner; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const double* brow = &b(k, 0);
            for (std::size_t j = 0; j < cols; ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

// a^T b without materialising the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_tn: " + a.shape_string() + " x " + b.shape_string());
    }
    Matrix out(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double* arow = &a(k, 0);
        const double* brow = &b(k, 0);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = arow[i];
            if (aki == 0.0) continue;
            double* orow = &out(i, 0);
            for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aki * brow[j];
        }
    }
    return out;
}

// a b^T without materialising the transpose.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: " + a.shape_string() + " x " + b.shape_string());
    }
    Matrix out(a.rows(), b.rows());
    const std::size_t inner = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* arow = &a(i, 0);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const double* brow = &b(j, 0);
            double acc = 0.0;
            for (std::size_t k = 0; k < inner; ++k) acc += arow[k] * brow[k];
            out(i, j) = acc;
        }
    }
    return out;
}

inline Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    return out;
}

enum class Pointwise { add, sub, mul, tanh, sigmoid, scale };

inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

namespace detail {
template <class F>
Matrix zip(const Matrix& a, const Matrix& b, const char* where, F f) {
    require_same_shape(a, b, where);
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
}

template <class F>
Matrix map(const Matrix& a, F f) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
    return out;
}
}  // namespace detail

inline Matrix add(const Matrix& a, const Matrix& b) {
    return detail::zip(a, b, "add", [](double x, double y) { return x + y; });
}
inline Matrix sub(const Matrix& a, const Matrix& b) {
    return detail::zip(a, b, "sub", [](double x, double y) { return x - y; });
}
inline Matrix hadamard(const Matrix& a, const Matrix& b) {
    return detail::zip(a, b, "mul", [](double x, double y) { return x * y; });
}
inline Matrix scale(const Matrix& a, double s) {
    return detail::map(a, [s](double x) { return s * x; });
}
inline Matrix tanh(const Matrix& a) {
    return detail::map(a, [](double x) { return std::tanh(x); });
}
inline Matrix sigmoid(const Matrix& a) {
    return detail::map(a, [](double x) { return sigmoid(x); });
}

/// Binary pointwise dispatch. Unary kinds ignore `b`; `scale` multiplies by `s`.
inline Matrix elementwise(Pointwise op, const Matrix& a, const Matrix& b = {}, double s = 1.0) {
    switch (op) {
        case Pointwise::add: return add(a, b);
        case Pointwise::sub: return sub(a, b);
        case Pointwise::mul: return hadamard(a, b);
        case Pointwise::tanh: return tanh(a);
        case Pointwise::sigmoid: return sigmoid(a);
        case Pointwise::scale: return scale(a, s);
    }
    throw std::logic_error("elementwise: unknown op");
}

/// Numerically stable softmax over a flat vector (any 1 x n or n x 1 matrix).
inline std::vector<double> softmax(std::span<const double> logits) {
    if (logits.empty()) throw ShapeError("softmax: empty vector");
    for (double z : logits)
        if (!std::isfinite(z)) throw NumericError("softmax: non-finite logit");
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> out(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        total += out[i];
    }
    for (double& p : out) p /= total;
    return out;
}

inline Matrix softmax(const Matrix& logits) {
    auto p = softmax(logits.values());
    return Matrix(logits.rows(), logits.cols(), std::move(p));
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double t = a[i] - b[i];
        acc += t * t;
    }
    return acc;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// Horizontal concatenation of two row vectors.
inline Matrix concat(const Matrix& a, const Matrix& b) {
    if (a.rows() != 1 || b.rows() != 1) throw ShapeError("concat: expects row vectors");
    std::vector<double> v(a.data());
    v.insert(v.end(), b.data().begin(), b.data().end());
    const std::size_t n = v.size();
    return Matrix(1, n, std::move(v));
}

}  // namespace dmil

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "loratrace/errors.hpp"

namespace loratrace {

// Dense row-major matrix of 64-bit floats. All detection-path arithmetic
// stays in f64; narrower storage exists only in the on-disk format.
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

    static Matrix from_data(std::size_t rows, std::size_t cols, std::vector<double> data) {
        if (data.size() != rows * cols)
            throw error(errc::dimension_mismatch, "data length does not match rows*cols");
        for (double v : data)
            if (!std::isfinite(v))
                throw error(errc::numeric_failure, "non-finite entry in matrix data");
        Matrix m;
        m.rows_ = rows;
        m.cols_ = cols;
        m.data_ = std::move(data);
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }

    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }
    const std::vector<double>& storage() const noexcept { return data_; }

    bool same_shape(const Matrix& o) const noexcept {
        return rows_ == o.rows_ && cols_ == o.cols_;
    }

    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline bool all_finite(const Matrix& m) {
    for (std::size_t i = 0; i < m.size(); ++i)
        if (!std::isfinite(m.data()[i])) return false;
    return true;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

inline double cosine(std::span<const double> a, std::span<const double> b) {
    const double na = norm2(a);
    const double nb = norm2(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot(a, b) / (na * nb);
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw error(errc::dimension_mismatch, "matmul inner dimensions differ");
    Matrix out(a.rows(), b.cols());
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    for (std::size_t i = 0; i < n; ++i) {
        double* oi = out.data() + i * m;
        const double* ai = a.data() + i * k;
        for (std::size_t l = 0; l < k; ++l) {
            const double av = ai[l];
            if (av == 0.0) continue;
            const double* bl = b.data() + l * m;
            for (std::size_t j = 0; j < m; ++j) oi[j] += av * bl[j];
        }
    }
    return out;
}

// out[j] = sum_i v[i] * m(i, j)
inline std::vector<double> vecmat(std::span<const double> v, const Matrix& m) {
    if (v.size() != m.rows())
        throw error(errc::dimension_mismatch, "vecmat inner dimensions differ");
    std::vector<double> out(m.cols(), 0.0);
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double av = v[i];
        if (av == 0.0) continue;
        const double* mi = m.data() + i * m.cols();
        for (std::size_t j = 0; j < m.cols(); ++j) out[j] += av * mi[j];
    }
    return out;
}

// out[i] = sum_j m(i, j) * v[j]
inline std::vector<double> matvec(const Matrix& m, std::span<const double> v) {
    if (v.size() != m.cols())
        throw error(errc::dimension_mismatch, "matvec inner dimensions differ");
    std::vector<double> out(m.rows(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i) out[i] = dot(m.row(i), v);
    return out;
}

inline Matrix transpose(const Matrix& m) {
    Matrix out(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
    return out;
}

inline Matrix operator+(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw error(errc::dimension_mismatch, "matrix add shape mismatch");
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    return out;
}

inline Matrix operator-(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw error(errc::dimension_mismatch, "matrix sub shape mismatch");
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    return out;
}

inline Matrix scaled(const Matrix& a, double c) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * c;
    return out;
}

inline double frobenius_norm(const Matrix& m) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) s += m.data()[i] * m.data()[i];
    return std::sqrt(s);
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw error(errc::dimension_mismatch, "max_abs_diff shape mismatch");
    double mx = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        mx = std::max(mx, std::abs(a.data()[i] - b.data()[i]));
    return mx;
}

// Cosine between two matrices viewed as flat vectors.
inline double flattened_cosine(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw error(errc::dimension_mismatch, "flattened_cosine shape mismatch");
    return cosine({a.data(), a.size()}, {b.data(), b.size()});
}

} // namespace loratrace

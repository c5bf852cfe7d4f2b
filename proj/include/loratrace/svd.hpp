#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "loratrace/errors.hpp"
#include "loratrace/matrix.hpp"

namespace loratrace {

// Singular values in descending order.
struct SingularSpectrum {
    std::vector<double> values;

    std::size_t size() const noexcept { return values.size(); }
    double operator[](std::size_t i) const noexcept { return values[i]; }
};

// One-sided Jacobi: rotate column pairs of a tall working copy until all
// pairs are mutually orthogonal; the singular values are the column norms.
// Jacobi keeps high relative accuracy on the small values, which is what
// the spectral-gap detector feeds on. Values only, no vectors.
inline SingularSpectrum singular_values(const Matrix& m) {
    if (m.rows() == 0 || m.cols() == 0)
        throw error(errc::empty_input, "singular_values of a dimension-zero matrix");
    if (!all_finite(m)) throw error(errc::numeric_failure, "singular_values of non-finite matrix");

    // Work on the transpose when wide so the rotated side is the short one.
    const bool wide = m.cols() > m.rows();
    const std::size_t rows = wide ? m.cols() : m.rows();
    const std::size_t n = wide ? m.rows() : m.cols();

    // Column-major working storage: col j occupies a[j*rows .. j*rows+rows).
    std::vector<double> a(rows * n);
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) {
            if (wide)
                a[i * rows + j] = m(i, j);
            else
                a[j * rows + i] = m(i, j);
        }

    const double tol = 1e-14;
    const int max_sweeps = 128;
    bool rotated = true;
    for (int sweep = 0; sweep < max_sweeps && rotated; ++sweep) {
        rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double* cp = a.data() + p * rows;
                double* cq = a.data() + q * rows;
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (std::size_t k = 0; k < rows; ++k) {
                    app += cp[k] * cp[k];
                    aqq += cq[k] * cq[k];
                    apq += cp[k] * cq[k];
                }
                if (apq * apq <= tol * tol * app * aqq) continue;
                rotated = true;
                const double tau = (aqq - app) / (2.0 * apq);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t k = 0; k < rows; ++k) {
                    const double vp = cp[k];
                    const double vq = cq[k];
                    cp[k] = c * vp - s * vq;
                    cq[k] = s * vp + c * vq;
                }
            }
        }
    }
    if (rotated)
        throw error(errc::numeric_failure, "one-sided Jacobi did not converge");

    SingularSpectrum spec;
    spec.values.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
        const double* cj = a.data() + j * rows;
        double sum = 0.0;
        for (std::size_t k = 0; k < rows; ++k) sum += cj[k] * cj[k];
        spec.values[j] = std::sqrt(sum);
    }
    std::sort(spec.values.begin(), spec.values.end(), std::greater<double>());
    return spec;
}

// Count of singular values above rel_threshold * sigma_1.
inline std::size_t numerical_rank(const SingularSpectrum& spec, double rel_threshold) {
    if (spec.size() == 0 || spec[0] == 0.0) return 0;
    const double cut = rel_threshold * spec[0];
    std::size_t r = 0;
    while (r < spec.size() && spec[r] > cut) ++r;
    return r;
}

} // namespace loratrace

#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "loratrace/errors.hpp"

namespace loratrace {

// Central-difference gradient of a scalar field, (f(y+h*e_i) - f(y-h*e_i)) / 2h.
// Oracle for analytic gradients; never on the detection hot path.
template <typename F>
std::vector<double> finite_diff_gradient(F&& f, std::span<const double> y, double h) {
    if (!(h > 0.0)) throw error(errc::bad_parameter, "finite_diff_gradient step must be positive");
    std::vector<double> point(y.begin(), y.end());
    std::vector<double> grad(y.size(), 0.0);
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double saved = point[i];
        point[i] = saved + h;
        const double fp = f(std::span<const double>(point));
        point[i] = saved - h;
        const double fm = f(std::span<const double>(point));
        point[i] = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw error(errc::numeric_failure, "non-finite field evaluation in finite differences");
        grad[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

} // namespace loratrace

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "loratrace/errors.hpp"
#include "loratrace/matrix.hpp"
#include "loratrace/model.hpp"

namespace loratrace {

enum class InitMode { at_output, zero, custom };

struct ReconstructionConfig {
    double step = 0.1;              // alpha
    std::size_t max_iters = 5000;
    double loss_tol = 0.0;          // 0 resolves to 1e-12 * d
    InitMode init_mode = InitMode::at_output;
    double backtrack_factor = 0.5;
    bool record_history = false;    // per-iteration accepted losses

    double resolved_loss_tol(std::size_t d) const {
        if (loss_tol != 0.0) return loss_tol;
        return 1e-12 * static_cast<double>(d);
    }

    void validate() const {
        if (!(step > 0.0)) throw error(errc::bad_parameter, "step must be positive");
        if (max_iters < 1) throw error(errc::bad_parameter, "max_iters must be >= 1");
        if (loss_tol < 0.0) throw error(errc::bad_parameter, "loss_tol must be positive");
        if (!(backtrack_factor > 0.0) || !(backtrack_factor < 1.0))
            throw error(errc::bad_parameter, "backtrack_factor must be in (0,1)");
    }
};

struct ReconstructionResult {
    std::vector<double> y_star;
    double final_loss = 0.0;
    std::size_t iterations = 0;
    bool converged = false;
    std::vector<double> loss_history;  // accepted losses, only when recorded
};

// loss = |MLP(y) - z|^2 with the exact analytic gradient. The backward pass
// walks the chain: W_down, the gate/up elementwise product, the activation
// derivative, the normalization Jacobian, and the residual identity.
inline std::pair<double, std::vector<double>> mlp_loss_and_grad(const LayerWeights& w,
                                                                const ModelConfig& cfg,
                                                                std::span<const double> y,
                                                                std::span<const double> z) {
    const std::size_t d = y.size();
    if (z.size() != d) throw error(errc::dimension_mismatch, "y and z lengths differ");

    const MlpRowEval e = mlp_row_eval(y, w, cfg);

    std::vector<double> residual(d);
    double loss = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        residual[i] = e.out[i] - z[i];
        loss += residual[i] * residual[i];
    }

    // out_bar = 2 r; residual term contributes it to grad directly.
    std::vector<double> grad(d);
    for (std::size_t i = 0; i < d; ++i) grad[i] = 2.0 * residual[i];

    // mid_bar = W_down out_bar
    const std::vector<double> mid_bar = matvec(w.w_down, grad);

    // gate_bar_k = mid_bar_k * up_k * act'(gate_k); up_bar_k = mid_bar_k * act(gate_k)
    const std::size_t p = e.gate.size();
    std::vector<double> gate_bar(p), up_bar(p);
    for (std::size_t k = 0; k < p; ++k) {
        gate_bar[k] = mid_bar[k] * e.up[k] * activate_derivative(e.gate[k], cfg.activation);
        up_bar[k] = mid_bar[k] * activate(e.gate[k], cfg.activation);
    }

    // hy_bar = W_gate gate_bar + W_up up_bar
    std::vector<double> hy_bar = matvec(w.w_gate, gate_bar);
    {
        const std::vector<double> t = matvec(w.w_up, up_bar);
        for (std::size_t i = 0; i < d; ++i) hy_bar[i] += t[i];
    }

    // Normalization Jacobian transpose: with hy_i = gamma_i y_i / s(y),
    //   (J^T v)_j = gamma_j v_j / s - y_j * <gamma .* y, v> * ds/d|y|^2-term.
    // paper_literal: s = sqrt(|y|^2 + eps), second term / s^3;
    // mean_normalized: s = sqrt(|y|^2/d + eps), second term / (d s^3).
    const double s = norm_denominator(y, cfg.norm_eps, cfg.norm_mode);
    double weighted = 0.0;  // <gamma .* y, hy_bar>
    for (std::size_t i = 0; i < d; ++i) weighted += w.mlp_norm[i] * y[i] * hy_bar[i];
    const double denom_cubed = s * s * s;
    const double second_scale = cfg.norm_mode == NormMode::paper_literal
                                    ? weighted / denom_cubed
                                    : weighted / (static_cast<double>(d) * denom_cubed);
    for (std::size_t i = 0; i < d; ++i)
        grad[i] += w.mlp_norm[i] * hy_bar[i] / s - y[i] * second_scale;

    return {loss, std::move(grad)};
}

// Fixed-step descent on |MLP(y) - z|^2 with backtracking: the step halves
// whenever a trial fails to decrease the loss and recovers gradually after
// accepted steps, capped at the configured alpha. Accepted losses are
// strictly decreasing; stops at loss <= tol or the iteration budget.
inline ReconstructionResult invert_mlp(const LayerWeights& w, const ModelConfig& cfg,
                                       std::span<const double> z,
                                       const ReconstructionConfig& rcfg,
                                       std::span<const double> custom_init = {}) {
    rcfg.validate();
    const std::size_t d = z.size();
    const double tol = rcfg.resolved_loss_tol(d);

    std::vector<double> y;
    switch (rcfg.init_mode) {
        case InitMode::at_output: y.assign(z.begin(), z.end()); break;
        case InitMode::zero: y.assign(d, 0.0); break;
        case InitMode::custom:
            if (custom_init.size() != d)
                throw error(errc::bad_parameter, "custom init has wrong length");
            y.assign(custom_init.begin(), custom_init.end());
            break;
    }

    auto [loss, grad] = mlp_loss_and_grad(w, cfg, y, z);
    if (!std::isfinite(loss)) throw error(errc::numeric_failure, "non-finite loss at init");

    ReconstructionResult res;
    if (rcfg.record_history) res.loss_history.push_back(loss);

    double step = rcfg.step;
    std::size_t iters = 0;
    std::vector<double> y_try(d);
    while (loss > tol && iters < rcfg.max_iters) {
        ++iters;
        for (std::size_t i = 0; i < d; ++i) y_try[i] = y[i] - step * grad[i];
        auto [loss_try, grad_try] = mlp_loss_and_grad(w, cfg, y_try, z);
        if (std::isfinite(loss_try) && loss_try < loss) {
            y.swap(y_try);
            loss = loss_try;
            grad.swap(grad_try);
            step = std::min(rcfg.step, step / rcfg.backtrack_factor);
            if (rcfg.record_history) res.loss_history.push_back(loss);
        } else {
            step *= rcfg.backtrack_factor;
            if (step < 1e-300) break;  // gradient direction exhausted
        }
    }

    res.y_star = std::move(y);
    res.final_loss = loss;
    res.iterations = iters;
    res.converged = loss <= tol;
    return res;
}

} // namespace loratrace

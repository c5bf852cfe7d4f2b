#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "loratrace/errors.hpp"
#include "loratrace/matrix.hpp"
#include "loratrace/rng.hpp"

namespace loratrace {

enum class Activation { silu, gelu };

// The normalization divides by sqrt(|x|^2 + eps); mean_normalized divides by
// sqrt(|x|^2/d + eps) instead. Base and candidate must share one convention.
enum class NormMode { paper_literal, mean_normalized };

struct ModelConfig {
    std::size_t hidden_size = 0;  // d, even (RoPE pairs coordinates)
    std::size_t mlp_size = 0;     // p
    std::size_t num_layers = 0;   // L
    std::size_t vocab_size = 0;   // V
    double norm_eps = 1e-6;
    double rope_base = 10000.0;
    Activation activation = Activation::silu;
    NormMode norm_mode = NormMode::paper_literal;

    void validate() const {
        if (hidden_size == 0 || mlp_size == 0 || num_layers == 0 || vocab_size == 0)
            throw error(errc::bad_config, "model dimensions must be >= 1");
        if (hidden_size % 2 != 0)
            throw error(errc::bad_config, "hidden_size must be even for rotary pairs");
        if (!(norm_eps > 0.0)) throw error(errc::bad_config, "norm_eps must be positive");
        if (!(rope_base > 0.0)) throw error(errc::bad_config, "rope_base must be positive");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
    Matrix w_q;            // d x d
    Matrix w_k;            // d x d
    Matrix w_v;            // d x d
    Matrix w_o;            // d x d
    std::vector<double> attn_norm;  // gamma, d
    std::vector<double> mlp_norm;   // gamma', d
    Matrix w_gate;         // d x p
    Matrix w_up;           // d x p
    Matrix w_down;         // p x d

    friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct Model {
    ModelConfig config;
    Matrix embedding;  // V x d
    std::vector<LayerWeights> layers;

    void validate() const {
        config.validate();
        if (layers.size() != config.num_layers)
            throw error(errc::bad_config, "layer count does not match config");
        if (embedding.rows() != config.vocab_size || embedding.cols() != config.hidden_size)
            throw error(errc::bad_config, "embedding shape does not match config");
    }

    friend bool operator==(const Model&, const Model&) = default;
};

// Per-layer capture of a forward pass: input x, post-attention intermediate y,
// layer output z. The next layer's x is this layer's z.
struct LayerTrace {
    std::size_t layer_index = 0;
    Matrix x_in;
    Matrix y_mid;
    Matrix z_out;
};

inline double activate(double x, Activation act) {
    switch (act) {
        case Activation::silu:
            return x / (1.0 + std::exp(-x));
        case Activation::gelu:
            return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
    }
    return 0.0;
}

inline double activate_derivative(double x, Activation act) {
    switch (act) {
        case Activation::silu: {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 + x * (1.0 - s));
        }
        case Activation::gelu: {
            const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
            const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014326779;
            return cdf + x * pdf;
        }
    }
    return 0.0;
}

inline double norm_denominator(std::span<const double> x, double eps, NormMode mode) {
    const double sq = dot(x, x);
    if (mode == NormMode::paper_literal) return std::sqrt(sq + eps);
    return std::sqrt(sq / static_cast<double>(x.size()) + eps);
}

inline void rms_norm_into(std::span<const double> x, std::span<const double> gamma, double eps,
                          NormMode mode, std::span<double> out) {
    const double denom = norm_denominator(x, eps, mode);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * gamma[i] / denom;
}

inline std::vector<double> rms_norm(std::span<const double> x, std::span<const double> gamma,
                                    double eps, NormMode mode) {
    if (x.size() != gamma.size())
        throw error(errc::dimension_mismatch, "rms_norm gamma length mismatch");
    if (!(eps > 0.0)) throw error(errc::bad_parameter, "rms_norm eps must be positive");
    std::vector<double> out(x.size());
    rms_norm_into(x, gamma, eps, mode, out);
    return out;
}

// Coordinate pairs (2i, 2i+1) rotated by pos * base^(-2i/d). Identity at pos 0.
inline std::vector<double> rope_rotate(std::span<const double> v, std::size_t pos,
                                       double rope_base) {
    const std::size_t d = v.size();
    if (d % 2 != 0) throw error(errc::bad_config, "rope_rotate requires even dimension");
    std::vector<double> out(d);
    for (std::size_t i = 0; i < d / 2; ++i) {
        const double freq =
            std::pow(rope_base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
        const double angle = static_cast<double>(pos) * freq;
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        out[2 * i] = c * v[2 * i] - s * v[2 * i + 1];
        out[2 * i + 1] = s * v[2 * i] + c * v[2 * i + 1];
    }
    return out;
}

// Row-wise softmax; with causal=true, entries right of the diagonal are
// excluded (weight 0). Max-subtracted, so a 1x1 block gives exactly 1.
inline Matrix softmax_rows(const Matrix& scores, bool causal) {
    Matrix out(scores.rows(), scores.cols());
    for (std::size_t i = 0; i < scores.rows(); ++i) {
        const std::size_t limit = causal ? std::min(i + 1, scores.cols()) : scores.cols();
        double mx = scores(i, 0);
        for (std::size_t j = 1; j < limit; ++j) mx = std::max(mx, scores(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < limit; ++j) {
            const double e = std::exp(scores(i, j) - mx);
            out(i, j) = e;
            sum += e;
        }
        for (std::size_t j = 0; j < limit; ++j) out(i, j) /= sum;
        for (std::size_t j = limit; j < scores.cols(); ++j) out(i, j) = 0.0;
    }
    return out;
}

// Residual self-attention block:
//   softmax(Q K^T / sqrt(d)) h(X) W_v W_o + X,  Q = rope(h(X)) W_q, K = rope(h(X)) W_k.
// Causally masked for n > 1; a single token sees attention weight exactly 1.
inline Matrix attention(const Matrix& x, const LayerWeights& w, const ModelConfig& cfg) {
    const std::size_t n = x.rows();
    const std::size_t d = cfg.hidden_size;
    if (n == 0) throw error(errc::empty_input, "attention over zero tokens");
    if (x.cols() != d) throw error(errc::dimension_mismatch, "attention input width != d");

    Matrix h(n, d);
    for (std::size_t i = 0; i < n; ++i)
        rms_norm_into(x.row(i), w.attn_norm, cfg.norm_eps, cfg.norm_mode, h.row(i));

    Matrix h_rot(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = rope_rotate(h.row(i), i, cfg.rope_base);
        std::copy(r.begin(), r.end(), h_rot.row(i).begin());
    }

    const Matrix q = matmul(h_rot, w.w_q);
    const Matrix k = matmul(h_rot, w.w_k);

    Matrix scores(n, n);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) scores(i, j) = dot(q.row(i), k.row(j)) * inv_sqrt_d;

    const Matrix attn = softmax_rows(scores, /*causal=*/true);
    const Matrix mixed = matmul(attn, h);
    const Matrix projected = matmul(matmul(mixed, w.w_v), w.w_o);
    return projected + x;
}

// Intermediates of the per-row MLP evaluation, shared between the forward
// pass and the analytic gradient so both see one arithmetic path.
struct MlpRowEval {
    std::vector<double> hy;    // normalized input, d
    std::vector<double> gate;  // hy W_gate, p
    std::vector<double> up;    // hy W_up, p
    std::vector<double> mid;   // act(gate) .* up, p
    std::vector<double> out;   // mid W_down + y, d
};

inline MlpRowEval mlp_row_eval(std::span<const double> y, const LayerWeights& w,
                               const ModelConfig& cfg) {
    MlpRowEval e;
    e.hy.resize(y.size());
    rms_norm_into(y, w.mlp_norm, cfg.norm_eps, cfg.norm_mode, e.hy);
    e.gate = vecmat(e.hy, w.w_gate);
    e.up = vecmat(e.hy, w.w_up);
    e.mid.resize(e.gate.size());
    for (std::size_t k = 0; k < e.mid.size(); ++k)
        e.mid[k] = activate(e.gate[k], cfg.activation) * e.up[k];
    e.out = vecmat(e.mid, w.w_down);
    for (std::size_t i = 0; i < y.size(); ++i) e.out[i] += y[i];
    return e;
}

// Residual gated MLP: (act(h(Y) W_gate) .* (h(Y) W_up)) W_down + Y.
inline Matrix mlp_forward(const Matrix& y, const LayerWeights& w, const ModelConfig& cfg) {
    if (y.cols() != cfg.hidden_size)
        throw error(errc::dimension_mismatch, "mlp_forward input width != d");
    Matrix out(y.rows(), y.cols());
    for (std::size_t i = 0; i < y.rows(); ++i) {
        const auto e = mlp_row_eval(y.row(i), w, cfg);
        std::copy(e.out.begin(), e.out.end(), out.row(i).begin());
    }
    return out;
}

struct LayerOutputs {
    Matrix y_mid;
    Matrix z_out;
};

inline LayerOutputs layer_forward(const Matrix& x, const LayerWeights& w,
                                  const ModelConfig& cfg) {
    LayerOutputs o;
    o.y_mid = attention(x, w, cfg);
    o.z_out = mlp_forward(o.y_mid, w, cfg);
    return o;
}

inline Matrix embed_tokens(const Model& model, std::span<const std::size_t> token_ids) {
    if (token_ids.empty()) throw error(errc::empty_input, "empty token sequence");
    Matrix x(token_ids.size(), model.config.hidden_size);
    for (std::size_t i = 0; i < token_ids.size(); ++i) {
        if (token_ids[i] >= model.config.vocab_size)
            throw error(errc::out_of_vocab, "token id " + std::to_string(token_ids[i]) +
                                                " >= vocab size");
        const auto row = model.embedding.row(token_ids[i]);
        std::copy(row.begin(), row.end(), x.row(i).begin());
    }
    return x;
}

inline std::vector<LayerTrace> forward_capture(const Model& model,
                                               std::span<const std::size_t> token_ids) {
    Matrix x = embed_tokens(model, token_ids);
    std::vector<LayerTrace> traces;
    traces.reserve(model.layers.size());
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        LayerTrace t;
        t.layer_index = l;
        t.x_in = x;
        auto o = layer_forward(x, model.layers[l], model.config);
        t.y_mid = std::move(o.y_mid);
        t.z_out = o.z_out;
        x = std::move(o.z_out);
        traces.push_back(std::move(t));
    }
    return traces;
}

inline Matrix forward(const Model& model, std::span<const std::size_t> token_ids) {
    Matrix x = embed_tokens(model, token_ids);
    for (const auto& layer : model.layers)
        x = layer_forward(x, layer, model.config).z_out;
    return x;
}

namespace streams {
// Sub-stream ids for model generation; one stream per tensor.
constexpr std::uint64_t embedding = 0;
inline std::uint64_t layer_tensor(std::size_t layer, std::uint64_t tensor) {
    return (static_cast<std::uint64_t>(layer) << 8) + tensor + 1;
}
} // namespace streams

// Synthetic model: every matrix i.i.d. Gaussian at scale 1/sqrt(d), norm
// weights all-ones. Each tensor draws from its own (seed, stream) pair.
inline Model generate_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const std::size_t d = cfg.hidden_size;
    const std::size_t p = cfg.mlp_size;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    Model m;
    m.config = cfg;
    {
        SeededRng rng(seed, streams::embedding);
        m.embedding = random_matrix(rng, cfg.vocab_size, d, scale);
    }
    m.layers.resize(cfg.num_layers);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        auto& w = m.layers[l];
        auto draw = [&](std::uint64_t tensor, std::size_t r, std::size_t c) {
            SeededRng rng(seed, streams::layer_tensor(l, tensor));
            return random_matrix(rng, r, c, scale);
        };
        w.w_q = draw(0, d, d);
        w.w_k = draw(1, d, d);
        w.w_v = draw(2, d, d);
        w.w_o = draw(3, d, d);
        w.attn_norm.assign(d, 1.0);
        w.mlp_norm.assign(d, 1.0);
        w.w_gate = draw(4, d, p);
        w.w_up = draw(5, d, p);
        w.w_down = draw(6, p, d);
    }
    return m;
}

inline void require_compatible(const Model& a, const Model& b) {
    if (!(a.config == b.config))
        throw error(errc::incompatible_models, "model configs differ");
}

} // namespace loratrace

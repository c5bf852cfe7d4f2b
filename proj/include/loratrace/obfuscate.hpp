#pragma once

#include <cstdint>
#include <vector>

#include "loratrace/errors.hpp"
#include "loratrace/matrix.hpp"
#include "loratrace/model.hpp"
#include "loratrace/rng.hpp"

namespace loratrace {

// Function-preserving reparameterizations of a candidate: permutations of
// inner dimensions and paired diagonal scalings. None of them changes any
// layer's input/output map; all of them wreck naive weight comparison.
struct ObfuscationSpec {
    bool enable_mlp_perm = true;
    bool enable_attn_inner_perm = true;
    bool enable_qk_perm = true;
    bool enable_vo_scaling = true;
    bool enable_updown_scaling = true;
    double scaling_lo = 0.5;
    double scaling_hi = 2.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(scaling_lo > 0.0) || !(scaling_hi >= scaling_lo))
            throw error(errc::bad_parameter, "scaling range must satisfy 0 < lo <= hi");
    }

    bool any_enabled() const {
        return enable_mlp_perm || enable_attn_inner_perm || enable_qk_perm ||
               enable_vo_scaling || enable_updown_scaling;
    }
};

namespace detail {

inline void permute_columns(Matrix& m, const std::vector<std::size_t>& perm) {
    Matrix out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(i, perm[j]);
    m = std::move(out);
}

inline void permute_rows(Matrix& m, const std::vector<std::size_t>& perm) {
    Matrix out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const auto src = m.row(perm[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    m = std::move(out);
}

// With column permutation C' = C Pi and row permutation R' picking row perm[i]
// of R, the product C' R' = C Pi Pi^T R = C R, so pairing the two is exact.
inline void require_perm(const std::vector<std::size_t>& perm, std::size_t n,
                         const char* where) {
    if (!is_permutation_of_n(perm, n))
        throw error(errc::bad_permutation, std::string(where) + ": not a bijection on 0..n-1");
}

} // namespace detail

// All three MLP matrices share the permutation: gate and up columns must move
// together or the elementwise product scrambles.
inline LayerWeights permute_mlp(const LayerWeights& layer, const std::vector<std::size_t>& perm) {
    detail::require_perm(perm, layer.w_gate.cols(), "permute_mlp");
    LayerWeights out = layer;
    detail::permute_columns(out.w_gate, perm);
    detail::permute_columns(out.w_up, perm);
    detail::permute_rows(out.w_down, perm);
    return out;
}

inline LayerWeights permute_attn_inner(const LayerWeights& layer,
                                       const std::vector<std::size_t>& perm) {
    detail::require_perm(perm, layer.w_v.cols(), "permute_attn_inner");
    LayerWeights out = layer;
    detail::permute_columns(out.w_v, perm);
    detail::permute_rows(out.w_o, perm);
    return out;
}

// Q K^T is invariant when the same column permutation hits both projections.
inline LayerWeights permute_qk(const LayerWeights& layer, const std::vector<std::size_t>& perm) {
    detail::require_perm(perm, layer.w_q.cols(), "permute_qk");
    LayerWeights out = layer;
    detail::permute_columns(out.w_q, perm);
    detail::permute_columns(out.w_k, perm);
    return out;
}

inline LayerWeights scale_pair_vo(const LayerWeights& layer, const std::vector<double>& c) {
    if (c.size() != layer.w_v.cols())
        throw error(errc::dimension_mismatch, "scale_pair_vo length mismatch");
    for (double v : c)
        if (!(v > 0.0)) throw error(errc::bad_parameter, "scale_pair_vo needs positive scales");
    LayerWeights out = layer;
    for (std::size_t i = 0; i < out.w_v.rows(); ++i)
        for (std::size_t j = 0; j < out.w_v.cols(); ++j) out.w_v(i, j) *= c[j];
    for (std::size_t i = 0; i < out.w_o.rows(); ++i)
        for (std::size_t j = 0; j < out.w_o.cols(); ++j) out.w_o(i, j) /= c[i];
    return out;
}

// Up columns scaled, down rows inverse-scaled. The gate stays untouched: the
// elementwise product commutes with diagonal scaling on the up path only.
inline LayerWeights scale_pair_updown(const LayerWeights& layer, const std::vector<double>& c) {
    if (c.size() != layer.w_up.cols())
        throw error(errc::dimension_mismatch, "scale_pair_updown length mismatch");
    for (double v : c)
        if (!(v > 0.0))
            throw error(errc::bad_parameter, "scale_pair_updown needs positive scales");
    LayerWeights out = layer;
    for (std::size_t i = 0; i < out.w_up.rows(); ++i)
        for (std::size_t j = 0; j < out.w_up.cols(); ++j) out.w_up(i, j) *= c[j];
    for (std::size_t i = 0; i < out.w_down.rows(); ++i)
        for (std::size_t j = 0; j < out.w_down.cols(); ++j) out.w_down(i, j) /= c[i];
    return out;
}

namespace detail {

enum class ObfStream : std::uint64_t {
    mlp_perm = 1,
    attn_inner_perm = 2,
    qk_perm = 3,
    vo_scaling = 4,
    updown_scaling = 5,
};

inline SeededRng layer_stream(const ObfuscationSpec& spec, std::size_t layer, ObfStream kind) {
    return SeededRng(spec.seed, SeededRng::mix(layer, static_cast<std::uint64_t>(kind)));
}

inline std::vector<double> draw_scales(SeededRng& rng, std::size_t n, double lo, double hi) {
    std::vector<double> c(n);
    for (auto& v : c) v = rng.next_log_uniform(lo, hi);
    return c;
}

} // namespace detail

inline Model obfuscate_model(const Model& model, const ObfuscationSpec& spec) {
    spec.validate();
    Model out = model;
    const std::size_t d = model.config.hidden_size;
    const std::size_t p = model.config.mlp_size;
    for (std::size_t l = 0; l < out.layers.size(); ++l) {
        LayerWeights w = out.layers[l];
        if (spec.enable_mlp_perm) {
            auto rng = detail::layer_stream(spec, l, detail::ObfStream::mlp_perm);
            w = permute_mlp(w, random_permutation(rng, p));
        }
        if (spec.enable_attn_inner_perm) {
            auto rng = detail::layer_stream(spec, l, detail::ObfStream::attn_inner_perm);
            w = permute_attn_inner(w, random_permutation(rng, d));
        }
        if (spec.enable_qk_perm) {
            auto rng = detail::layer_stream(spec, l, detail::ObfStream::qk_perm);
            w = permute_qk(w, random_permutation(rng, d));
        }
        if (spec.enable_vo_scaling) {
            auto rng = detail::layer_stream(spec, l, detail::ObfStream::vo_scaling);
            w = scale_pair_vo(w, detail::draw_scales(rng, d, spec.scaling_lo, spec.scaling_hi));
        }
        if (spec.enable_updown_scaling) {
            auto rng = detail::layer_stream(spec, l, detail::ObfStream::updown_scaling);
            w = scale_pair_updown(w,
                                  detail::draw_scales(rng, p, spec.scaling_lo, spec.scaling_hi));
        }
        out.layers[l] = std::move(w);
    }
    return out;
}

// Stress-only transform for experiments: additive Gaussian noise on the
// attention projections. Not function-preserving, never part of
// ObfuscationSpec; the CLI exposes it behind an explicit flag.
inline Model add_weight_noise(const Model& model, double sigma, std::uint64_t seed) {
    if (!(sigma > 0.0)) throw error(errc::bad_parameter, "noise sigma must be positive");
    Model out = model;
    for (std::size_t l = 0; l < out.layers.size(); ++l) {
        SeededRng rng(seed, SeededRng::mix(l, 0xA0));
        for (Matrix* m : {&out.layers[l].w_q, &out.layers[l].w_k, &out.layers[l].w_v,
                          &out.layers[l].w_o}) {
            for (std::size_t i = 0; i < m->size(); ++i)
                m->data()[i] += sigma * rng.next_gaussian();
        }
    }
    return out;
}

// Max elementwise discrepancy of final outputs over single-token probes plus
// n_multi short sequences built by rotating the probe list.
inline double verify_equivalence(const Model& a, const Model& b,
                                 std::span<const std::size_t> probe_token_ids,
                                 std::size_t n_multi) {
    require_compatible(a, b);
    if (probe_token_ids.empty()) throw error(errc::empty_input, "no probe tokens");
    for (std::size_t id : probe_token_ids)
        if (id >= a.config.vocab_size) throw error(errc::out_of_vocab, "probe id out of vocab");

    double worst = 0.0;
    for (std::size_t id : probe_token_ids) {
        const std::size_t ids[1] = {id};
        worst = std::max(worst, max_abs_diff(forward(a, ids), forward(b, ids)));
    }
    const std::size_t seq_len = std::min<std::size_t>(8, probe_token_ids.size());
    for (std::size_t k = 0; k < n_multi; ++k) {
        std::vector<std::size_t> seq(seq_len);
        for (std::size_t i = 0; i < seq_len; ++i)
            seq[i] = probe_token_ids[(k + i) % probe_token_ids.size()];
        worst = std::max(worst, max_abs_diff(forward(a, seq), forward(b, seq)));
    }
    return worst;
}

} // namespace loratrace

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "loratrace/errors.hpp"
#include "loratrace/matrix.hpp"
#include "loratrace/model.hpp"
#include "loratrace/rng.hpp"
#include "loratrace/svd.hpp"

namespace loratrace {

enum class LoraTarget { V, O, Q, K };

inline std::string lora_target_name(LoraTarget t) {
    switch (t) {
        case LoraTarget::V: return "V";
        case LoraTarget::O: return "O";
        case LoraTarget::Q: return "Q";
        case LoraTarget::K: return "K";
    }
    return "?";
}

inline LoraTarget lora_target_from_name(const std::string& s) {
    if (s == "V") return LoraTarget::V;
    if (s == "O") return LoraTarget::O;
    if (s == "Q") return LoraTarget::Q;
    if (s == "K") return LoraTarget::K;
    throw error(errc::bad_config, "unknown lora target '" + s + "'");
}

struct LoraSpec {
    std::size_t rank = 0;              // s
    std::vector<LoraTarget> targets;   // subset of {V, O, Q, K}; empty = no delta
    double scale = 0.0;                // 0 resolves to 0.02 / sqrt(rank)
    std::uint64_t seed = 0;
    std::vector<std::size_t> layer_set;  // empty = all layers

    double resolved_scale() const {
        if (scale != 0.0) return scale;
        return 0.02 / std::sqrt(static_cast<double>(rank == 0 ? 1 : rank));
    }

    std::vector<std::size_t> resolved_layers(const ModelConfig& cfg) const {
        if (!layer_set.empty()) return layer_set;
        std::vector<std::size_t> all(cfg.num_layers);
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        return all;
    }

    void validate(const ModelConfig& cfg) const {
        if (targets.empty()) return;  // identity delta is always valid
        if (rank < 1 || rank > cfg.hidden_size / 2)
            throw error(errc::bad_parameter,
                        "lora rank must satisfy 1 <= s <= d/2, got s=" + std::to_string(rank));
        if (!(resolved_scale() > 0.0))
            throw error(errc::bad_parameter, "lora scale must be positive");
        for (std::size_t l : layer_set)
            if (l >= cfg.num_layers)
                throw error(errc::bad_parameter, "lora layer index out of range");
    }
};

// One rank-s factor pair per (layer, target); the injected difference is
// scale * A * B.
struct LoraDelta {
    struct Entry {
        std::size_t layer = 0;
        LoraTarget target = LoraTarget::V;
        Matrix a;  // d x s
        Matrix b;  // s x d
    };
    double scale = 1.0;
    std::vector<Entry> entries;

    Matrix dense(const Entry& e) const { return scaled(matmul(e.a, e.b), scale); }
};

inline LoraDelta make_delta(const LoraSpec& spec, const ModelConfig& cfg) {
    spec.validate(cfg);
    LoraDelta delta;
    delta.scale = spec.resolved_scale();
    const std::size_t d = cfg.hidden_size;
    for (std::size_t layer : spec.resolved_layers(cfg)) {
        for (LoraTarget target : spec.targets) {
            const std::uint64_t stream =
                SeededRng::mix(layer, static_cast<std::uint64_t>(target) + 0x10);
            SeededRng rng(spec.seed, stream);
            LoraDelta::Entry e;
            e.layer = layer;
            e.target = target;
            e.a = random_matrix(rng, d, spec.rank, 1.0);
            e.b = random_matrix(rng, spec.rank, d, 1.0);
            delta.entries.push_back(std::move(e));
        }
    }
    return delta;
}

inline Matrix& target_matrix(LayerWeights& w, LoraTarget t) {
    switch (t) {
        case LoraTarget::V: return w.w_v;
        case LoraTarget::O: return w.w_o;
        case LoraTarget::Q: return w.w_q;
        case LoraTarget::K: return w.w_k;
    }
    return w.w_v;
}

// Candidate construction: W_t += scale * A * B on targeted projections only;
// embedding, norms and MLP matrices stay bit-identical to the base.
inline Model apply(const Model& model, const LoraDelta& delta) {
    Model out = model;
    for (const auto& e : delta.entries) {
        if (e.layer >= out.layers.size())
            throw error(errc::dimension_mismatch, "delta layer index out of range");
        Matrix& w = target_matrix(out.layers[e.layer], e.target);
        const Matrix dw = delta.dense(e);
        if (!w.same_shape(dw))
            throw error(errc::dimension_mismatch, "delta shape does not match target matrix");
        w = w + dw;
    }
    return out;
}

// Ground-truth oracle: numerical rank of W_v W_o - W~_v W~_o.
inline std::size_t product_delta_rank(const LayerWeights& base_layer,
                                      const LayerWeights& cand_layer,
                                      double rel_threshold = 1e-6) {
    if (!base_layer.w_v.same_shape(cand_layer.w_v) || !base_layer.w_o.same_shape(cand_layer.w_o))
        throw error(errc::dimension_mismatch, "product_delta_rank shape mismatch");
    if (!(rel_threshold > 0.0) || !(rel_threshold < 1.0))
        throw error(errc::bad_parameter, "rel_threshold must be in (0,1)");
    const Matrix base_product = matmul(base_layer.w_v, base_layer.w_o);
    const Matrix diff = base_product - matmul(cand_layer.w_v, cand_layer.w_o);
    const SingularSpectrum spec = singular_values(diff);
    if (spec[0] < 1e-12 * frobenius_norm(base_product)) return 0;
    return numerical_rank(spec, rel_threshold);
}

} // namespace loratrace

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "loratrace/errors.hpp"
#include "loratrace/matrix.hpp"
#include "loratrace/model.hpp"
#include "loratrace/reconstruct.hpp"
#include "loratrace/rng.hpp"
#include "loratrace/svd.hpp"
#include "loratrace/threading.hpp"

namespace loratrace {

struct TraceConfig {
    std::size_t cycles = 16;       // t
    std::size_t subset_size = 0;   // n; 0 resolves to d/2
    double ratio_floor = 0.0;      // tau; 0 resolves to ln(1e3)
    double abs_floor = 1e-7;       // relative sigma_1 floor for the null verdict
    double top_fraction = 0.10;
    std::size_t probe_count = 0;   // 0 resolves to d
    ReconstructionConfig rcfg;
    bool assume_unobfuscated = false;
    std::uint64_t seed = 0;        // master stream for subset sampling
    unsigned threads = 0;          // 0 resolves to hardware concurrency

    TraceConfig resolved(const ModelConfig& model) const {
        TraceConfig c = *this;
        if (c.probe_count == 0) c.probe_count = model.hidden_size;
        if (c.subset_size == 0) c.subset_size = model.hidden_size / 2;
        if (c.ratio_floor == 0.0) c.ratio_floor = std::log(1e3);
        if (c.threads == 0) c.threads = default_thread_count();
        c.rcfg.validate();
        if (c.cycles < 1) throw error(errc::bad_parameter, "cycles must be >= 1");
        if (c.subset_size < 1 || c.subset_size > c.probe_count)
            throw error(errc::bad_parameter, "need 1 <= subset_size <= probe_count");
        if (!(c.top_fraction > 0.0) || c.top_fraction > 1.0)
            throw error(errc::bad_parameter, "top_fraction must be in (0,1]");
        if (!(c.abs_floor > 0.0))
            throw error(errc::bad_parameter, "abs_floor must be positive");
        return c;
    }
};

struct LayerEstimate {
    std::size_t layer_index = 0;
    std::optional<std::size_t> rank;   // none = null verdict at this layer
    double peak_log_ratio = 0.0;
    SingularSpectrum spectrum;         // from the cycle achieving the min
    std::vector<std::optional<std::size_t>> cycle_ranks;
    std::size_t reconstruction_failures = 0;
    bool usable = true;
};

enum class Verdict { lora_detected, no_delta_detected };

struct TraceTimings {
    double collect_ms = 0.0;
    double reconstruct_ms = 0.0;
    double spectra_ms = 0.0;
    double total_ms = 0.0;
};

struct TraceReport {
    std::vector<LayerEstimate> layers;
    std::vector<std::size_t> selected_layers;   // top fraction by peak ratio
    std::optional<std::size_t> aggregate_rank;  // min over selected layers
    std::size_t aggregate_spread = 0;           // max - min over selected layers
    Verdict verdict = Verdict::no_delta_detected;
    std::vector<double> baseline_similarity;    // per-layer flattened-weight cosine
    std::vector<std::size_t> probes;
    TraceConfig config;                         // resolved
    ModelConfig model_config;
    TraceTimings timings;                       // sidecar-only, never serialized
};

// Token ids whose embedding rows are pairwise non-parallel and stack to a
// full-numerical-rank probe matrix. Greedy over the vocabulary, so the set
// is a pure function of the model.
inline std::vector<std::size_t> probe_set(const Model& model, std::size_t count) {
    if (count == 0) throw error(errc::bad_parameter, "probe count must be >= 1");
    if (count > model.config.vocab_size)
        throw error(errc::probe_degenerate, "probe count exceeds vocabulary");

    const std::size_t d = model.config.hidden_size;
    std::vector<std::size_t> chosen;
    chosen.reserve(count);
    for (std::size_t id = 0; id < model.config.vocab_size && chosen.size() < count; ++id) {
        const auto row = model.embedding.row(id);
        if (norm2(row) == 0.0) continue;
        bool ok = true;
        for (std::size_t other : chosen) {
            if (std::abs(cosine(row, model.embedding.row(other))) >= 1.0 - 1e-8) {
                ok = false;
                break;
            }
        }
        if (ok) chosen.push_back(id);
    }
    if (chosen.size() < count)
        throw error(errc::probe_degenerate,
                    "vocabulary too degenerate: found " + std::to_string(chosen.size()) +
                        " of " + std::to_string(count) + " probes");

    if (count > 1) {
        Matrix stacked(count, d);
        for (std::size_t i = 0; i < count; ++i) {
            const auto row = model.embedding.row(chosen[i]);
            std::copy(row.begin(), row.end(), stacked.row(i).begin());
        }
        const auto spec = singular_values(stacked);
        if (numerical_rank(spec, 1e-10) < std::min(count, d))
            throw error(errc::probe_degenerate, "probe embedding matrix is rank deficient");
    }
    return chosen;
}

// Everything the rank stage needs from one layer, rows indexed by probe.
struct LayerProbeData {
    Matrix x_in;        // base model's layer input
    Matrix y_base;      // base y_mid
    Matrix y_cand_mid;  // candidate y_mid on the base's x (fast path input)
    Matrix z_cand;      // candidate layer output on the base's x
};

// Single-token probes through the base, then each base layer input replayed
// through the matching candidate layer. Layers are compared on identical
// inputs; the candidate never runs end to end.
inline std::vector<LayerProbeData> collect_intermediates(const Model& base, const Model& cand,
                                                         std::span<const std::size_t> probes,
                                                         unsigned threads = 1) {
    require_compatible(base, cand);
    const std::size_t L = base.config.num_layers;
    const std::size_t d = base.config.hidden_size;
    std::vector<LayerProbeData> out(L);
    for (auto& l : out) {
        l.x_in = Matrix(probes.size(), d);
        l.y_base = Matrix(probes.size(), d);
        l.y_cand_mid = Matrix(probes.size(), d);
        l.z_cand = Matrix(probes.size(), d);
    }
    parallel_for(probes.size(), threads, [&](std::size_t j) {
        const std::size_t ids[1] = {probes[j]};
        const auto traces = forward_capture(base, ids);
        for (std::size_t l = 0; l < L; ++l) {
            std::copy(traces[l].x_in.row(0).begin(), traces[l].x_in.row(0).end(),
                      out[l].x_in.row(j).begin());
            std::copy(traces[l].y_mid.row(0).begin(), traces[l].y_mid.row(0).end(),
                      out[l].y_base.row(j).begin());
            const auto cand_out = layer_forward(traces[l].x_in, cand.layers[l], cand.config);
            std::copy(cand_out.y_mid.row(0).begin(), cand_out.y_mid.row(0).end(),
                      out[l].y_cand_mid.row(j).begin());
            std::copy(cand_out.z_out.row(0).begin(), cand_out.z_out.row(0).end(),
                      out[l].z_cand.row(j).begin());
        }
    });
    return out;
}

struct ReconstructedLayer {
    Matrix y_star;
    std::vector<char> failed;  // per row; failed rows are excluded from sampling
    std::size_t failures = 0;
};

// Row-wise inversion of the base MLP at the candidate outputs.
inline ReconstructedLayer reconstruct_intermediates(const LayerWeights& base_layer,
                                                    const ModelConfig& cfg,
                                                    const Matrix& z_cand,
                                                    const ReconstructionConfig& rcfg,
                                                    unsigned threads = 1) {
    ReconstructedLayer out;
    out.y_star = Matrix(z_cand.rows(), z_cand.cols());
    out.failed.assign(z_cand.rows(), 0);
    parallel_for(z_cand.rows(), threads, [&](std::size_t j) {
        const auto res = invert_mlp(base_layer, cfg, z_cand.row(j), rcfg);
        std::copy(res.y_star.begin(), res.y_star.end(), out.y_star.row(j).begin());
        if (!res.converged) out.failed[j] = 1;
    });
    for (char f : out.failed) out.failures += f;
    return out;
}

// Rows y_base[i] - y_star[i] for the chosen probe indices; the shared
// residual x cancels, leaving a pure image of the V*O product difference.
inline Matrix difference_matrix(const Matrix& y_base, const Matrix& y_star,
                                std::span<const std::size_t> indices,
                                std::span<const char> failed_mask = {}) {
    if (!y_base.same_shape(y_star))
        throw error(errc::dimension_mismatch, "difference_matrix shape mismatch");
    Matrix out(indices.size(), y_base.cols());
    for (std::size_t r = 0; r < indices.size(); ++r) {
        const std::size_t i = indices[r];
        if (i >= y_base.rows()) throw error(errc::bad_parameter, "probe index out of range");
        if (!failed_mask.empty() && failed_mask[i])
            throw error(errc::masked_index, "probe row was masked out by reconstruction");
        for (std::size_t c = 0; c < y_base.cols(); ++c)
            out(r, c) = y_base(i, c) - y_star(i, c);
    }
    return out;
}

struct RankCall {
    std::optional<std::size_t> rank;
    double peak_log_ratio = 0.0;
};

// Spectral-gap read-out: the rank estimate is the argmax of log(s_i/s_{i+1})
// (smallest index on ties). A spectrum whose head sits below
// abs_floor * reference_scale is a null layer, as is a peak below tau.
inline RankCall rank_from_spectrum(const SingularSpectrum& spectrum, double tau,
                                   double abs_floor, double reference_scale) {
    RankCall call;
    if (spectrum.size() < 2) return call;
    if (spectrum[0] < abs_floor * reference_scale) return call;
    std::size_t best_index = 0;
    double best = -1.0;
    for (std::size_t i = 0; i + 1 < spectrum.size(); ++i) {
        const double next = std::max(spectrum[i + 1], 1e-300);
        const double ratio = std::log(spectrum[i] / next);
        if (ratio > best) {
            best = ratio;
            best_index = i + 1;  // gap after the (i+1)-th value
        }
    }
    call.peak_log_ratio = best;
    if (best >= tau) call.rank = best_index;
    return call;
}

// t sampling cycles over one layer; the estimate is the minimum rank across
// cycles (poorly reconstructed subsets only ever inflate the rank).
inline LayerEstimate run_layer(const Matrix& y_base, const Matrix& y_star,
                               std::span<const char> failed_mask, std::size_t layer_index,
                               const TraceConfig& cfg, double reference_scale) {
    LayerEstimate est;
    est.layer_index = layer_index;
    for (char f : failed_mask) est.reconstruction_failures += f;

    std::vector<std::size_t> usable;
    for (std::size_t i = 0; i < y_base.rows(); ++i)
        if (failed_mask.empty() || !failed_mask[i]) usable.push_back(i);
    if (usable.size() < cfg.subset_size) {
        est.usable = false;
        return est;
    }

    std::optional<std::size_t> min_rank;
    double best_peak = 0.0;
    std::size_t best_cycle = 0;
    std::vector<SingularSpectrum> spectra(cfg.cycles);
    for (std::size_t cycle = 0; cycle < cfg.cycles; ++cycle) {
        SeededRng rng(cfg.seed, SeededRng::mix(layer_index, cycle + 0x100));
        std::vector<std::size_t> pool = usable;
        for (std::size_t i = 0; i < cfg.subset_size; ++i) {
            const std::size_t j =
                i + static_cast<std::size_t>(rng.next_below(pool.size() - i));
            std::swap(pool[i], pool[j]);
        }
        pool.resize(cfg.subset_size);

        const Matrix diff = difference_matrix(y_base, y_star, pool, failed_mask);
        spectra[cycle] = singular_values(diff);
        const RankCall call =
            rank_from_spectrum(spectra[cycle], cfg.ratio_floor, cfg.abs_floor, reference_scale);
        est.cycle_ranks.push_back(call.rank);
        best_peak = std::max(best_peak, call.peak_log_ratio);
        if (call.rank && (!min_rank || *call.rank < *min_rank)) {
            min_rank = call.rank;
            best_cycle = cycle;
        }
    }
    est.rank = min_rank;
    if (min_rank) {
        est.spectrum = spectra[best_cycle];
        est.peak_log_ratio = rank_from_spectrum(est.spectrum, cfg.ratio_floor, cfg.abs_floor,
                                                reference_scale)
                                 .peak_log_ratio;
    } else {
        est.peak_log_ratio = best_peak;
        if (!spectra.empty()) est.spectrum = spectra.front();
    }
    return est;
}

inline std::vector<double> weight_similarity_baseline(const Model& base, const Model& cand) {
    require_compatible(base, cand);
    std::vector<double> out;
    out.reserve(base.layers.size());
    for (std::size_t l = 0; l < base.layers.size(); ++l) {
        auto flatten = [](const LayerWeights& w) {
            std::vector<double> v;
            v.reserve(w.w_q.size() + w.w_k.size() + w.w_v.size() + w.w_o.size());
            for (const Matrix* m : {&w.w_q, &w.w_k, &w.w_v, &w.w_o})
                v.insert(v.end(), m->data(), m->data() + m->size());
            return v;
        };
        const auto a = flatten(base.layers[l]);
        const auto b = flatten(cand.layers[l]);
        out.push_back(cosine(a, b));
    }
    return out;
}

inline std::vector<double> layer_output_norms(const Model& model,
                                              std::span<const std::size_t> probes) {
    if (probes.empty()) throw error(errc::empty_input, "no probes");
    std::vector<double> sums(model.config.num_layers, 0.0);
    for (std::size_t id : probes) {
        const std::size_t ids[1] = {id};
        const auto traces = forward_capture(model, ids);
        for (std::size_t l = 0; l < traces.size(); ++l) sums[l] += norm2(traces[l].z_out.row(0));
    }
    for (auto& s : sums) s /= static_cast<double>(probes.size());
    return sums;
}

inline double mean_row_norm(const Matrix& m) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.rows(); ++i) s += norm2(m.row(i));
    return m.rows() == 0 ? 0.0 : s / static_cast<double>(m.rows());
}

inline TraceReport trace(const Model& base, const Model& cand, const TraceConfig& cfg_in) {
    const auto t0 = std::chrono::steady_clock::now();
    require_compatible(base, cand);
    const TraceConfig cfg = cfg_in.resolved(base.config);
    const std::size_t L = base.config.num_layers;

    TraceReport report;
    report.config = cfg;
    report.model_config = base.config;
    report.probes = probe_set(base, cfg.probe_count);

    const auto t1 = std::chrono::steady_clock::now();
    const auto collected = collect_intermediates(base, cand, report.probes, cfg.threads);
    const auto t2 = std::chrono::steady_clock::now();

    report.layers.resize(L);
    double reconstruct_ms = 0.0;
    for (std::size_t l = 0; l < L; ++l) {
        const auto& data = collected[l];
        const double reference_scale = mean_row_norm(data.y_base);
        const auto r0 = std::chrono::steady_clock::now();
        if (cfg.assume_unobfuscated) {
            report.layers[l] = run_layer(data.y_base, data.y_cand_mid, {}, l, cfg,
                                         reference_scale);
        } else {
            const auto rec = reconstruct_intermediates(base.layers[l], base.config, data.z_cand,
                                                       cfg.rcfg, cfg.threads);
            const auto r1 = std::chrono::steady_clock::now();
            reconstruct_ms += std::chrono::duration<double, std::milli>(r1 - r0).count();
            report.layers[l] =
                run_layer(data.y_base, rec.y_star, rec.failed, l, cfg, reference_scale);
        }
    }
    const auto t3 = std::chrono::steady_clock::now();

    report.baseline_similarity = weight_similarity_baseline(base, cand);

    // Top fraction of layers by peak ratio; ties break toward lower index.
    std::vector<std::size_t> order(L);
    for (std::size_t i = 0; i < L; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return report.layers[a].peak_log_ratio > report.layers[b].peak_log_ratio;
    });
    const std::size_t k = static_cast<std::size_t>(
        std::ceil(cfg.top_fraction * static_cast<double>(L)));
    report.selected_layers.assign(order.begin(), order.begin() + std::min(k, L));

    std::optional<std::size_t> lo, hi;
    for (std::size_t l : report.selected_layers) {
        const auto& r = report.layers[l].rank;
        if (!r) continue;
        if (!lo || *r < *lo) lo = r;
        if (!hi || *r > *hi) hi = r;
    }
    report.aggregate_rank = lo;
    report.aggregate_spread = (lo && hi) ? *hi - *lo : 0;
    report.verdict = lo ? Verdict::lora_detected : Verdict::no_delta_detected;

    const auto t4 = std::chrono::steady_clock::now();
    report.timings.collect_ms = std::chrono::duration<double, std::milli>(t2 - t1).count();
    report.timings.reconstruct_ms = reconstruct_ms;
    report.timings.spectra_ms =
        std::chrono::duration<double, std::milli>(t3 - t2).count() - reconstruct_ms;
    report.timings.total_ms = std::chrono::duration<double, std::milli>(t4 - t0).count();
    return report;
}

} // namespace loratrace

#pragma once

// Run-config schema, report/CSV serialization, and the end-to-end pipeline
// (generate -> finetune -> obfuscate -> verify -> trace) shared by the CLI
// and the integration tests. Reports are byte-stable given (config, seed):
// anything wall-clock flavored goes to a sidecar log instead.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "loratrace/errors.hpp"
#include "loratrace/lora.hpp"
#include "loratrace/model.hpp"
#include "loratrace/obfuscate.hpp"
#include "loratrace/reconstruct.hpp"
#include "loratrace/tracer.hpp"
#include "loratrace/weights_io.hpp"

namespace loratrace {

// ---- config serde ----------------------------------------------------------

inline nlohmann::json lora_spec_to_json(const LoraSpec& s) {
    nlohmann::json targets = nlohmann::json::array();
    for (auto t : s.targets) targets.push_back(lora_target_name(t));
    return {{"rank", s.rank},   {"targets", targets},     {"scale", s.scale},
            {"seed", s.seed},   {"layers", s.layer_set}};
}

inline LoraSpec lora_spec_from_json(const nlohmann::json& j) {
    LoraSpec s;
    s.rank = j.value("rank", std::size_t{0});
    for (const auto& t : j.value("targets", std::vector<std::string>{}))
        s.targets.push_back(lora_target_from_name(t));
    s.scale = j.value("scale", 0.0);
    s.seed = j.value("seed", std::uint64_t{0});
    s.layer_set = j.value("layers", std::vector<std::size_t>{});
    return s;
}

inline nlohmann::json obfuscation_spec_to_json(const ObfuscationSpec& s) {
    return {{"mlp_perm", s.enable_mlp_perm},
            {"attn_inner_perm", s.enable_attn_inner_perm},
            {"qk_perm", s.enable_qk_perm},
            {"vo_scaling", s.enable_vo_scaling},
            {"updown_scaling", s.enable_updown_scaling},
            {"scaling_lo", s.scaling_lo},
            {"scaling_hi", s.scaling_hi},
            {"seed", s.seed}};
}

inline ObfuscationSpec obfuscation_spec_from_json(const nlohmann::json& j) {
    ObfuscationSpec s;
    s.enable_mlp_perm = j.value("mlp_perm", true);
    s.enable_attn_inner_perm = j.value("attn_inner_perm", true);
    s.enable_qk_perm = j.value("qk_perm", true);
    s.enable_vo_scaling = j.value("vo_scaling", true);
    s.enable_updown_scaling = j.value("updown_scaling", true);
    s.scaling_lo = j.value("scaling_lo", 0.5);
    s.scaling_hi = j.value("scaling_hi", 2.0);
    s.seed = j.value("seed", std::uint64_t{0});
    return s;
}

inline std::string init_mode_name(InitMode m) {
    switch (m) {
        case InitMode::at_output: return "at_output";
        case InitMode::zero: return "zero";
        case InitMode::custom: return "custom";
    }
    return "?";
}

inline InitMode init_mode_from_name(const std::string& s) {
    if (s == "at_output") return InitMode::at_output;
    if (s == "zero") return InitMode::zero;
    if (s == "custom") return InitMode::custom;
    throw error(errc::bad_config, "unknown init_mode '" + s + "'");
}

inline nlohmann::json reconstruction_config_to_json(const ReconstructionConfig& c) {
    return {{"step", c.step},
            {"max_iters", c.max_iters},
            {"loss_tol", c.loss_tol},
            {"init_mode", init_mode_name(c.init_mode)},
            {"backtrack_factor", c.backtrack_factor}};
}

inline ReconstructionConfig reconstruction_config_from_json(const nlohmann::json& j) {
    ReconstructionConfig c;
    c.step = j.value("step", 0.1);
    c.max_iters = j.value("max_iters", std::size_t{5000});
    c.loss_tol = j.value("loss_tol", 0.0);
    c.init_mode = init_mode_from_name(j.value("init_mode", std::string("at_output")));
    c.backtrack_factor = j.value("backtrack_factor", 0.5);
    return c;
}

// `threads` is deliberately absent: it must not influence results, so it does
// not belong in a re-executable echo.
inline nlohmann::json trace_config_to_json(const TraceConfig& c) {
    return {{"cycles", c.cycles},
            {"subset_size", c.subset_size},
            {"ratio_floor", c.ratio_floor},
            {"abs_floor", c.abs_floor},
            {"top_fraction", c.top_fraction},
            {"probe_count", c.probe_count},
            {"assume_unobfuscated", c.assume_unobfuscated},
            {"seed", c.seed},
            {"reconstruction", reconstruction_config_to_json(c.rcfg)}};
}

inline TraceConfig trace_config_from_json(const nlohmann::json& j) {
    TraceConfig c;
    c.cycles = j.value("cycles", std::size_t{16});
    c.subset_size = j.value("subset_size", std::size_t{0});
    c.ratio_floor = j.value("ratio_floor", 0.0);
    c.abs_floor = j.value("abs_floor", 1e-7);
    c.top_fraction = j.value("top_fraction", 0.10);
    c.probe_count = j.value("probe_count", std::size_t{0});
    c.assume_unobfuscated = j.value("assume_unobfuscated", false);
    c.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("reconstruction"))
        c.rcfg = reconstruction_config_from_json(j.at("reconstruction"));
    return c;
}

struct RunConfig {
    ModelConfig model;
    LoraSpec lora;
    ObfuscationSpec obfuscation;
    TraceConfig trace_cfg;
    std::uint64_t seed = 1;
    std::string output_dir;
    StorageDtype storage_dtype = StorageDtype::f32;
};

inline nlohmann::json run_config_to_json(const RunConfig& c) {
    return {{"model", model_config_to_json(c.model)},
            {"lora", lora_spec_to_json(c.lora)},
            {"obfuscation", obfuscation_spec_to_json(c.obfuscation)},
            {"trace", trace_config_to_json(c.trace_cfg)},
            {"seed", c.seed},
            {"output_dir", c.output_dir},
            {"storage_dtype", dtype_name(c.storage_dtype)}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    c.model = model_config_from_json(j.at("model"));
    if (j.contains("lora")) c.lora = lora_spec_from_json(j.at("lora"));
    if (j.contains("obfuscation"))
        c.obfuscation = obfuscation_spec_from_json(j.at("obfuscation"));
    if (j.contains("trace")) c.trace_cfg = trace_config_from_json(j.at("trace"));
    c.seed = j.value("seed", std::uint64_t{1});
    c.output_dir = j.value("output_dir", std::string("run_out"));
    const std::string dt = j.value("storage_dtype", std::string("f32"));
    if (dt == "f32")
        c.storage_dtype = StorageDtype::f32;
    else if (dt == "f64")
        c.storage_dtype = StorageDtype::f64;
    else
        throw error(errc::unknown_dtype, "storage_dtype must be f32 or f64");
    return c;
}

inline nlohmann::json load_json_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw error(errc::io_failure, "cannot open " + path.string());
    try {
        nlohmann::json j;
        f >> j;
        return j;
    } catch (const nlohmann::json::exception& e) {
        throw error(errc::bad_config, std::string("malformed config file: ") + e.what());
    }
}

// ---- report serialization --------------------------------------------------

inline std::string verdict_name(Verdict v) {
    return v == Verdict::lora_detected ? "lora_detected" : "no_delta_detected";
}

inline nlohmann::json trace_report_to_json(const TraceReport& r) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : r.layers) {
        nlohmann::json cycle_ranks = nlohmann::json::array();
        for (const auto& cr : l.cycle_ranks)
            cycle_ranks.push_back(cr ? nlohmann::json(*cr) : nlohmann::json(nullptr));
        layers.push_back({{"layer", l.layer_index},
                          {"rank", l.rank ? nlohmann::json(*l.rank) : nlohmann::json(nullptr)},
                          {"peak_log_ratio", l.peak_log_ratio},
                          {"cycle_ranks", cycle_ranks},
                          {"reconstruction_failures", l.reconstruction_failures},
                          {"usable", l.usable},
                          {"spectrum", l.spectrum.values}});
    }
    return {{"format_version", 1},
            {"model_config", model_config_to_json(r.model_config)},
            {"trace_config", trace_config_to_json(r.config)},
            {"probes", r.probes},
            {"layers", layers},
            {"selected_layers", r.selected_layers},
            {"aggregate_rank",
             r.aggregate_rank ? nlohmann::json(*r.aggregate_rank) : nlohmann::json(nullptr)},
            {"aggregate_spread", r.aggregate_spread},
            {"verdict", verdict_name(r.verdict)},
            {"baseline_similarity", r.baseline_similarity}};
}

namespace detail {

inline std::string csv_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw error(errc::io_failure, "cannot open " + path.string());
    return f;
}

} // namespace detail

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    auto f = detail::open_out(path);
    f << text;
}

inline void write_report_json(const TraceReport& r, const std::filesystem::path& path) {
    write_text_file(path, trace_report_to_json(r).dump(2) + "\n");
}

inline void write_spectrum_csv(const TraceReport& r, const std::filesystem::path& path) {
    auto f = detail::open_out(path);
    f << "layer,index,singular_value\n";
    for (const auto& l : r.layers)
        for (std::size_t i = 0; i < l.spectrum.size(); ++i)
            f << l.layer_index << "," << (i + 1) << "," << detail::csv_double(l.spectrum[i])
              << "\n";
}

inline void write_ratio_csv(const TraceReport& r, const std::filesystem::path& path) {
    auto f = detail::open_out(path);
    f << "layer,index,log_ratio\n";
    for (const auto& l : r.layers)
        for (std::size_t i = 0; i + 1 < l.spectrum.size(); ++i) {
            const double next = std::max(l.spectrum[i + 1], 1e-300);
            f << l.layer_index << "," << (i + 1) << ","
              << detail::csv_double(std::log(l.spectrum[i] / next)) << "\n";
        }
}

inline void write_similarity_csv(const std::vector<double>& similarity,
                                 const std::filesystem::path& path) {
    auto f = detail::open_out(path);
    f << "layer,cosine\n";
    for (std::size_t l = 0; l < similarity.size(); ++l)
        f << l << "," << detail::csv_double(similarity[l]) << "\n";
}

inline void write_norms_csv(const std::vector<double>& norms,
                            const std::filesystem::path& path) {
    auto f = detail::open_out(path);
    f << "layer,mean_output_norm\n";
    for (std::size_t l = 0; l < norms.size(); ++l)
        f << l << "," << detail::csv_double(norms[l]) << "\n";
}

inline void write_loss_history_csv(const std::vector<double>& losses,
                                   const std::filesystem::path& path) {
    auto f = detail::open_out(path);
    f << "iteration,loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i)
        f << i << "," << detail::csv_double(losses[i]) << "\n";
}

// ---- end-to-end pipeline ----------------------------------------------------

namespace seeds {
// Stage seeds derived from the single master seed.
constexpr std::uint64_t generate = 1;
constexpr std::uint64_t finetune = 2;
constexpr std::uint64_t obfuscate = 3;
constexpr std::uint64_t trace = 4;
} // namespace seeds

struct E2eResult {
    Model base;
    Model candidate_clean;  // M_c*: LoRA applied, no obfuscation
    Model candidate;        // M_c: obfuscated candidate under test
    double equivalence_max_diff = 0.0;
    TraceReport report;
};

// Pure in-memory pipeline at f64 end to end; persistence is the caller's
// concern. All stage randomness derives from the master seed.
inline E2eResult run_e2e(const RunConfig& cfg_in, unsigned threads = 0) {
    RunConfig cfg = cfg_in;
    cfg.model.validate();

    cfg.lora.seed = SeededRng::mix(cfg.seed, seeds::finetune);
    cfg.obfuscation.seed = SeededRng::mix(cfg.seed, seeds::obfuscate);
    cfg.trace_cfg.seed = SeededRng::mix(cfg.seed, seeds::trace);
    if (threads != 0) cfg.trace_cfg.threads = threads;

    E2eResult out;
    out.base = generate_model(cfg.model, SeededRng::mix(cfg.seed, seeds::generate));
    out.candidate_clean = apply(out.base, make_delta(cfg.lora, cfg.model));
    out.candidate = cfg.obfuscation.any_enabled()
                        ? obfuscate_model(out.candidate_clean, cfg.obfuscation)
                        : out.candidate_clean;

    const auto probes = probe_set(out.base, std::min<std::size_t>(cfg.model.hidden_size,
                                                                  cfg.model.vocab_size));
    out.equivalence_max_diff = verify_equivalence(out.candidate_clean, out.candidate, probes, 8);
    out.report = trace(out.base, out.candidate, cfg.trace_cfg);
    return out;
}

// Everything cmd_e2e persists under the output directory. Timings and
// wall-clock stamps go to run.log only; every other artifact is byte-stable.
inline void write_e2e_artifacts(const RunConfig& cfg, const E2eResult& result,
                                const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    save_model(result.base, out_dir / "base", cfg.storage_dtype);
    save_model(result.candidate_clean, out_dir / "candidate_clean", cfg.storage_dtype);
    save_model(result.candidate, out_dir / "candidate", cfg.storage_dtype);

    RunConfig resolved = cfg;
    resolved.lora.seed = SeededRng::mix(cfg.seed, seeds::finetune);
    resolved.obfuscation.seed = SeededRng::mix(cfg.seed, seeds::obfuscate);
    resolved.trace_cfg = result.report.config;
    nlohmann::json echo = run_config_to_json(resolved);
    echo["equivalence_max_diff"] = result.equivalence_max_diff;
    write_text_file(out_dir / "resolved_config.json", echo.dump(2) + "\n");

    nlohmann::json report_json = trace_report_to_json(result.report);
    report_json["run_config"] = echo;
    write_text_file(out_dir / "report.json", report_json.dump(2) + "\n");

    write_spectrum_csv(result.report, out_dir / "spectrum.csv");
    write_ratio_csv(result.report, out_dir / "ratios.csv");
    write_similarity_csv(result.report.baseline_similarity, out_dir / "similarity.csv");
}

} // namespace loratrace

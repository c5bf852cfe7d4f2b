// Command-line front end. Human-readable messages go to stderr; files and
// stdout carry machine-readable artifacts only. Exit codes: 0 success,
// 1 failed expectation or equivalence check, 2 operational error.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "loratrace/loratrace.hpp"

namespace lt = loratrace;
namespace fs = std::filesystem;

namespace {

lt::StorageDtype parse_dtype(const std::string& s) {
    if (s == "f32") return lt::StorageDtype::f32;
    if (s == "f64") return lt::StorageDtype::f64;
    throw lt::error(lt::errc::unknown_dtype, "dtype must be f32 or f64");
}

void append_run_log(const fs::path& dir, const std::string& line) {
    std::ofstream f(dir / "run.log", std::ios::app);
    const auto now = std::chrono::system_clock::now().time_since_epoch();
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now).count();
    f << "[" << ms << "] " << line << "\n";
}

struct CommonOpts {
    unsigned threads = 0;
};

int cmd_gen_base(const std::string& config_path, std::uint64_t seed, const std::string& out,
                 const std::string& dtype) {
    const auto cfg = lt::model_config_from_json(lt::load_json_file(config_path));
    const auto model = lt::generate_model(cfg, seed);
    lt::save_model(model, out, parse_dtype(dtype));
    std::cerr << "generated base model (d=" << cfg.hidden_size << ", L=" << cfg.num_layers
              << ") at " << out << "\n";
    return 0;
}

int cmd_finetune(const std::string& base_dir, const std::string& lora_path,
                 const std::string& out, const std::string& dtype) {
    const auto base = lt::load_model(base_dir);
    auto spec = lt::lora_spec_from_json(lt::load_json_file(lora_path));
    const auto delta = lt::make_delta(spec, base.config);
    const auto cand = lt::apply(base, delta);
    lt::save_model(cand, out, parse_dtype(dtype));
    std::cerr << "applied rank-" << spec.rank << " delta to " << delta.entries.size()
              << " projection(s); candidate at " << out << "\n";
    return 0;
}

int cmd_obfuscate(const std::string& model_dir, const std::string& spec_path,
                  const std::string& out, const std::string& dtype, double noise_sigma,
                  std::uint64_t noise_seed) {
    const auto model = lt::load_model(model_dir);
    auto spec = lt::obfuscation_spec_from_json(lt::load_json_file(spec_path));
    auto obf = lt::obfuscate_model(model, spec);
    if (noise_sigma > 0.0) {
        obf = lt::add_weight_noise(obf, noise_sigma, noise_seed);
        std::cerr << "warning: additive noise is not function-preserving\n";
    }
    lt::save_model(obf, out, parse_dtype(dtype));
    std::cerr << "obfuscated model written to " << out << "\n";
    return 0;
}

int cmd_validate(const std::string& model_dir) {
    const auto report = lt::validate_manifest(model_dir);
    if (report.ok) {
        std::cerr << "manifest ok\n";
        return 0;
    }
    for (const auto& issue : report.issues)
        std::cerr << lt::errc_name(issue.code) << ": " << issue.message << "\n";
    return 2;
}

int cmd_verify_equiv(const std::string& dir_a, const std::string& dir_b, std::size_t probes,
                     std::size_t n_multi, double tol) {
    const auto a = lt::load_model(dir_a);
    const auto b = lt::load_model(dir_b);
    const auto ids = lt::probe_set(a, std::min(probes, a.config.vocab_size));
    const double max_diff = lt::verify_equivalence(a, b, ids, n_multi);
    std::cout << max_diff << "\n";
    if (max_diff <= tol) {
        std::cerr << "equivalent within " << tol << " (max diff " << max_diff << ")\n";
        return 0;
    }
    std::cerr << "NOT equivalent: max diff " << max_diff << " > " << tol << "\n";
    return 1;
}

int cmd_trace(const std::string& base_dir, const std::string& cand_dir,
              const std::string& config_path, const std::string& out, std::uint64_t seed,
              bool seed_set, const CommonOpts& common) {
    const auto base = lt::load_model(base_dir);
    const auto cand = lt::load_model(cand_dir);
    lt::TraceConfig cfg;
    if (!config_path.empty())
        cfg = lt::trace_config_from_json(lt::load_json_file(config_path));
    if (seed_set) cfg.seed = seed;
    cfg.threads = common.threads;

    const auto report = lt::trace(base, cand, cfg);
    fs::create_directories(out);
    lt::write_report_json(report, fs::path(out) / "report.json");
    lt::write_spectrum_csv(report, fs::path(out) / "spectrum.csv");
    lt::write_ratio_csv(report, fs::path(out) / "ratios.csv");
    lt::write_similarity_csv(report.baseline_similarity, fs::path(out) / "similarity.csv");
    append_run_log(out, "trace total_ms=" + std::to_string(report.timings.total_ms) +
                            " collect_ms=" + std::to_string(report.timings.collect_ms) +
                            " reconstruct_ms=" + std::to_string(report.timings.reconstruct_ms));

    if (report.aggregate_rank)
        std::cerr << "verdict: lora_detected rank=" << *report.aggregate_rank << " (spread "
                  << report.aggregate_spread << ")\n";
    else
        std::cerr << "verdict: no_delta_detected\n";
    return 0;
}

int cmd_diag_norms(const std::string& model_dir, std::size_t probes, const std::string& out) {
    const auto model = lt::load_model(model_dir);
    const auto ids = lt::probe_set(model, std::min(probes, model.config.vocab_size));
    lt::write_norms_csv(lt::layer_output_norms(model, ids), out);
    std::cerr << "layer output norms written to " << out << "\n";
    return 0;
}

int cmd_diag_similarity(const std::string& model_dir, const std::string& other_dir,
                        const std::string& out) {
    const auto a = lt::load_model(model_dir);
    const auto b = lt::load_model(other_dir);
    lt::write_similarity_csv(lt::weight_similarity_baseline(a, b), out);
    std::cerr << "weight similarity written to " << out << "\n";
    return 0;
}

int cmd_e2e(const std::string& config_path, const std::string& out_override,
            std::optional<std::uint64_t> seed_override, std::optional<std::size_t> expect_rank,
            bool expect_null, const CommonOpts& common) {
    auto cfg = lt::run_config_from_json(lt::load_json_file(config_path));
    if (!out_override.empty()) cfg.output_dir = out_override;
    if (seed_override) cfg.seed = *seed_override;

    const auto result = lt::run_e2e(cfg, common.threads);
    const fs::path out_dir(cfg.output_dir);
    lt::write_e2e_artifacts(cfg, result, out_dir);
    append_run_log(out_dir,
                   "e2e total_ms=" + std::to_string(result.report.timings.total_ms) +
                       " reconstruct_ms=" + std::to_string(result.report.timings.reconstruct_ms) +
                       " threads=" + std::to_string(result.report.config.threads));

    std::cerr << "equivalence max diff: " << result.equivalence_max_diff << "\n";
    if (result.report.aggregate_rank)
        std::cerr << "verdict: lora_detected rank=" << *result.report.aggregate_rank
                  << " (spread " << result.report.aggregate_spread << ")\n";
    else
        std::cerr << "verdict: no_delta_detected\n";

    if (expect_rank) {
        if (!result.report.aggregate_rank || *result.report.aggregate_rank != *expect_rank) {
            std::cerr << "expectation failed: wanted rank " << *expect_rank << "\n";
            return 1;
        }
    }
    if (expect_null && result.report.aggregate_rank) {
        std::cerr << "expectation failed: wanted no_delta_detected\n";
        return 1;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"LoRA fine-tuning provenance detector for synthetic decoder models"};
    app.require_subcommand(1);

    CommonOpts common;

    std::string config_path, base_dir, cand_dir, model_dir, other_dir, out_dir, spec_path;
    std::string dtype = "f32";
    std::uint64_t seed = 1;
    bool seed_set = false;
    double noise_sigma = 0.0;
    std::uint64_t noise_seed = 0;
    std::size_t probes = 64, n_multi = 8;
    double tol = 1e-9;

    auto* gen = app.add_subcommand("gen-base", "generate a synthetic base model");
    gen->add_option("--config", config_path, "model config JSON")->required();
    gen->add_option("--seed", seed, "generation seed")->required();
    gen->add_option("--out", out_dir, "output model directory")->required();
    gen->add_option("--dtype", dtype, "storage dtype (f32|f64)");

    auto* ft = app.add_subcommand("finetune", "apply a LoRA delta to a base model");
    ft->add_option("--base", base_dir, "base model directory")->required();
    ft->add_option("--lora", spec_path, "LoRA spec JSON")->required();
    ft->add_option("--out", out_dir, "output model directory")->required();
    ft->add_option("--dtype", dtype, "storage dtype (f32|f64)");

    auto* obf = app.add_subcommand("obfuscate", "apply function-preserving obfuscation");
    obf->add_option("--model", model_dir, "input model directory")->required();
    obf->add_option("--spec", spec_path, "obfuscation spec JSON")->required();
    obf->add_option("--out", out_dir, "output model directory")->required();
    obf->add_option("--dtype", dtype, "storage dtype (f32|f64)");
    obf->add_option("--noise", noise_sigma, "stress only: additive weight noise sigma");
    obf->add_option("--noise-seed", noise_seed, "seed for --noise");

    auto* val = app.add_subcommand("validate", "check a model directory's manifest");
    val->add_option("--model", model_dir, "model directory")->required();

    auto* veq = app.add_subcommand("verify-equiv", "compare two models' outputs");
    veq->add_option("--a", base_dir, "first model directory")->required();
    veq->add_option("--b", cand_dir, "second model directory")->required();
    veq->add_option("--probes", probes, "single-token probe count");
    veq->add_option("--multi", n_multi, "multi-token sequence count");
    veq->add_option("--tol", tol, "max allowed output difference");

    auto* tr = app.add_subcommand("trace", "detect a LoRA delta and recover its rank");
    tr->add_option("--base", base_dir, "base model directory")->required();
    tr->add_option("--cand", cand_dir, "candidate model directory")->required();
    tr->add_option("--config", config_path, "trace config JSON");
    tr->add_option("--out", out_dir, "output directory")->required();
    tr->add_option("--seed", seed, "sampling seed")->each([&](const std::string&) {
        seed_set = true;
    });
    tr->add_option("--threads", common.threads,
                   "worker threads (default: hardware concurrency)");

    auto* diag = app.add_subcommand("diag", "diagnostic CSVs");
    diag->require_subcommand(1);
    auto* diag_norms = diag->add_subcommand("norms", "per-layer mean output norms");
    diag_norms->add_option("--model", model_dir, "model directory")->required();
    diag_norms->add_option("--probes", probes, "probe count");
    diag_norms->add_option("--out", out_dir, "output CSV path")->required();
    auto* diag_sim = diag->add_subcommand("similarity", "per-layer weight cosine vs another model");
    diag_sim->add_option("--model", model_dir, "model directory")->required();
    diag_sim->add_option("--other", other_dir, "other model directory")->required();
    diag_sim->add_option("--out", out_dir, "output CSV path")->required();

    std::optional<std::size_t> expect_rank;
    bool expect_null = false;
    std::size_t expect_rank_value = 0;
    auto* e2e = app.add_subcommand("e2e", "full pipeline from one run config");
    e2e->add_option("--config", config_path, "run config JSON")->required();
    e2e->add_option("--out", out_dir, "override output directory");
    e2e->add_option("--seed", seed, "override master seed")->each([&](const std::string&) {
        seed_set = true;
    });
    auto* er = e2e->add_option("--expect-rank", expect_rank_value,
                               "exit 1 unless this rank is detected");
    e2e->add_flag("--expect-null", expect_null, "exit 1 unless no delta is detected");
    e2e->add_option("--threads", common.threads,
                    "worker threads (default: hardware concurrency)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;  // bad command line is an operational error
    }

    try {
        if (gen->parsed()) return cmd_gen_base(config_path, seed, out_dir, dtype);
        if (ft->parsed()) return cmd_finetune(base_dir, spec_path, out_dir, dtype);
        if (obf->parsed())
            return cmd_obfuscate(model_dir, spec_path, out_dir, dtype, noise_sigma, noise_seed);
        if (val->parsed()) return cmd_validate(model_dir);
        if (veq->parsed()) return cmd_verify_equiv(base_dir, cand_dir, probes, n_multi, tol);
        if (tr->parsed())
            return cmd_trace(base_dir, cand_dir, config_path, out_dir, seed, seed_set, common);
        if (diag->parsed()) {
            if (diag_norms->parsed()) return cmd_diag_norms(model_dir, probes, out_dir);
            if (diag_sim->parsed()) return cmd_diag_similarity(model_dir, other_dir, out_dir);
        }
        if (e2e->parsed()) {
            if (er->count() > 0) expect_rank = expect_rank_value;
            return cmd_e2e(config_path, out_dir,
                           seed_set ? std::optional<std::uint64_t>(seed) : std::nullopt,
                           expect_rank, expect_null, common);
        }
    } catch (const lt::error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}

// Integration suite: one test case per acceptance criterion, each printing a
// single [PASS]/[FAIL] line. Heavier cases sweep 20 master seeds.

#include <catch2/catch_amalgamated.hpp>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "loratrace/loratrace.hpp"

using namespace loratrace;
namespace fs = std::filesystem;

namespace {

void criterion(int n, const std::string& desc, bool ok) {
    std::cout << (ok ? "[PASS]" : "[FAIL]") << " criterion " << n << ": " << desc << std::endl;
    REQUIRE(ok);
}

ModelConfig flagship_config() {
    ModelConfig c;
    c.hidden_size = 64;
    c.mlp_size = 176;
    c.num_layers = 8;
    c.vocab_size = 256;
    return c;
}

RunConfig flagship_run(std::size_t rank, std::vector<LoraTarget> targets, bool obfuscated,
                       bool fast_path, std::uint64_t seed) {
    RunConfig rc;
    rc.model = flagship_config();
    rc.lora.rank = rank;
    rc.lora.targets = std::move(targets);
    if (!obfuscated) {
        rc.obfuscation.enable_mlp_perm = false;
        rc.obfuscation.enable_attn_inner_perm = false;
        rc.obfuscation.enable_qk_perm = false;
        rc.obfuscation.enable_vo_scaling = false;
        rc.obfuscation.enable_updown_scaling = false;
    }
    rc.trace_cfg.assume_unobfuscated = fast_path;
    rc.seed = seed;
    return rc;
}

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("loratrace_acc_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

} // namespace

TEST_CASE("criterion 1: flagship rank recovery on the fast path", "[c1]") {
    bool ok = true;
    double worst_run = 0.0;
    for (std::size_t s : {2ul, 4ul, 8ul, 16ul}) {
        int exact = 0;
        for (std::uint64_t seed = 1; seed <= 20; ++seed) {
            const auto t0 = std::chrono::steady_clock::now();
            const auto res = run_e2e(flagship_run(s, {LoraTarget::V}, false, true, seed));
            worst_run = std::max(worst_run, seconds_since(t0));
            if (res.report.aggregate_rank && *res.report.aggregate_rank == s &&
                res.report.aggregate_spread == 0)
                ++exact;
        }
        std::cout << "  s=" << s << ": exact recovery in " << exact << "/20 seeds\n";
        ok = ok && exact >= 19;
    }
    ok = ok && worst_run < 30.0;
    std::cout << "  worst run time " << worst_run << " s (< 30 s required)\n";
    criterion(1, "rank recovered exactly with spread 0 in >= 19/20 seeds for s in {2,4,8,16}",
              ok);
}

TEST_CASE("criterion 2: rank recovery under full obfuscation with reconstruction", "[c2]") {
    bool ok = true;
    double worst_run = 0.0;
    for (std::size_t s : {2ul, 4ul, 8ul, 16ul}) {
        int close = 0;
        for (std::uint64_t seed = 1; seed <= 20; ++seed) {
            const auto t0 = std::chrono::steady_clock::now();
            const auto res = run_e2e(flagship_run(s, {LoraTarget::V}, true, false, seed));
            worst_run = std::max(worst_run, seconds_since(t0));

            bool baseline_defeated = true;
            for (double sim : res.report.baseline_similarity)
                baseline_defeated = baseline_defeated && sim < 0.9;
            if (!baseline_defeated) ok = false;

            if (res.report.aggregate_rank &&
                std::llabs(static_cast<long long>(*res.report.aggregate_rank) -
                           static_cast<long long>(s)) <= 1)
                ++close;
        }
        std::cout << "  s=" << s << ": rank within +-1 in " << close << "/20 seeds\n";
        ok = ok && close >= 18;
    }
    ok = ok && worst_run < 300.0;
    std::cout << "  worst run time " << worst_run << " s (< 300 s required)\n";
    criterion(2,
              "obfuscated rank within +-1 in >= 18/20 seeds and weight-similarity "
              "baseline < 0.9 on every layer",
              ok);
}

TEST_CASE("criterion 3: V+O targets report roughly twice the rank", "[c3]") {
    const std::size_t s = 8;
    int doubled = 0;
    bool in_range = true;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const auto res =
            run_e2e(flagship_run(s, {LoraTarget::V, LoraTarget::O}, false, true, seed));
        if (!res.report.aggregate_rank) {
            in_range = false;
            continue;
        }
        const std::size_t r = *res.report.aggregate_rank;
        in_range = in_range && r >= s + 1 && r <= 2 * s;
        if (r == 2 * s) ++doubled;
    }
    std::cout << "  2s attained in " << doubled << "/20 seeds\n";
    criterion(3, "V+O rank estimate lies in [s+1, 2s] with 2s attained in >= 15/20 seeds",
              in_range && doubled >= 15);
}

TEST_CASE("criterion 4: null controls never hallucinate a rank", "[c4]") {
    int null_identical = 0;
    int null_obfuscated = 0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const auto base = generate_model(flagship_config(), SeededRng::mix(seed, 1));

        TraceConfig fast;
        fast.assume_unobfuscated = true;
        fast.seed = SeededRng::mix(seed, 4);
        if (trace(base, base, fast).verdict == Verdict::no_delta_detected) ++null_identical;

        ObfuscationSpec ospec;
        ospec.seed = SeededRng::mix(seed, 3);
        const auto obf = obfuscate_model(base, ospec);
        TraceConfig full;
        full.seed = SeededRng::mix(seed, 4);
        if (trace(base, obf, full).verdict == Verdict::no_delta_detected) ++null_obfuscated;
    }
    std::cout << "  identical: " << null_identical << "/20, obfuscated base: "
              << null_obfuscated << "/20\n";
    criterion(4, "candidate == base and candidate == obfuscate(base) both yield "
                 "no_delta_detected in 20/20 seeds",
              null_identical == 20 && null_obfuscated == 20);
}

TEST_CASE("criterion 5: every obfuscation flag combination preserves the function", "[c5]") {
    const auto t0 = std::chrono::steady_clock::now();
    ModelConfig cfg;
    cfg.hidden_size = 32;
    cfg.mlp_size = 88;
    cfg.num_layers = 4;
    cfg.vocab_size = 64;
    const auto model = generate_model(cfg, 5);
    const auto probes = probe_set(model, cfg.hidden_size);

    bool ok = true;
    double worst = 0.0;
    for (unsigned mask = 0; mask < 32; ++mask) {
        ObfuscationSpec spec;
        spec.enable_mlp_perm = mask & 1;
        spec.enable_attn_inner_perm = mask & 2;
        spec.enable_qk_perm = mask & 4;
        spec.enable_vo_scaling = mask & 8;
        spec.enable_updown_scaling = mask & 16;
        spec.seed = 1000 + mask;
        const auto obf = obfuscate_model(model, spec);
        const double diff = verify_equivalence(model, obf, probes, 8);
        worst = std::max(worst, diff);
        ok = ok && diff <= 1e-9;
    }
    const double elapsed = seconds_since(t0);
    std::cout << "  worst max-diff " << worst << ", elapsed " << elapsed << " s\n";
    criterion(5, "all 32 flag combinations keep outputs within 1e-9 in under a minute",
              ok && elapsed < 60.0);
}

TEST_CASE("criterion 6: analytic gradient agrees with finite differences", "[c6]") {
    ModelConfig cfg;
    cfg.hidden_size = 16;
    cfg.mlp_size = 40;
    cfg.num_layers = 1;
    cfg.vocab_size = 16;
    const auto model = generate_model(cfg, 6);

    SeededRng rng(60);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const auto y = random_vector(rng, 16, 1.0);
        const auto z = random_vector(rng, 16, 1.0);
        const auto [loss, grad] = mlp_loss_and_grad(model.layers[0], cfg, y, z);
        auto f = [&](std::span<const double> point) {
            return mlp_loss_and_grad(model.layers[0], cfg, point, z).first;
        };
        const auto fd = finite_diff_gradient(f, y, 1e-6);
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < grad.size(); ++i) {
            num += (grad[i] - fd[i]) * (grad[i] - fd[i]);
            den += grad[i] * grad[i];
        }
        worst = std::max(worst, std::sqrt(num / den));
    }
    std::cout << "  worst relative error " << worst << "\n";
    criterion(6, "max relative gradient error < 1e-4 over 100 random points", worst < 1e-4);
}

TEST_CASE("criterion 7: reconstruction fidelity on forward-then-invert probes", "[c7]") {
    ModelConfig cfg;
    cfg.hidden_size = 64;
    cfg.mlp_size = 176;
    cfg.num_layers = 1;
    cfg.vocab_size = 16;
    const auto model = generate_model(cfg, 7);

    ReconstructionConfig rcfg;
    rcfg.loss_tol = 1e-16 * 64;
    rcfg.record_history = true;

    const std::size_t probes = 256;
    SeededRng rng(70);
    std::vector<std::vector<double>> ys(probes);
    for (auto& y : ys) y = random_vector(rng, 64, 1.0 / 8.0);

    std::vector<ReconstructionResult> results(probes);
    parallel_for(probes, default_thread_count(), [&](std::size_t j) {
        const auto z = mlp_row_eval(ys[j], model.layers[0], cfg).out;
        results[j] = invert_mlp(model.layers[0], cfg, z, rcfg);
    });

    std::size_t converged = 0;
    double worst_rel = 0.0;
    bool monotone = true;
    for (std::size_t j = 0; j < probes; ++j) {
        const auto& res = results[j];
        for (std::size_t i = 1; i < res.loss_history.size(); ++i)
            monotone = monotone && res.loss_history[i] <= res.loss_history[i - 1];
        if (!res.converged) continue;
        ++converged;
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < 64; ++i) {
            num += (res.y_star[i] - ys[j][i]) * (res.y_star[i] - ys[j][i]);
            den += ys[j][i] * ys[j][i];
        }
        worst_rel = std::max(worst_rel, std::sqrt(num / den));
    }
    std::cout << "  converged " << converged << "/256, worst relative error " << worst_rel
              << ", monotone=" << (monotone ? "yes" : "no") << "\n";
    criterion(7,
              "converged rate >= 99%, relative error < 1e-5 on converged rows, "
              "accepted losses monotone",
              converged >= 254 && worst_rel < 1e-5 && monotone);
}

TEST_CASE("criterion 8: lemma property suites", "[c8]") {
    // row-shift invariance of softmax
    SeededRng rng(80);
    double worst_shift = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const Matrix a = random_matrix(rng, 6, 12, 3.0);
        Matrix shifted = a;
        for (std::size_t i = 0; i < a.rows(); ++i) {
            const double alpha = 20.0 * rng.next_double() - 10.0;
            for (std::size_t j = 0; j < a.cols(); ++j) shifted(i, j) += alpha;
        }
        worst_shift =
            std::max(worst_shift, max_abs_diff(softmax_rows(a, false), softmax_rows(shifted, false)));
    }

    // distinctness of MLP outputs on non-parallel inputs
    ModelConfig cfg;
    cfg.hidden_size = 16;
    cfg.mlp_size = 40;
    cfg.num_layers = 1;
    cfg.vocab_size = 16;
    const auto model = generate_model(cfg, 8);
    double min_dist = 1e300;
    int pairs = 0;
    while (pairs < 1000) {
        const Matrix a = random_matrix(rng, 1, 16, 1.0);
        const Matrix b = random_matrix(rng, 1, 16, 1.0);
        if (std::abs(cosine(a.row(0), b.row(0))) > 1.0 - 1e-8) continue;
        ++pairs;
        const Matrix fa = mlp_forward(a, model.layers[0], cfg);
        const Matrix fb = mlp_forward(b, model.layers[0], cfg);
        double dist = 0.0;
        for (std::size_t i = 0; i < fa.size(); ++i) {
            const double d = fa.data()[i] - fb.data()[i];
            dist += d * d;
        }
        min_dist = std::min(min_dist, std::sqrt(dist));
    }
    std::cout << "  worst softmax shift diff " << worst_shift << ", min MLP output distance "
              << min_dist << "\n";
    criterion(8,
              "softmax row-shift invariance to 1e-12 over 1000 matrices; MLP outputs "
              "distinct (> 1e-6) over 1000 non-parallel pairs",
              worst_shift < 1e-12 && min_dist > 1e-6);
}

TEST_CASE("criterion 9: spectral oracle on exact low-rank products", "[c9]") {
    SeededRng rng(90);
    const std::size_t n = 32, d = 64;
    bool ok = true;
    double worst_peak = 1e300;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t s = static_cast<std::size_t>(trial % 16) + 1;  // s <= n/2
        const Matrix prod =
            matmul(random_matrix(rng, n, s, 1.0), random_matrix(rng, s, d, 1.0));
        const auto spec = singular_values(prod);
        const auto call =
            rank_from_spectrum(spec, std::log(1e3), 1e-7, mean_row_norm(prod));
        ok = ok && call.rank && *call.rank == s;
        worst_peak = std::min(worst_peak, call.peak_log_ratio);
    }
    std::cout << "  smallest peak log-ratio " << worst_peak << " (needs > " << std::log(1e8)
              << ")\n";
    criterion(9, "rank recovered in 100/100 low-rank products with peak log-ratio > ln(1e8)",
              ok && worst_peak > std::log(1e8));
}

TEST_CASE("criterion 10: reports are byte-identical across thread counts", "[c10]") {
    const char* cli = std::getenv("LORATRACE_CLI");
    REQUIRE(cli != nullptr);

    TempDir dir;
    nlohmann::json run = {
        {"model",
         {{"hidden_size", 32}, {"mlp_size", 88}, {"num_layers", 2}, {"vocab_size", 64}}},
        {"lora", {{"rank", 4}, {"targets", {"V"}}}},
        {"trace", {{"assume_unobfuscated", false}}},
        {"seed", 123},
        {"output_dir", (dir.path / "run").string()},
    };
    {
        std::ofstream f(dir.path / "run.json");
        f << run.dump(2);
    }

    const std::string base_cmd = std::string(cli) + " e2e --config " +
                                 (dir.path / "run.json").string() + " 2>/dev/null";
    REQUIRE(std::system((base_cmd + " --threads 1").c_str()) == 0);
    const std::string report_1 = slurp(dir.path / "run" / "report.json");
    const std::string spectrum_1 = slurp(dir.path / "run" / "spectrum.csv");

    REQUIRE(std::system((base_cmd + " --threads 2").c_str()) == 0);
    const std::string report_2 = slurp(dir.path / "run" / "report.json");
    const std::string spectrum_2 = slurp(dir.path / "run" / "spectrum.csv");

    criterion(10, "cmd_e2e reports byte-identical for --threads 1 vs --threads 2",
              report_1 == report_2 && spectrum_1 == spectrum_2 && !report_1.empty());
}

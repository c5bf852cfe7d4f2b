#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "loratrace/errors.hpp"
#include "loratrace/matrix.hpp"

namespace loratrace {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

} // namespace detail

// xoshiro256++ with explicit (seed, stream) splitting. The integer sequence
// is fixed by the algorithm alone, so identical (seed, stream) replays the
// same stream on any platform. Gaussian draws go through sqrt/log and
// inherit the host libm's rounding in the last ulp.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed, std::uint64_t stream = 0) {
        std::uint64_t sm = seed;
        (void)detail::splitmix64(sm);
        sm ^= mix(stream, 0x5bf0363546e24f7bULL);
        for (auto& s : state_) s = detail::splitmix64(sm);
    }

    // Deterministic combiner used everywhere a sub-stream id is derived.
    static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
        std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
        return detail::splitmix64(x);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = detail::rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = detail::rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 random bits.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Unbiased integer in [0, bound) by rejection.
    std::uint64_t next_below(std::uint64_t bound) {
        if (bound == 0) throw error(errc::bad_parameter, "next_below bound must be positive");
        const std::uint64_t threshold = (0 - bound) % bound;
        for (;;) {
            const std::uint64_t r = next_u64();
            if (r >= threshold) return r % bound;
        }
    }

    // Standard normal via the Marsaglia polar method (sqrt/log only, no trig).
    double next_gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        for (;;) {
            const double u = 2.0 * next_double() - 1.0;
            const double v = 2.0 * next_double() - 1.0;
            const double s = u * u + v * v;
            if (s >= 1.0 || s == 0.0) continue;
            const double m = std::sqrt(-2.0 * std::log(s) / s);
            spare_ = v * m;
            has_spare_ = true;
            return u * m;
        }
    }

    // Log-uniform in [lo, hi].
    double next_log_uniform(double lo, double hi) {
        if (!(lo > 0.0) || !(hi >= lo))
            throw error(errc::bad_parameter, "log-uniform range must satisfy 0 < lo <= hi");
        return std::exp(std::log(lo) + next_double() * (std::log(hi) - std::log(lo)));
    }

private:
    std::uint64_t state_[4] = {};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

inline Matrix random_matrix(SeededRng& rng, std::size_t rows, std::size_t cols, double scale) {
    if (rows == 0 || cols == 0) throw error(errc::empty_input, "random_matrix dimension is zero");
    if (!(scale > 0.0)) throw error(errc::bad_parameter, "random_matrix scale must be positive");
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.next_gaussian();
    return m;
}

inline std::vector<double> random_vector(SeededRng& rng, std::size_t n, double scale) {
    if (n == 0) throw error(errc::empty_input, "random_vector length is zero");
    std::vector<double> v(n);
    for (auto& x : v) x = scale * rng.next_gaussian();
    return v;
}

// Fisher-Yates over the seeded stream.
inline std::vector<std::size_t> random_permutation(SeededRng& rng, std::size_t n) {
    if (n == 0) throw error(errc::empty_input, "random_permutation over empty set");
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    for (std::size_t i = n - 1; i > 0; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.next_below(i + 1));
        std::swap(p[i], p[j]);
    }
    return p;
}

inline std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& p) {
    std::vector<std::size_t> inv(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) inv[p[i]] = i;
    return inv;
}

inline bool is_permutation_of_n(const std::vector<std::size_t>& p, std::size_t n) {
    if (p.size() != n) return false;
    std::vector<bool> seen(n, false);
    for (std::size_t v : p) {
        if (v >= n || seen[v]) return false;
        seen[v] = true;
    }
    return true;
}

} // namespace loratrace

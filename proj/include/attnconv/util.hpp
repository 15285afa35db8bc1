#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace attnconv {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

// Global execution knobs. Kernels are gather-style (every output element is
// reduced serially by one thread), so parallel runs are already reproducible;
// the deterministic flag additionally pins the order of the few cross-element
// reductions (full sums, batch statistics) that would otherwise use an OpenMP
// reduction clause.
bool deterministic();
void set_deterministic(bool on);

int max_threads();
void set_max_threads(int n);   // n <= 0 restores the hardware default

// 64-bit mix (splitmix64 finalizer), used to derive independent RNG streams
// from (seed, epoch, index)-style tuples.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
    return mix64(mix64(a) ^ b);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return mix64(mix64(a, b) ^ c);
}

// Deterministic random source with fully pinned algorithms (splitmix64
// stream, explicit Box-Muller for normals) so that the same seed produces
// the same bits on every platform and build.
class RandomSource {
public:
    explicit RandomSource(std::uint64_t seed) : state_(seed ? seed : 0x6a09e667f3bcc909ULL) {}

    std::uint64_t next_u64() {
        state_ = mix64(state_ + 0x2545f4914f6cdd1dULL);
        return state_;
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // uniform integer in [0, n)
    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

    bool bernoulli(double p) { return uniform() < p; }

private:
    std::uint64_t state_;
};

// Locale-independent float formatting ('.' decimal separator always).
std::string format_double(double v, int precision);

}  // namespace attnconv

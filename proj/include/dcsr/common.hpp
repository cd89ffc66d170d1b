#pragma once

// Shared primitives: ids, errors, deterministic RNG, hashing, small math helpers.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcsr {

using DomainId = std::uint32_t;
using ExamineeId = std::uint32_t;
using QuestionId = std::uint32_t;
using ConceptId = std::uint32_t;

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Bad user input: malformed files, inconsistent ids, impossible configs.
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

// Failures mid-computation: divergence, non-finite values, broken artifacts.
struct RuntimeFailure : std::runtime_error {
    explicit RuntimeFailure(const std::string& what) : std::runtime_error(what) {}
};

inline double sigmoid(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double logit(double p) {
    return std::log(p) - std::log1p(-p);
}

inline bool all_finite(const Vec& v) {
    return v.allFinite();
}

// Caps the Euclidean norm; gradient-ascent steps use this instead of raw gradients.
inline Vec clip_norm(Vec g, double max_norm) {
    const double n = g.norm();
    if (n > max_norm && n > 0.0) g *= max_norm / n;
    return g;
}

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d49bb133111ebULL;
    return z ^ (z >> 31);
}

// Counter-based sub-seed derivation: one root seed fans out into independent
// per-stage streams without any stage consuming another's draws.
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream) {
    std::uint64_t s = root;
    std::uint64_t out = 0;
    for (std::uint64_t i = 0; i <= stream; ++i) out = splitmix64(s);
    return out;
}

// Deterministic RNG. All normal draws go through an explicit Box-Muller so the
// byte streams of emitted artifacts never depend on library internals.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed == 0 ? 0x9e3779b97f4a7c15ULL : seed) {
        // warm up so nearby seeds decorrelate
        for (int i = 0; i < 4; ++i) (void)splitmix64(state_);
    }

    std::uint64_t next_u64() { return splitmix64(state_); }

    // open interval (0,1)
    double uniform() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        constexpr double two_pi = 6.283185307179586476925286766559;
        spare_ = r * std::sin(two_pi * u2);
        has_spare_ = true;
        return r * std::cos(two_pi * u2);
    }

    Vec normal_vec(Eigen::Index n) {
        Vec v(n);
        for (Eigen::Index i = 0; i < n; ++i) v[i] = normal();
        return v;
    }

    // uniform in [0, n)
    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

    int uniform_int(int lo, int hi) {  // inclusive bounds
        return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    template <typename T>
    void shuffle(std::vector<T>& xs) {
        for (std::size_t i = xs.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(xs[i - 1], xs[j]);
        }
    }

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// FNV-1a over raw bytes; used for config hashes and parameter checksums.
class Fnv64 {
public:
    void update(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h_ ^= p[i];
            h_ *= 0x100000001b3ULL;
        }
    }
    void update(const std::string& s) { update(s.data(), s.size()); }
    void update_u64(std::uint64_t v) { update(&v, sizeof v); }
    void update_doubles(const double* p, std::size_t n) { update(p, n * sizeof(double)); }
    std::uint64_t digest() const { return h_; }

private:
    std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

}  // namespace dcsr

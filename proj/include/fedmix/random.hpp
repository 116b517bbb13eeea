// Seeded random streams.
//
// Every consumer of randomness gets its own generator whose seed is derived
// from the master seed plus a tuple of tags (round, client id, purpose). Work
// can therefore be scheduled in any order without changing results.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <vector>

namespace fedmix {

using Rng = std::mt19937_64;

// Purpose tags for derived streams.
enum class Stream : std::uint64_t {
    init = 1,
    dataset = 2,
    holdout = 3,
    partition = 4,
    mash = 5,
    server_average = 6,
    noise = 7,
    synthetic = 8,
    select = 9,
    client = 10,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> tags) {
    std::uint64_t h = splitmix64(master);
    for (auto t : tags) h = splitmix64(h ^ splitmix64(t + 0x632be59bd9b4e019ULL));
    return h;
}

inline Rng make_rng(std::uint64_t master, Stream purpose, std::initializer_list<std::uint64_t> tags = {}) {
    std::uint64_t h = derive_seed(master, {static_cast<std::uint64_t>(purpose)});
    for (auto t : tags) h = derive_seed(h, {t});
    return Rng(h);
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
}

// Standard Gamma(shape, 1) draw; shape < 1 uses the x * U^(1/shape) boost.
inline double gamma_draw(double shape, Rng& rng) {
    if (shape < 1.0) {
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        double g = std::gamma_distribution<double>(shape + 1.0, 1.0)(rng);
        double u = unif(rng);
        return g * std::pow(u, 1.0 / shape);
    }
    return std::gamma_distribution<double>(shape, 1.0)(rng);
}

inline double beta_draw(double a, double b, Rng& rng) {
    double x = gamma_draw(a, rng);
    double y = gamma_draw(b, rng);
    if (x + y == 0.0) return 0.5;
    return x / (x + y);
}

// Symmetric Dirichlet(alpha) vector of length `dim`, summing to 1.
inline std::vector<double> dirichlet_draw(double alpha, std::size_t dim, Rng& rng) {
    std::vector<double> v(dim);
    double sum = 0.0;
    for (auto& x : v) {
        x = gamma_draw(alpha, rng);
        sum += x;
    }
    if (sum == 0.0 || !std::isfinite(sum)) {
        // every component underflowed; fall back to a random vertex
        std::fill(v.begin(), v.end(), 0.0);
        v[std::uniform_int_distribution<std::size_t>(0, dim - 1)(rng)] = 1.0;
        return v;
    }
    for (auto& x : v) x /= sum;
    return v;
}

}  // namespace fedmix

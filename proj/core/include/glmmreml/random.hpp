#pragma once

#include <cstdint>
#include <random>

#include "glmmreml/model.hpp"

namespace glmmreml {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Counter-based seed: the same (seed, a, b, c) always names the same stream.
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
    std::uint64_t h = splitmix64(seed);
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ (b + 0x632be59bd9b4e019ULL));
    return splitmix64(h ^ (c + 0x8cb92ba72f3d8dd7ULL));
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
    return Rng(stream_seed(seed, a, b, c));
}

/// Draws u_i ~ N(0, D) per cluster, then y from the family at eta = X beta + Z u.
/// The design and prior weights of `data` are kept.
Dataset simulate_response(const Family& family, const Dataset& data, const VectorXd& beta, const MatrixXd& D,
                          Rng& rng, RandomEffects* u_out = nullptr);

}  // namespace glmmreml

#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace mmcp {

// All randomness in a run flows from one root seed through named stream
// derivations, so any component can be re-rendered in isolation and two
// binaries with the same config produce byte-identical outputs.
//
// Stream identity = (root_seed, name, indices...). Distribution transforms
// are implemented here (not via std::*_distribution) because the standard
// leaves those implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t uniform_index(std::uint64_t n);

    // Standard normal via Box-Muller (second value cached).
    double normal();

    double normal(double mean, double sigma) { return mean + sigma * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool have_cached_ = false;
    double cached_ = 0.0;
};

// Derives the seed for a named stream. FNV-1a over the name, folded with the
// root seed and indices through splitmix64 finalization steps.
std::uint64_t derive_seed(std::uint64_t root, std::string_view name);
std::uint64_t derive_seed(std::uint64_t root, std::string_view name, std::uint64_t i0);
std::uint64_t derive_seed(std::uint64_t root, std::string_view name, std::uint64_t i0,
                          std::uint64_t i1);
std::uint64_t derive_seed(std::uint64_t root, std::string_view name, std::uint64_t i0,
                          std::uint64_t i1, std::uint64_t i2);

inline Rng stream(std::uint64_t root, std::string_view name) {
    return Rng(derive_seed(root, name));
}
inline Rng stream(std::uint64_t root, std::string_view name, std::uint64_t i0) {
    return Rng(derive_seed(root, name, i0));
}
inline Rng stream(std::uint64_t root, std::string_view name, std::uint64_t i0, std::uint64_t i1) {
    return Rng(derive_seed(root, name, i0, i1));
}
inline Rng stream(std::uint64_t root, std::string_view name, std::uint64_t i0, std::uint64_t i1,
                  std::uint64_t i2) {
    return Rng(derive_seed(root, name, i0, i1, i2));
}

}  // namespace mmcp

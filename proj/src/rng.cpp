#include "mmcp/rng.hpp"

#include <cmath>

namespace mmcp {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t root, std::string_view name) {
    return splitmix64(splitmix64(root) ^ fnv1a(name));
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view name, std::uint64_t i0) {
    return splitmix64(derive_seed(root, name) ^ splitmix64(i0 + 1));
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view name, std::uint64_t i0,
                          std::uint64_t i1) {
    return splitmix64(derive_seed(root, name, i0) ^ splitmix64(i1 + 2));
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view name, std::uint64_t i0,
                          std::uint64_t i1, std::uint64_t i2) {
    return splitmix64(derive_seed(root, name, i0, i1) ^ splitmix64(i2 + 3));
}

std::uint64_t Rng::uniform_index(std::uint64_t n) {
    // Rejection sampling over the top bits keeps the draw unbiased.
    if (n == 0) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return x % n;
}

double Rng::normal() {
    if (have_cached_) {
        have_cached_ = false;
        return cached_;
    }
    double u1, u2;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
}

}  // namespace mmcp

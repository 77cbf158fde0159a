#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace mffm {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t hash_tag(std::string_view tag) {
    // FNV-1a 64.
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : tag) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Derives a child seed from (seed, purpose tag, indices). Every random
/// stream in the library is rooted this way, so results are reproducible
/// regardless of execution order or degree of parallelism.
inline uint64_t derive_seed(uint64_t seed, std::string_view tag, uint64_t a = 0, uint64_t b = 0) {
    uint64_t s = splitmix64(seed ^ hash_tag(tag));
    s = splitmix64(s ^ a);
    s = splitmix64(s ^ b);
    return s;
}

/// A self-contained random stream. Consumers draw sequentially; parallel
/// callers must use disjoint streams derived with derive_seed.
class RngStream {
public:
    explicit RngStream(uint64_t seed) : gen_(seed) {}

    double normal() { return normal_(gen_); }
    double uniform() { return uniform_(gen_); }  // [0, 1)
    uint64_t integer(uint64_t bound) { return gen_() % bound; }

    std::mt19937_64& engine() { return gen_; }

private:
    std::mt19937_64 gen_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace mffm

#pragma once

#include <cstdint>
#include <string_view>

namespace petprompt {

// splitmix64 finalizer over (seed, salt): decorrelates child seeds derived
// from one user seed.
constexpr uint64_t mix_seed(uint64_t seed, uint64_t salt) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

} // namespace petprompt

namespace petprompt {

// FNV-1a; stable across platforms, unlike std::hash.
constexpr uint64_t hash_name(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace petprompt

#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "petprompt/volume.hpp"

namespace testing {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = fs::temp_directory_path() / ("petprompt-" + tag + "-" + std::to_string(rd()));
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& p) const { return path_ / p; }

private:
    fs::path path_;
};

inline petprompt::Grid3<uint8_t> ball(const petprompt::Shape3& s, const petprompt::Coord3& c, double r) {
    petprompt::Grid3<uint8_t> g(s);
    for (int64_t z = 0; z < s.d; ++z)
        for (int64_t y = 0; y < s.h; ++y)
            for (int64_t x = 0; x < s.w; ++x) {
                const double dz = static_cast<double>(z - c.z), dy = static_cast<double>(y - c.y),
                             dx = static_cast<double>(x - c.x);
                g(z, y, x) = dz * dz + dy * dy + dx * dx <= r * r ? 1 : 0;
            }
    return g;
}

inline petprompt::Grid3<uint8_t> random_mask(const petprompt::Shape3& s, double p, std::mt19937_64& rng) {
    std::bernoulli_distribution coin(p);
    petprompt::Grid3<uint8_t> g(s);
    for (auto& v : g.values()) v = coin(rng) ? 1 : 0;
    return g;
}

} // namespace testing

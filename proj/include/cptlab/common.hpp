#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace cptlab {

using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using TokenId = std::int32_t;
using Tokens = std::vector<TokenId>;

/// Raised for invalid configuration or violated preconditions.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised when a numerical run cannot continue (non-finite loss and similar).
class RunError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ULL);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);
std::string hex64(std::uint64_t v);

/// Seeded generator whose draws are identical on every platform: only the raw
/// mt19937_64 stream is used, never the implementation-defined distributions.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double normal();
    std::size_t below(std::size_t n);

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

    template <class T>
    const T& pick(const std::vector<T>& v) {
        if (v.empty()) {
            throw ConfigError("pick from empty pool");
        }
        return v[below(v.size())];
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace cptlab

#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace unforge {

// Counter-based generator: draw i of a stream is a pure function of
// (seed, site, index, i). Every stochastic call site owns a named stream,
// so resuming a run at step k replays exactly the draws of a run that
// never stopped.
namespace detail {

constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;

constexpr std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

}  // namespace detail

// FNV-1a over the site name, usable at compile time.
constexpr std::uint64_t site_id(std::string_view name) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ull;
    }
    return h;
}

class StreamRng {
public:
    StreamRng(std::uint64_t seed, std::uint64_t site, std::uint64_t index = 0) {
        std::uint64_t h = detail::mix64(seed + detail::kGamma);
        h = detail::mix64(h ^ detail::mix64(site + detail::kGamma));
        base_ = detail::mix64(h ^ detail::mix64(index + detail::kGamma));
    }

    std::uint64_t next_u64() { return detail::mix64(base_ + (++ctr_) * detail::kGamma); }

    // uniform in [0,1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n), n >= 1
    std::uint64_t uniform_int(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // standard normal via Box-Muller; second value of each pair is cached
    float normal() {
        if (has_cached_) {
            has_cached_ = false;
            return static_cast<float>(cached_);
        }
        double u1 = 1.0 - uniform();  // (0,1] so log is finite
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return static_cast<float>(r * std::cos(a));
    }

private:
    std::uint64_t base_ = 0;
    std::uint64_t ctr_ = 0;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

}  // namespace unforge

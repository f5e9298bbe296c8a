#include "iot/rng.hpp"

#include <cmath>

namespace iot {

namespace {

// splitmix64 finalizer; full-period bijective mixer.
uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

uint64_t fold(uint64_t key, uint64_t v) {
    return mix64(key ^ mix64(v));
}

}  // namespace

RngStream::RngStream(uint64_t seed) : key_(fold(0x1075bada55ULL, seed)) {}

RngStream RngStream::derive(std::string_view label) const {
    uint64_t h = key_;
    for (unsigned char c : label) {
        h = fold(h, c + 0x100ULL);
    }
    return RngStream(h, 0);
}

RngStream RngStream::derive(uint64_t salt) const {
    return RngStream(fold(key_, salt + 0x9e37ULL), 0);
}

uint64_t RngStream::next_u64() {
    return fold(key_, counter_++);
}

double RngStream::next_unit_open() {
    // 53 random bits shifted into (0, 1): lowest value 2^-54, highest 1 - 2^-54.
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double RngStream::next_gaussian() {
    if (have_spare_gaussian_) {
        have_spare_gaussian_ = false;
        return spare_gaussian_;
    }
    const double u1 = next_unit_open();
    const double u2 = next_unit_open();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_gaussian_ = r * std::sin(theta);
    have_spare_gaussian_ = true;
    return r * std::cos(theta);
}

uint64_t RngStream::next_below(uint64_t n) {
    // Modulo bias is ~n/2^64; irrelevant for the tiny ranges used here.
    return next_u64() % n;
}

}  // namespace iot

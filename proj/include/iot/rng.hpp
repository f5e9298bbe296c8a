#pragma once

#include <cstdint>
#include <string_view>

namespace iot {

// Counter-based deterministic generator. Every draw is a pure function of
// (key, counter), so streams derived with distinct labels or salts never
// overlap and evaluation order cannot change the values a stream produces.
class RngStream {
public:
    explicit RngStream(uint64_t seed);

    // Child stream keyed by a textual label (split identity, op site, ...).
    RngStream derive(std::string_view label) const;
    // Child stream keyed by an integer salt (step, instance index, ...).
    RngStream derive(uint64_t salt) const;

    uint64_t next_u64();
    // Uniform on the open interval (0, 1); both endpoints excluded.
    double next_unit_open();
    // Standard normal via Box-Muller.
    double next_gaussian();
    // Uniform integer in [0, n).
    uint64_t next_below(uint64_t n);

private:
    RngStream(uint64_t key, uint64_t counter) : key_(key), counter_(counter) {}

    uint64_t key_ = 0;
    uint64_t counter_ = 0;
    bool have_spare_gaussian_ = false;
    double spare_gaussian_ = 0.0;
};

}  // namespace iot

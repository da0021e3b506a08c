// SPDX-License-Identifier: Apache-2.0
#include "gdl/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace gdl {

namespace {

constexpr std::uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr std::uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr std::uint32_t kPhiloxW0 = 0x9E3779B9u;
constexpr std::uint32_t kPhiloxW1 = 0xBB67AE85u;

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

}  // namespace

std::array<std::uint32_t, 4> Rng::philox_block(
    const std::array<std::uint32_t, 4>& counter,
    const std::array<std::uint32_t, 2>& key) {
    std::array<std::uint32_t, 4> ctr = counter;
    std::array<std::uint32_t, 2> k = key;
    for (int round = 0; round < 10; ++round) {
        const std::uint64_t p0 = std::uint64_t(kPhiloxM0) * ctr[0];
        const std::uint64_t p1 = std::uint64_t(kPhiloxM1) * ctr[2];
        const std::uint32_t hi0 = std::uint32_t(p0 >> 32);
        const std::uint32_t lo0 = std::uint32_t(p0);
        const std::uint32_t hi1 = std::uint32_t(p1 >> 32);
        const std::uint32_t lo1 = std::uint32_t(p1);
        ctr = {hi1 ^ ctr[1] ^ k[0], lo1, hi0 ^ ctr[3] ^ k[1], lo0};
        k[0] += kPhiloxW0;
        k[1] += kPhiloxW1;
    }
    return ctr;
}

Rng::Rng(std::uint64_t seed, std::string_view purpose) {
    key_ = {std::uint32_t(seed), std::uint32_t(seed >> 32)};
    stream_ = splitmix64(seed ^ fnv1a(purpose));
}

Rng Rng::split(std::string_view purpose) const {
    Rng child = *this;
    child.stream_ = splitmix64(stream_ ^ fnv1a(purpose));
    child.draw_counter_ = 0;
    child.block_pos_ = 4;
    child.has_pending_normal_ = false;
    return child;
}

void Rng::refill() {
    const std::array<std::uint32_t, 4> counter = {
        std::uint32_t(draw_counter_), std::uint32_t(draw_counter_ >> 32),
        std::uint32_t(stream_), std::uint32_t(stream_ >> 32)};
    block_ = philox_block(counter, key_);
    ++draw_counter_;
    block_pos_ = 0;
}

std::uint64_t Rng::next_u64() {
    if (block_pos_ > 2) refill();
    const std::uint64_t lo = block_[std::size_t(block_pos_)];
    const std::uint64_t hi = block_[std::size_t(block_pos_) + 1];
    block_pos_ += 2;
    return lo | (hi << 32);
}

double Rng::uniform() {
    // 53 mantissa bits -> [0, 1)
    return double(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
    if (has_pending_normal_) {
        has_pending_normal_ = false;
        return pending_normal_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    pending_normal_ = r * std::sin(a);
    has_pending_normal_ = true;
    return r * std::cos(a);
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
        const std::uint64_t r = next_u64();
        if (r >= threshold) return r % n;
    }
}

int Rng::range_int(int lo, int hi) {
    if (lo > hi) throw std::invalid_argument("Rng::range_int: empty range");
    return lo + int(below(std::uint64_t(hi) - std::uint64_t(lo) + 1));
}

}  // namespace gdl
